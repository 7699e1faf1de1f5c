// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace pcolab {

/// SplitMix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t hash_tag(std::string_view tag) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Seeded generator. Every random decision in the library goes through one of
/// these; sub-streams are derived from (seed, tag, indices) so that results do
/// not depend on evaluation order or thread count.
///
/// Only the raw 64-bit engine output is consumed, so sequences are identical
/// across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }

    /// A child stream keyed by a tag and any number of indices.
    Rng derive(std::string_view tag, std::initializer_list<std::uint64_t> keys = {}) const {
        std::uint64_t s = mix64(seed_ ^ hash_tag(tag));
        for (auto k : keys) {
            s = mix64(s ^ mix64(k + 0x632be59bd9b4e019ULL));
        }
        return Rng(s);
    }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Standard normal via Box-Muller (no cached spare: one call, two uniforms).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) {
            u1 = 1e-300;
        }
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Uniform integer in [0, n).
    std::size_t below(std::size_t n) {
        if (n == 0) {
            throw std::invalid_argument("Rng::below: empty range");
        }
        return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
    }

    /// Index drawn from unnormalized non-negative weights by inverse CDF.
    std::size_t categorical(std::span<const double> weights) {
        double total = 0.0;
        for (double w : weights) {
            total += w;
        }
        if (!(total > 0.0) || !std::isfinite(total)) {
            throw std::invalid_argument("Rng::categorical: weights must have a positive finite sum");
        }
        return pick(weights, uniform() * total);
    }

    /// Inverse-CDF lookup shared by samplers that draw the uniform themselves.
    static std::size_t pick(std::span<const double> weights, double target) {
        double acc = 0.0;
        std::size_t last_positive = 0;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            if (weights[i] > 0.0) {
                last_positive = i;
            }
            acc += weights[i];
            if (target < acc) {
                return i;
            }
        }
        return last_positive;
    }

    template <typename Range>
    void shuffle(Range& r) {
        for (std::size_t i = r.size(); i > 1; --i) {
            std::size_t j = below(i);
            using std::swap;
            swap(r[i - 1], r[j]);
        }
    }

    std::string state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void set_state(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
        if (!is) {
            throw std::invalid_argument("Rng::set_state: malformed engine state");
        }
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

}  // namespace pcolab
