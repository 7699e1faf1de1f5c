// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "pcolab/error.hpp"
#include "pcolab/rng.hpp"
#include "pcolab/vocab.hpp"

namespace pcolab {

/// Anything that maps a token prefix to next-token logits.
template <typename M>
concept NextTokenModel = requires(const M& m, std::span<const TokenId> prefix) {
    { m.next_token_logits(prefix) } -> std::convertible_to<std::vector<double>>;
    { m.max_context() } -> std::convertible_to<std::size_t>;
};

struct DecodeStrategy {
    enum class Kind { greedy, temperature, ngram_block };
    Kind kind = Kind::greedy;
    double temperature = 1.0;
    int ngram = 3;

    static DecodeStrategy greedy() { return {}; }
    static DecodeStrategy sample(double t) { return {Kind::temperature, t, 0}; }
    static DecodeStrategy block(int n) { return {Kind::ngram_block, 1.0, n}; }

    std::string name() const {
        switch (kind) {
            case Kind::greedy: return "greedy";
            case Kind::temperature: return "temperature(" + std::to_string(temperature) + ")";
            case Kind::ngram_block: return "greedy_ngram_block(" + std::to_string(ngram) + ")";
        }
        return "unknown";
    }

    void validate() const {
        if (kind == Kind::temperature) {
            require(temperature > 0.0, ErrorKind::invalid_argument, "decode: temperature must be > 0");
        }
        if (kind == Kind::ngram_block) {
            require(ngram >= 1, ErrorKind::invalid_argument, "decode: n-gram block size must be >= 1");
        }
    }
};

struct DecodeOptions {
    std::size_t max_new_tokens = 300;
    TokenId eos = -1;               // stop token, excluded from the output
    std::vector<TokenId> banned;    // never generated (pad, bos)
};

struct DecodeResult {
    Tokens tokens;
    bool hit_eos = false;
    int fallback_count = 0;  // steps where every token was blocked
};

namespace detail {

inline std::size_t argmax_lowest(std::span<const double> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

// Tokens that would complete an n-gram already present in `seq`.
inline std::set<TokenId> blocked_tokens(std::span<const TokenId> seq, int n) {
    std::set<TokenId> out;
    const auto un = static_cast<std::size_t>(n);
    if (seq.size() + 1 < un) return out;
    if (un == 1) {
        out.insert(seq.begin(), seq.end());
        return out;
    }
    auto tail = seq.subspan(seq.size() - (un - 1));
    for (std::size_t s = 0; s + un <= seq.size(); ++s) {
        if (std::equal(tail.begin(), tail.end(), seq.begin() + static_cast<std::ptrdiff_t>(s))) {
            out.insert(seq[s + un - 1]);
        }
    }
    return out;
}

}  // namespace detail

/// Autoregressive generation after `prompt`. Stops at eos, at max_new_tokens,
/// or when the model's context is full.
template <NextTokenModel M>
DecodeResult decode(const M& model, std::span<const TokenId> prompt, const DecodeStrategy& strategy,
                    const DecodeOptions& opts, Rng* rng = nullptr) {
    strategy.validate();
    require(opts.max_new_tokens >= 1, ErrorKind::invalid_argument, "decode: max_new_tokens must be >= 1");
    require(!prompt.empty(), ErrorKind::invalid_argument, "decode: empty prompt");
    if (strategy.kind == DecodeStrategy::Kind::temperature) {
        require(rng != nullptr, ErrorKind::invalid_argument, "decode: temperature sampling needs an rng");
    }
    const double neg_inf = -std::numeric_limits<double>::infinity();
    DecodeResult res;
    Tokens seq(prompt.begin(), prompt.end());
    while (res.tokens.size() < opts.max_new_tokens && seq.size() < model.max_context()) {
        std::vector<double> logits = model.next_token_logits(seq);
        for (TokenId b : opts.banned) {
            if (b >= 0 && static_cast<std::size_t>(b) < logits.size()) logits[b] = neg_inf;
        }
        std::size_t next = 0;
        switch (strategy.kind) {
            case DecodeStrategy::Kind::greedy:
                next = detail::argmax_lowest(logits);
                break;
            case DecodeStrategy::Kind::ngram_block: {
                auto blocked = detail::blocked_tokens(seq, strategy.ngram);
                std::vector<double> masked(logits);
                bool any = false;
                for (std::size_t i = 0; i < masked.size(); ++i) {
                    if (blocked.count(static_cast<TokenId>(i)) && static_cast<TokenId>(i) != opts.eos) {
                        masked[i] = neg_inf;
                    }
                    any = any || masked[i] > neg_inf;
                }
                if (any) {
                    next = detail::argmax_lowest(masked);
                } else {
                    ++res.fallback_count;
                    next = detail::argmax_lowest(logits);
                }
                break;
            }
            case DecodeStrategy::Kind::temperature: {
                const double mx = *std::max_element(logits.begin(), logits.end());
                std::vector<double> w(logits.size());
                for (std::size_t i = 0; i < w.size(); ++i) {
                    w[i] = std::exp((logits[i] - mx) / strategy.temperature);
                }
                next = rng->categorical(w);
                break;
            }
        }
        const auto tok = static_cast<TokenId>(next);
        if (tok == opts.eos) {
            res.hit_eos = true;
            break;
        }
        res.tokens.push_back(tok);
        seq.push_back(tok);
    }
    return res;
}

/// Logits depend only on the last token: row `last` of a [V x V] table.
/// Useful as an exactly specified stand-in model.
class BigramTableModel {
public:
    BigramTableModel(std::size_t vocab, std::size_t context) : vocab_(vocab), context_(context), table_(vocab * vocab, 0.0) {}

    void set(TokenId prev, TokenId next, double logit) { table_.at(prev * vocab_ + next) = logit; }

    std::vector<double> next_token_logits(std::span<const TokenId> prefix) const {
        auto row = table_.begin() + static_cast<std::ptrdiff_t>(prefix.back() * vocab_);
        return {row, row + static_cast<std::ptrdiff_t>(vocab_)};
    }

    std::size_t max_context() const { return context_; }

private:
    std::size_t vocab_;
    std::size_t context_;
    std::vector<double> table_;
};

}  // namespace pcolab
