// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcolab/error.hpp"
#include "pcolab/optim.hpp"

// Checkpoint layout:
//   8 bytes   magic "PCOLABCK"
//   8 bytes   little-endian u64 header length H
//   H bytes   UTF-8 JSON header {format, version, dtype, params:[{name, shape}], seed, rng_state, meta}
//   ...       raw little-endian scalars for each param, in header order

namespace pcolab {

inline constexpr char kCheckpointMagic[8] = {'P', 'C', 'O', 'L', 'A', 'B', 'C', 'K'};

template <typename T>
constexpr const char* dtype_name() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? "f32" : "f64";
}

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct Checkpoint {
    std::string dtype;
    std::vector<CheckpointEntry> entries;
    std::uint64_t seed = 0;
    std::string rng_state;
    nlohmann::json meta;

    const CheckpointEntry& at(const std::string& name) const {
        for (const auto& e : entries) {
            if (e.name == name) return e;
        }
        throw Error(ErrorKind::data, "checkpoint has no parameter '" + name + "'");
    }
};

namespace detail {

template <typename U>
U to_little(U v) {
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(U)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<U>(bytes);
    }
    return v;
}

template <typename U>
void write_le(std::ostream& os, U v) {
    v = to_little(v);
    os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
    U v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(U));
    return to_little(v);
}

}  // namespace detail

/// Serialized bytes of a checkpoint; identical inputs give identical bytes.
template <typename T>
std::string checkpoint_bytes(const ParamList<T>& params, std::uint64_t seed, const std::string& rng_state,
                             const nlohmann::json& meta) {
    nlohmann::json header;
    header["format"] = "pcolab-checkpoint";
    header["version"] = 1;
    header["dtype"] = dtype_name<T>();
    header["seed"] = seed;
    header["rng_state"] = rng_state;
    header["meta"] = meta;
    header["params"] = nlohmann::json::array();
    for (const auto& p : params) {
        header["params"].push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
    }
    std::string text = header.dump();
    std::ostringstream os(std::ios::binary);
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::write_le<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : params) {
        for (T v : p.tensor.data()) {
            detail::write_le<T>(os, v);
        }
    }
    return os.str();
}

template <typename T>
void save_checkpoint(const std::string& path, const ParamList<T>& params, std::uint64_t seed,
                     const std::string& rng_state, const nlohmann::json& meta) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw Error(ErrorKind::io, "cannot open checkpoint for writing: " + path);
    }
    auto bytes = checkpoint_bytes(params, seed, rng_state, meta);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) {
        throw Error(ErrorKind::io, "failed writing checkpoint: " + path);
    }
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw Error(ErrorKind::missing_artifact, "checkpoint not found: " + path);
    }
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
        throw Error(ErrorKind::data, "not a pcolab checkpoint: " + path);
    }
    auto len = detail::read_le<std::uint64_t>(f);
    std::string text(len, '\0');
    f.read(text.data(), static_cast<std::streamsize>(len));
    if (!f) {
        throw Error(ErrorKind::data, "truncated checkpoint header: " + path);
    }
    auto header = nlohmann::json::parse(text);
    Checkpoint ck;
    ck.dtype = header.at("dtype").get<std::string>();
    ck.seed = header.value("seed", std::uint64_t{0});
    ck.rng_state = header.value("rng_state", std::string{});
    ck.meta = header.value("meta", nlohmann::json::object());
    const bool f64 = ck.dtype == "f64";
    if (!f64 && ck.dtype != "f32") {
        throw Error(ErrorKind::data, "unsupported checkpoint dtype '" + ck.dtype + "'");
    }
    for (const auto& p : header.at("params")) {
        CheckpointEntry e;
        e.name = p.at("name").get<std::string>();
        e.shape = p.at("shape").get<Shape>();
        e.values.resize(shape_numel(e.shape));
        for (auto& v : e.values) {
            v = f64 ? detail::read_le<double>(f) : static_cast<double>(detail::read_le<float>(f));
        }
        if (!f) {
            throw Error(ErrorKind::data, "truncated checkpoint data at '" + e.name + "': " + path);
        }
        ck.entries.push_back(std::move(e));
    }
    return ck;
}

}  // namespace pcolab
