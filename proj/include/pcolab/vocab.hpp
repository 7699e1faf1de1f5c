// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "pcolab/error.hpp"

namespace pcolab {

using TokenId = std::int32_t;
using Tokens = std::vector<TokenId>;

/// Closed word-level vocabulary. Specials are looked up by their reserved
/// strings; the pad token never contributes to any loss.
class Vocab {
public:
    static constexpr const char* kPad = "<pad>";
    static constexpr const char* kBos = "<bos>";
    static constexpr const char* kEos = "<eos>";

    Vocab() = default;

    explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            if (tokens_[i].empty() || tokens_[i].find_first_of(" \t\n\r") != std::string::npos) {
                throw Error(ErrorKind::data, "vocab token " + std::to_string(i) + " is empty or contains whitespace");
            }
            if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
                throw Error(ErrorKind::data, "duplicate vocab token '" + tokens_[i] + "'");
            }
        }
        pad_ = special(kPad);
        bos_ = special(kBos);
        eos_ = special(kEos);
    }

    /// Specials first, then `words`.
    static Vocab with_words(const std::vector<std::string>& words) {
        std::vector<std::string> all{kPad, kBos, kEos};
        all.insert(all.end(), words.begin(), words.end());
        return Vocab(std::move(all));
    }

    static Vocab load(const std::string& path) {
        std::ifstream f(path);
        if (!f) {
            throw Error(ErrorKind::missing_artifact, "vocab file not found: " + path);
        }
        std::vector<std::string> tokens;
        std::string line;
        while (std::getline(f, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (!line.empty()) tokens.push_back(line);
        }
        return Vocab(std::move(tokens));
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::trunc);
        if (!f) {
            throw Error(ErrorKind::io, "cannot write vocab file: " + path);
        }
        for (const auto& t : tokens_) f << t << '\n';
    }

    std::size_t size() const { return tokens_.size(); }
    TokenId pad() const { return pad_; }
    TokenId bos() const { return bos_; }
    TokenId eos() const { return eos_; }
    bool is_special(TokenId t) const { return t == pad_ || t == bos_ || t == eos_; }
    const std::vector<std::string>& tokens() const { return tokens_; }

    TokenId id(const std::string& token) const {
        auto it = index_.find(token);
        if (it == index_.end()) {
            throw Error(ErrorKind::data, "unknown token '" + token + "'");
        }
        return it->second;
    }

    const std::string& token(TokenId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
            throw Error(ErrorKind::data, "token id " + std::to_string(id) + " out of range");
        }
        return tokens_[static_cast<std::size_t>(id)];
    }

    Tokens encode(const std::string& text) const {
        Tokens out;
        std::istringstream is(text);
        std::string w;
        while (is >> w) out.push_back(id(w));
        return out;
    }

    std::string decode(std::span<const TokenId> ids) const {
        std::string out;
        for (TokenId t : ids) {
            if (!out.empty()) out += ' ';
            out += token(t);
        }
        return out;
    }

private:
    TokenId special(const char* name) const {
        auto it = index_.find(name);
        if (it == index_.end()) {
            throw Error(ErrorKind::data, std::string("vocab is missing special token ") + name);
        }
        return it->second;
    }

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
    TokenId pad_ = 0, bos_ = 1, eos_ = 2;
};

}  // namespace pcolab
