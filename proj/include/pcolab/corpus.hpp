// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcolab/decode.hpp"
#include "pcolab/model.hpp"
#include "pcolab/vocab.hpp"

namespace pcolab {

/// Topic-conditioned Markov grammar. Each topic owns a block of words and
/// shares a few more with the others; every (topic, word) state has its own
/// successor distribution with weights exp(sharpness * N(0,1)).
struct CorpusConfig {
    int vocab_size = 50;
    int n_topics = 4;
    int min_shared = 3;
    int prompt_words = 3;
    int min_response = 10;
    int max_response = 16;
    double sharpness = 1.5;
    double repetition_bias = 0.0;  // chance a 3-gram repeat proposed by the chain is kept
    std::size_t n_sentences = 2000;

    void validate() const {
        require(n_topics >= 1, ErrorKind::config, "corpus.n_topics must be >= 1");
        require(min_shared >= 0, ErrorKind::config, "corpus.min_shared must be >= 0");
        require(vocab_size >= 3 + n_topics + n_topics * 3 + min_shared, ErrorKind::config,
                "corpus.vocab_size " + std::to_string(vocab_size) + " too small for " + std::to_string(n_topics) +
                    " topics");
        require(prompt_words >= 1, ErrorKind::config, "corpus.prompt_words must be >= 1");
        require(min_response >= 1 && max_response >= min_response, ErrorKind::config,
                "corpus response lengths must satisfy 1 <= min_response <= max_response");
        require(repetition_bias >= 0.0 && repetition_bias <= 1.0, ErrorKind::config,
                "corpus.repetition_bias must lie in [0,1]");
        require(sharpness >= 0.0, ErrorKind::config, "corpus.sharpness must be >= 0");
        require(n_sentences >= 1, ErrorKind::config, "corpus.n_sentences must be >= 1");
    }

    int words_per_topic() const { return (vocab_size - 3 - n_topics - min_shared) / n_topics; }
    int shared_words() const { return vocab_size - 3 - n_topics - n_topics * words_per_topic(); }
    /// prompt (bos + topic + words) plus response plus eos
    int max_sequence() const { return 2 + prompt_words + max_response + 1; }
};

inline void to_json(nlohmann::json& j, const CorpusConfig& c) {
    j = {{"vocab_size", c.vocab_size},         {"n_topics", c.n_topics},         {"min_shared", c.min_shared},
         {"prompt_words", c.prompt_words},     {"min_response", c.min_response}, {"max_response", c.max_response},
         {"sharpness", c.sharpness},           {"repetition_bias", c.repetition_bias},
         {"n_sentences", c.n_sentences}};
}

inline void from_json(const nlohmann::json& j, CorpusConfig& c) {
    CorpusConfig d;
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.n_topics = j.value("n_topics", d.n_topics);
    c.min_shared = j.value("min_shared", d.min_shared);
    c.prompt_words = j.value("prompt_words", d.prompt_words);
    c.min_response = j.value("min_response", d.min_response);
    c.max_response = j.value("max_response", d.max_response);
    c.sharpness = j.value("sharpness", d.sharpness);
    c.repetition_bias = j.value("repetition_bias", d.repetition_bias);
    c.n_sentences = j.value("n_sentences", d.n_sentences);
}

/// One corpus line. `prompt` starts with bos; `response` excludes eos.
struct Sentence {
    Tokens prompt;
    Tokens response;

    PromptResponse training_example(TokenId eos) const {
        Tokens r = response;
        r.push_back(eos);
        return PromptResponse::make(prompt, r);
    }
};

class Grammar {
public:
    Grammar(const CorpusConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        std::vector<std::string> words;
        for (int t = 0; t < cfg_.n_topics; ++t) words.push_back("T" + std::to_string(t));
        const std::string letters = "abcdefghijklmnopqrstuvwxyz";
        for (int t = 0; t < cfg_.n_topics; ++t) {
            for (int w = 0; w < cfg_.words_per_topic(); ++w) {
                words.push_back(std::string(1, letters[static_cast<std::size_t>(t) % 26]) + std::to_string(t / 26) +
                                "_" + std::to_string(w));
            }
        }
        for (int s = 0; s < cfg_.shared_words(); ++s) words.push_back("s" + std::to_string(s));
        vocab_ = Vocab::with_words(words);

        Rng rng = Rng(seed).derive("grammar");
        const auto n_states = static_cast<std::size_t>(vocab_.size());
        weights_.assign(static_cast<std::size_t>(cfg_.n_topics), std::vector<std::vector<double>>(n_states));
        start_.resize(static_cast<std::size_t>(cfg_.n_topics));
        for (int t = 0; t < cfg_.n_topics; ++t) {
            const auto allowed = topic_words(t);
            auto draw_row = [&] {
                std::vector<double> row(n_states, 0.0);
                for (TokenId w : allowed) row[static_cast<std::size_t>(w)] = std::exp(cfg_.sharpness * rng.normal());
                return row;
            };
            start_[static_cast<std::size_t>(t)] = draw_row();
            for (TokenId w : allowed) weights_[static_cast<std::size_t>(t)][static_cast<std::size_t>(w)] = draw_row();
        }
    }

    const Vocab& vocab() const { return vocab_; }
    const CorpusConfig& config() const { return cfg_; }
    TokenId topic_token(int t) const { return static_cast<TokenId>(3 + t); }

    std::vector<TokenId> topic_words(int t) const {
        std::vector<TokenId> out;
        const int first = 3 + cfg_.n_topics + t * cfg_.words_per_topic();
        for (int w = 0; w < cfg_.words_per_topic(); ++w) out.push_back(static_cast<TokenId>(first + w));
        const int shared0 = 3 + cfg_.n_topics + cfg_.n_topics * cfg_.words_per_topic();
        for (int s = 0; s < cfg_.shared_words(); ++s) out.push_back(static_cast<TokenId>(shared0 + s));
        return out;
    }

    Sentence sample(Rng& rng) const {
        const int t = static_cast<int>(rng.below(static_cast<std::size_t>(cfg_.n_topics)));
        const auto& rows = weights_[static_cast<std::size_t>(t)];
        Tokens words;
        const int len = cfg_.prompt_words + cfg_.min_response +
                        static_cast<int>(rng.below(static_cast<std::size_t>(cfg_.max_response - cfg_.min_response + 1)));
        for (int i = 0; i < len; ++i) {
            std::vector<double> w = i == 0 ? start_[static_cast<std::size_t>(t)]
                                           : rows[static_cast<std::size_t>(words.back())];
            // Tokens that would repeat an earlier 3-gram are kept with probability repetition_bias.
            auto blocked = detail::blocked_tokens(words, 3);
            std::vector<double> masked = w;
            double total = 0.0;
            for (TokenId b : blocked) masked[static_cast<std::size_t>(b)] = 0.0;
            for (double v : masked) total += v;
            const bool keep_repeats = rng.uniform() < cfg_.repetition_bias;
            words.push_back(static_cast<TokenId>(rng.categorical(keep_repeats || total <= 0.0 ? w : masked)));
        }
        Sentence s;
        s.prompt = {vocab_.bos(), topic_token(t)};
        s.prompt.insert(s.prompt.end(), words.begin(), words.begin() + cfg_.prompt_words);
        s.response.assign(words.begin() + cfg_.prompt_words, words.end());
        return s;
    }

    std::vector<Sentence> sample_corpus(std::size_t n, Rng rng) const {
        std::vector<Sentence> out;
        out.reserve(n);
        for (std::size_t i = 0; i < n; ++i) out.push_back(sample(rng));
        return out;
    }

private:
    CorpusConfig cfg_;
    Vocab vocab_;
    std::vector<std::vector<std::vector<double>>> weights_;  // [topic][state][next]
    std::vector<std::vector<double>> start_;
};

/// Lines "prompt<TAB>response" without bos/eos.
inline void save_corpus(const std::string& path, const std::vector<Sentence>& corpus, const Vocab& vocab) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error(ErrorKind::io, "cannot write corpus: " + path);
    for (const auto& s : corpus) {
        f << vocab.decode(std::span<const TokenId>(s.prompt).subspan(1)) << '\t' << vocab.decode(s.response) << '\n';
    }
}

inline std::vector<Sentence> load_corpus(const std::string& path, const Vocab& vocab) {
    std::ifstream f(path);
    if (!f) throw Error(ErrorKind::missing_artifact, "corpus not found: " + path);
    std::vector<Sentence> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw Error(ErrorKind::data, path + ":" + std::to_string(lineno) + ": expected prompt<TAB>response");
        }
        Sentence s;
        s.prompt = {vocab.bos()};
        auto p = vocab.encode(line.substr(0, tab));
        s.prompt.insert(s.prompt.end(), p.begin(), p.end());
        s.response = vocab.encode(line.substr(tab + 1));
        require(!s.response.empty(), ErrorKind::data, path + ":" + std::to_string(lineno) + ": empty response");
        out.push_back(std::move(s));
    }
    return out;
}

/// One prompt per line, without bos.
inline void save_prompts(const std::string& path, const std::vector<Tokens>& prompts, const Vocab& vocab) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error(ErrorKind::io, "cannot write prompts: " + path);
    for (const auto& p : prompts) {
        std::span<const TokenId> body(p);
        if (!body.empty() && body.front() == vocab.bos()) body = body.subspan(1);
        f << vocab.decode(body) << '\n';
    }
}

inline std::vector<Tokens> load_prompts(const std::string& path, const Vocab& vocab) {
    std::ifstream f(path);
    if (!f) throw Error(ErrorKind::missing_artifact, "prompt file not found: " + path);
    std::vector<Tokens> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        Tokens t{vocab.bos()};
        auto body = vocab.encode(line);
        t.insert(t.end(), body.begin(), body.end());
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace pcolab
