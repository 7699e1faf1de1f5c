// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcolab/checkpoint.hpp"
#include "pcolab/ops.hpp"
#include "pcolab/optim.hpp"
#include "pcolab/rng.hpp"
#include "pcolab/vocab.hpp"

namespace pcolab {

struct LmConfig {
    int vocab_size = 0;
    int n_layers = 2;
    int n_heads = 4;
    int d_model = 64;
    int d_ff = 128;
    int max_seq_len = 64;
    double dropout = 0.0;

    void validate() const {
        require(vocab_size >= 2, ErrorKind::config, "lm.vocab_size must be >= 2");
        require(n_layers >= 1, ErrorKind::config, "lm.n_layers must be >= 1");
        require(n_heads >= 1, ErrorKind::config, "lm.n_heads must be >= 1");
        require(d_model >= 1 && d_model % n_heads == 0, ErrorKind::config,
                "lm.d_model (" + std::to_string(d_model) + ") must be divisible by lm.n_heads (" +
                    std::to_string(n_heads) + ")");
        require(d_ff >= 1, ErrorKind::config, "lm.d_ff must be >= 1");
        require(max_seq_len >= 2, ErrorKind::config, "lm.max_seq_len must be >= 2");
        require(dropout >= 0.0 && dropout < 1.0, ErrorKind::config, "lm.dropout must lie in [0,1)");
    }

    friend bool operator==(const LmConfig&, const LmConfig&) = default;
};

inline void to_json(nlohmann::json& j, const LmConfig& c) {
    j = {{"vocab_size", c.vocab_size}, {"n_layers", c.n_layers}, {"n_heads", c.n_heads}, {"d_model", c.d_model},
         {"d_ff", c.d_ff},           {"max_seq_len", c.max_seq_len}, {"dropout", c.dropout}};
}

inline void from_json(const nlohmann::json& j, LmConfig& c) {
    c.vocab_size = j.at("vocab_size").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.dropout = j.value("dropout", 0.0);
}

/// Prompt x and response y. Masked-out response positions hold the pad id.
struct PromptResponse {
    Tokens prompt_tokens;
    Tokens response_tokens;
    std::vector<std::uint8_t> response_mask;

    static PromptResponse make(Tokens prompt, Tokens response) {
        PromptResponse pr{std::move(prompt), std::move(response), {}};
        pr.response_mask.assign(pr.response_tokens.size(), 1);
        return pr;
    }

    std::size_t valid_count() const {
        std::size_t n = 0;
        for (auto m : response_mask) n += m ? 1 : 0;
        return n;
    }

    void validate(TokenId pad) const {
        require(!prompt_tokens.empty(), ErrorKind::data, "prompt must hold at least one token");
        require(response_mask.size() == response_tokens.size(), ErrorKind::data,
                "response mask length " + std::to_string(response_mask.size()) + " != response length " +
                    std::to_string(response_tokens.size()));
        for (std::size_t i = 0; i < response_mask.size(); ++i) {
            require(response_mask[i] || response_tokens[i] == pad, ErrorKind::data,
                    "masked-out response position " + std::to_string(i) + " must carry the pad token");
        }
    }

    friend bool operator==(const PromptResponse&, const PromptResponse&) = default;
};

struct InitOptions {
    double std = 0.02;
    bool zero_head = false;
};

/// Pre-LayerNorm decoder-only transformer with learned positions and an
/// untied output head.
template <typename T>
class TransformerLM {
public:
    explicit TransformerLM(LmConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        const auto v = static_cast<std::size_t>(cfg_.vocab_size);
        const auto d = static_cast<std::size_t>(cfg_.d_model);
        const auto f = static_cast<std::size_t>(cfg_.d_ff);
        const auto l = static_cast<std::size_t>(cfg_.max_seq_len);
        add("wte", {v, d});
        add("wpe", {l, d});
        for (int i = 0; i < cfg_.n_layers; ++i) {
            const std::string p = "h." + std::to_string(i) + ".";
            add(p + "ln1.g", {d}, T{1});
            add(p + "ln1.b", {d});
            add(p + "attn.w_qkv", {d, 3 * d});
            add(p + "attn.b_qkv", {3 * d});
            add(p + "attn.w_o", {d, d});
            add(p + "attn.b_o", {d});
            add(p + "ln2.g", {d}, T{1});
            add(p + "ln2.b", {d});
            add(p + "mlp.w_fc", {d, f});
            add(p + "mlp.b_fc", {f});
            add(p + "mlp.w_proj", {f, d});
            add(p + "mlp.b_proj", {d});
        }
        add("ln_f.g", {d}, T{1});
        add("ln_f.b", {d});
        add("head.w", {d, v});
        add("head.b", {v});
    }

    static TransformerLM init(const LmConfig& cfg, Rng& rng, InitOptions opts = {}) {
        TransformerLM m(cfg);
        const double resid_std = opts.std / std::sqrt(2.0 * cfg.n_layers);
        for (auto& p : m.params_) {
            const bool matrix = p.tensor.ndim() == 2;
            if (!matrix) continue;
            if (opts.zero_head && p.name == "head.w") continue;
            const bool resid = p.name.ends_with("attn.w_o") || p.name.ends_with("mlp.w_proj");
            const double s = resid ? resid_std : opts.std;
            for (auto& w : p.tensor.mutable_data()) w = static_cast<T>(rng.normal() * s);
        }
        return m;
    }

    static TransformerLM from_checkpoint(const Checkpoint& ck) {
        TransformerLM m(ck.meta.at("lm").get<LmConfig>());
        for (auto& p : m.params_) {
            const auto& e = ck.at(p.name);
            require(e.shape == p.tensor.shape(), ErrorKind::data,
                    "checkpoint shape " + shape_str(e.shape) + " for '" + p.name + "' vs model " +
                        shape_str(p.tensor.shape()));
            auto dst = p.tensor.mutable_data();
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(e.values[i]);
        }
        return m;
    }

    static TransformerLM load(const std::string& path) { return from_checkpoint(load_checkpoint(path)); }

    void save(const std::string& path, std::uint64_t seed, const std::string& rng_state = {},
              nlohmann::json meta = nlohmann::json::object()) const {
        meta["lm"] = cfg_;
        save_checkpoint(path, params_, seed, rng_state, meta);
    }

    std::string bytes(std::uint64_t seed = 0) const {
        nlohmann::json meta;
        meta["lm"] = cfg_;
        return checkpoint_bytes(params_, seed, {}, meta);
    }

    const LmConfig& config() const { return cfg_; }
    ParamList<T>& parameters() { return params_; }
    const ParamList<T>& parameters() const { return params_; }
    std::size_t max_context() const { return static_cast<std::size_t>(cfg_.max_seq_len); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.tensor.numel();
        return n;
    }

    TransformerLM clone() const {
        TransformerLM m(cfg_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto src = params_[i].tensor.data();
            std::copy(src.begin(), src.end(), m.params_[i].tensor.mutable_data().begin());
        }
        return m;
    }

    template <typename U>
    TransformerLM<U> cast() const {
        TransformerLM<U> m(cfg_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto src = params_[i].tensor.data();
            auto dst = m.parameters()[i].tensor.mutable_data();
            for (std::size_t j = 0; j < src.size(); ++j) dst[j] = static_cast<U>(src[j]);
        }
        return m;
    }

    bool same_parameters(const TransformerLM& other) const {
        if (!(cfg_ == other.cfg_)) return false;
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto a = params_[i].tensor.data();
            auto b = other.params_[i].tensor.data();
            if (!std::equal(a.begin(), a.end(), b.begin(), b.end())) return false;
        }
        return true;
    }

    /// Logits [(len - first_row) x vocab]; row r predicts token first_row + r + 1.
    /// Causal: a row never sees later positions.
    Tensor<T> logits(std::span<const TokenId> tokens, std::size_t first_row = 0, Rng* dropout_rng = nullptr) const {
        const std::size_t len = tokens.size();
        if (len == 0 || len > max_context()) {
            throw Error(ErrorKind::shape, "sequence length " + std::to_string(len) + " outside [1, max_seq_len=" +
                                              std::to_string(max_context()) + "]");
        }
        require(first_row < len, ErrorKind::shape, "first_row beyond sequence");
        const double p = dropout_rng ? cfg_.dropout : 0.0;
        std::vector<TokenId> positions(len);
        for (std::size_t i = 0; i < len; ++i) positions[i] = static_cast<TokenId>(i);
        std::size_t k = 0;
        const auto& w = params_;
        auto x = ops::add(ops::embedding(w[k].tensor, tokens), ops::embedding(w[k + 1].tensor, positions));
        k += 2;
        if (p > 0.0) x = ops::dropout(x, p, *dropout_rng);
        const auto heads = static_cast<std::size_t>(cfg_.n_heads);
        for (int layer = 0; layer < cfg_.n_layers; ++layer, k += 12) {
            auto h = ops::layer_norm(x, w[k].tensor, w[k + 1].tensor);
            auto qkv = ops::linear(h, w[k + 2].tensor, w[k + 3].tensor);
            auto a = ops::linear(ops::causal_self_attention(qkv, heads), w[k + 4].tensor, w[k + 5].tensor);
            if (p > 0.0) a = ops::dropout(a, p, *dropout_rng);
            x = ops::add(x, a);
            auto h2 = ops::layer_norm(x, w[k + 6].tensor, w[k + 7].tensor);
            auto m = ops::linear(ops::gelu(ops::linear(h2, w[k + 8].tensor, w[k + 9].tensor)), w[k + 10].tensor,
                                 w[k + 11].tensor);
            if (p > 0.0) m = ops::dropout(m, p, *dropout_rng);
            x = ops::add(x, m);
        }
        x = ops::layer_norm(x, w[k].tensor, w[k + 1].tensor);
        if (first_row > 0) x = ops::slice_rows(x, first_row, len);
        return ops::linear(x, w[k + 2].tensor, w[k + 3].tensor);
    }

    /// Logits predicting the token after `tokens`, without recording a tape.
    std::vector<double> next_token_logits(std::span<const TokenId> tokens) const {
        NoGradGuard no_grad;
        auto out = logits(tokens, tokens.size() - 1);
        return {out.data().begin(), out.data().end()};
    }

private:
    void add(std::string name, Shape shape, T fill = T{0}) {
        params_.push_back({std::move(name), Tensor<T>::full(std::move(shape), fill, true)});
    }

    LmConfig cfg_;
    ParamList<T> params_;
};

/// Response-aligned logits: row j scores response token j.
template <typename T>
struct ScoredResponse {
    Tensor<T> logits;  // [R x V]
    Tokens targets;
    std::vector<std::uint8_t> mask;
};

template <typename T>
ScoredResponse<T> score_response(const TransformerLM<T>& model, const PromptResponse& pr, Rng* dropout_rng = nullptr) {
    require(!pr.prompt_tokens.empty(), ErrorKind::data, "score_response: empty prompt");
    require(!pr.response_tokens.empty(), ErrorKind::data, "score_response: empty response");
    require(pr.response_mask.size() == pr.response_tokens.size(), ErrorKind::data,
            "score_response: mask length differs from response length");
    Tokens input(pr.prompt_tokens);
    input.insert(input.end(), pr.response_tokens.begin(), pr.response_tokens.end() - 1);
    if (input.size() > model.max_context()) {
        throw Error(ErrorKind::shape, "prompt+response length " + std::to_string(input.size() + 1) +
                                          " exceeds max_seq_len " + std::to_string(model.max_context()) + " + 1");
    }
    return {model.logits(input, pr.prompt_tokens.size() - 1, dropout_rng), pr.response_tokens, pr.response_mask};
}

/// Log-probability of the realized response tokens; the normalized form
/// divides by the number of valid tokens.
template <typename T>
Tensor<T> response_logprob(const ScoredResponse<T>& s, bool normalize) {
    const auto count = std::count_if(s.mask.begin(), s.mask.end(), [](auto m) { return m != 0; });
    require(count > 0, ErrorKind::data, "sequence log-probability of an empty response");
    std::vector<TokenId> safe(s.targets);
    for (auto& t : safe) t = std::max<TokenId>(t, 0);
    auto token_lp = ops::gather_last(ops::log_softmax(s.logits), safe);
    auto total = ops::masked_sum(token_lp, s.mask);
    return normalize ? ops::scale(total, T{1} / static_cast<T>(count)) : total;
}

template <typename T>
Tensor<T> sequence_logprob(const TransformerLM<T>& model, const PromptResponse& pr, bool normalize) {
    return response_logprob(score_response(model, pr), normalize);
}

}  // namespace pcolab
