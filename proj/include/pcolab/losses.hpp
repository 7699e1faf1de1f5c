// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcolab/data.hpp"
#include "pcolab/model.hpp"
#include "pcolab/ops.hpp"
#include "pcolab/rng.hpp"

namespace pcolab {

enum class LossVariant { binary_cringe, pairwise_cringe, hard_margin_cringe, dpo, ce, unlikelihood };

inline const char* to_string(LossVariant v) {
    switch (v) {
        case LossVariant::binary_cringe: return "binary_cringe";
        case LossVariant::pairwise_cringe: return "pairwise_cringe";
        case LossVariant::hard_margin_cringe: return "hard_margin_cringe";
        case LossVariant::dpo: return "dpo";
        case LossVariant::ce: return "ce";
        case LossVariant::unlikelihood: return "unlikelihood";
    }
    return "unknown";
}

/// Accepts both snake_case and the CLI's kebab-case spellings.
inline LossVariant parse_loss_variant(std::string s) {
    std::replace(s.begin(), s.end(), '-', '_');
    for (auto v : {LossVariant::binary_cringe, LossVariant::pairwise_cringe, LossVariant::hard_margin_cringe,
                   LossVariant::dpo, LossVariant::ce, LossVariant::unlikelihood}) {
        if (s == to_string(v)) return v;
    }
    throw Error(ErrorKind::config, "unknown loss variant '" + s + "'");
}

struct LossConfig {
    double alpha = 0.01;
    int k = 5;
    double b = -10.0;
    double tau = 10.0;
    LossVariant variant = LossVariant::pairwise_cringe;
    double dpo_beta = 0.1;
    bool normalize_margin = true;
    // Ablation: stop-gradient through the sigmoid gate. Not serialized.
    bool detach_gate = false;

    void validate() const {
        require(alpha >= 0.0, ErrorKind::config, "loss.alpha must be >= 0");
        require(k >= 1, ErrorKind::config, "loss.k must be >= 1");
        require(tau > 0.0, ErrorKind::config, "loss.tau must be > 0");
        require(dpo_beta > 0.0, ErrorKind::config, "loss.dpo_beta must be > 0");
    }
};

inline void to_json(nlohmann::json& j, const LossConfig& c) {
    j = {{"alpha", c.alpha},   {"k", c.k},
         {"b", c.b},           {"tau", c.tau},
         {"variant", to_string(c.variant)}, {"dpo_beta", c.dpo_beta},
         {"normalize_margin", c.normalize_margin}};
}

inline void from_json(const nlohmann::json& j, LossConfig& c) {
    static const std::vector<std::string> known{"alpha", "k", "b", "tau", "variant", "dpo_beta", "normalize_margin"};
    for (const auto& [key, _] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw Error(ErrorKind::config, "loss: unknown key '" + key + "'");
        }
    }
    LossConfig d;
    c.alpha = j.value("alpha", d.alpha);
    c.k = j.value("k", d.k);
    c.b = j.value("b", d.b);
    c.tau = j.value("tau", d.tau);
    c.variant = parse_loss_variant(j.value("variant", std::string(to_string(d.variant))));
    c.dpo_beta = j.value("dpo_beta", d.dpo_beta);
    c.normalize_margin = j.value("normalize_margin", d.normalize_margin);
    c.validate();
}

// ----------------------------- contrast sampling -----------------------------

/// The k candidate tokens a negative token is contrasted against: the top
/// k+1 scores with the negative removed, or with the (k+1)-th dropped when the
/// negative is not among them. Ordered by descending score, ties to lower id.
template <typename T>
std::vector<TokenId> contrast_candidates(std::span<const T> scores, TokenId negative, std::size_t k) {
    if (k + 1 > scores.size()) {
        throw Error(ErrorKind::invalid_argument, "cringe: k+1=" + std::to_string(k + 1) + " exceeds vocab size " +
                                                     std::to_string(scores.size()));
    }
    auto top = ops::topk_indices(scores, k + 1);
    auto it = std::find(top.begin(), top.end(), negative);
    if (it != top.end()) {
        top.erase(it);
    } else {
        top.pop_back();
    }
    return top;
}

/// Categorical choice of the positive token to contrast against. Either draws
/// fresh (one uniform per valid position) or replays recorded choices, which
/// keeps the sample fixed across finite-difference evaluations.
class ContrastSampler {
public:
    explicit ContrastSampler(Rng rng) : rng_(rng) {}

    static ContrastSampler replay(std::vector<TokenId> picks) {
        ContrastSampler s{Rng(0)};
        s.replay_ = true;
        s.picks_ = std::move(picks);
        return s;
    }

    template <typename T>
    TokenId pick(std::span<const TokenId> candidates, std::span<const T> row) {
        if (replay_) {
            require(cursor_ < picks_.size(), ErrorKind::invalid_argument, "contrast sampler: replay exhausted");
            TokenId t = picks_[cursor_++];
            require(std::find(candidates.begin(), candidates.end(), t) != candidates.end(),
                    ErrorKind::invalid_argument, "contrast sampler: replayed token not among candidates");
            return t;
        }
        double mx = -std::numeric_limits<double>::infinity();
        for (TokenId c : candidates) mx = std::max(mx, static_cast<double>(row[c]));
        std::vector<double> w(candidates.size());
        double total = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            w[i] = std::exp(static_cast<double>(row[candidates[i]]) - mx);
            total += w[i];
        }
        const double u = rng_.uniform();
        draws_.push_back(u);
        TokenId t = candidates[Rng::pick(w, u * total)];
        picks_.push_back(t);
        return t;
    }

    const std::vector<TokenId>& picks() const { return picks_; }
    const std::vector<double>& draws() const { return draws_; }
    bool replaying() const { return replay_; }

private:
    Rng rng_;
    bool replay_ = false;
    std::size_t cursor_ = 0;
    std::vector<TokenId> picks_;
    std::vector<double> draws_;
};

// ----------------------------- token-level losses -----------------------------

namespace detail {

template <typename T>
Tensor<T> mask_tensor(std::span<const std::uint8_t> mask) {
    std::vector<T> m(mask.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = mask[i] ? T{1} : T{0};
    const std::size_t n = m.size();
    return Tensor<T>::from_data({n}, std::move(m));
}

template <typename T>
void check_token_args(const char* op, const Tensor<T>& logits, std::span<const TokenId> targets,
                      std::span<const std::uint8_t> mask) {
    if (logits.ndim() != 2 || logits.size(0) != targets.size() || mask.size() != targets.size()) {
        throw Error(ErrorKind::shape, std::string(op) + ": logits " + shape_str(logits.shape()) + ", " +
                                          std::to_string(targets.size()) + " targets, " +
                                          std::to_string(mask.size()) + " mask entries");
    }
}

inline std::vector<TokenId> clamp_ids(std::span<const TokenId> ids) {
    std::vector<TokenId> out(ids.begin(), ids.end());
    for (auto& t : out) t = std::max<TokenId>(t, 0);
    return out;
}

}  // namespace detail

/// -log softmax(logits)[target] per position; 0 where masked.
template <typename T>
Tensor<T> ce_loss(const Tensor<T>& logits, std::span<const TokenId> targets, std::span<const std::uint8_t> mask) {
    detail::check_token_args("ce_loss", logits, targets, mask);
    auto lp = ops::gather_last(ops::log_softmax(logits), detail::clamp_ids(targets));
    return ops::mul(ops::neg(lp), detail::mask_tensor<T>(mask));
}

/// Contrastive loss per position: two-way cross-entropy between a sampled
/// top-k positive s* and the negative token's score, with s* the correct
/// class. Gradient reaches both selected logits; 0 where masked.
template <typename T>
Tensor<T> cringe_token_loss(const Tensor<T>& logits, std::span<const TokenId> negatives,
                            std::span<const std::uint8_t> mask, std::size_t k, ContrastSampler& sampler) {
    detail::check_token_args("cringe_token_loss", logits, negatives, mask);
    require(k >= 1, ErrorKind::invalid_argument, "cringe: k must be >= 1");
    const std::size_t cols = logits.size(1);
    if (k + 1 > cols) {
        throw Error(ErrorKind::invalid_argument,
                    "cringe: k+1=" + std::to_string(k + 1) + " exceeds vocab size " + std::to_string(cols));
    }
    auto neg = detail::clamp_ids(negatives);
    std::vector<TokenId> positive(neg);
    for (std::size_t r = 0; r < neg.size(); ++r) {
        if (!mask[r]) continue;
        auto row = logits.data().subspan(r * cols, cols);
        auto cands = contrast_candidates(row, neg[r], k);
        positive[r] = sampler.pick<T>(cands, row);
    }
    auto s_pos = ops::gather_last(logits, positive);
    auto s_neg = ops::gather_last(logits, neg);
    // -log(e^{s*} / (e^{s*} + e^{s-})) = softplus(s- - s*)
    return ops::mul(ops::softplus(ops::sub(s_neg, s_pos)), detail::mask_tensor<T>(mask));
}

/// -log(1 - p(negative)) per position, with p clamped at 1 - 1e-6; 0 where masked.
template <typename T>
Tensor<T> unlikelihood_loss(const Tensor<T>& logits, std::span<const TokenId> negatives,
                            std::span<const std::uint8_t> mask) {
    detail::check_token_args("unlikelihood_loss", logits, negatives, mask);
    auto p = ops::gather_last(ops::softmax(logits), detail::clamp_ids(negatives));
    auto one_minus = ops::clamp_min(ops::add_scalar(ops::neg(p), T{1}), T(1e-6));
    return ops::mul(ops::neg(ops::log(one_minus)), detail::mask_tensor<T>(mask));
}

// ----------------------------- sequence-level pieces -----------------------------

/// g = sigmoid((b - M) / tau); live gradient with respect to M.
template <typename T>
Tensor<T> gate(const Tensor<T>& margin, double b, double tau) {
    require(tau > 0.0, ErrorKind::invalid_argument, "gate: tau must be > 0");
    return ops::sigmoid(ops::scale(ops::add_scalar(ops::neg(margin), static_cast<T>(b)), static_cast<T>(1.0 / tau)));
}

inline double gate_value(double margin, double b, double tau) {
    return ops::detail::stable_sigmoid((b - margin) / tau);
}

template <typename T>
struct ScoredPair {
    ScoredResponse<T> winner;
    ScoredResponse<T> loser;
};

template <typename T>
struct ScoredItem {
    ScoredResponse<T> response;
    bool positive = true;
};

template <typename T>
ScoredPair<T> score_pair(const TransformerLM<T>& model, const PreferencePair& pair, Rng* dropout_rng = nullptr) {
    return {score_response(model, pair.winner, dropout_rng), score_response(model, pair.loser, dropout_rng)};
}

template <typename T>
Tensor<T> pairwise_margin(const ScoredPair<T>& sp, bool normalize) {
    return ops::sub(response_logprob(sp.winner, normalize), response_logprob(sp.loser, normalize));
}

template <typename T>
Tensor<T> pairwise_margin(const TransformerLM<T>& model, const PreferencePair& pair, bool normalize = true) {
    return pairwise_margin(score_pair(model, pair), normalize);
}

// ----------------------------- batch losses -----------------------------

template <typename T>
struct LossOutput {
    Tensor<T> loss;
    std::vector<double> margins;  // per pair, when the variant has one
    std::vector<double> gates;
    double ce_term = 0.0;         // reduced CE contribution
    double contrast_term = 0.0;   // reduced (alpha-weighted) negative contribution
};

namespace detail {

inline std::size_t count_valid(std::span<const std::uint8_t> mask) {
    return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto m) { return m != 0; }));
}

template <typename T>
Tensor<T> sum_terms(const std::vector<Tensor<T>>& terms) {
    if (terms.empty()) return Tensor<T>::scalar(T{0});
    Tensor<T> acc = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) acc = ops::add(acc, terms[i]);
    return acc;
}

}  // namespace detail

/// Negative-token penalty used by the binary-style bodies.
enum class NegativeTerm { cringe, unlikelihood };

/// CE on positive items plus alpha times the negative-token loss on negative
/// items. Each term is a masked mean over the valid tokens of its own class,
/// so alpha keeps its meaning across batch compositions.
template <typename T>
LossOutput<T> binary_cringe_loss(std::span<const ScoredItem<T>> items, const LossConfig& cfg,
                                 ContrastSampler& sampler, NegativeTerm negative = NegativeTerm::cringe) {
    cfg.validate();
    std::vector<Tensor<T>> pos_terms, neg_terms;
    std::size_t n_pos = 0, n_neg = 0;
    for (const auto& it : items) {
        const auto& s = it.response;
        if (it.positive) {
            pos_terms.push_back(ops::sum(ce_loss(s.logits, s.targets, s.mask)));
            n_pos += detail::count_valid(s.mask);
        } else {
            auto per_token = negative == NegativeTerm::cringe
                                 ? cringe_token_loss(s.logits, s.targets, s.mask, static_cast<std::size_t>(cfg.k), sampler)
                                 : unlikelihood_loss(s.logits, s.targets, s.mask);
            neg_terms.push_back(ops::sum(per_token));
            n_neg += detail::count_valid(s.mask);
        }
    }
    LossOutput<T> out;
    auto ce = n_pos ? ops::scale(detail::sum_terms(pos_terms), T{1} / static_cast<T>(n_pos)) : Tensor<T>::scalar(T{0});
    auto neg = n_neg ? ops::scale(detail::sum_terms(neg_terms), static_cast<T>(cfg.alpha) / static_cast<T>(n_neg))
                     : Tensor<T>::scalar(T{0});
    out.ce_term = ce.item();
    out.contrast_term = neg.item();
    out.loss = ops::add(ce, neg);
    return out;
}

/// Per-pair ingredients of the gated losses. The gate here is always live;
/// callers decide what to detach.
template <typename T>
struct PairTerms {
    std::vector<Tensor<T>> margin;
    std::vector<Tensor<T>> gate;
    std::vector<Tensor<T>> ce_sum;       // summed CE over the winner's valid tokens
    std::vector<Tensor<T>> contrast_sum; // summed cringe over the loser's valid tokens
    std::size_t n_winner = 0;
    std::size_t n_loser = 0;

    /// Body of pair p under the shared reduction: ce/N_w + alpha * cr/N_l.
    Tensor<T> body(std::size_t p, double alpha) const {
        auto ce = ops::scale(ce_sum[p], T{1} / static_cast<T>(n_winner));
        auto cr = ops::scale(contrast_sum[p], static_cast<T>(alpha) / static_cast<T>(n_loser));
        return ops::add(ce, cr);
    }
};

template <typename T>
PairTerms<T> pair_terms(std::span<const ScoredPair<T>> pairs, const LossConfig& cfg, ContrastSampler& sampler) {
    cfg.validate();
    PairTerms<T> t;
    for (const auto& sp : pairs) {
        auto m = pairwise_margin(sp, cfg.normalize_margin);
        t.gate.push_back(gate(m, cfg.b, cfg.tau));
        t.margin.push_back(m);
        t.ce_sum.push_back(ops::sum(ce_loss(sp.winner.logits, sp.winner.targets, sp.winner.mask)));
        t.contrast_sum.push_back(ops::sum(cringe_token_loss(sp.loser.logits, sp.loser.targets, sp.loser.mask,
                                                            static_cast<std::size_t>(cfg.k), sampler)));
        t.n_winner += detail::count_valid(sp.winner.mask);
        t.n_loser += detail::count_valid(sp.loser.mask);
    }
    require(pairs.empty() || (t.n_winner > 0 && t.n_loser > 0), ErrorKind::data,
            "pairwise loss: responses without valid tokens");
    return t;
}

namespace detail {

template <typename T>
LossOutput<T> gated_reduce(const PairTerms<T>& t, const LossConfig& cfg, const std::vector<Tensor<T>>& multipliers) {
    LossOutput<T> out;
    std::vector<Tensor<T>> terms;
    double ce = 0.0, cr = 0.0;
    for (std::size_t p = 0; p < t.margin.size(); ++p) {
        terms.push_back(ops::mul(multipliers[p], t.body(p, cfg.alpha)));
        out.margins.push_back(static_cast<double>(t.margin[p].item()));
        out.gates.push_back(static_cast<double>(multipliers[p].item()));
        ce += static_cast<double>(multipliers[p].item() * t.ce_sum[p].item()) / static_cast<double>(t.n_winner);
        cr += cfg.alpha * static_cast<double>(multipliers[p].item() * t.contrast_sum[p].item()) /
              static_cast<double>(t.n_loser);
    }
    out.loss = sum_terms(terms);
    out.ce_term = ce;
    out.contrast_term = cr;
    return out;
}

}  // namespace detail

/// Sigmoid-gated binary Cringe body: g * [CE(y_w) + alpha * Cringe(y_l)]. The
/// gradient has two pathways: through g (sequence-level, widens the margin)
/// and through the body (token-level).
template <typename T>
LossOutput<T> pairwise_cringe_loss(std::span<const ScoredPair<T>> pairs, const LossConfig& cfg,
                                   ContrastSampler& sampler) {
    auto t = pair_terms(pairs, cfg, sampler);
    std::vector<Tensor<T>> mult;
    for (const auto& g : t.gate) mult.push_back(cfg.detach_gate ? ops::detach(g) : g);
    return detail::gated_reduce(t, cfg, mult);
}

/// Step gate: multiplier 1 when M <= b, else 0, with no gradient through it.
template <typename T>
LossOutput<T> hard_margin_cringe_loss(std::span<const ScoredPair<T>> pairs, const LossConfig& cfg,
                                      ContrastSampler& sampler) {
    auto t = pair_terms(pairs, cfg, sampler);
    std::vector<Tensor<T>> mult;
    for (const auto& m : t.margin) {
        mult.push_back(Tensor<T>::scalar(static_cast<double>(m.item()) <= cfg.b ? T{1} : T{0}));
    }
    return detail::gated_reduce(t, cfg, mult);
}

/// Reference-model log-probabilities of a pair (unnormalized), as constants.
struct ReferenceLogprobs {
    double winner = 0.0;
    double loser = 0.0;
};

template <typename T>
ReferenceLogprobs reference_logprobs(const TransformerLM<T>& reference, const PreferencePair& pair) {
    NoGradGuard no_grad;
    return {static_cast<double>(sequence_logprob(reference, pair.winner, false).item()),
            static_cast<double>(sequence_logprob(reference, pair.loser, false).item())};
}

/// Mean over pairs of -log sigmoid(beta * [(lp_w - ref_w) - (lp_l - ref_l)]).
template <typename T>
LossOutput<T> dpo_loss(std::span<const ScoredPair<T>> pairs, std::span<const ReferenceLogprobs> ref, double beta) {
    require(pairs.size() == ref.size(), ErrorKind::invalid_argument, "dpo: reference log-probs per pair required");
    require(beta > 0.0, ErrorKind::invalid_argument, "dpo: beta must be > 0");
    LossOutput<T> out;
    std::vector<Tensor<T>> terms;
    for (std::size_t p = 0; p < pairs.size(); ++p) {
        auto lw = response_logprob(pairs[p].winner, false);
        auto ll = response_logprob(pairs[p].loser, false);
        auto diff = ops::add_scalar(ops::sub(lw, ll), static_cast<T>(ref[p].loser - ref[p].winner));
        out.margins.push_back(static_cast<double>(diff.item()));
        // -log sigmoid(z) = softplus(-z)
        terms.push_back(ops::softplus(ops::scale(diff, static_cast<T>(-beta))));
    }
    out.loss = pairs.empty() ? Tensor<T>::scalar(T{0})
                             : ops::scale(detail::sum_terms(terms), T{1} / static_cast<T>(pairs.size()));
    out.ce_term = out.loss.item();
    return out;
}

// ----------------------------- model-level entry points -----------------------------

template <typename T>
std::vector<ScoredPair<T>> score_pairs(const TransformerLM<T>& model, std::span<const PreferencePair> pairs,
                                       Rng* dropout_rng = nullptr) {
    std::vector<ScoredPair<T>> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) out.push_back(score_pair(model, p, dropout_rng));
    return out;
}

/// Each pair becomes (y_w, positive), (y_l, negative), in pair order.
inline std::vector<BinaryItem> binarize_pairs(std::span<const PreferencePair> pairs) {
    std::vector<BinaryItem> items;
    items.reserve(2 * pairs.size());
    for (const auto& p : pairs) {
        items.push_back({p.winner, true});
        items.push_back({p.loser, false});
    }
    return items;
}

template <typename T>
LossOutput<T> binary_cringe_loss(const TransformerLM<T>& model, std::span<const BinaryItem> items,
                                 const LossConfig& cfg, ContrastSampler& sampler,
                                 NegativeTerm negative = NegativeTerm::cringe, Rng* dropout_rng = nullptr) {
    std::vector<ScoredItem<T>> scored;
    scored.reserve(items.size());
    for (const auto& it : items) scored.push_back({score_response(model, it.response, dropout_rng), it.positive});
    return binary_cringe_loss<T>(scored, cfg, sampler, negative);
}

template <typename T>
LossOutput<T> pairwise_cringe_loss(const TransformerLM<T>& model, std::span<const PreferencePair> pairs,
                                   const LossConfig& cfg, ContrastSampler& sampler) {
    auto scored = score_pairs(model, pairs);
    return pairwise_cringe_loss<T>(scored, cfg, sampler);
}

template <typename T>
LossOutput<T> hard_margin_cringe_loss(const TransformerLM<T>& model, std::span<const PreferencePair> pairs,
                                      const LossConfig& cfg, ContrastSampler& sampler) {
    auto scored = score_pairs(model, pairs);
    return hard_margin_cringe_loss<T>(scored, cfg, sampler);
}

template <typename T>
LossOutput<T> dpo_loss(const TransformerLM<T>& model, const TransformerLM<T>& reference,
                       std::span<const PreferencePair> pairs, double beta) {
    std::vector<ReferenceLogprobs> ref;
    for (const auto& p : pairs) ref.push_back(reference_logprobs(reference, p));
    auto scored = score_pairs(model, pairs);
    return dpo_loss<T>(scored, ref, beta);
}

/// Dispatch on cfg.variant over a batch of pairs. Binary-style variants see
/// the batch binarized; `reference` supplies DPO's constants (one per pair).
template <typename T>
LossOutput<T> preference_loss(const TransformerLM<T>& model, std::span<const PreferencePair> pairs,
                              const LossConfig& cfg, ContrastSampler& sampler,
                              std::span<const ReferenceLogprobs> reference = {}, Rng* dropout_rng = nullptr) {
    switch (cfg.variant) {
        case LossVariant::pairwise_cringe: {
            auto scored = score_pairs(model, pairs, dropout_rng);
            return pairwise_cringe_loss<T>(scored, cfg, sampler);
        }
        case LossVariant::hard_margin_cringe: {
            auto scored = score_pairs(model, pairs, dropout_rng);
            return hard_margin_cringe_loss<T>(scored, cfg, sampler);
        }
        case LossVariant::dpo: {
            auto scored = score_pairs(model, pairs, dropout_rng);
            return dpo_loss<T>(scored, reference, cfg.dpo_beta);
        }
        case LossVariant::binary_cringe:
        case LossVariant::unlikelihood: {
            auto items = binarize_pairs(pairs);
            return binary_cringe_loss(model, std::span<const BinaryItem>(items), cfg, sampler,
                                      cfg.variant == LossVariant::binary_cringe ? NegativeTerm::cringe
                                                                                : NegativeTerm::unlikelihood,
                                      dropout_rng);
        }
        case LossVariant::ce: {
            std::vector<BinaryItem> winners;
            for (const auto& p : pairs) winners.push_back({p.winner, true});
            return binary_cringe_loss(model, std::span<const BinaryItem>(winners), cfg, sampler,
                                      NegativeTerm::cringe, dropout_rng);
        }
    }
    throw Error(ErrorKind::config, "unhandled loss variant");
}

}  // namespace pcolab
