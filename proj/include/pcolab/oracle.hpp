// SPDX-License-Identifier: Apache-2.0
#pragma once

// Verification harness for the loss family. The `raw_*` functions are a
// second, deliberately naive implementation that works on plain arrays with
// large-constant masking, so they share nothing with the autodiff path
// except the logits they are handed.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcolab/gradcheck.hpp"
#include "pcolab/losses.hpp"

namespace pcolab {

struct OracleMutations {
    bool detach_gate = false;   // implementation side only
    double alpha_offset = 0.0;  // added to the implementation's alpha in the reference check
};

struct OracleCheck {
    std::string name;
    bool pass = false;
    double value = 0.0;      // worst error or pass fraction, see detail
    double threshold = 0.0;
    std::string detail;
    double seconds = 0.0;
};

inline void to_json(nlohmann::json& j, const OracleCheck& c) {
    j = {{"name", c.name},           {"pass", c.pass},     {"value", c.value},
         {"threshold", c.threshold}, {"detail", c.detail}, {"seconds", c.seconds}};
}

struct OracleReport {
    std::uint64_t seed = 0;
    std::vector<OracleCheck> checks;

    bool all_pass() const {
        return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.pass; });
    }
    const OracleCheck& at(const std::string& name) const {
        for (const auto& c : checks) {
            if (c.name == name) return c;
        }
        throw Error(ErrorKind::invalid_argument, "no oracle check named '" + name + "'");
    }
    nlohmann::json to_json() const { return {{"seed", seed}, {"all_pass", all_pass()}, {"checks", checks}}; }
};

namespace oracle {

// ----------------------------- raw-array transcriptions -----------------------------

/// One sequence of logits [rows x vocab] with targets and a validity mask.
struct RawSeq {
    std::vector<double> x;
    std::size_t vocab = 0;
    Tokens y;
    std::vector<std::uint8_t> notnull;

    std::size_t rows() const { return y.size(); }
    const double* row(std::size_t t) const { return x.data() + t * vocab; }
};

inline RawSeq raw(const ScoredResponse<double>& s) {
    return {s.logits.to_vector(), s.logits.size(1), s.targets, s.mask};
}

inline double logsumexp(const double* v, std::size_t n) {
    double m = v[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, v[i]);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += std::exp(v[i] - m);
    return m + std::log(acc);
}

/// Survivors of the masking step for one score row, in top-k order.
inline std::vector<TokenId> raw_candidates(const double* row, std::size_t vocab, TokenId y, std::size_t k) {
    std::vector<TokenId> order(vocab);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) { return row[a] > row[b]; });
    std::vector<double> topk_logits(k + 1);
    bool any = false;
    for (std::size_t j = 0; j <= k; ++j) {
        const bool has_tgt = order[j] == y;
        any = any || has_tgt;
        topk_logits[j] = row[order[j]] - (has_tgt ? 1e10 : 0.0);
    }
    if (!any) topk_logits[k] -= 1e10;
    std::vector<TokenId> out;
    for (std::size_t j = 0; j <= k; ++j) {
        if (topk_logits[j] > -1e9) out.push_back(order[j]);
    }
    return out;
}

/// Contrastive part for one sequence. Draws one uniform per valid row only, the
/// rows whose loss survives masking.
inline std::vector<double> raw_contrastive(const RawSeq& s, std::size_t k, Rng& draws) {
    std::vector<double> out(s.rows(), 0.0);
    for (std::size_t t = 0; t < s.rows(); ++t) {
        if (!s.notnull[t]) continue;
        const double* row = s.row(t);
        std::vector<TokenId> idx(s.vocab);
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](TokenId a, TokenId b) { return row[a] > row[b]; });
        std::vector<double> values(k + 1), topk_logits(k + 1);
        bool any = false;
        for (std::size_t j = 0; j <= k; ++j) {
            values[j] = row[idx[j]];
            const bool has_tgt = idx[j] == s.y[t];
            any = any || has_tgt;
            topk_logits[j] = values[j] - (has_tgt ? 1e10 : 0.0);
        }
        if (!any) topk_logits[k] -= 1e10;

        const double mx = *std::max_element(topk_logits.begin(), topk_logits.end());
        std::vector<double> cum(k + 1);
        double total = 0.0;
        for (std::size_t j = 0; j <= k; ++j) {
            total += std::exp(topk_logits[j] - mx);
            cum[j] = total;
        }
        const double u = draws.uniform() * total;
        std::size_t sample = 0;
        while (sample < k && !(u < cum[sample])) ++sample;

        const double x_cr[2] = {values[sample], row[s.y[t]]};
        out[t] = -(x_cr[0] - logsumexp(x_cr, 2));
    }
    return out;
}

inline std::vector<double> raw_ce(const RawSeq& s) {
    std::vector<double> out(s.rows(), 0.0);
    for (std::size_t t = 0; t < s.rows(); ++t) {
        if (s.notnull[t]) out[t] = -(s.row(t)[s.y[t]] - logsumexp(s.row(t), s.vocab));
    }
    return out;
}

inline double raw_logprob(const RawSeq& s) {
    double total = 0.0;
    double count = 0.0;
    for (std::size_t t = 0; t < s.rows(); ++t) {
        if (!s.notnull[t]) continue;
        total += s.row(t)[s.y[t]] - logsumexp(s.row(t), s.vocab);
        count += 1.0;
    }
    return total / (count + 1e-10);
}

inline double masked_count(const RawSeq& s) {
    return static_cast<double>(std::count_if(s.notnull.begin(), s.notnull.end(), [](auto m) { return m != 0; }));
}

inline double vsum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

/// Binary loss: CE on positives, alpha * contrastive on negatives, each term
/// divided by the valid-token count of its own class.
inline double raw_binary(const std::vector<RawSeq>& items, const std::vector<bool>& positive, double alpha,
                             std::size_t k, Rng draws) {
    double ce = 0.0, cr = 0.0, n_pos = 0.0, n_neg = 0.0;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (positive[i]) {
            ce += vsum(raw_ce(items[i]));
            n_pos += masked_count(items[i]);
        } else {
            cr += vsum(raw_contrastive(items[i], k, draws));
            n_neg += masked_count(items[i]);
        }
    }
    return (n_pos > 0 ? ce / n_pos : 0.0) + (n_neg > 0 ? alpha * cr / n_neg : 0.0);
}

struct RawPair {
    RawSeq w;
    RawSeq l;
};

enum class Multiplier { sigmoid_gate, hard_margin };

inline double raw_gated(const std::vector<RawPair>& pairs, double alpha, std::size_t k, double b, double tau,
                            Multiplier kind, Rng draws) {
    double n_w = 0.0, n_l = 0.0;
    for (const auto& p : pairs) {
        n_w += masked_count(p.w);
        n_l += masked_count(p.l);
    }
    double loss = 0.0;
    for (const auto& p : pairs) {
        auto ce_loss = raw_ce(p.w);
        auto cr_loss = raw_contrastive(p.l, k, draws);
        const double margin = raw_logprob(p.w) - raw_logprob(p.l);
        const double mult = kind == Multiplier::sigmoid_gate ? 1.0 / (1.0 + std::exp(-((-margin + b) / tau)))
                                                             : (margin <= b ? 1.0 : 0.0);
        loss += mult * (vsum(ce_loss) / n_w + alpha * vsum(cr_loss) / n_l);
    }
    return loss;
}

// ----------------------------- random instances -----------------------------

inline RawSeq random_seq(Rng& rng, std::size_t vocab, std::size_t len, double scale) {
    RawSeq s;
    s.vocab = vocab;
    s.x.resize(len * vocab);
    for (auto& v : s.x) v = rng.normal() * scale;
    s.y.resize(len);
    s.notnull.assign(len, 1);
    for (auto& t : s.y) t = static_cast<TokenId>(1 + rng.below(vocab - 1));
    if (len > 1 && rng.uniform() < 0.5) {
        const std::size_t pad = 1 + rng.below(len - 1);
        for (std::size_t t = len - pad; t < len; ++t) {
            s.notnull[t] = 0;
            s.y[t] = 0;
        }
    }
    return s;
}

inline ScoredResponse<double> scored(const RawSeq& s) {
    return {Tensor<double>::from_data({s.rows(), s.vocab}, s.x), s.y, s.notnull};
}

inline std::vector<RawPair> random_raw_pairs(Rng& rng, std::size_t k) {
    const std::size_t vocab = k + 2 + rng.below(6);
    const std::size_t n = 1 + rng.below(4);
    std::vector<RawPair> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back({random_seq(rng, vocab, 1 + rng.below(5), 2.0), random_seq(rng, vocab, 1 + rng.below(5), 2.0)});
    }
    return out;
}

inline std::vector<ScoredPair<double>> scored_pairs(const std::vector<RawPair>& raw_pairs) {
    std::vector<ScoredPair<double>> out;
    for (const auto& p : raw_pairs) out.push_back({scored(p.w), scored(p.l)});
    return out;
}

inline LmConfig tiny_lm_config(int vocab = 8) {
    LmConfig c;
    c.vocab_size = vocab;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_model = 4;
    c.d_ff = 8;
    c.max_seq_len = 12;
    return c;
}

/// A tiny model, a frozen reference, and a few pairs over token ids >= 3 (the
/// first three ids play pad/bos/eos).
struct TinyInstance {
    TransformerLM<double> model;
    TransformerLM<double> reference;
    std::vector<PreferencePair> pairs;
};

inline Tokens random_ids(Rng& rng, std::size_t n, int vocab) {
    Tokens t(n);
    for (auto& x : t) x = static_cast<TokenId>(3 + rng.below(static_cast<std::size_t>(vocab - 3)));
    return t;
}

inline PromptResponse random_response(Rng& rng, const Tokens& prompt, int vocab) {
    auto pr = PromptResponse::make(prompt, random_ids(rng, 1 + rng.below(4), vocab));
    if (pr.response_tokens.size() > 1 && rng.uniform() < 0.3) {
        pr.response_tokens.back() = 0;
        pr.response_mask.back() = 0;
    }
    return pr;
}

inline TinyInstance random_instance(Rng& rng, std::size_t n_pairs) {
    const auto cfg = tiny_lm_config();
    Rng init = rng.derive("model");
    Rng ref_init = rng.derive("reference");
    TinyInstance inst{TransformerLM<double>::init(cfg, init, {0.5, false}),
                      TransformerLM<double>::init(cfg, ref_init, {0.5, false}),
                      {}};
    for (std::size_t i = 0; i < n_pairs; ++i) {
        auto prompt = random_ids(rng, 1 + rng.below(3), cfg.vocab_size);
        inst.pairs.push_back({random_response(rng, prompt, cfg.vocab_size), random_response(rng, prompt, cfg.vocab_size)});
    }
    return inst;
}

inline LossConfig check_config(LossVariant v) {
    LossConfig c;
    c.variant = v;
    c.alpha = 0.5;
    c.k = 2;
    c.b = 0.0;
    c.tau = 1.0;
    c.dpo_beta = 0.5;
    return c;
}

inline std::vector<ReferenceLogprobs> reference_for(const TinyInstance& inst) {
    std::vector<ReferenceLogprobs> out;
    for (const auto& p : inst.pairs) out.push_back(reference_logprobs(inst.reference, p));
    return out;
}

// ----------------------------- checks -----------------------------

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline std::string fmt(double v) {
    std::ostringstream os;
    os.precision(3);
    os << std::scientific << v;
    return os.str();
}

/// Finite differences over every model parameter, contrast samples replayed.
inline OracleCheck check_gradcheck(std::uint64_t seed, std::size_t instances = 20, OracleMutations mut = {}) {
    Stopwatch sw;
    OracleCheck c{"gradcheck", true, 0.0, 1e-4, {}, 0.0};
    const LossVariant variants[] = {LossVariant::ce,          LossVariant::binary_cringe,
                                    LossVariant::pairwise_cringe, LossVariant::hard_margin_cringe,
                                    LossVariant::dpo,         LossVariant::unlikelihood};
    std::ostringstream detail;
    for (auto v : variants) {
        double worst = 0.0;
        for (std::size_t i = 0; i < instances; ++i) {
            Rng rng = Rng(seed).derive("gradcheck", {static_cast<std::uint64_t>(v), i});
            auto inst = random_instance(rng, 2);
            auto cfg = check_config(v);
            cfg.detach_gate = mut.detach_gate;
            auto ref = reference_for(inst);
            ContrastSampler fresh(rng.derive("contrast"));
            {
                NoGradGuard no_grad;
                preference_loss(inst.model, inst.pairs, cfg, fresh, ref);
            }
            const auto picks = fresh.picks();
            auto f = [&] {
                auto replay = ContrastSampler::replay(picks);
                return preference_loss(inst.model, inst.pairs, cfg, replay, ref).loss;
            };
            auto r = gradcheck_params(f, inst.model.parameters());
            worst = std::max(worst, r.max_rel_error);
        }
        c.value = std::max(c.value, worst);
        detail << to_string(v) << '=' << fmt(worst) << ' ';
    }
    c.pass = c.value < c.threshold;
    c.detail = "max relative error per variant: " + detail.str();
    c.seconds = sw.seconds();
    return c;
}

/// Library losses against the raw transcriptions on random logits.
inline OracleCheck check_reference(std::uint64_t seed, std::size_t batches = 100, OracleMutations mut = {}) {
    Stopwatch sw;
    OracleCheck c{"reference", true, 0.0, 1e-6, {}, 0.0};
    double worst[3] = {0, 0, 0};
    for (std::size_t i = 0; i < batches; ++i) {
        Rng rng = Rng(seed).derive("reference", {i});
        LossConfig cfg;
        cfg.k = static_cast<int>(1 + rng.below(4));
        cfg.alpha = 0.05 + rng.uniform();
        cfg.b = rng.normal();
        cfg.tau = 0.2 + 2.0 * rng.uniform();
        auto raw_pairs = random_raw_pairs(rng, static_cast<std::size_t>(cfg.k));
        auto sp = scored_pairs(raw_pairs);
        const auto k = static_cast<std::size_t>(cfg.k);
        LossConfig impl = cfg;
        impl.alpha += mut.alpha_offset;
        impl.detach_gate = mut.detach_gate;
        const Rng draws = rng.derive("draws");

        // binary over the split pairs
        std::vector<RawSeq> items;
        std::vector<bool> labels;
        std::vector<ScoredItem<double>> sitems;
        for (std::size_t p = 0; p < raw_pairs.size(); ++p) {
            items.push_back(raw_pairs[p].w);
            labels.push_back(true);
            items.push_back(raw_pairs[p].l);
            labels.push_back(false);
            sitems.push_back({sp[p].winner, true});
            sitems.push_back({sp[p].loser, false});
        }
        ContrastSampler s1(draws);
        const double bin = binary_cringe_loss<double>(sitems, impl, s1).loss.item();
        worst[0] = std::max(worst[0], std::abs(bin - raw_binary(items, labels, cfg.alpha, k, draws)));

        ContrastSampler s2(draws);
        const double pw = pairwise_cringe_loss<double>(sp, impl, s2).loss.item();
        worst[1] = std::max(worst[1], std::abs(pw - raw_gated(raw_pairs, cfg.alpha, k, cfg.b, cfg.tau,
                                                                  Multiplier::sigmoid_gate, draws)));

        ContrastSampler s3(draws);
        const double hm = hard_margin_cringe_loss<double>(sp, impl, s3).loss.item();
        worst[2] = std::max(worst[2], std::abs(hm - raw_gated(raw_pairs, cfg.alpha, k, cfg.b, cfg.tau,
                                                                  Multiplier::hard_margin, draws)));
    }
    c.value = std::max({worst[0], worst[1], worst[2]});
    c.pass = c.value <= c.threshold;
    c.detail = "max abs difference: binary=" + fmt(worst[0]) + " pairwise=" + fmt(worst[1]) +
               " hard_margin=" + fmt(worst[2]) + " over " + std::to_string(batches) + " batches";
    c.seconds = sw.seconds();
    return c;
}

/// Saturated and sharpened gates against their limiting losses, and gate(b).
inline OracleCheck check_limits(std::uint64_t seed, std::size_t batches = 100, OracleMutations mut = {}) {
    Stopwatch sw;
    OracleCheck c{"limits", true, 0.0, 0.0, {}, 0.0};
    double worst_binary = 0.0, worst_hard = 0.0, worst_off = 0.0;
    std::size_t hard_compared = 0;
    bool half = true;
    for (std::size_t i = 0; i < batches; ++i) {
        Rng rng = Rng(seed).derive("limits", {i});
        LossConfig cfg;
        cfg.k = static_cast<int>(1 + rng.below(4));
        cfg.alpha = 0.05 + rng.uniform();
        cfg.detach_gate = mut.detach_gate;
        auto sp = scored_pairs(random_raw_pairs(rng, static_cast<std::size_t>(cfg.k)));
        const Rng draws = rng.derive("draws");

        std::vector<ScoredItem<double>> items;
        for (const auto& p : sp) {
            items.push_back({p.winner, true});
            items.push_back({p.loser, false});
        }
        ContrastSampler sb(draws);
        const double bin = binary_cringe_loss<double>(items, cfg, sb).loss.item();
        LossConfig open = cfg;
        open.b = 1e9;
        ContrastSampler sp1(draws);
        worst_binary = std::max(worst_binary, std::abs(pairwise_cringe_loss<double>(sp, open, sp1).loss.item() - bin));

        LossConfig closed = cfg;
        closed.b = -1e9;
        ContrastSampler sp0(draws);
        worst_off = std::max(worst_off, std::abs(pairwise_cringe_loss<double>(sp, closed, sp0).loss.item()));

        LossConfig sharp = cfg;
        sharp.b = rng.normal();
        sharp.tau = 1e-6;
        bool far = true;
        for (const auto& p : sp) far = far && std::abs(pairwise_margin(p, true).item() - sharp.b) > 1e-3;
        if (far) {
            ContrastSampler a(draws), b(draws);
            const double soft = pairwise_cringe_loss<double>(sp, sharp, a).loss.item();
            const double hard = hard_margin_cringe_loss<double>(sp, sharp, b).loss.item();
            worst_hard = std::max(worst_hard, std::abs(soft - hard));
            ++hard_compared;
        }

        const double m = rng.normal() * 5.0;
        const double tau = 0.01 + rng.uniform() * 10.0;
        half = half && gate_value(m, m, tau) == 0.5 &&
               gate(Tensor<double>::scalar(m), m, tau).item() == 0.5;
    }
    c.value = std::max({worst_binary, worst_hard, worst_off});
    c.pass = worst_binary <= 1e-6 && worst_hard <= 1e-5 && worst_off <= 1e-6 && half && hard_compared > 0;
    c.detail = "b=+1e9 vs binary " + fmt(worst_binary) + " (tol 1e-6); tau=1e-6 vs hard margin " + fmt(worst_hard) +
               " over " + std::to_string(hard_compared) + " batches (tol 1e-5); b=-1e9 loss " + fmt(worst_off) +
               "; gate(M=b)==0.5 " + (half ? "exact" : "VIOLATED");
    c.seconds = sw.seconds();
    return c;
}

/// Binary loss on binarized pairs equals the pairwise loss with an open gate,
/// through the full model path.
inline OracleCheck check_binarize_consistency(std::uint64_t seed, std::size_t instances = 20, OracleMutations mut = {}) {
    Stopwatch sw;
    OracleCheck c{"binarize_consistency", true, 0.0, 1e-6, {}, 0.0};
    for (std::size_t i = 0; i < instances; ++i) {
        Rng rng = Rng(seed).derive("binarize", {i});
        auto inst = random_instance(rng, 3);
        auto cfg = check_config(LossVariant::pairwise_cringe);
        cfg.b = 1e9;
        cfg.detach_gate = mut.detach_gate;
        NoGradGuard no_grad;
        ContrastSampler a(rng.derive("draws")), b(rng.derive("draws"));
        auto items = binarize_pairs(inst.pairs);
        const double bin = binary_cringe_loss(inst.model, std::span<const BinaryItem>(items), cfg, a).loss.item();
        const double pw = pairwise_cringe_loss(inst.model, std::span<const PreferencePair>(inst.pairs), cfg, b).loss.item();
        c.value = std::max(c.value, std::abs(bin - pw));
    }
    c.pass = c.value <= c.threshold;
    c.detail = "max abs difference " + fmt(c.value);
    c.seconds = sw.seconds();
    return c;
}

namespace detail {

inline std::vector<std::vector<double>> grads_of(ParamList<double>& params) {
    std::vector<std::vector<double>> out;
    for (auto& p : params) {
        if (p.tensor.has_grad()) {
            out.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
        } else {
            out.emplace_back(p.tensor.numel(), 0.0);
        }
    }
    return out;
}

}  // namespace detail

/// Full gradient = gate-detached part + body-detached part, and a small step
/// along the gate part alone widens the margin.
inline OracleCheck check_two_pathway(std::uint64_t seed, std::size_t instances = 100, OracleMutations mut = {}) {
    Stopwatch sw;
    OracleCheck c{"two_pathway", true, 0.0, 0.95, {}, 0.0};
    std::size_t passed = 0, sum_ok = 0, step_ok = 0;
    double worst_sum = 0.0;
    for (std::size_t i = 0; i < instances; ++i) {
        Rng rng = Rng(seed).derive("two_pathway", {i});
        auto inst = random_instance(rng, 1);
        auto cfg = check_config(LossVariant::pairwise_cringe);
        auto impl = cfg;
        impl.detach_gate = mut.detach_gate;
        auto& params = inst.model.parameters();
        std::span<const PreferencePair> pairs(inst.pairs);

        ContrastSampler fresh(rng.derive("contrast"));
        zero_grads(params);
        pairwise_cringe_loss(inst.model, pairs, impl, fresh).loss.backward();
        const auto full = detail::grads_of(params);
        const auto picks = fresh.picks();

        auto parts = [&](bool detach_gate_part) {
            zero_grads(params);
            auto replay = ContrastSampler::replay(picks);
            auto scored = score_pairs(inst.model, pairs);
            auto t = pair_terms<double>(scored, cfg, replay);
            auto g = detach_gate_part ? ops::detach(t.gate[0]) : t.gate[0];
            auto body = detach_gate_part ? t.body(0, cfg.alpha) : ops::detach(t.body(0, cfg.alpha));
            ops::mul(g, body).backward();
            return detail::grads_of(params);
        };
        const auto via_body = parts(true);
        const auto via_gate = parts(false);

        double err = 0.0, norm = 0.0;
        for (std::size_t p = 0; p < full.size(); ++p) {
            for (std::size_t j = 0; j < full[p].size(); ++j) {
                const double d = std::abs(full[p][j] - (via_body[p][j] + via_gate[p][j]));
                err = std::max(err, d / std::max(1.0, std::abs(full[p][j])));
                norm += via_gate[p][j] * via_gate[p][j];
            }
        }
        worst_sum = std::max(worst_sum, err);
        const bool sum_pass = err <= 1e-6;

        bool step_pass = false;
        norm = std::sqrt(norm);
        if (norm > 0.0) {
            NoGradGuard no_grad;
            const double m0 = pairwise_margin(inst.model, inst.pairs[0], cfg.normalize_margin).item();
            auto stepped = inst.model.clone();
            const double lr = 1e-4 / norm;
            for (std::size_t p = 0; p < via_gate.size(); ++p) {
                auto dst = stepped.parameters()[p].tensor.mutable_data();
                for (std::size_t j = 0; j < dst.size(); ++j) dst[j] -= lr * via_gate[p][j];
            }
            step_pass = pairwise_margin(stepped, inst.pairs[0], cfg.normalize_margin).item() > m0;
        }
        sum_ok += sum_pass;
        step_ok += step_pass;
        passed += sum_pass && step_pass;
    }
    c.value = static_cast<double>(passed) / static_cast<double>(instances);
    c.pass = c.value >= c.threshold;
    c.detail = "decomposition ok " + std::to_string(sum_ok) + "/" + std::to_string(instances) + " (worst " +
               fmt(worst_sum) + "), gate step widened margin " + std::to_string(step_ok) + "/" +
               std::to_string(instances);
    c.seconds = sw.seconds();
    return c;
}

/// The sampled contrast token is never the negative, and the candidate set
/// equals a brute-force run of the masking arithmetic.
inline OracleCheck check_topk_exclusion(std::uint64_t seed, std::size_t positions = 10000) {
    Stopwatch sw;
    OracleCheck c{"topk_exclusion", true, 0.0, 0.0, {}, 0.0};
    std::size_t self_contrast = 0, mismatched = 0, seen = 0;
    for (std::size_t batch = 0; seen < positions; ++batch) {
        Rng rng = Rng(seed).derive("topk", {batch});
        const std::size_t k = 1 + rng.below(5);
        const std::size_t vocab = k + 1 + rng.below(10);
        const std::size_t rows = std::min<std::size_t>(50, positions - seen);
        const bool ties = rng.uniform() < 0.5;
        std::vector<double> x(rows * vocab);
        for (auto& v : x) v = ties ? static_cast<double>(rng.below(4)) : rng.normal() * 3.0;
        Tokens neg(rows);
        for (auto& t : neg) t = static_cast<TokenId>(rng.below(vocab));
        std::vector<std::uint8_t> mask(rows, 1);
        auto logits = Tensor<double>::from_data({rows, vocab}, x);
        ContrastSampler sampler(rng.derive("draws"));
        cringe_token_loss(logits, neg, mask, k, sampler);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* row = x.data() + r * vocab;
            self_contrast += sampler.picks()[r] == neg[r];
            auto lib = contrast_candidates(std::span<const double>(row, vocab), neg[r], k);
            mismatched += lib != raw_candidates(row, vocab, neg[r], k);
        }
        seen += rows;
    }
    c.value = static_cast<double>(self_contrast + mismatched);
    c.pass = self_contrast == 0 && mismatched == 0;
    c.detail = std::to_string(seen) + " positions: " + std::to_string(self_contrast) + " self-contrasts, " +
               std::to_string(mismatched) + " candidate-set mismatches";
    c.seconds = sw.seconds();
    return c;
}

}  // namespace oracle

inline OracleReport oracle_suite(std::uint64_t seed, OracleMutations mut = {}) {
    OracleReport r;
    r.seed = seed;
    r.checks.push_back(oracle::check_gradcheck(seed, 20, mut));
    r.checks.push_back(oracle::check_reference(seed, 100, mut));
    r.checks.push_back(oracle::check_limits(seed, 100, mut));
    r.checks.push_back(oracle::check_binarize_consistency(seed, 20, mut));
    r.checks.push_back(oracle::check_two_pathway(seed, 100, mut));
    r.checks.push_back(oracle::check_topk_exclusion(seed, 10000));
    return r;
}

}  // namespace pcolab
