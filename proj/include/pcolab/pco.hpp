// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcolab/losses.hpp"
#include "pcolab/metrics.hpp"
#include "pcolab/preferences.hpp"

namespace pcolab {

inline void reject_unknown_keys(const nlohmann::json& j, const std::string& section,
                                const std::vector<std::string>& known) {
    require(j.is_object(), ErrorKind::config, section + ": expected an object");
    for (const auto& [key, _] : j.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw Error(ErrorKind::config, section + ": unknown key '" + key + "'");
        }
    }
}

enum class LrSchedule { constant, linear, cosine };

inline const char* to_string(LrSchedule s) {
    switch (s) {
        case LrSchedule::constant: return "constant";
        case LrSchedule::linear: return "linear";
        case LrSchedule::cosine: return "cosine";
    }
    return "?";
}

inline LrSchedule parse_schedule(const std::string& s) {
    if (s == "constant") return LrSchedule::constant;
    if (s == "linear") return LrSchedule::linear;
    if (s == "cosine") return LrSchedule::cosine;
    throw Error(ErrorKind::config, "plan.schedule: unknown schedule '" + s + "'");
}

struct TrainPlan {
    LossConfig loss;
    std::size_t steps = 500;
    std::size_t batch_size = 16;
    double lr = 1e-3;
    std::size_t warmup_steps = 0;
    LrSchedule schedule = LrSchedule::constant;
    double weight_decay = 0.0;
    double grad_clip = 1.0;     // global gradient norm; 0 disables
    std::size_t eval_every = 50;
    std::size_t patience = 5;   // evaluations without improvement; 0 disables early stopping
    int iteration = 1;
    std::uint64_t seed = 0;

    void validate() const {
        loss.validate();
        require(steps >= 1, ErrorKind::config, "plan.steps must be >= 1");
        require(batch_size >= 1, ErrorKind::config, "plan.batch_size must be >= 1");
        require(lr > 0.0, ErrorKind::config, "plan.lr must be > 0");
        require(grad_clip >= 0.0, ErrorKind::config, "plan.grad_clip must be >= 0");
        require(weight_decay >= 0.0, ErrorKind::config, "plan.weight_decay must be >= 0");
        require(eval_every >= 1, ErrorKind::config, "plan.eval_every must be >= 1");
        require(iteration >= 1, ErrorKind::config, "plan.iteration must be >= 1");
    }

    double lr_at(std::size_t step) const {
        if (warmup_steps > 0 && step < warmup_steps) {
            return lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
        }
        const double span = static_cast<double>(std::max<std::size_t>(1, steps - std::min(steps, warmup_steps)));
        const double t = static_cast<double>(step - std::min(step, warmup_steps)) / span;
        switch (schedule) {
            case LrSchedule::constant: return lr;
            case LrSchedule::linear: return lr * (1.0 - t);
            case LrSchedule::cosine: return lr * 0.5 * (1.0 + std::cos(M_PI * t));
        }
        return lr;
    }
};

inline void to_json(nlohmann::json& j, const TrainPlan& p) {
    j = {{"loss", p.loss},
         {"steps", p.steps},
         {"batch_size", p.batch_size},
         {"lr", p.lr},
         {"warmup_steps", p.warmup_steps},
         {"schedule", to_string(p.schedule)},
         {"weight_decay", p.weight_decay},
         {"grad_clip", p.grad_clip},
         {"eval_every", p.eval_every},
         {"patience", p.patience}};
}

inline void from_json(const nlohmann::json& j, TrainPlan& p) {
    reject_unknown_keys(j, "plan", {"loss", "steps", "batch_size", "lr", "warmup_steps", "schedule", "weight_decay",
                                    "grad_clip", "eval_every", "patience"});
    TrainPlan d;
    p.loss = j.contains("loss") ? j.at("loss").get<LossConfig>() : d.loss;
    p.steps = j.value("steps", d.steps);
    p.batch_size = j.value("batch_size", d.batch_size);
    p.lr = j.value("lr", d.lr);
    p.warmup_steps = j.value("warmup_steps", d.warmup_steps);
    p.schedule = parse_schedule(j.value("schedule", std::string(to_string(d.schedule))));
    p.weight_decay = j.value("weight_decay", d.weight_decay);
    p.grad_clip = j.value("grad_clip", d.grad_clip);
    p.eval_every = j.value("eval_every", d.eval_every);
    p.patience = j.value("patience", d.patience);
    p.validate();
}

struct TrainCurve {
    std::vector<double> loss;                                 // per step
    std::vector<std::pair<std::size_t, double>> validation;   // (step, score), higher is better
    std::vector<std::pair<std::size_t, double>> saturated;    // (step, fraction of telemetry pairs with g < 0.1)
};

inline void to_json(nlohmann::json& j, const TrainCurve& c) {
    j = {{"loss", c.loss}, {"validation", c.validation}, {"saturated", c.saturated}};
}

template <typename T>
struct TrainResult {
    TransformerLM<T> model;
    TrainCurve curve;
    std::size_t steps_run = 0;
    std::size_t best_step = 0;
    bool early_stopped = false;
    double final_loss = 0.0;
    std::size_t telemetry_decreases = 0;  // saturated fraction fell between evaluations
};

template <typename T>
using Validation = std::function<double(const TransformerLM<T>&)>;

namespace detail {

template <typename T>
double clip_gradients(ParamList<T>& params, double max_norm) {
    double sq = 0.0;
    for (auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (auto g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const auto s = static_cast<T>(max_norm / norm);
        for (auto& p : params) {
            if (!p.tensor.has_grad()) continue;
            for (auto& g : p.tensor.mutable_grad()) g *= s;
        }
    }
    return norm;
}

template <typename T>
std::vector<std::vector<T>> snapshot(const TransformerLM<T>& m) {
    std::vector<std::vector<T>> out;
    for (const auto& p : m.parameters()) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    return out;
}

template <typename T>
void restore(TransformerLM<T>& m, const std::vector<std::vector<T>>& snap) {
    for (std::size_t i = 0; i < snap.size(); ++i) {
        std::copy(snap[i].begin(), snap[i].end(), m.parameters()[i].tensor.mutable_data().begin());
    }
}

template <typename T>
double saturated_fraction(const TransformerLM<T>& model, std::span<const PreferencePair> pairs, const LossConfig& cfg) {
    if (pairs.empty()) return 0.0;
    NoGradGuard no_grad;
    std::size_t n = 0;
    for (const auto& p : pairs) {
        const double m = static_cast<double>(pairwise_margin(model, p, cfg.normalize_margin).item());
        n += gate_value(m, cfg.b, cfg.tau) < 0.1;
    }
    return static_cast<double>(n) / static_cast<double>(pairs.size());
}

/// Shuffled epochs over `n` units, `batch` at a time.
class BatchOrder {
public:
    BatchOrder(std::size_t n, std::size_t batch, Rng rng) : n_(n), batch_(std::min(batch, n)), rng_(rng) {}

    std::vector<std::size_t> next() {
        std::vector<std::size_t> out;
        while (out.size() < batch_) {
            if (pos_ == order_.size()) {
                order_.resize(n_);
                for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
                Rng r = rng_.derive("epoch", {epoch_++});
                r.shuffle(order_);
                pos_ = 0;
            }
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    std::size_t n_, batch_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
    std::uint64_t epoch_ = 0;
};

/// AdamW over `n_units` training units; `batch_loss(model, indices, step)`
/// builds the scalar loss of one minibatch.
template <typename T, typename BatchLoss>
TrainResult<T> train_loop(TransformerLM<T> model, std::size_t n_units, std::size_t batch_size, const TrainPlan& plan,
                          BatchLoss&& batch_loss, const Validation<T>& validation,
                          std::span<const PreferencePair> telemetry) {
    plan.validate();
    require(n_units > 0, ErrorKind::data, "training set is empty");
    OptimState<T> opt;
    opt.lr = plan.lr;
    opt.weight_decay = plan.weight_decay;
    BatchOrder order(n_units, batch_size, Rng(plan.seed).derive("batches", {static_cast<std::uint64_t>(plan.iteration)}));
    TrainResult<T> res{model, {}, 0, 0, false, 0.0, 0};
    auto& m = res.model;
    double best = -std::numeric_limits<double>::infinity();
    std::vector<std::vector<T>> best_params;
    std::size_t since_best = 0;

    auto evaluate = [&](std::size_t step) {
        if (!telemetry.empty()) {
            const double frac = saturated_fraction(m, telemetry, plan.loss);
            if (!res.curve.saturated.empty() && frac < res.curve.saturated.back().second) ++res.telemetry_decreases;
            res.curve.saturated.emplace_back(step, frac);
        }
        if (!validation) return false;
        const double score = validation(m);
        res.curve.validation.emplace_back(step, score);
        if (score > best) {
            best = score;
            best_params = snapshot(m);
            res.best_step = step;
            since_best = 0;
        } else {
            ++since_best;
        }
        return plan.patience > 0 && since_best >= plan.patience;
    };

    evaluate(0);
    for (std::size_t step = 0; step < plan.steps; ++step) {
        auto idx = order.next();
        zero_grads(m.parameters());
        Tensor<T> loss;
        try {
            loss = batch_loss(m, std::span<const std::size_t>(idx), step);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::numeric) throw;
            throw Error(ErrorKind::numeric, "training diverged at step " + std::to_string(step) + ": " + e.what());
        }
        const double value = static_cast<double>(loss.item());
        if (!std::isfinite(value)) {
            throw Error(ErrorKind::numeric, "training diverged at step " + std::to_string(step) + ": loss " +
                                                std::to_string(value));
        }
        res.curve.loss.push_back(value);
        loss.backward();
        for (auto& p : m.parameters()) p.tensor.mutable_grad();  // untouched params get a zero gradient
        clip_gradients(m.parameters(), plan.grad_clip);
        adamw_step(m.parameters(), opt, plan.lr_at(step));
        res.steps_run = step + 1;
        if ((step + 1) % plan.eval_every == 0 || step + 1 == plan.steps) {
            if (evaluate(step + 1)) {
                res.early_stopped = true;
                break;
            }
        }
    }
    if (validation && !best_params.empty()) restore(m, best_params);
    res.final_loss = res.curve.loss.empty() ? 0.0 : res.curve.loss.back();
    return res;
}

}  // namespace detail

/// Supervised fine-tuning with token-mean cross-entropy on the responses.
template <typename T>
TrainResult<T> sft(const TransformerLM<T>& init, std::span<const PromptResponse> examples, TrainPlan plan,
                   const Validation<T>& validation = {}) {
    plan.loss.variant = LossVariant::ce;
    std::vector<BinaryItem> items;
    items.reserve(examples.size());
    for (const auto& e : examples) items.push_back({e, true});
    auto batch_loss = [&](const TransformerLM<T>& m, std::span<const std::size_t> idx, std::size_t step) {
        std::vector<BinaryItem> batch;
        for (auto i : idx) batch.push_back(items[i]);
        ContrastSampler unused(Rng(plan.seed).derive("sft", {step}));
        return binary_cringe_loss(m, std::span<const BinaryItem>(batch), plan.loss, unused).loss;
    };
    return detail::train_loop(init.clone(), items.size(), plan.batch_size, plan, batch_loss, validation, {});
}

/// Mean per-token cross-entropy over the valid response tokens.
template <typename T>
double mean_token_ce(const TransformerLM<T>& model, std::span<const PromptResponse> examples) {
    NoGradGuard no_grad;
    double total = 0.0, count = 0.0;
    for (const auto& e : examples) {
        auto s = score_response(model, e);
        total += static_cast<double>(ops::sum(ce_loss(s.logits, s.targets, s.mask)).item());
        count += static_cast<double>(e.valid_count());
    }
    return count > 0 ? total / count : 0.0;
}

/// Optimizes the plan's loss on `pairs` (binary variants see them binarized,
/// plus any `extra_items`). DPO takes its constants from `reference`.
template <typename T>
TrainResult<T> train_pref(const TransformerLM<T>& start, const PreferenceDataset& data, const TrainPlan& plan,
                          const TransformerLM<T>* reference = nullptr, std::span<const BinaryItem> extra_items = {},
                          const Validation<T>& validation = {}, std::span<const PreferencePair> telemetry = {}) {
    plan.validate();
    require(!data.empty() || !extra_items.empty(), ErrorKind::data, "train_pref: preference dataset is empty");
    const auto variant = plan.loss.variant;
    const bool binary_units = variant == LossVariant::binary_cringe || variant == LossVariant::unlikelihood;
    const auto pairs = data.pairs();
    const auto seed = plan.seed;
    const auto iteration = static_cast<std::uint64_t>(plan.iteration);
    auto sampler_for = [seed, iteration](std::size_t step) {
        return ContrastSampler(Rng(seed).derive("contrast", {iteration, static_cast<std::uint64_t>(step)}));
    };

    if (binary_units) {
        auto items = binarize(data);
        items.insert(items.end(), extra_items.begin(), extra_items.end());
        const auto negative = variant == LossVariant::binary_cringe ? NegativeTerm::cringe : NegativeTerm::unlikelihood;
        auto batch_loss = [&](const TransformerLM<T>& m, std::span<const std::size_t> idx, std::size_t step) {
            std::vector<BinaryItem> batch;
            for (auto i : idx) batch.push_back(items[i]);
            auto sampler = sampler_for(step);
            return binary_cringe_loss(m, std::span<const BinaryItem>(batch), plan.loss, sampler, negative).loss;
        };
        return detail::train_loop(start.clone(), items.size(), 2 * plan.batch_size, plan, batch_loss, validation,
                                  telemetry);
    }

    require(extra_items.empty(), ErrorKind::invalid_argument,
            "train_pref: extra binary items only apply to binary variants");
    std::vector<ReferenceLogprobs> refs;
    if (variant == LossVariant::dpo) {
        require(reference != nullptr, ErrorKind::invalid_argument, "train_pref: dpo needs a reference model");
        refs.reserve(pairs.size());
        for (const auto& p : pairs) refs.push_back(reference_logprobs(*reference, p));
    }
    auto batch_loss = [&](const TransformerLM<T>& m, std::span<const std::size_t> idx, std::size_t step) {
        std::vector<PreferencePair> batch;
        std::vector<ReferenceLogprobs> batch_ref;
        for (auto i : idx) {
            batch.push_back(pairs[i]);
            if (!refs.empty()) batch_ref.push_back(refs[i]);
        }
        auto sampler = sampler_for(step);
        return preference_loss(m, std::span<const PreferencePair>(batch), plan.loss, sampler,
                               std::span<const ReferenceLogprobs>(batch_ref))
            .loss;
    };
    return detail::train_loop(start.clone(), pairs.size(), plan.batch_size, plan, batch_loss, validation, telemetry);
}

struct PcoOptions {
    int iterations = 2;
    std::size_t n_samples = 4;
    double temperature = 0.7;
    bool mix_equal = true;          // 1:1 original vs mined by pair count
    DecodeOptions decode;
    std::vector<LossConfig> loss_per_iteration;  // optional override, one per iteration
    std::string checkpoint_dir;     // empty: keep models in memory only

    void validate() const {
        require(iterations >= 1, ErrorKind::config, "pco.iterations must be >= 1");
        require(n_samples >= 2, ErrorKind::config, "pco.n_samples must be >= 2");
        require(temperature > 0.0, ErrorKind::config, "pco.temperature must be > 0");
        require(loss_per_iteration.empty() || loss_per_iteration.size() == static_cast<std::size_t>(iterations),
                ErrorKind::config, "pco.loss_per_iteration needs one entry per iteration");
    }
};

struct IterationReport {
    int iteration = 1;
    std::map<std::string, std::size_t> pairs_used;  // by provenance
    std::size_t original_pairs = 0;
    std::size_t mined_pairs = 0;     // kept before mixing
    std::size_t rejected = 0;        // degenerate best/worst draws
    std::size_t binary_items = 0;    // median-labeled items (binary variants)
    double final_loss = 0.0;
    std::size_t steps_run = 0;
    bool early_stopped = false;
    std::size_t telemetry_decreases = 0;
    MetricReport metrics;
    std::string checkpoint;
};

inline void to_json(nlohmann::json& j, const IterationReport& r) {
    j = {{"iteration", r.iteration},
         {"pairs_used", r.pairs_used},
         {"original_pairs", r.original_pairs},
         {"mined_pairs", r.mined_pairs},
         {"rejected", r.rejected},
         {"binary_items", r.binary_items},
         {"final_loss", r.final_loss},
         {"steps_run", r.steps_run},
         {"early_stopped", r.early_stopped},
         {"telemetry_decreases", r.telemetry_decreases},
         {"metrics", r.metrics},
         {"checkpoint", r.checkpoint}};
}

template <typename T>
struct PcoResult {
    std::vector<IterationReport> reports;
    std::vector<TransformerLM<T>> models;
};

template <typename T>
using Evaluator = std::function<MetricReport(const TransformerLM<T>&)>;

/// Iteration 1 trains on the original pairs. Each later iteration samples from
/// the previous model, labels with `reward`, mixes the new pairs with the
/// original ones and trains again from the SFT weights.
template <typename T>
PcoResult<T> pco_run(const TransformerLM<T>& sft_model, const PreferenceDataset& original,
                     std::span<const Tokens> unlabeled_prompts, const RewardModel& reward, const TrainPlan& plan,
                     const PcoOptions& opts, const Evaluator<T>& evaluate = {}, const Validation<T>& validation = {}) {
    opts.validate();
    PcoResult<T> out;
    const Rng root = Rng(plan.seed).derive("pco");
    const auto telemetry_pairs = [&] {
        auto p = original.pairs();
        if (p.size() > 64) p.resize(64);
        return p;
    }();
    for (int it = 1; it <= opts.iterations; ++it) {
        TrainPlan p = plan;
        p.iteration = it;
        if (!opts.loss_per_iteration.empty()) p.loss = opts.loss_per_iteration[static_cast<std::size_t>(it - 1)];
        const bool binary = p.loss.variant == LossVariant::binary_cringe || p.loss.variant == LossVariant::unlikelihood;

        IterationReport rep;
        rep.iteration = it;
        rep.original_pairs = original.size();
        PreferenceDataset data = original;
        std::vector<BinaryItem> extra;
        if (it > 1) {
            const auto& prev = out.models.back();
            const Rng gen = root.derive("generate", {static_cast<std::uint64_t>(it)});
            const auto strategy = DecodeStrategy::sample(opts.temperature);
            if (binary) {
                auto sets = parallel_map<SampleSet>(unlabeled_prompts.size(), [&](std::size_t i) {
                    return sample_responses(prev, unlabeled_prompts[i], reward, opts.n_samples, strategy, opts.decode,
                                            gen.derive("prompt", {static_cast<std::uint64_t>(i)}));
                });
                std::vector<PromptResponse> responses;
                std::vector<double> rewards;
                for (std::size_t i = 0; i < sets.size(); ++i) {
                    for (std::size_t s = 0; s < sets[i].responses.size(); ++s) {
                        responses.push_back(PromptResponse::make(unlabeled_prompts[i], sets[i].responses[s]));
                        rewards.push_back(sets[i].rewards[s]);
                    }
                }
                extra = median_label(responses, rewards);
                rep.binary_items = extra.size();
                if (opts.mix_equal && !extra.empty()) {
                    // equal shares counted in sequences: n original pairs vs 2n labeled items
                    const std::size_t n = std::min(original.size(), extra.size() / 2);
                    Rng r = root.derive("mix", {static_cast<std::uint64_t>(it)});
                    std::vector<std::size_t> idx(original.size());
                    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
                    r.shuffle(idx);
                    idx.resize(n);
                    std::sort(idx.begin(), idx.end());
                    data = PreferenceDataset{};
                    for (auto i : idx) data.append(original.items()[i]);
                    std::vector<std::size_t> eidx(extra.size());
                    for (std::size_t i = 0; i < eidx.size(); ++i) eidx[i] = i;
                    r.shuffle(eidx);
                    eidx.resize(std::min(extra.size(), 2 * n));
                    std::sort(eidx.begin(), eidx.end());
                    std::vector<BinaryItem> kept;
                    for (auto i : eidx) kept.push_back(extra[i]);
                    extra = std::move(kept);
                }
            } else {
                auto mined = best_worst_pairs(prev, unlabeled_prompts, reward, opts.n_samples, strategy, opts.decode,
                                              gen, provenance_mined(it), &rep.rejected);
                rep.mined_pairs = mined.size();
                data = opts.mix_equal ? mix_equal(original, mined, root.derive("mix", {static_cast<std::uint64_t>(it)}))
                                      : merge(original, mined);
            }
        }
        rep.pairs_used = data.provenance_counts();
        if (binary && !extra.empty()) rep.pairs_used[provenance_mined(it) + "_items"] = extra.size();
        auto trained = train_pref(sft_model, data, p, &sft_model, std::span<const BinaryItem>(extra), validation,
                                  std::span<const PreferencePair>(telemetry_pairs));
        rep.final_loss = trained.final_loss;
        rep.steps_run = trained.steps_run;
        rep.early_stopped = trained.early_stopped;
        rep.telemetry_decreases = trained.telemetry_decreases;
        if (!opts.checkpoint_dir.empty()) {
            rep.checkpoint = opts.checkpoint_dir + "/iteration_" + std::to_string(it) + ".ckpt";
            trained.model.save(rep.checkpoint, plan.seed, {}, {{"iteration", it}, {"loss", p.loss}});
        }
        if (evaluate) {
            rep.metrics = evaluate(trained.model);
            rep.metrics.iteration = it;
        }
        out.reports.push_back(rep);
        out.models.push_back(std::move(trained.model));
    }
    return out;
}

}  // namespace pcolab
