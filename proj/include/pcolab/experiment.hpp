// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcolab/corpus.hpp"
#include "pcolab/metrics.hpp"
#include "pcolab/pco.hpp"
#include "pcolab/preferences.hpp"

namespace pcolab {

inline constexpr int kSchemaVersion = 1;

/// Transformer shape for the experiment; vocabulary size and context length
/// follow from the corpus.
struct ModelSettings {
    int n_layers = 2;
    int n_heads = 4;
    int d_model = 64;
    int d_ff = 128;
    double init_std = 0.02;

    LmConfig lm_config(const CorpusConfig& corpus, int max_new_tokens) const {
        LmConfig c;
        c.vocab_size = corpus.vocab_size;
        c.n_layers = n_layers;
        c.n_heads = n_heads;
        c.d_model = d_model;
        c.d_ff = d_ff;
        c.max_seq_len = std::max(corpus.max_sequence(), 2 + corpus.prompt_words + max_new_tokens);
        c.validate();
        return c;
    }
};

inline void to_json(nlohmann::json& j, const ModelSettings& m) {
    j = {{"n_layers", m.n_layers}, {"n_heads", m.n_heads}, {"d_model", m.d_model}, {"d_ff", m.d_ff},
         {"init_std", m.init_std}};
}

inline void from_json(const nlohmann::json& j, ModelSettings& m) {
    reject_unknown_keys(j, "lm", {"n_layers", "n_heads", "d_model", "d_ff", "init_std"});
    ModelSettings d;
    m.n_layers = j.value("n_layers", d.n_layers);
    m.n_heads = j.value("n_heads", d.n_heads);
    m.d_model = j.value("d_model", d.d_model);
    m.d_ff = j.value("d_ff", d.d_ff);
    m.init_std = j.value("init_std", d.init_std);
}

struct EvalSettings {
    std::size_t eval_prompts = 100;        // held-out prompts with references
    std::size_t mining_prompts = 200;      // prompts for the original pairs
    std::size_t unlabeled_prompts = 200;   // prompts for later iterations
    std::size_t validation_prompts = 32;   // early-stopping signal
    int repeat_n = 3;
    int max_new_tokens = 24;

    void validate() const {
        require(eval_prompts >= 1 && mining_prompts >= 1 && unlabeled_prompts >= 1, ErrorKind::config,
                "eval: prompt counts must be >= 1");
        require(repeat_n >= 1, ErrorKind::config, "eval.repeat_n must be >= 1");
        require(max_new_tokens >= 1, ErrorKind::config, "eval.max_new_tokens must be >= 1");
    }
};

inline void to_json(nlohmann::json& j, const EvalSettings& e) {
    j = {{"eval_prompts", e.eval_prompts},
         {"mining_prompts", e.mining_prompts},
         {"unlabeled_prompts", e.unlabeled_prompts},
         {"validation_prompts", e.validation_prompts},
         {"repeat_n", e.repeat_n},
         {"max_new_tokens", e.max_new_tokens}};
}

inline void from_json(const nlohmann::json& j, EvalSettings& e) {
    reject_unknown_keys(j, "eval", {"eval_prompts", "mining_prompts", "unlabeled_prompts", "validation_prompts",
                                    "repeat_n", "max_new_tokens"});
    EvalSettings d;
    e.eval_prompts = j.value("eval_prompts", d.eval_prompts);
    e.mining_prompts = j.value("mining_prompts", d.mining_prompts);
    e.unlabeled_prompts = j.value("unlabeled_prompts", d.unlabeled_prompts);
    e.validation_prompts = j.value("validation_prompts", d.validation_prompts);
    e.repeat_n = j.value("repeat_n", d.repeat_n);
    e.max_new_tokens = j.value("max_new_tokens", d.max_new_tokens);
    e.validate();
}

struct IterateSettings {
    int iterations = 2;
    std::size_t n_samples = 4;
    double temperature = 0.7;
    bool mix_equal = true;
};

inline void to_json(nlohmann::json& j, const IterateSettings& s) {
    j = {{"iterations", s.iterations}, {"n_samples", s.n_samples}, {"temperature", s.temperature},
         {"mix_equal", s.mix_equal}};
}

inline void from_json(const nlohmann::json& j, IterateSettings& s) {
    reject_unknown_keys(j, "pco", {"iterations", "n_samples", "temperature", "mix_equal"});
    IterateSettings d;
    s.iterations = j.value("iterations", d.iterations);
    s.n_samples = j.value("n_samples", d.n_samples);
    s.temperature = j.value("temperature", d.temperature);
    s.mix_equal = j.value("mix_equal", d.mix_equal);
}

/// Reward-judged preference task: the original pairs are best/worst of
/// `n_samples` SFT samples under a hidden linear reward.
struct HiddenRewardSettings {
    bool enabled = true;
    double length_penalty = 0.0;
    std::size_t n_samples = 4;
    double temperature = 1.0;
    LossConfig loss;
};

inline void to_json(nlohmann::json& j, const HiddenRewardSettings& h) {
    j = {{"enabled", h.enabled},     {"length_penalty", h.length_penalty}, {"n_samples", h.n_samples},
         {"temperature", h.temperature}, {"loss", h.loss}};
}

inline void from_json(const nlohmann::json& j, HiddenRewardSettings& h) {
    reject_unknown_keys(j, "hidden_reward", {"enabled", "length_penalty", "n_samples", "temperature", "loss"});
    HiddenRewardSettings d;
    h.enabled = j.value("enabled", d.enabled);
    h.length_penalty = j.value("length_penalty", d.length_penalty);
    h.n_samples = j.value("n_samples", d.n_samples);
    h.temperature = j.value("temperature", d.temperature);
    h.loss = j.contains("loss") ? j.at("loss").get<LossConfig>() : d.loss;
}

struct ExperimentConfig {
    int schema_version = kSchemaVersion;
    std::uint64_t seed = 0;
    CorpusConfig corpus;
    ModelSettings lm;
    TrainPlan sft;
    TrainPlan pref;
    IterateSettings pco;
    EvalSettings eval;
    HiddenRewardSettings hidden_reward;
    std::vector<LossVariant> methods{LossVariant::pairwise_cringe, LossVariant::binary_cringe};

    ExperimentConfig() { sft.loss.variant = LossVariant::ce; }

    void validate() const {
        require(schema_version == kSchemaVersion, ErrorKind::config,
                "schema_version " + std::to_string(schema_version) + " is not supported (expected " +
                    std::to_string(kSchemaVersion) + ")");
        corpus.validate();
        sft.validate();
        pref.validate();
        eval.validate();
        (void)lm.lm_config(corpus, eval.max_new_tokens);
        require(pco.iterations >= 1, ErrorKind::config, "pco.iterations must be >= 1");
        require(pco.n_samples >= 2 && hidden_reward.n_samples >= 2, ErrorKind::config, "n_samples must be >= 2");
        require(!methods.empty(), ErrorKind::config, "methods must name at least one loss");
        require(eval.validation_prompts > 0 || pref.patience == 0, ErrorKind::config,
                "early stopping (pref.patience > 0) needs eval.validation_prompts > 0");
    }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    std::vector<std::string> methods;
    for (auto m : c.methods) methods.emplace_back(to_string(m));
    j = {{"schema_version", c.schema_version},
         {"seed", c.seed},
         {"corpus", c.corpus},
         {"lm", c.lm},
         {"sft", c.sft},
         {"pref", c.pref},
         {"pco", c.pco},
         {"eval", c.eval},
         {"hidden_reward", c.hidden_reward},
         {"methods", methods}};
}

namespace detail {

/// Parses one config section, naming it in any error.
template <typename S>
S section(const nlohmann::json& j, const char* name, S fallback) {
    if (!j.contains(name)) return fallback;
    try {
        return j.at(name).get<S>();
    } catch (const Error& e) {
        throw Error(e.kind(), std::string(name) + ": " + e.what());
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::config, std::string(name) + ": " + e.what());
    }
}

}  // namespace detail

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    reject_unknown_keys(j, "config",
                        {"schema_version", "seed", "corpus", "lm", "sft", "pref", "pco", "eval", "hidden_reward", "methods"});
    ExperimentConfig d;
    c.schema_version = j.value("schema_version", d.schema_version);
    c.seed = j.value("seed", d.seed);
    if (j.contains("corpus")) {
        reject_unknown_keys(j["corpus"], "corpus",
                            {"vocab_size", "n_topics", "min_shared", "prompt_words", "min_response", "max_response",
                             "sharpness", "repetition_bias", "n_sentences"});
    }
    c.corpus = detail::section(j, "corpus", d.corpus);
    c.lm = detail::section(j, "lm", d.lm);
    c.sft = detail::section(j, "sft", d.sft);
    c.sft.loss.variant = LossVariant::ce;
    c.pref = detail::section(j, "pref", d.pref);
    c.pco = detail::section(j, "pco", d.pco);
    c.eval = detail::section(j, "eval", d.eval);
    c.hidden_reward = detail::section(j, "hidden_reward", d.hidden_reward);
    if (j.contains("methods")) {
        c.methods.clear();
        for (const auto& m : j["methods"]) c.methods.push_back(parse_loss_variant(m.get<std::string>()));
    }
    c.validate();
}

/// FNV-1a 64 over the canonical JSON dump.
inline std::string config_hash(const nlohmann::json& j) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : j.dump()) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ----------------------------- data -----------------------------

/// Per-seed corpus and prompt splits. Every split is drawn from its own
/// stream of Rng(seed).
struct ExperimentData {
    Vocab vocab;
    std::vector<Sentence> train;
    std::vector<Sentence> held_out;       // eval prompts with reference responses
    std::vector<Tokens> mining_prompts;
    std::vector<Tokens> unlabeled_prompts;
    std::vector<Tokens> validation_prompts;

    std::vector<PromptResponse> train_examples() const {
        std::vector<PromptResponse> out;
        out.reserve(train.size());
        for (const auto& s : train) out.push_back(s.training_example(vocab.eos()));
        return out;
    }

    std::vector<Tokens> eval_prompts() const {
        std::vector<Tokens> out;
        for (const auto& s : held_out) out.push_back(s.prompt);
        return out;
    }
};

inline ExperimentData make_data(const ExperimentConfig& cfg, std::uint64_t seed) {
    const Rng root(seed);
    Grammar g(cfg.corpus, seed);
    auto prompts = [&](std::size_t n, const char* tag) {
        std::vector<Tokens> out;
        for (const auto& s : g.sample_corpus(n, root.derive(tag))) out.push_back(s.prompt);
        return out;
    };
    ExperimentData d{g.vocab(),
                     g.sample_corpus(cfg.corpus.n_sentences, root.derive("train")),
                     g.sample_corpus(cfg.eval.eval_prompts, root.derive("held_out")),
                     prompts(cfg.eval.mining_prompts, "mining"),
                     prompts(cfg.eval.unlabeled_prompts, "unlabeled"),
                     prompts(cfg.eval.validation_prompts, "validation")};
    return d;
}

inline constexpr const char* kVocabFile = "vocab.txt";
inline constexpr const char* kTrainFile = "corpus_train.tsv";
inline constexpr const char* kHeldOutFile = "corpus_held_out.tsv";
inline constexpr const char* kMiningFile = "prompts_mining.txt";
inline constexpr const char* kUnlabeledFile = "prompts_unlabeled.txt";
inline constexpr const char* kValidationFile = "prompts_validation.txt";

inline std::vector<std::string> save_data(const std::string& dir, const ExperimentData& d) {
    std::filesystem::create_directories(dir);
    auto path = [&](const char* f) { return (std::filesystem::path(dir) / f).string(); };
    d.vocab.save(path(kVocabFile));
    save_corpus(path(kTrainFile), d.train, d.vocab);
    save_corpus(path(kHeldOutFile), d.held_out, d.vocab);
    save_prompts(path(kMiningFile), d.mining_prompts, d.vocab);
    save_prompts(path(kUnlabeledFile), d.unlabeled_prompts, d.vocab);
    save_prompts(path(kValidationFile), d.validation_prompts, d.vocab);
    return {path(kVocabFile),  path(kTrainFile),     path(kHeldOutFile),
            path(kMiningFile), path(kUnlabeledFile), path(kValidationFile)};
}

inline ExperimentData load_data(const std::string& dir) {
    auto path = [&](const char* f) { return (std::filesystem::path(dir) / f).string(); };
    auto vocab = Vocab::load(path(kVocabFile));
    ExperimentData d{vocab,
                     load_corpus(path(kTrainFile), vocab),
                     load_corpus(path(kHeldOutFile), vocab),
                     load_prompts(path(kMiningFile), vocab),
                     load_prompts(path(kUnlabeledFile), vocab),
                     load_prompts(path(kValidationFile), vocab)};
    return d;
}

inline DecodeOptions decode_options(const ExperimentConfig& cfg, const Vocab& vocab) {
    DecodeOptions o;
    o.max_new_tokens = cfg.eval.max_new_tokens;
    o.eos = vocab.eos();
    o.banned = {vocab.pad(), vocab.bos()};
    return o;
}

// ----------------------------- evaluation -----------------------------

template <typename T>
std::vector<Tokens> greedy_outputs(const TransformerLM<T>& model, std::span<const Tokens> prompts,
                                   const DecodeOptions& opts) {
    return parallel_map<Tokens>(prompts.size(), [&](std::size_t i) {
        return decode(model, prompts[i], DecodeStrategy::greedy(), opts).tokens;
    });
}

/// Greedy Repeat@n and unigram F1 against the held-out references; the
/// reward column is the mean of `reward` over the same outputs.
template <typename T>
MetricReport evaluate_model(const TransformerLM<T>& model, const ExperimentData& data, const ExperimentConfig& cfg,
                            const RewardModel& reward, const std::string& method, int iteration,
                            std::uint64_t seed) {
    const auto prompts = data.eval_prompts();
    const auto gens = greedy_outputs(model, std::span<const Tokens>(prompts), decode_options(cfg, data.vocab));
    std::vector<Tokens> refs;
    for (const auto& s : data.held_out) refs.push_back(s.response);
    auto r = summarize(prompts, gens, refs, static_cast<std::size_t>(cfg.eval.repeat_n));
    r.method = method;
    r.iteration = iteration;
    r.seed = seed;
    for (std::size_t i = 0; i < prompts.size(); ++i) r.mean_reward += reward(prompts[i], gens[i]);
    r.mean_reward /= static_cast<double>(prompts.size());
    r.judge = reward.name();
    r.validate();
    return r;
}

template <typename T>
Validation<T> reward_validation(const ExperimentData& data, const ExperimentConfig& cfg, const RewardModel& reward) {
    if (data.validation_prompts.empty()) return {};
    const auto opts = decode_options(cfg, data.vocab);
    return [&data, opts, reward](const TransformerLM<T>& m) {
        const auto gens = greedy_outputs(m, std::span<const Tokens>(data.validation_prompts), opts);
        double s = 0.0;
        for (std::size_t i = 0; i < gens.size(); ++i) s += reward(data.validation_prompts[i], gens[i]);
        return s / static_cast<double>(gens.size());
    };
}

// ----------------------------- pipeline -----------------------------

struct SeedReport {
    std::uint64_t seed = 0;
    MetricReport sft;
    double sft_held_out_ce = 0.0;
    MiningStats mining;
    std::size_t mined_pairs = 0;
    std::map<std::string, std::vector<IterationReport>> repetition;  // by loss variant
    std::optional<MetricReport> hidden_sft;
    std::vector<IterationReport> hidden;
    std::size_t hidden_original_pairs = 0;
    double seconds = 0.0;  // wall time, excluded from the metric JSON

    std::vector<MetricReport> rows() const {
        std::vector<MetricReport> out{sft};
        for (const auto& [_, reps] : repetition) {
            for (const auto& r : reps) out.push_back(r.metrics);
        }
        if (hidden_sft) out.push_back(*hidden_sft);
        for (const auto& r : hidden) out.push_back(r.metrics);
        return out;
    }

    /// Everything except timing; byte-stable for a fixed config and seed.
    nlohmann::json metrics_json() const {
        nlohmann::json j;
        j["seed"] = seed;
        j["sft"] = sft;
        j["sft_held_out_ce"] = sft_held_out_ce;
        j["mining"] = {{"prompts", mining.prompts},
                       {"kept", mining.kept},
                       {"no_repeat", mining.no_repeat},
                       {"degenerate", mining.degenerate},
                       {"fallback_count", mining.fallback_count}};
        j["repetition"] = nlohmann::json::object();
        for (const auto& [name, reps] : repetition) j["repetition"][name] = reps;
        j["hidden_reward"] = nlohmann::json::object();
        if (hidden_sft) {
            j["hidden_reward"]["sft"] = *hidden_sft;
            j["hidden_reward"]["original_pairs"] = hidden_original_pairs;
            j["hidden_reward"]["iterations"] = hidden;
        }
        return j;
    }
};

struct RunHooks {
    std::string checkpoint_dir;  // empty: no checkpoints written
    std::function<void(const std::string&)> log;
};

namespace detail {

inline void say(const RunHooks& hooks, const std::string& msg) {
    if (hooks.log) hooks.log(msg);
}

}  // namespace detail

enum class Task { repetition, hidden_reward };

inline const char* to_string(Task t) { return t == Task::repetition ? "repetition" : "hidden_reward"; }

inline Task parse_task(const std::string& s) {
    if (s == "repetition") return Task::repetition;
    if (s == "hidden_reward" || s == "hidden-reward") return Task::hidden_reward;
    throw Error(ErrorKind::config, "unknown task '" + s + "' (expected repetition or hidden_reward)");
}

/// The judge of a task. The hidden reward's weights are keyed by the seed and
/// never enter training except through pair labels.
inline RewardModel task_reward(Task task, const ExperimentConfig& cfg, const Vocab& vocab, std::uint64_t seed) {
    if (task == Task::repetition) return RewardModel::repetition_penalty(static_cast<std::size_t>(cfg.eval.repeat_n));
    const std::vector<TokenId> specials{vocab.pad(), vocab.bos(), vocab.eos()};
    return RewardModel::hidden_linear(vocab.size(), Rng(seed).derive("judge").next_u64(),
                                      cfg.hidden_reward.length_penalty, specials);
}

inline LossConfig task_loss(Task task, const ExperimentConfig& cfg, LossVariant variant) {
    LossConfig loss = task == Task::repetition ? cfg.pref.loss : cfg.hidden_reward.loss;
    loss.variant = variant;
    return loss;
}

template <typename T>
TransformerLM<T> train_sft_model(const ExperimentConfig& cfg, const ExperimentData& data, std::uint64_t seed,
                                 double* held_out_ce = nullptr) {
    Rng init = Rng(seed).derive("init");
    auto model = TransformerLM<T>::init(cfg.lm.lm_config(cfg.corpus, cfg.eval.max_new_tokens), init,
                                        {cfg.lm.init_std, false});
    TrainPlan plan = cfg.sft;
    plan.seed = seed;
    const auto examples = data.train_examples();
    auto res = sft(model, std::span<const PromptResponse>(examples), plan);
    if (held_out_ce) {
        std::vector<PromptResponse> held;
        for (const auto& s : data.held_out) held.push_back(s.training_example(data.vocab.eos()));
        *held_out_ce = mean_token_ce(res.model, std::span<const PromptResponse>(held));
    }
    return std::move(res.model);
}

/// Original preference pairs of a task, built from the SFT model on the
/// mining prompts. Repetition: blocked vs plain greedy. Hidden reward:
/// best/worst of n samples.
template <typename T>
PreferenceDataset original_pairs(Task task, const TransformerLM<T>& sft_model, const ExperimentData& data,
                                 const ExperimentConfig& cfg, std::uint64_t seed, MiningStats* stats = nullptr) {
    const auto opts = decode_options(cfg, data.vocab);
    if (task == Task::repetition) {
        return mine_repetition_pairs(sft_model, std::span<const Tokens>(data.mining_prompts),
                                     static_cast<std::size_t>(cfg.eval.repeat_n), opts, stats);
    }
    std::size_t rejected = 0;
    auto ds = best_worst_pairs(sft_model, std::span<const Tokens>(data.mining_prompts),
                               task_reward(task, cfg, data.vocab, seed), cfg.hidden_reward.n_samples,
                               DecodeStrategy::sample(cfg.hidden_reward.temperature), opts,
                               Rng(seed).derive("hidden_pairs"), provenance_original(), &rejected);
    if (stats) {
        *stats = MiningStats{};
        stats->prompts = data.mining_prompts.size();
        stats->kept = ds.size();
        stats->degenerate = rejected;
    }
    return ds;
}

/// Greedy outputs of `baseline` on the held-out prompts, scored by `judge`.
template <typename T>
std::vector<double> baseline_rewards(const TransformerLM<T>& baseline, const ExperimentData& data,
                                     const ExperimentConfig& cfg, const RewardModel& judge) {
    const auto prompts = data.eval_prompts();
    const auto gens = greedy_outputs(baseline, std::span<const Tokens>(prompts), decode_options(cfg, data.vocab));
    std::vector<double> out;
    for (std::size_t i = 0; i < prompts.size(); ++i) out.push_back(judge(prompts[i], gens[i]));
    return out;
}

/// evaluate_model plus, when `baseline` is given, the win rate against it.
template <typename T>
MetricReport evaluate_task(const TransformerLM<T>& model, const ExperimentData& data, const ExperimentConfig& cfg,
                           const RewardModel& judge, const std::string& method, int iteration, std::uint64_t seed,
                           const std::vector<double>* baseline) {
    auto r = evaluate_model(model, data, cfg, judge, method, iteration, seed);
    if (baseline) {
        const auto mine = baseline_rewards(model, data, cfg, judge);
        r.win_rate = win_rate(mine, *baseline);
    }
    r.validate();
    return r;
}

/// pco_run from the SFT model with the experiment's iteration settings.
template <typename T>
PcoResult<T> run_iterations(Task task, const TransformerLM<T>& sft_model, const PreferenceDataset& original,
                            const ExperimentData& data, const ExperimentConfig& cfg, std::uint64_t seed,
                            LossVariant variant, int iterations, const Evaluator<T>& evaluate,
                            const std::string& checkpoint_dir = {}) {
    const auto reward = task_reward(task, cfg, data.vocab, seed);
    TrainPlan plan = cfg.pref;
    plan.loss = task_loss(task, cfg, variant);
    plan.seed = seed;
    PcoOptions po;
    po.iterations = iterations;
    po.n_samples = cfg.pco.n_samples;
    po.temperature = cfg.pco.temperature;
    po.mix_equal = cfg.pco.mix_equal;
    po.decode = decode_options(cfg, data.vocab);
    po.checkpoint_dir = checkpoint_dir;
    if (!checkpoint_dir.empty()) std::filesystem::create_directories(checkpoint_dir);
    return pco_run(sft_model, original, std::span<const Tokens>(data.unlabeled_prompts), reward, plan, po, evaluate,
                   cfg.pref.patience > 0 ? reward_validation<T>(data, cfg, reward) : Validation<T>{});
}

/// One seed of both tasks: SFT, repetition pairs then iterated training per
/// configured loss; and, when enabled, the hidden-reward task judged by win
/// rate against the SFT model's greedy outputs.
template <typename T>
SeedReport run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const RunHooks& hooks = {}) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    SeedReport rep;
    rep.seed = seed;
    const auto data = make_data(cfg, seed);
    const std::string tag = "seed" + std::to_string(seed);
    auto ckpt_dir = [&](const std::string& name) {
        return hooks.checkpoint_dir.empty() ? std::string{} : hooks.checkpoint_dir + "/" + tag + "_" + name;
    };

    detail::say(hooks, tag + ": sft");
    auto sft_model = train_sft_model<T>(cfg, data, seed, &rep.sft_held_out_ce);
    if (!hooks.checkpoint_dir.empty()) {
        std::filesystem::create_directories(hooks.checkpoint_dir);
        sft_model.save(hooks.checkpoint_dir + "/" + tag + "_sft.ckpt", seed);
    }
    const auto repetition = task_reward(Task::repetition, cfg, data.vocab, seed);
    rep.sft = evaluate_task(sft_model, data, cfg, repetition, "sft", 0, seed, nullptr);

    auto mined = original_pairs(Task::repetition, sft_model, data, cfg, seed, &rep.mining);
    rep.mined_pairs = mined.size();
    detail::say(hooks, tag + ": mined " + std::to_string(mined.size()) + " repetition pairs");
    if (mined.empty()) throw Error(ErrorKind::data, tag + ": the SFT model produced no repetition pairs");

    for (auto variant : cfg.methods) {
        const std::string name = to_string(variant);
        detail::say(hooks, tag + ": repetition " + name);
        Evaluator<T> eval = [&](const TransformerLM<T>& m) {
            return evaluate_task(m, data, cfg, repetition, name, 0, seed, nullptr);
        };
        rep.repetition[name] = run_iterations(Task::repetition, sft_model, mined, data, cfg, seed, variant,
                                              cfg.pco.iterations, eval, ckpt_dir("repetition_" + name))
                                   .reports;
    }

    if (cfg.hidden_reward.enabled) {
        const auto judge = task_reward(Task::hidden_reward, cfg, data.vocab, seed);
        const auto base = baseline_rewards(sft_model, data, cfg, judge);
        rep.hidden_sft = evaluate_task(sft_model, data, cfg, judge, "sft", 0, seed, &base);
        auto original = original_pairs(Task::hidden_reward, sft_model, data, cfg, seed);
        rep.hidden_original_pairs = original.size();
        if (original.empty()) throw Error(ErrorKind::data, tag + ": no hidden-reward pairs survived");
        const auto variant = cfg.hidden_reward.loss.variant;
        const std::string name = to_string(variant);
        detail::say(hooks, tag + ": hidden reward " + name);
        Evaluator<T> eval = [&](const TransformerLM<T>& m) {
            return evaluate_task(m, data, cfg, judge, name, 0, seed, &base);
        };
        rep.hidden = run_iterations(Task::hidden_reward, sft_model, original, data, cfg, seed, variant,
                                    cfg.pco.iterations, eval, ckpt_dir("hidden_" + name))
                         .reports;
    }
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

}  // namespace pcolab
