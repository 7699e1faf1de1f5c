// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcolab/data.hpp"
#include "pcolab/decode.hpp"
#include "pcolab/metrics.hpp"

namespace pcolab {

// ----------------------------- parallel map -----------------------------

/// Worker count: PCOLAB_THREADS if set, else the hardware concurrency.
inline std::size_t worker_threads() {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("PCOLAB_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) n = static_cast<std::size_t>(v);
    }
    return n;
}

/// out[i] = fn(i), computed on up to `threads` workers; results keep index order
/// so output never depends on scheduling.
template <typename R, typename F>
std::vector<R> parallel_map(std::size_t n, F&& fn, std::size_t threads = worker_threads()) {
    std::vector<std::optional<R>> slots(n);
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) slots[i].emplace(fn(i));
    } else {
        std::vector<std::exception_ptr> errors(threads);
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < threads; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t i = w; i < n; i += threads) slots[i].emplace(fn(i));
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }
    std::vector<R> out;
    out.reserve(n);
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
}

// ----------------------------- reward models -----------------------------

enum class RewardKind { repetition_penalty, hidden_linear };

/// Deterministic (prompt, response) scorer; higher is better.
class RewardModel {
public:
    /// -Repeat@n of the response given the prompt.
    static RewardModel repetition_penalty(std::size_t n = 3) {
        RewardModel r;
        r.kind_ = RewardKind::repetition_penalty;
        r.n_ = n;
        return r;
    }

    /// w . counts(response) - length_penalty * |response|, with w ~ N(0, 1)
    /// drawn once per seed. Special tokens carry zero weight.
    static RewardModel hidden_linear(std::size_t vocab, std::uint64_t seed, double length_penalty,
                                     std::span<const TokenId> zero_weight = {}) {
        RewardModel r;
        r.kind_ = RewardKind::hidden_linear;
        r.length_penalty_ = length_penalty;
        Rng rng = Rng(seed).derive("hidden_linear");
        r.weights_.resize(vocab);
        for (auto& w : r.weights_) w = rng.normal();
        for (TokenId t : zero_weight) r.weights_.at(static_cast<std::size_t>(t)) = 0.0;
        return r;
    }

    double operator()(std::span<const TokenId> prompt, std::span<const TokenId> response) const {
        switch (kind_) {
            case RewardKind::repetition_penalty:
                return -static_cast<double>(repeat_at_n(prompt, response, n_));
            case RewardKind::hidden_linear: {
                double s = 0.0;
                for (TokenId t : response) {
                    require(t >= 0 && static_cast<std::size_t>(t) < weights_.size(), ErrorKind::data,
                            "hidden_linear reward: token " + std::to_string(t) + " outside the vocabulary");
                    s += weights_[static_cast<std::size_t>(t)] - length_penalty_;
                }
                return s;
            }
        }
        return 0.0;
    }

    RewardKind kind() const { return kind_; }
    std::string name() const {
        return kind_ == RewardKind::repetition_penalty ? "repetition_penalty(" + std::to_string(n_) + ")"
                                                       : "hidden_linear";
    }
    const std::vector<double>& weights() const { return weights_; }

private:
    RewardKind kind_ = RewardKind::repetition_penalty;
    std::size_t n_ = 3;
    double length_penalty_ = 0.0;
    std::vector<double> weights_;
};

// ----------------------------- datasets -----------------------------

inline std::string provenance_original() { return "original"; }
inline std::string provenance_mined(int iteration) { return "mined_iteration_" + std::to_string(iteration); }

struct LabeledPair {
    PreferencePair pair;
    std::string provenance;
    std::optional<std::pair<double, double>> rewards;  // (winner, loser)
};

/// Preference pairs with per-pair provenance. Identical winner/loser pairs are
/// refused at insertion.
class PreferenceDataset {
public:
    bool add(PreferencePair pair, std::string provenance, std::optional<std::pair<double, double>> rewards = {}) {
        require(!provenance.empty(), ErrorKind::data, "preference pair without provenance");
        if (pair.winner.response_tokens == pair.loser.response_tokens) return false;
        items_.push_back({std::move(pair), std::move(provenance), rewards});
        return true;
    }

    void append(const LabeledPair& lp) {
        if (!add(lp.pair, lp.provenance, lp.rewards)) {
            throw Error(ErrorKind::data, "preference pair with identical winner and loser");
        }
    }

    std::size_t size() const { return items_.size(); }
    bool empty() const { return items_.empty(); }
    const std::vector<LabeledPair>& items() const { return items_; }
    std::vector<LabeledPair>& items() { return items_; }

    std::vector<PreferencePair> pairs() const {
        std::vector<PreferencePair> out;
        out.reserve(items_.size());
        for (const auto& it : items_) out.push_back(it.pair);
        return out;
    }

    std::map<std::string, std::size_t> provenance_counts() const {
        std::map<std::string, std::size_t> out;
        for (const auto& it : items_) ++out[it.provenance];
        return out;
    }

    void save_jsonl(const std::string& path, const Vocab& vocab) const {
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw Error(ErrorKind::io, "cannot write dataset: " + path);
        for (const auto& it : items_) {
            nlohmann::json j = {{"prompt", vocab.decode(it.pair.prompt())},
                                {"winner", vocab.decode(valid_tokens(it.pair.winner))},
                                {"loser", vocab.decode(valid_tokens(it.pair.loser))},
                                {"provenance", it.provenance}};
            if (it.rewards) j["rewards"] = {it.rewards->first, it.rewards->second};
            f << j.dump() << '\n';
        }
    }

    static PreferenceDataset load_jsonl(const std::string& path, const Vocab& vocab) {
        std::ifstream f(path);
        if (!f) throw Error(ErrorKind::missing_artifact, "dataset not found: " + path);
        PreferenceDataset ds;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            if (line.empty()) continue;
            try {
                auto j = nlohmann::json::parse(line);
                auto prompt = vocab.encode(j.at("prompt").get<std::string>());
                PreferencePair p{PromptResponse::make(prompt, vocab.encode(j.at("winner").get<std::string>())),
                                 PromptResponse::make(prompt, vocab.encode(j.at("loser").get<std::string>()))};
                p.validate(vocab.pad());
                std::optional<std::pair<double, double>> rewards;
                if (j.contains("rewards")) rewards = std::make_pair(j["rewards"][0].get<double>(), j["rewards"][1].get<double>());
                ds.append({std::move(p), j.at("provenance").get<std::string>(), rewards});
            } catch (const nlohmann::json::exception& e) {
                throw Error(ErrorKind::data, path + ":" + std::to_string(lineno) + ": " + e.what());
            } catch (const Error& e) {
                throw Error(e.kind(), path + ":" + std::to_string(lineno) + ": " + e.what());
            }
        }
        return ds;
    }

private:
    static Tokens valid_tokens(const PromptResponse& pr) {
        Tokens out;
        for (std::size_t i = 0; i < pr.response_tokens.size(); ++i) {
            if (pr.response_mask[i]) out.push_back(pr.response_tokens[i]);
        }
        return out;
    }

    std::vector<LabeledPair> items_;
};

/// Concatenation with provenance kept.
inline PreferenceDataset merge(const PreferenceDataset& original, const PreferenceDataset& mined) {
    PreferenceDataset out = original;
    for (const auto& it : mined.items()) out.append(it);
    return out;
}

/// Equal-count mix: the larger side is down-sampled (seeded) to the size of
/// the smaller one, then both are concatenated. An empty side leaves the other whole.
inline PreferenceDataset mix_equal(const PreferenceDataset& original, const PreferenceDataset& mined, Rng rng) {
    if (original.empty() || mined.empty()) return merge(original, mined);
    const std::size_t n = std::min(original.size(), mined.size());
    auto take = [&](const PreferenceDataset& ds, const char* tag) {
        std::vector<std::size_t> idx(ds.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        Rng r = rng.derive(tag);
        r.shuffle(idx);
        idx.resize(n);
        std::sort(idx.begin(), idx.end());
        PreferenceDataset out;
        for (auto i : idx) out.append(ds.items()[i]);
        return out;
    };
    return merge(take(original, "original"), take(mined, "mined"));
}

/// Each pair becomes (y_w, positive) and (y_l, negative).
inline std::vector<BinaryItem> binarize(const PreferenceDataset& ds) {
    std::vector<BinaryItem> out;
    out.reserve(2 * ds.size());
    for (const auto& it : ds.items()) {
        out.push_back({it.pair.winner, true});
        out.push_back({it.pair.loser, false});
    }
    return out;
}

/// Binary labels by median split of the rewards: above the median positive,
/// below negative, equal to it dropped.
inline std::vector<BinaryItem> median_label(std::span<const PromptResponse> responses, std::span<const double> rewards) {
    require(responses.size() == rewards.size(), ErrorKind::invalid_argument, "median_label: size mismatch");
    std::vector<BinaryItem> out;
    if (responses.empty()) return out;
    std::vector<double> sorted(rewards.begin(), rewards.end());
    std::sort(sorted.begin(), sorted.end());
    const std::size_t m = sorted.size();
    const double median = m % 2 ? sorted[m / 2] : 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]);
    for (std::size_t i = 0; i < responses.size(); ++i) {
        if (rewards[i] > median) out.push_back({responses[i], true});
        if (rewards[i] < median) out.push_back({responses[i], false});
    }
    return out;
}

// ----------------------------- pair construction -----------------------------

/// Indices of the best and worst reward, earliest index on ties. Empty when
/// they coincide (all rewards equal).
inline std::optional<std::pair<std::size_t, std::size_t>> select_best_worst(std::span<const double> rewards) {
    if (rewards.size() < 2) return std::nullopt;
    std::size_t best = 0, worst = 0;
    for (std::size_t i = 1; i < rewards.size(); ++i) {
        if (rewards[i] > rewards[best]) best = i;
        if (rewards[i] < rewards[worst]) worst = i;
    }
    if (best == worst) return std::nullopt;
    return std::make_pair(best, worst);
}

/// Response tokens as a training target: generated tokens plus eos when the
/// generation stopped on it.
inline Tokens as_target(const DecodeResult& r, TokenId eos) {
    Tokens t = r.tokens;
    if (r.hit_eos && eos >= 0) t.push_back(eos);
    return t;
}

struct SampleSet {
    std::vector<Tokens> responses;  // training targets
    std::vector<double> rewards;
};

/// n samples for one prompt, each scored by the reward. Empty generations are
/// dropped before scoring.
template <NextTokenModel M>
SampleSet sample_responses(const M& model, std::span<const TokenId> prompt, const RewardModel& reward, std::size_t n,
                           const DecodeStrategy& strategy, const DecodeOptions& opts, Rng rng) {
    SampleSet s;
    for (std::size_t i = 0; i < n; ++i) {
        auto r = decode(model, prompt, strategy, opts, &rng);
        if (r.tokens.empty()) continue;
        s.rewards.push_back(reward(prompt, r.tokens));
        s.responses.push_back(as_target(r, opts.eos));
    }
    return s;
}

/// Best- and worst-scoring of n samples as (y_w, y_l); empty when the pair
/// would be degenerate.
template <NextTokenModel M>
std::optional<LabeledPair> best_worst_of_n(const M& model, std::span<const TokenId> prompt, const RewardModel& reward,
                                           std::size_t n, const DecodeStrategy& strategy, const DecodeOptions& opts,
                                           Rng rng, const std::string& provenance) {
    require(n >= 2, ErrorKind::invalid_argument, "best_worst_of_n: n must be >= 2");
    auto s = sample_responses(model, prompt, reward, n, strategy, opts, rng);
    auto sel = select_best_worst(s.rewards);
    if (!sel) return std::nullopt;
    Tokens p(prompt.begin(), prompt.end());
    const auto& w = s.responses[sel->first];
    const auto& l = s.responses[sel->second];
    if (w == l) return std::nullopt;
    return LabeledPair{{PromptResponse::make(p, w), PromptResponse::make(p, l)},
                       provenance,
                       std::make_pair(s.rewards[sel->first], s.rewards[sel->second])};
}

struct MiningStats {
    std::size_t prompts = 0;
    std::size_t kept = 0;
    std::size_t no_repeat = 0;    // greedy output had no repeated n-gram
    std::size_t degenerate = 0;   // empty or identical responses
    int fallback_count = 0;       // blocked-decoding fallbacks over all prompts
};

/// Winner = n-gram-blocked greedy, loser = plain greedy; kept only when the
/// greedy output repeats an n-gram.
template <NextTokenModel M>
PreferenceDataset mine_repetition_pairs(const M& model, std::span<const Tokens> prompts, std::size_t n,
                                        const DecodeOptions& opts, MiningStats* stats = nullptr,
                                        std::size_t threads = worker_threads()) {
    require(n >= 1, ErrorKind::invalid_argument, "mine_repetition_pairs: n must be >= 1");
    struct Mined {
        DecodeResult blocked, greedy;
    };
    auto results = parallel_map<Mined>(
        prompts.size(),
        [&](std::size_t i) {
            return Mined{decode(model, prompts[i], DecodeStrategy::block(static_cast<int>(n)), opts),
                         decode(model, prompts[i], DecodeStrategy::greedy(), opts)};
        },
        threads);
    PreferenceDataset ds;
    MiningStats st;
    st.prompts = prompts.size();
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const auto& r = results[i];
        st.fallback_count += r.blocked.fallback_count;
        if (repeat_at_n(prompts[i], r.greedy.tokens, n) == 0) {
            ++st.no_repeat;
            continue;
        }
        auto w = as_target(r.blocked, opts.eos), l = as_target(r.greedy, opts.eos);
        if (r.blocked.tokens.empty() ||
            !ds.add({PromptResponse::make(prompts[i], w), PromptResponse::make(prompts[i], l)}, provenance_original(),
                    std::make_pair(-static_cast<double>(repeat_at_n(prompts[i], r.blocked.tokens, n)),
                                   -static_cast<double>(repeat_at_n(prompts[i], r.greedy.tokens, n))))) {
            ++st.degenerate;
            continue;
        }
        ++st.kept;
    }
    if (stats) *stats = st;
    return ds;
}

/// best_worst_of_n over many prompts, one derived stream per prompt index.
template <NextTokenModel M>
PreferenceDataset best_worst_pairs(const M& model, std::span<const Tokens> prompts, const RewardModel& reward,
                                   std::size_t n, const DecodeStrategy& strategy, const DecodeOptions& opts,
                                   const Rng& rng, const std::string& provenance, std::size_t* rejected = nullptr,
                                   std::size_t threads = worker_threads()) {
    auto results = parallel_map<std::optional<LabeledPair>>(
        prompts.size(),
        [&](std::size_t i) {
            return best_worst_of_n(model, prompts[i], reward, n, strategy, opts,
                                   rng.derive("best_worst", {static_cast<std::uint64_t>(i)}), provenance);
        },
        threads);
    PreferenceDataset ds;
    std::size_t rej = 0;
    for (auto& r : results) {
        if (r) {
            ds.append(*r);
        } else {
            ++rej;
        }
    }
    if (rejected) *rejected = rej;
    return ds;
}

}  // namespace pcolab
