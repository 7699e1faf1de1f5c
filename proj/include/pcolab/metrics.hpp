// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcolab/error.hpp"
#include "pcolab/vocab.hpp"

namespace pcolab {

/// Occurrences of n-grams starting inside `generation` that already started at
/// an earlier position of context ++ generation. Overlapping occurrences count
/// separately.
inline std::size_t repeat_at_n(std::span<const TokenId> context, std::span<const TokenId> generation, std::size_t n) {
    require(n >= 1, ErrorKind::invalid_argument, "repeat_at_n: n must be >= 1");
    if (generation.size() < n) return 0;
    std::vector<TokenId> seq(context.begin(), context.end());
    seq.insert(seq.end(), generation.begin(), generation.end());
    std::size_t count = 0;
    for (std::size_t p = context.size(); p + n <= seq.size(); ++p) {
        for (std::size_t j = 0; j < p; ++j) {
            if (std::equal(seq.begin() + static_cast<std::ptrdiff_t>(p), seq.begin() + static_cast<std::ptrdiff_t>(p + n),
                           seq.begin() + static_cast<std::ptrdiff_t>(j))) {
                ++count;
                break;
            }
        }
    }
    return count;
}

/// Multiset token overlap F1. Empty inputs score 0.
inline double unigram_f1(std::span<const TokenId> generation, std::span<const TokenId> reference) {
    if (generation.empty() || reference.empty()) return 0.0;
    std::map<TokenId, int> ref;
    for (auto t : reference) ++ref[t];
    std::size_t overlap = 0;
    for (auto t : generation) {
        auto it = ref.find(t);
        if (it != ref.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    if (overlap == 0) return 0.0;
    const double p = static_cast<double>(overlap) / static_cast<double>(generation.size());
    const double r = static_cast<double>(overlap) / static_cast<double>(reference.size());
    return 2.0 * p * r / (p + r);
}

/// Fraction of prompts where the model's reward beats the baseline's; exact
/// ties count one half.
inline double win_rate(std::span<const double> model_rewards, std::span<const double> baseline_rewards) {
    require(model_rewards.size() == baseline_rewards.size(), ErrorKind::invalid_argument,
            "win_rate: " + std::to_string(model_rewards.size()) + " model outputs vs " +
                std::to_string(baseline_rewards.size()) + " baseline outputs");
    require(!model_rewards.empty(), ErrorKind::invalid_argument, "win_rate: no prompts");
    double wins = 0.0;
    for (std::size_t i = 0; i < model_rewards.size(); ++i) {
        if (model_rewards[i] > baseline_rewards[i]) {
            wins += 1.0;
        } else if (model_rewards[i] == baseline_rewards[i]) {
            wins += 0.5;
        }
    }
    return wins / static_cast<double>(model_rewards.size());
}

struct MetricReport {
    std::string method;
    int iteration = 0;
    double repeat_at_n = 0.0;  // mean per response
    int n = 3;
    double f1 = 0.0;
    std::optional<double> win_rate;
    double mean_reward = 0.0;
    std::size_t n_examples = 0;
    std::uint64_t seed = 0;
    std::string judge = "reward model (no LLM judge)";

    void validate() const {
        require(n_examples > 0, ErrorKind::data, "metric report without examples");
        require(!win_rate || (*win_rate >= 0.0 && *win_rate <= 1.0), ErrorKind::data, "win_rate outside [0,1]");
    }
};

inline void to_json(nlohmann::json& j, const MetricReport& r) {
    j = {{"method", r.method},         {"iteration", r.iteration}, {"repeat_at_n", r.repeat_at_n},
         {"n", r.n},                   {"f1", r.f1},               {"mean_reward", r.mean_reward},
         {"n_examples", r.n_examples}, {"seed", r.seed},           {"judge", r.judge}};
    j["win_rate"] = r.win_rate ? nlohmann::json(*r.win_rate) : nlohmann::json(nullptr);
}

inline void from_json(const nlohmann::json& j, MetricReport& r) {
    r.method = j.at("method").get<std::string>();
    r.iteration = j.at("iteration").get<int>();
    r.repeat_at_n = j.at("repeat_at_n").get<double>();
    r.n = j.value("n", 3);
    r.f1 = j.at("f1").get<double>();
    r.mean_reward = j.value("mean_reward", 0.0);
    r.n_examples = j.at("n_examples").get<std::size_t>();
    r.seed = j.value("seed", std::uint64_t{0});
    r.judge = j.value("judge", std::string{});
    r.win_rate = j.contains("win_rate") && !j["win_rate"].is_null() ? std::optional<double>(j["win_rate"].get<double>())
                                                                     : std::nullopt;
}

/// Mean Repeat@n and F1 over (prompt, generation, reference) triples.
inline MetricReport summarize(std::span<const Tokens> prompts, std::span<const Tokens> generations,
                              std::span<const Tokens> references, std::size_t n) {
    require(prompts.size() == generations.size() && generations.size() == references.size(), ErrorKind::invalid_argument,
            "summarize: prompts, generations and references differ in count");
    MetricReport r;
    r.n = static_cast<int>(n);
    r.n_examples = generations.size();
    for (std::size_t i = 0; i < generations.size(); ++i) {
        r.repeat_at_n += static_cast<double>(repeat_at_n(prompts[i], generations[i], n));
        r.f1 += unigram_f1(generations[i], references[i]);
    }
    if (r.n_examples > 0) {
        r.repeat_at_n /= static_cast<double>(r.n_examples);
        r.f1 /= static_cast<double>(r.n_examples);
    }
    return r;
}

/// Rows sorted by win rate descending (missing last), then by method name.
inline std::vector<MetricReport> sorted_for_table(std::vector<MetricReport> rows) {
    std::stable_sort(rows.begin(), rows.end(), [](const MetricReport& a, const MetricReport& b) {
        const double wa = a.win_rate.value_or(-1.0), wb = b.win_rate.value_or(-1.0);
        if (wa != wb) return wa > wb;
        if (a.method != b.method) return a.method < b.method;
        return a.iteration < b.iteration;
    });
    return rows;
}

inline std::string format_table(const std::vector<MetricReport>& rows) {
    std::vector<std::vector<std::string>> cells{{"method", "iteration", "repeat@3", "F1", "win_rate"}};
    auto num = [](double v, int prec) {
        std::ostringstream os;
        os << std::fixed << std::setprecision(prec) << v;
        return os.str();
    };
    for (const auto& r : sorted_for_table(rows)) {
        cells.push_back({r.method, std::to_string(r.iteration), num(r.repeat_at_n, 3), num(r.f1, 4),
                         r.win_rate ? num(*r.win_rate, 4) : "-"});
    }
    std::vector<std::size_t> width(cells[0].size(), 0);
    for (const auto& row : cells) {
        for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
    }
    std::ostringstream os;
    for (std::size_t r = 0; r < cells.size(); ++r) {
        for (std::size_t c = 0; c < cells[r].size(); ++c) {
            if (c) os << "  ";
            if (c == 0) {
                os << std::left << std::setw(static_cast<int>(width[c])) << cells[r][c];
            } else {
                os << std::right << std::setw(static_cast<int>(width[c])) << cells[r][c];
            }
        }
        os << '\n';
        if (r == 0) {
            std::size_t total = 0;
            for (auto w : width) total += w + 2;
            os << std::string(total - 2, '-') << '\n';
        }
    }
    return os.str();
}

/// Grouped bar chart of one metric per row.
inline std::string svg_bar_chart(const std::vector<MetricReport>& rows, const std::string& metric) {
    auto value = [&](const MetricReport& r) {
        if (metric == "repeat_at_n") return r.repeat_at_n;
        if (metric == "f1") return r.f1;
        if (metric == "win_rate") return r.win_rate.value_or(0.0);
        throw Error(ErrorKind::invalid_argument, "svg_bar_chart: unknown metric '" + metric + "'");
    };
    double top = 1e-9;
    for (const auto& r : rows) top = std::max(top, value(r));
    const int bar = 40, gap = 20, height = 200, left = 40, bottom = 60;
    const int width = left + static_cast<int>(rows.size()) * (bar + gap) + gap;
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height + bottom + 20
       << "\" font-family=\"monospace\" font-size=\"10\">\n";
    os << "<text x=\"4\" y=\"12\">" << metric << "</text>\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const double v = value(rows[i]);
        const int h = static_cast<int>(std::lround(v / top * (height - 20)));
        const int x = left + static_cast<int>(i) * (bar + gap);
        os << "<rect x=\"" << x << "\" y=\"" << 20 + (height - 20) - h << "\" width=\"" << bar << "\" height=\"" << h
           << "\" fill=\"#4a78a8\"/>\n";
        os << "<text x=\"" << x << "\" y=\"" << 16 + (height - 20) - h << "\">" << std::setprecision(3) << v
           << "</text>\n";
        os << "<text x=\"" << x << "\" y=\"" << height + 14 << "\" transform=\"rotate(30 " << x << ' ' << height + 14
           << ")\">" << rows[i].method << " it" << rows[i].iteration << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace pcolab
