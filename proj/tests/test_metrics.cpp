// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "pcolab/metrics.hpp"

using namespace pcolab;

namespace {

Tokens toks(std::initializer_list<TokenId> t) { return Tokens(t); }

}  // namespace

TEST(RepeatAtN, CountsEveryRepeatedTrigramOccurrence) {
    // a b c a b c a b: trigrams at 3,4,5 repeat earlier ones
    Tokens gen = toks({1, 2, 3, 1, 2, 3, 1, 2});
    EXPECT_EQ(repeat_at_n({}, gen, 3), 3u);
}

TEST(RepeatAtN, ContextCountsAsHistory) {
    Tokens ctx = toks({7, 8, 9});
    Tokens gen = toks({7, 8, 9});
    EXPECT_EQ(repeat_at_n(ctx, gen, 3), 1u);
    // trigrams straddling the boundary do not start in the generation
    EXPECT_EQ(repeat_at_n(toks({7, 8}), toks({9, 7, 8}), 3), 0u);
}

TEST(RepeatAtN, ShortOrDistinctGenerationsScoreZero) {
    EXPECT_EQ(repeat_at_n({}, toks({1, 2}), 3), 0u);
    EXPECT_EQ(repeat_at_n({}, toks({1, 2, 3, 4, 5, 6}), 3), 0u);
    EXPECT_THROW(repeat_at_n({}, toks({1}), 0), Error);
}

TEST(UnigramF1, MultisetOverlap) {
    EXPECT_NEAR(unigram_f1(toks({1, 2, 3}), toks({1, 2, 4})), 2.0 / 3.0, 1e-12);
    EXPECT_DOUBLE_EQ(unigram_f1(toks({1, 2}), toks({1, 2})), 1.0);
    // duplicates in the generation only match once
    EXPECT_NEAR(unigram_f1(toks({1, 1}), toks({1, 2})), 0.5, 1e-12);
    EXPECT_DOUBLE_EQ(unigram_f1({}, toks({1})), 0.0);
    EXPECT_DOUBLE_EQ(unigram_f1(toks({5}), toks({1})), 0.0);
}

TEST(WinRate, TiesCountHalf) {
    std::vector<double> a{1.0, 2.0, 3.0};
    EXPECT_DOUBLE_EQ(win_rate(a, a), 0.5);
    std::vector<double> b{0.0, 2.0, 4.0};
    EXPECT_DOUBLE_EQ(win_rate(a, b), 0.5);
    std::vector<double> c{0.0, 0.0, 0.0};
    EXPECT_DOUBLE_EQ(win_rate(a, c), 1.0);
}

TEST(WinRate, MismatchedCountsRaise) {
    std::vector<double> a{1.0, 2.0}, b{1.0};
    try {
        win_rate(a, b);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("2 model outputs vs 1"), std::string::npos);
    }
}

TEST(MetricReport, JsonRoundTrip) {
    MetricReport r;
    r.method = "pairwise";
    r.iteration = 2;
    r.repeat_at_n = 0.25;
    r.f1 = 0.4;
    r.win_rate = 0.6;
    r.n_examples = 10;
    r.seed = 3;
    nlohmann::json j = r;
    auto back = j.get<MetricReport>();
    EXPECT_EQ(nlohmann::json(back), j);
    r.win_rate.reset();
    j = r;
    EXPECT_TRUE(j["win_rate"].is_null());
    EXPECT_FALSE(j.get<MetricReport>().win_rate.has_value());
}

TEST(MetricReport, Summarize) {
    std::vector<Tokens> prompts{toks({1}), toks({1})};
    std::vector<Tokens> gens{toks({2, 3, 4, 2, 3, 4}), toks({5, 6})};
    std::vector<Tokens> refs{toks({2, 3, 4}), toks({5, 6})};
    auto r = summarize(prompts, gens, refs, 3);
    EXPECT_DOUBLE_EQ(r.repeat_at_n, 0.5);
    EXPECT_NEAR(r.f1, (2.0 * 0.5 * 1.0 / 1.5 + 1.0) / 2.0, 1e-12);
    EXPECT_EQ(r.n_examples, 2u);
}

TEST(Table, SortedByWinRateThenName) {
    std::vector<MetricReport> rows(3);
    rows[0].method = "b";
    rows[0].win_rate = 0.4;
    rows[1].method = "a";
    rows[1].win_rate = 0.7;
    rows[2].method = "c";
    auto s = sorted_for_table(rows);
    EXPECT_EQ(s[0].method, "a");
    EXPECT_EQ(s[1].method, "b");
    EXPECT_EQ(s[2].method, "c");
    const auto table = format_table(rows);
    EXPECT_LT(table.find("\na"), table.find("\nb"));
    EXPECT_NE(table.find("win_rate"), std::string::npos);
    const auto svg = svg_bar_chart(rows, "win_rate");
    EXPECT_EQ(svg.rfind("<svg", 0), 0u);
    EXPECT_THROW(svg_bar_chart(rows, "nope"), Error);
}
