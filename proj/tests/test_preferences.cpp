// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>

#include "pcolab/preferences.hpp"

using namespace pcolab;

namespace {

// Seven-token cycle 3 -> 4 -> ... -> 9 -> 3 with a weaker skip-one edge.
BigramTableModel cyclic_model() {
    BigramTableModel m(10, 64);
    for (TokenId t = 3; t < 10; ++t) {
        m.set(t, (t - 3 + 1) % 7 + 3, 5.0);
        m.set(t, (t - 3 + 2) % 7 + 3, 2.0);
    }
    return m;
}

PreferencePair pair_of(Tokens prompt, Tokens w, Tokens l) {
    return {PromptResponse::make(prompt, std::move(w)), PromptResponse::make(prompt, std::move(l))};
}

Vocab small_vocab() { return Vocab::with_words({"a", "b", "c", "d", "e", "f", "g"}); }

}  // namespace

TEST(SelectBestWorst, EarliestIndexOnTies) {
    std::vector<double> r{3, 1, 4, 1};
    auto sel = select_best_worst(r);
    ASSERT_TRUE(sel);
    EXPECT_EQ(sel->first, 2u);
    EXPECT_EQ(sel->second, 1u);
    std::vector<double> flat{2, 2, 2};
    EXPECT_FALSE(select_best_worst(flat));
}

TEST(SelectBestWorst, InvariantToPositiveAffineRescaling) {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> r(2 + rng.below(6));
        for (auto& v : r) v = std::round(rng.normal() * 3.0);
        const double a = 0.1 + rng.uniform() * 5.0, c = rng.normal() * 10.0;
        std::vector<double> s;
        for (double v : r) s.push_back(a * v + c);
        auto x = select_best_worst(r), y = select_best_worst(s);
        ASSERT_EQ(x.has_value(), y.has_value());
        if (x) {
            EXPECT_EQ(x->first, y->first);
            EXPECT_EQ(x->second, y->second);
        }
    }
}

TEST(Mining, CyclicModelYieldsOnePairPerPrompt) {
    auto model = cyclic_model();
    std::vector<Tokens> prompts;
    for (TokenId t = 0; t < 10; ++t) prompts.push_back({1, static_cast<TokenId>(3 + t % 7)});
    DecodeOptions opts;
    opts.max_new_tokens = 20;
    MiningStats st;
    auto ds = mine_repetition_pairs(model, prompts, 3, opts, &st);
    EXPECT_EQ(ds.size(), 10u);
    EXPECT_EQ(st.kept, 10u);
    EXPECT_EQ(st.no_repeat, 0u);
    for (const auto& it : ds.items()) {
        EXPECT_GT(repeat_at_n(it.pair.prompt(), it.pair.loser.response_tokens, 3), 0u);
        EXPECT_EQ(repeat_at_n(it.pair.prompt(), it.pair.winner.response_tokens, 3), 0u);
        EXPECT_EQ(it.provenance, provenance_original());
    }
}

TEST(Mining, NonRepeatingModelYieldsNothing) {
    BigramTableModel m(40, 64);
    for (TokenId t = 3; t < 39; ++t) m.set(t, t + 1, 5.0);
    std::vector<Tokens> prompts{{1, 3}};
    DecodeOptions opts;
    opts.max_new_tokens = 20;
    MiningStats st;
    EXPECT_TRUE(mine_repetition_pairs(m, prompts, 3, opts, &st).empty());
    EXPECT_EQ(st.no_repeat, 1u);
}

TEST(BestWorst, ThreadCountDoesNotChangeResult) {
    auto model = cyclic_model();
    std::vector<Tokens> prompts;
    for (TokenId t = 0; t < 12; ++t) prompts.push_back({1, static_cast<TokenId>(3 + t % 7)});
    auto reward = RewardModel::hidden_linear(10, 5, 0.1);
    DecodeOptions opts;
    opts.max_new_tokens = 8;
    Rng rng(3);
    std::size_t rej1 = 0, rej2 = 0;
    auto a = best_worst_pairs(model, prompts, reward, 4, DecodeStrategy::sample(1.5), opts, rng, "m", &rej1, 1);
    auto b = best_worst_pairs(model, prompts, reward, 4, DecodeStrategy::sample(1.5), opts, rng, "m", &rej2, 3);
    ASSERT_EQ(a.size(), b.size());
    EXPECT_EQ(rej1, rej2);
    EXPECT_GT(a.size(), 0u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a.items()[i].pair.winner.response_tokens, b.items()[i].pair.winner.response_tokens);
        EXPECT_EQ(a.items()[i].pair.loser.response_tokens, b.items()[i].pair.loser.response_tokens);
        ASSERT_TRUE(a.items()[i].rewards);
        EXPECT_GT(a.items()[i].rewards->first, a.items()[i].rewards->second);
    }
}

TEST(RewardModel, HiddenLinearIsSeededAndZeroesSpecials) {
    std::vector<TokenId> specials{0, 1, 2};
    auto r1 = RewardModel::hidden_linear(10, 4, 0.0, specials);
    auto r2 = RewardModel::hidden_linear(10, 4, 0.0, specials);
    auto r3 = RewardModel::hidden_linear(10, 5, 0.0, specials);
    EXPECT_EQ(r1.weights(), r2.weights());
    EXPECT_NE(r1.weights(), r3.weights());
    EXPECT_EQ(r1.weights()[2], 0.0);
    Tokens resp{3, 4, 3};
    EXPECT_DOUBLE_EQ(r1({}, resp), 2.0 * r1.weights()[3] + r1.weights()[4]);
    auto penalized = RewardModel::hidden_linear(10, 4, 0.5, specials);
    EXPECT_DOUBLE_EQ(penalized({}, resp), r1({}, resp) - 1.5);
    EXPECT_THROW(r1({}, Tokens{12}), Error);
    auto rep = RewardModel::repetition_penalty(3);
    EXPECT_DOUBLE_EQ(rep({}, Tokens{1, 2, 3, 1, 2, 3}), -1.0);
}

TEST(Dataset, RefusesIdenticalPairsAndCountsProvenance) {
    PreferenceDataset ds;
    EXPECT_FALSE(ds.add(pair_of({1}, {3, 4}, {3, 4}), "original"));
    EXPECT_TRUE(ds.add(pair_of({1}, {3, 4}, {4, 3}), "original"));
    EXPECT_TRUE(ds.add(pair_of({1}, {5}, {6}), provenance_mined(2)));
    auto c = ds.provenance_counts();
    EXPECT_EQ(c["original"], 1u);
    EXPECT_EQ(c["mined_iteration_2"], 1u);
    EXPECT_EQ(binarize(ds).size(), 4u);
    EXPECT_TRUE(binarize(ds)[0].positive);
    EXPECT_FALSE(binarize(ds)[1].positive);
}

TEST(Dataset, MixEqualDownsamplesTheLargerSide) {
    PreferenceDataset orig, mined;
    for (TokenId i = 0; i < 10; ++i) orig.add(pair_of({1}, {3, i}, {4, i}), "original");
    for (TokenId i = 0; i < 4; ++i) mined.add(pair_of({1}, {5, i}, {6, i}), provenance_mined(2));
    auto mix = mix_equal(orig, mined, Rng(1));
    auto c = mix.provenance_counts();
    EXPECT_EQ(c["original"], 4u);
    EXPECT_EQ(c["mined_iteration_2"], 4u);
    auto again = mix_equal(orig, mined, Rng(1));
    for (std::size_t i = 0; i < mix.size(); ++i) {
        EXPECT_EQ(mix.items()[i].pair.winner.response_tokens, again.items()[i].pair.winner.response_tokens);
    }
    EXPECT_EQ(merge(orig, mined).size(), 14u);
    EXPECT_EQ(mix_equal(orig, PreferenceDataset{}, Rng(1)).size(), 10u);
}

TEST(Dataset, MedianLabelDropsTies) {
    std::vector<PromptResponse> rs;
    for (TokenId i = 0; i < 5; ++i) rs.push_back(PromptResponse::make({1}, {static_cast<TokenId>(3 + i)}));
    std::vector<double> rewards{1, 5, 3, 2, 4};
    auto items = median_label(rs, rewards);
    ASSERT_EQ(items.size(), 4u);
    std::size_t pos = 0;
    for (const auto& it : items) pos += it.positive;
    EXPECT_EQ(pos, 2u);
}

TEST(Dataset, JsonlRoundTrip) {
    auto vocab = small_vocab();
    PreferenceDataset ds;
    ds.add(pair_of({vocab.bos(), 3, 4}, {5, 6, vocab.eos()}, {7, 7}), "original", std::make_pair(1.5, -2.0));
    ds.add(pair_of({vocab.bos(), 5}, {8}, {9, 3}), provenance_mined(2));
    const auto path = (std::filesystem::temp_directory_path() / "pcolab_pairs_test.jsonl").string();
    ds.save_jsonl(path, vocab);
    auto back = PreferenceDataset::load_jsonl(path, vocab);
    ASSERT_EQ(back.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(back.items()[i].pair.prompt(), ds.items()[i].pair.prompt());
        EXPECT_EQ(back.items()[i].pair.winner.response_tokens, ds.items()[i].pair.winner.response_tokens);
        EXPECT_EQ(back.items()[i].pair.loser.response_tokens, ds.items()[i].pair.loser.response_tokens);
        EXPECT_EQ(back.items()[i].provenance, ds.items()[i].provenance);
    }
    EXPECT_EQ(back.items()[0].rewards->second, -2.0);
    std::filesystem::remove(path);
    EXPECT_THROW(PreferenceDataset::load_jsonl(path, vocab), Error);
}

TEST(ParallelMap, PreservesOrder) {
    auto out = parallel_map<int>(50, [](std::size_t i) { return static_cast<int>(i * i); }, 4);
    for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(out[i], static_cast<int>(i * i));
}
