// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "pcolab/oracle.hpp"

using namespace pcolab;
using T64 = Tensor<double>;

namespace {

const double kLn2 = std::log(2.0);

ScoredResponse<double> one_row(std::vector<double> logits, TokenId target) {
    const std::size_t v = logits.size();
    return {T64::from_data({1, v}, std::move(logits)), {target}, {1}};
}

}  // namespace

TEST(Candidates, NegativeInsideTopK) {
    std::vector<double> s{5, 4, 3, 2, 1};
    EXPECT_EQ(contrast_candidates<double>(s, 0, 2), (std::vector<TokenId>{1, 2}));
}

TEST(Candidates, NegativeOutsideTopKDropsLastEntry) {
    std::vector<double> s{5, 4, 3, 2, 1};
    EXPECT_EQ(contrast_candidates<double>(s, 4, 2), (std::vector<TokenId>{0, 1}));
}

TEST(Candidates, KPlusOneBeyondVocabIsAnError) {
    std::vector<double> s{1, 2, 3};
    EXPECT_THROW(contrast_candidates<double>(s, 0, 3), Error);
    auto logits = T64::from_data({1, 3}, s);
    ContrastSampler sampler(Rng(1));
    EXPECT_THROW(cringe_token_loss(logits, Tokens{0}, std::vector<std::uint8_t>{1}, 3, sampler), Error);
}

TEST(Candidates, SampleFrequencyFollowsSoftmaxOfSurvivors) {
    // Survivors {b, c} with scores 4 and 3: P(b) = e^4 / (e^4 + e^3).
    const std::size_t n = 40000;
    auto logits = T64::from_data({n, 5}, [&] {
        std::vector<double> x;
        for (std::size_t i = 0; i < n; ++i) x.insert(x.end(), {5, 4, 3, 2, 1});
        return x;
    }());
    Tokens neg(n, 0);
    std::vector<std::uint8_t> mask(n, 1);
    ContrastSampler sampler(Rng(7));
    cringe_token_loss(logits, neg, mask, 2, sampler);
    std::size_t b = 0;
    for (auto t : sampler.picks()) {
        ASSERT_TRUE(t == 1 || t == 2);
        b += t == 1;
    }
    const double expect = std::exp(4.0) / (std::exp(4.0) + std::exp(3.0));
    EXPECT_NEAR(expect, 0.731, 1e-3);
    EXPECT_NEAR(static_cast<double>(b) / n, expect, 0.01);
}

TEST(CeLoss, Examples) {
    auto uniform = one_row({0, 0, 0, 0}, 2);
    EXPECT_NEAR(ce_loss(uniform.logits, uniform.targets, uniform.mask).item(), std::log(4.0), 1e-12);
    auto sure = one_row({0, 60, 0, 0}, 1);
    EXPECT_LT(ce_loss(sure.logits, sure.targets, sure.mask).item(), 1e-20);
    std::vector<std::uint8_t> off{0};
    EXPECT_EQ(ops::sum(ce_loss(uniform.logits, uniform.targets, off)).item(), 0.0);
}

TEST(CringeTokenLoss, EqualScoresGiveLog2) {
    auto r = one_row({1, 1, 0, 0}, 0);
    ContrastSampler sampler(Rng(1));
    EXPECT_NEAR(cringe_token_loss(r.logits, r.targets, r.mask, 1, sampler).item(), kLn2, 1e-12);
    EXPECT_EQ(sampler.picks()[0], 1);
}

TEST(CringeTokenLoss, GradientReachesBothSelectedLogits) {
    auto x = T64::from_data({1, 4}, {1, 1, 0, 0}, true);
    ContrastSampler sampler(Rng(1));
    ops::sum(cringe_token_loss(x, Tokens{0}, std::vector<std::uint8_t>{1}, 1, sampler)).backward();
    EXPECT_NEAR(x.grad()[0], 0.5, 1e-12);
    EXPECT_NEAR(x.grad()[1], -0.5, 1e-12);
    EXPECT_EQ(x.grad()[2], 0.0);
}

TEST(Unlikelihood, ClampContract) {
    auto half = one_row({0, 0}, 0);
    EXPECT_NEAR(unlikelihood_loss(half.logits, half.targets, half.mask).item(), kLn2, 1e-12);
    auto tiny = one_row({-50, 0}, 0);
    EXPECT_LT(unlikelihood_loss(tiny.logits, tiny.targets, tiny.mask).item(), 1e-20);
    auto sure = one_row({80, 0}, 0);
    const double v = unlikelihood_loss(sure.logits, sure.targets, sure.mask).item();
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_NEAR(v, -std::log(1e-6), 1e-9);
}

TEST(Gate, Examples) {
    EXPECT_EQ(gate_value(-10.0, -10.0, 10.0), 0.5);
    EXPECT_EQ(gate(T64::scalar(3.25), 3.25, 0.7).item(), 0.5);
    EXPECT_NEAR(gate_value(2.0 - 1.5 * std::log(3.0), 2.0, 1.5), 0.75, 1e-15);
    EXPECT_LT(gate_value(1e6, 0.0, 1.0), 1e-300);
}

TEST(Gate, MonotoneAndScaleInvariant) {
    Rng rng(4);
    for (int i = 0; i < 200; ++i) {
        const double m = rng.normal() * 3, b = rng.normal() * 3, tau = 1.0 + rng.uniform() * 5;
        const double c = 0.1 + rng.uniform() * 10;
        EXPECT_GT(gate_value(m, b, tau), gate_value(m + 0.1, b, tau));
        EXPECT_NEAR(gate_value(c * m, c * b, c * tau), gate_value(m, b, tau), 1e-12);
    }
}

TEST(Gate, RejectsNonPositiveTau) { EXPECT_THROW(gate(T64::scalar(0.0), 0.0, 0.0), Error); }

TEST(Margin, Examples) {
    // p(winner) = 2/4 and p(loser) = 1/4 under three-way softmaxes.
    ScoredPair<double> sp{one_row({std::log(2.0), 0, 0}, 0), one_row({0, 0, std::log(2.0)}, 0)};
    EXPECT_NEAR(pairwise_margin(sp, true).item(), kLn2, 1e-12);
    ScoredPair<double> swapped{sp.loser, sp.winner};
    EXPECT_NEAR(pairwise_margin(swapped, true).item(), -kLn2, 1e-12);
    ScoredPair<double> same{sp.winner, sp.winner};
    EXPECT_EQ(pairwise_margin(same, false).item(), 0.0);
}

TEST(BinaryCringe, AlphaZeroIsCeOnPositives) {
    Rng rng(5);
    auto raw = oracle::random_raw_pairs(rng, 2);
    auto sp = oracle::scored_pairs(raw);
    std::vector<ScoredItem<double>> items;
    double ce = 0.0, n = 0.0;
    for (const auto& p : sp) {
        items.push_back({p.winner, true});
        items.push_back({p.loser, false});
        ce += ops::sum(ce_loss(p.winner.logits, p.winner.targets, p.winner.mask)).item();
        n += static_cast<double>(p.winner.logits.size(0) - std::count(p.winner.mask.begin(), p.winner.mask.end(), 0));
    }
    LossConfig cfg;
    cfg.alpha = 0.0;
    cfg.k = 2;
    ContrastSampler s(Rng(1));
    EXPECT_NEAR(binary_cringe_loss<double>(items, cfg, s).loss.item(), ce / n, 1e-12);
}

TEST(BinaryCringe, OnlyPositivesHaveNoContrastTerm) {
    Rng rng(6);
    auto sp = oracle::scored_pairs(oracle::random_raw_pairs(rng, 2));
    std::vector<ScoredItem<double>> items;
    for (const auto& p : sp) items.push_back({p.winner, true});
    LossConfig cfg;
    cfg.k = 2;
    ContrastSampler s(Rng(1));
    auto out = binary_cringe_loss<double>(items, cfg, s);
    EXPECT_EQ(out.contrast_term, 0.0);
    EXPECT_TRUE(s.picks().empty());
}

TEST(PairwiseCringe, SaturatedGateLimits) {
    Rng rng(8);
    auto sp = oracle::scored_pairs(oracle::random_raw_pairs(rng, 2));
    LossConfig cfg;
    cfg.k = 2;
    cfg.alpha = 0.3;
    std::vector<ScoredItem<double>> items;
    for (const auto& p : sp) {
        items.push_back({p.winner, true});
        items.push_back({p.loser, false});
    }
    ContrastSampler a(Rng(3)), b(Rng(3)), c(Rng(3));
    const double bin = binary_cringe_loss<double>(items, cfg, a).loss.item();
    cfg.b = 1e9;
    EXPECT_NEAR(pairwise_cringe_loss<double>(sp, cfg, b).loss.item(), bin, 1e-12);
    cfg.b = -1e9;
    EXPECT_EQ(pairwise_cringe_loss<double>(sp, cfg, c).loss.item(), 0.0);
}

TEST(HardMargin, ClosedGateHasZeroLossAndGradient) {
    auto x = T64::from_data({1, 3}, {2.0, 0.0, 0.0}, true);
    auto y = T64::from_data({1, 3}, {0.0, 0.0, 2.0}, true);
    ScoredPair<double> sp{{x, {0}, {1}}, {y, {0}, {1}}};
    LossConfig cfg;
    cfg.k = 1;
    cfg.b = 0.0;  // margin is positive, so the step gate is closed
    ContrastSampler s(Rng(1));
    std::vector<ScoredPair<double>> v{sp};
    auto out = hard_margin_cringe_loss<double>(v, cfg, s);
    EXPECT_EQ(out.loss.item(), 0.0);
    out.loss.backward();
    for (double g : x.grad()) EXPECT_EQ(g, 0.0);
    for (double g : y.grad()) EXPECT_EQ(g, 0.0);
}

TEST(HardMargin, OpenGateEqualsUngatedBody) {
    Rng rng(9);
    auto sp = oracle::scored_pairs(oracle::random_raw_pairs(rng, 2));
    LossConfig cfg;
    cfg.k = 2;
    cfg.b = 1e9;
    std::vector<ScoredItem<double>> items;
    for (const auto& p : sp) {
        items.push_back({p.winner, true});
        items.push_back({p.loser, false});
    }
    ContrastSampler a(Rng(2)), b(Rng(2));
    EXPECT_NEAR(hard_margin_cringe_loss<double>(sp, cfg, a).loss.item(),
                binary_cringe_loss<double>(items, cfg, b).loss.item(), 1e-12);
}

TEST(Dpo, PolicyEqualToReferenceGivesLog2) {
    Rng rng(10);
    auto inst = oracle::random_instance(rng, 3);
    auto out = dpo_loss(inst.model, inst.model, std::span<const PreferencePair>(inst.pairs), 0.1);
    EXPECT_NEAR(out.loss.item(), kLn2, 1e-12);
}

TEST(Dpo, StrongWinnerPreferenceApproachesZero) {
    ScoredPair<double> sp{one_row({30, 0, 0}, 0), one_row({0, 30, 0}, 0)};
    std::vector<ScoredPair<double>> v{sp};
    std::vector<ReferenceLogprobs> ref{{-std::log(3.0), -std::log(3.0)}};
    EXPECT_LT(dpo_loss<double>(v, ref, 1.0).loss.item(), 1e-12);
}

TEST(LossConfig, JsonRoundTripAndValidation) {
    LossConfig c;
    c.variant = LossVariant::hard_margin_cringe;
    c.alpha = 0.005;
    c.b = 10;
    nlohmann::json j = c;
    auto back = j.get<LossConfig>();
    EXPECT_EQ(back.variant, c.variant);
    EXPECT_EQ(back.alpha, 0.005);
    j["bogus"] = 1;
    EXPECT_THROW(j.get<LossConfig>(), Error);
    EXPECT_EQ(parse_loss_variant("pairwise-cringe"), LossVariant::pairwise_cringe);
    EXPECT_THROW(parse_loss_variant("ppo"), Error);
    LossConfig bad;
    bad.tau = 0;
    EXPECT_THROW(bad.validate(), Error);
}

TEST(Losses, NonNegativeAndFinite) {
    for (std::uint64_t i = 0; i < 20; ++i) {
        Rng rng(100 + i);
        auto inst = oracle::random_instance(rng, 2);
        auto ref = oracle::reference_for(inst);
        for (auto v : {LossVariant::ce, LossVariant::binary_cringe, LossVariant::pairwise_cringe,
                       LossVariant::hard_margin_cringe, LossVariant::dpo, LossVariant::unlikelihood}) {
            ContrastSampler s(rng.derive("s"));
            const double l = preference_loss(inst.model, inst.pairs, oracle::check_config(v), s, ref).loss.item();
            EXPECT_TRUE(std::isfinite(l));
            EXPECT_GE(l, 0.0);
        }
    }
}

TEST(Losses, PairwiseStepDoesNotShrinkMargin) {
    std::size_t widened = 0;
    const std::size_t n = 100;
    for (std::uint64_t i = 0; i < n; ++i) {
        Rng rng = Rng(77).derive("step", {i});
        auto inst = oracle::random_instance(rng, 1);
        auto cfg = oracle::check_config(LossVariant::pairwise_cringe);
        const double m0 = pairwise_margin(inst.model, inst.pairs[0]).item();
        ContrastSampler s(rng.derive("s"));
        pairwise_cringe_loss(inst.model, std::span<const PreferencePair>(inst.pairs), cfg, s).loss.backward();
        for (auto& p : inst.model.parameters()) {
            auto d = p.tensor.mutable_data();
            for (std::size_t j = 0; j < d.size(); ++j) d[j] -= 1e-4 * p.tensor.grad()[j];
        }
        widened += pairwise_margin(inst.model, inst.pairs[0]).item() >= m0;
    }
    EXPECT_GE(widened, 95u);
}

// The oracle checks at reduced size; the acceptance binary runs them at full size.
TEST(Oracle, RawTranscriptionsAgree) { EXPECT_TRUE(oracle::check_reference(1, 30).pass); }
TEST(Oracle, Limits) { EXPECT_TRUE(oracle::check_limits(2, 30).pass); }
TEST(Oracle, BinarizeConsistency) { EXPECT_TRUE(oracle::check_binarize_consistency(3, 5).pass); }
TEST(Oracle, TwoPathway) { EXPECT_TRUE(oracle::check_two_pathway(4, 30).pass); }
TEST(Oracle, TopkExclusion) { EXPECT_TRUE(oracle::check_topk_exclusion(5, 2000).pass); }
TEST(Oracle, Gradcheck) {
    auto c = oracle::check_gradcheck(6, 2);
    EXPECT_TRUE(c.pass) << c.detail;
}

TEST(Oracle, DetachedGateMutationIsCaught) {
    EXPECT_FALSE(oracle::check_two_pathway(4, 30, {.detach_gate = true}).pass);
}

TEST(Oracle, AlphaMutationIsCaught) {
    EXPECT_FALSE(oracle::check_reference(1, 30, {.alpha_offset = 1e-3}).pass);
}
