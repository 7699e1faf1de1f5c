// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>

#include "pcolab/decode.hpp"
#include "pcolab/model.hpp"

using namespace pcolab;

namespace {

LmConfig tiny_config(int vocab = 12) {
    LmConfig c;
    c.vocab_size = vocab;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_model = 8;
    c.d_ff = 16;
    c.max_seq_len = 16;
    return c;
}

TransformerLM<double> random_model(std::uint64_t seed, int vocab = 12, double std = 0.5) {
    Rng rng(seed);
    return TransformerLM<double>::init(tiny_config(vocab), rng, {std, false});
}

Tokens random_tokens(Rng& rng, std::size_t n, int vocab) {
    Tokens t(n);
    for (auto& x : t) x = static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(vocab)));
    return t;
}

// True if some n-gram ending inside the generated part already occurred earlier.
bool has_repeated_ngram(const Tokens& seq, std::size_t prompt_len, std::size_t n) {
    for (std::size_t i = 0; i + n <= seq.size(); ++i) {
        if (i + n - 1 < prompt_len) continue;
        for (std::size_t j = 0; j < i; ++j) {
            if (std::equal(seq.begin() + i, seq.begin() + i + n, seq.begin() + j)) return true;
        }
    }
    return false;
}

}  // namespace

TEST(Vocab, SpecialsFirstAndRoundTrip) {
    auto v = Vocab::with_words({"the", "cat", "sat"});
    EXPECT_EQ(v.size(), 6u);
    EXPECT_EQ(v.pad(), 0);
    EXPECT_TRUE(v.is_special(v.eos()));
    auto ids = v.encode("the cat  sat the");
    EXPECT_EQ(ids, (Tokens{3, 4, 5, 3}));
    EXPECT_EQ(v.decode(ids), "the cat sat the");
    EXPECT_THROW(v.encode("dog"), Error);
    EXPECT_THROW(Vocab::with_words({"a", "a"}), Error);
}

TEST(Vocab, FileRoundTrip) {
    auto v = Vocab::with_words({"x", "y"});
    const std::string path = ::testing::TempDir() + "/vocab_rt.txt";
    v.save(path);
    auto w = Vocab::load(path);
    EXPECT_EQ(w.tokens(), v.tokens());
    std::remove(path.c_str());
    EXPECT_THROW(Vocab::load("/nonexistent/vocab.txt"), Error);
}

TEST(LmConfig, RejectsIndivisibleHeads) {
    auto c = tiny_config();
    c.n_heads = 3;
    EXPECT_THROW(c.validate(), Error);
}

TEST(TinyLm, ZeroHeadGivesUniformRows) {
    Rng rng(1);
    auto m = TransformerLM<double>::init(tiny_config(), rng, {0.02, true});
    auto p = ops::softmax(m.logits(Tokens{1, 4, 7}));
    for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 12.0);
}

TEST(TinyLm, LogitsAreCausal) {
    auto m = random_model(2);
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        auto toks = random_tokens(rng, 10, 12);
        auto permuted = toks;
        std::swap(permuted[7], permuted[9]);
        permuted[8] = (permuted[8] + 1) % 12;
        auto a = m.logits(toks);
        auto b = m.logits(permuted);
        for (std::size_t i = 0; i < 7 * 12; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
    }
}

TEST(TinyLm, SameSeedSameLogitsBitForBit) {
    auto a = random_model(5);
    auto b = random_model(5);
    EXPECT_TRUE(a.same_parameters(b));
    Tokens t{2, 3, 5, 7};
    EXPECT_EQ(a.logits(t).to_vector(), b.logits(t).to_vector());
    EXPECT_EQ(a.bytes(5), b.bytes(5));
}

TEST(TinyLm, OverlengthSequenceReportsLengths) {
    auto m = random_model(1);
    Tokens t(17, 1);
    try {
        m.logits(t);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::shape);
        EXPECT_NE(std::string(e.what()).find("17"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("16"), std::string::npos);
    }
}

TEST(TinyLm, CheckpointRoundTripAndCast) {
    auto m = random_model(8);
    const std::string path = ::testing::TempDir() + "/lm_rt.ckpt";
    m.save(path, 8);
    auto back = TransformerLM<double>::load(path);
    EXPECT_TRUE(back.same_parameters(m));
    auto f = m.cast<float>();
    Tokens t{1, 2, 3};
    auto lf = f.logits(t);
    auto ld = m.logits(t);
    for (std::size_t i = 0; i < ld.numel(); ++i) EXPECT_NEAR(lf[i], ld[i], 1e-4);
    std::remove(path.c_str());
}

TEST(SequenceLogprob, SingleTokenAtHalf) {
    Rng rng(1);
    auto m = TransformerLM<double>::init(tiny_config(2), rng, {0.02, true});
    auto pr = PromptResponse::make({0}, {1});
    EXPECT_NEAR(sequence_logprob(m, pr, false).item(), -0.6931471805599453, 1e-12);
    EXPECT_NEAR(sequence_logprob(m, pr, true).item(), -0.6931471805599453, 1e-12);
}

TEST(SequenceLogprob, TwoTokensAtHalf) {
    Rng rng(1);
    auto m = TransformerLM<double>::init(tiny_config(2), rng, {0.02, true});
    auto pr = PromptResponse::make({0}, {1, 0});
    EXPECT_NEAR(sequence_logprob(m, pr, false).item(), -1.3862943611198906, 1e-12);
    EXPECT_NEAR(sequence_logprob(m, pr, true).item(), -0.6931471805599453, 1e-12);
}

TEST(SequenceLogprob, MatchesPerPrefixRecomputation) {
    Rng rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        auto m = random_model(100 + trial);
        auto prompt = random_tokens(rng, 1 + rng.below(4), 12);
        auto resp = random_tokens(rng, 1 + rng.below(6), 12);
        auto pr = PromptResponse::make(prompt, resp);
        if (trial % 2 == 1 && resp.size() > 1) {
            pr.response_mask.back() = 0;
            pr.response_tokens.back() = 0;
        }
        double expect = 0.0;
        std::size_t valid = 0;
        for (std::size_t j = 0; j < resp.size(); ++j) {
            if (!pr.response_mask[j]) continue;
            Tokens prefix(prompt);
            prefix.insert(prefix.end(), resp.begin(), resp.begin() + static_cast<std::ptrdiff_t>(j));
            auto row = m.next_token_logits(prefix);
            double z = 0.0;
            for (double v : row) z += std::exp(v);
            expect += row[static_cast<std::size_t>(pr.response_tokens[j])] - std::log(z);
            ++valid;
        }
        EXPECT_NEAR(sequence_logprob(m, pr, false).item(), expect, 1e-6);
        EXPECT_NEAR(sequence_logprob(m, pr, true).item(), expect / static_cast<double>(valid), 1e-6);
    }
}

TEST(SequenceLogprob, EmptyResponseIsAnError) {
    auto m = random_model(1);
    PromptResponse pr{{1}, {0}, {0}};
    EXPECT_THROW(sequence_logprob(m, pr, false), Error);
}

TEST(Decode, GreedyOnCyclicTableHasPeriodTwo) {
    BigramTableModel m(4, 64);
    m.set(0, 2, 1.0);
    m.set(2, 3, 1.0);
    m.set(3, 2, 1.0);
    auto r = decode(m, Tokens{0}, DecodeStrategy::greedy(), {.max_new_tokens = 9});
    EXPECT_EQ(r.tokens, (Tokens{2, 3, 2, 3, 2, 3, 2, 3, 2}));
}

TEST(Decode, StopsAtEosAndExcludesIt) {
    BigramTableModel m(4, 64);
    m.set(0, 2, 1.0);
    m.set(2, 1, 1.0);
    auto r = decode(m, Tokens{0}, DecodeStrategy::greedy(), {.max_new_tokens = 9, .eos = 1});
    EXPECT_EQ(r.tokens, (Tokens{2}));
    EXPECT_TRUE(r.hit_eos);
}

TEST(Decode, StopsAtModelContext) {
    BigramTableModel m(4, 5);
    auto r = decode(m, Tokens{0, 1}, DecodeStrategy::greedy(), {.max_new_tokens = 100});
    EXPECT_EQ(r.tokens.size(), 3u);
}

TEST(Decode, BlockingNeverRepeatsAnNgram) {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        auto m = random_model(300 + trial, 12, 1.0);
        auto prompt = random_tokens(rng, 3, 12);
        auto r = decode(m, prompt, DecodeStrategy::block(3), {.max_new_tokens = 13});
        Tokens seq(prompt);
        seq.insert(seq.end(), r.tokens.begin(), r.tokens.end());
        if (r.fallback_count == 0) {
            EXPECT_FALSE(has_repeated_ngram(seq, prompt.size(), 3)) << trial;
        }
    }
}

TEST(Decode, BlockingOnCyclicTableBreaksTheCycle) {
    BigramTableModel m(5, 64);
    m.set(0, 2, 2.0);
    m.set(2, 3, 2.0);
    m.set(3, 2, 2.0);
    auto plain = decode(m, Tokens{0}, DecodeStrategy::greedy(), {.max_new_tokens = 8});
    auto blocked = decode(m, Tokens{0}, DecodeStrategy::block(3), {.max_new_tokens = 8});
    Tokens seq{0};
    seq.insert(seq.end(), blocked.tokens.begin(), blocked.tokens.end());
    EXPECT_TRUE(has_repeated_ngram([&] { Tokens s{0}; s.insert(s.end(), plain.tokens.begin(), plain.tokens.end()); return s; }(), 1, 3));
    EXPECT_FALSE(has_repeated_ngram(seq, 1, 3));
}

TEST(Decode, AllBlockedFallsBackAndCounts) {
    BigramTableModel m(2, 64);
    auto r = decode(m, Tokens{0, 1}, DecodeStrategy::block(1), {.max_new_tokens = 3});
    EXPECT_EQ(r.fallback_count, 3);
    EXPECT_EQ(r.tokens, (Tokens{0, 0, 0}));
}

TEST(Decode, TinyTemperatureMatchesGreedy) {
    Rng rng(31);
    for (int trial = 0; trial < 10; ++trial) {
        auto m = random_model(500 + trial, 12, 1.0);
        auto prompt = random_tokens(rng, 2, 12);
        auto g = decode(m, prompt, DecodeStrategy::greedy(), {.max_new_tokens = 10});
        Rng sr = rng.derive("sample", {static_cast<std::uint64_t>(trial)});
        auto s = decode(m, prompt, DecodeStrategy::sample(1e-4), {.max_new_tokens = 10}, &sr);
        EXPECT_EQ(s.tokens, g.tokens) << trial;
    }
}

TEST(Decode, BannedTokensNeverAppear) {
    BigramTableModel m(4, 64);
    m.set(0, 2, 5.0);
    m.set(2, 2, 5.0);
    auto r = decode(m, Tokens{0}, DecodeStrategy::greedy(), {.max_new_tokens = 5, .banned = {2}});
    for (auto t : r.tokens) EXPECT_NE(t, 2);
}

TEST(Decode, RejectsBadArguments) {
    BigramTableModel m(4, 64);
    EXPECT_THROW(decode(m, Tokens{0}, DecodeStrategy::greedy(), {.max_new_tokens = 0}), Error);
    EXPECT_THROW(decode(m, Tokens{0}, DecodeStrategy::block(0), {}), Error);
    EXPECT_THROW(decode(m, Tokens{0}, DecodeStrategy::sample(0.5), {}), Error);
}
