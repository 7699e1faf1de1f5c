// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>

#include "pcolab/corpus.hpp"
#include "pcolab/metrics.hpp"

using namespace pcolab;

namespace {

double repeat_rate(const std::vector<Sentence>& corpus) {
    std::size_t n = 0;
    for (const auto& s : corpus) n += repeat_at_n(s.prompt, s.response, 3) > 0;
    return static_cast<double>(n) / static_cast<double>(corpus.size());
}

}  // namespace

TEST(Corpus, SameSeedSameCorpus) {
    CorpusConfig cfg;
    Grammar g1(cfg, 7), g2(cfg, 7), g3(cfg, 8);
    auto a = g1.sample_corpus(50, Rng(1));
    auto b = g2.sample_corpus(50, Rng(1));
    auto c = g3.sample_corpus(50, Rng(1));
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].prompt, b[i].prompt);
        EXPECT_EQ(a[i].response, b[i].response);
        differs |= a[i].response != c[i].response;
    }
    EXPECT_TRUE(differs);
}

TEST(Corpus, ShapeOfSentences) {
    CorpusConfig cfg;
    Grammar g(cfg, 3);
    EXPECT_EQ(static_cast<int>(g.vocab().size()), cfg.vocab_size);
    auto corpus = g.sample_corpus(200, Rng(2));
    for (const auto& s : corpus) {
        ASSERT_EQ(static_cast<int>(s.prompt.size()), 2 + cfg.prompt_words);
        EXPECT_EQ(s.prompt[0], g.vocab().bos());
        const int topic = s.prompt[1] - 3;
        ASSERT_GE(topic, 0);
        ASSERT_LT(topic, cfg.n_topics);
        EXPECT_GE(static_cast<int>(s.response.size()), cfg.min_response);
        EXPECT_LE(static_cast<int>(s.response.size()), cfg.max_response);
        auto allowed = g.topic_words(topic);
        for (TokenId t : s.response) EXPECT_NE(std::find(allowed.begin(), allowed.end(), t), allowed.end());
    }
}

TEST(Corpus, RepetitionBiasControlsRepeats) {
    CorpusConfig cfg;
    Grammar clean(cfg, 4);
    EXPECT_LT(repeat_rate(clean.sample_corpus(500, Rng(5))), 0.05);
    cfg.repetition_bias = 1.0;
    Grammar loopy(cfg, 4);
    EXPECT_GT(repeat_rate(loopy.sample_corpus(500, Rng(5))), 0.2);
}

TEST(Corpus, FileRoundTrip) {
    CorpusConfig cfg;
    Grammar g(cfg, 9);
    auto corpus = g.sample_corpus(30, Rng(1));
    const auto path = (std::filesystem::temp_directory_path() / "pcolab_corpus_test.tsv").string();
    save_corpus(path, corpus, g.vocab());
    auto back = load_corpus(path, g.vocab());
    ASSERT_EQ(back.size(), corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        EXPECT_EQ(back[i].prompt, corpus[i].prompt);
        EXPECT_EQ(back[i].response, corpus[i].response);
    }
    std::filesystem::remove(path);
    EXPECT_THROW(load_corpus(path, g.vocab()), Error);
}

TEST(Corpus, RejectsTinyVocabulary) {
    CorpusConfig cfg;
    cfg.vocab_size = 10;
    EXPECT_THROW(cfg.validate(), Error);
    EXPECT_THROW(Grammar(cfg, 1), Error);
}

TEST(Corpus, TrainingExampleEndsWithEos) {
    CorpusConfig cfg;
    Grammar g(cfg, 1);
    Rng rng(1);
    auto s = g.sample(rng);
    auto ex = s.training_example(g.vocab().eos());
    EXPECT_EQ(ex.response_tokens.back(), g.vocab().eos());
    EXPECT_EQ(ex.response_tokens.size(), s.response.size() + 1);
}
