// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "kvtier/error.hpp"
#include "kvtier/importance.hpp"
#include "oracles.hpp"

namespace kvtier {
namespace {

FloatRows rows(const std::vector<float>& data, size_t dim) { return FloatRows(data, data.size() / dim, dim); }

TEST(ScoreTokens, IdenticalKeysGiveUniformSoftmax) {
    const std::vector<float> keys = {0.3f, -1.0f, 0.3f, -1.0f, 0.3f, -1.0f, 0.3f, -1.0f};
    const std::vector<float> q = {2.0f, 0.5f};
    for (const TokenScore& s : score_tokens(q, rows(keys, 2), ScoreMode::kSoftmax)) EXPECT_DOUBLE_EQ(s.score, 0.25);
}

TEST(ScoreTokens, LogitAndSoftmaxHandValues) {
    const std::vector<float> keys = {1, 1, 1, 1, 0, 0, 0, 0};
    const std::vector<float> q = {1, 1, 1, 1};
    const auto logits = score_tokens(q, rows(keys, 4), ScoreMode::kLogit);
    EXPECT_DOUBLE_EQ(logits[0].score, 2.0);
    EXPECT_DOUBLE_EQ(logits[1].score, 0.0);
    const auto soft = score_tokens(q, rows(keys, 4), ScoreMode::kSoftmax);
    const double e2 = std::exp(2.0);
    EXPECT_NEAR(soft[0].score, e2 / (e2 + 1.0), 1e-15);
    EXPECT_NEAR(soft[1].score, 1.0 / (e2 + 1.0), 1e-15);
    EXPECT_NEAR(soft[0].score, 0.8808, 5e-5);
    EXPECT_NEAR(soft[0].score + soft[1].score, 1.0, 1e-12);
}

TEST(ScoreTokens, SoftmaxSumsToOneOnRandomInputs) {
    std::mt19937_64 rng(1);
    std::normal_distribution<float> g(0.0f, 3.0f);
    for (int trial = 0; trial < 200; ++trial) {
        const size_t d = 1 + rng() % 64;
        const size_t n = 1 + rng() % 300;
        std::vector<float> keys(n * d);
        std::vector<float> q(d);
        for (float& x : keys) x = g(rng);
        for (float& x : q) x = g(rng);
        double sum = 0.0;
        for (const TokenScore& s : score_tokens(q, rows(keys, d), ScoreMode::kSoftmax)) {
            EXPECT_GE(s.score, 0.0);
            EXPECT_LE(s.score, 1.0);
            sum += s.score;
        }
        EXPECT_NEAR(sum, 1.0, 1e-9);
    }
}

TEST(ScoreTokens, RejectsBadInput) {
    const std::vector<float> keys = {1, 2, 3, 4};
    EXPECT_THROW(score_tokens(std::vector<float>{1, 2, 3}, rows(keys, 2), ScoreMode::kLogit), PreconditionError);
    EXPECT_THROW(score_tokens(std::vector<float>{1, NAN}, rows(keys, 2), ScoreMode::kLogit), ValidationError);
    EXPECT_THROW(score_tokens(std::vector<float>{1, 2}, FloatRows(), ScoreMode::kLogit), PreconditionError);
}

TEST(Abstract, ElementWiseExtrema) {
    const std::vector<float> keys = {1, 0, 0, 1};
    const ChunkAbstract a = make_abstract(rows(keys, 2));
    EXPECT_EQ(a.max_key, (std::vector<float>{1, 1}));
    EXPECT_EQ(a.min_key, (std::vector<float>{0, 0}));
    EXPECT_EQ(a.chunk_len, 2u);

    const std::vector<float> single = {3, -2};
    const ChunkAbstract s = make_abstract(rows(single, 2));
    EXPECT_EQ(s.max_key, single);
    EXPECT_EQ(s.min_key, single);

    // Idempotent when re-applied to its own extrema.
    std::vector<float> box = a.max_key;
    box.insert(box.end(), a.min_key.begin(), a.min_key.end());
    const ChunkAbstract again = make_abstract(rows(box, 2));
    EXPECT_EQ(again.max_key, a.max_key);
    EXPECT_EQ(again.min_key, a.min_key);

    EXPECT_THROW(make_abstract(rows(keys, 2), 1, 0), PreconditionError);
}

TEST(Abstract, MergeCoversBothChildren) {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<float> u(-5.0f, 5.0f);
    std::vector<float> keys(40 * 8);
    for (float& x : keys) x = u(rng);
    const FloatRows r = rows(keys, 8);
    const ChunkAbstract left = make_abstract(r, 0, 17);
    const ChunkAbstract right = make_abstract(r, 17, 23);
    const ChunkAbstract merged = merge_abstracts(left, right);
    const ChunkAbstract whole = make_abstract(r);
    EXPECT_EQ(merged.max_key, whole.max_key);
    EXPECT_EQ(merged.min_key, whole.min_key);
    EXPECT_EQ(merged.chunk_len, 40u);
    for (size_t i = 0; i < 8; ++i) {
        EXPECT_GE(merged.max_key[i], std::max(left.max_key[i], right.max_key[i]));
        EXPECT_LE(merged.min_key[i], std::min(left.min_key[i], right.min_key[i]));
    }
}

TEST(Bounds, HandExamplesWithScaleFolded) {
    // With d = 2 the bound divides by sqrt(2); multiplying back recovers the
    // unscaled hand arithmetic.
    const std::vector<float> keys = {1, 0, 0, 1};
    const ChunkAbstract a = make_abstract(rows(keys, 2));
    const double s = std::sqrt(2.0);
    const ChunkBounds b1 = bound_chunk(std::vector<float>{2, 1}, a, ScoreMode::kLogit);
    EXPECT_NEAR(b1.upper * s, 3.0, 1e-12);
    EXPECT_NEAR(b1.lower * s, 0.0, 1e-12);
    const ChunkBounds b2 = bound_chunk(std::vector<float>{-1, 2}, a, ScoreMode::kLogit);
    EXPECT_NEAR(b2.upper * s, 2.0, 1e-12);
    EXPECT_NEAR(b2.lower * s, -1.0, 1e-12);
}

TEST(Bounds, SingletonIsExact) {
    std::mt19937_64 rng(2);
    std::normal_distribution<float> g;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<float> k(64), q(64);
        for (float& x : k) x = g(rng);
        for (float& x : q) x = g(rng);
        const ChunkBounds b = bound_chunk(q, make_abstract(rows(k, 64)), ScoreMode::kLogit);
        const double exact = oracle::logit(q, k);
        EXPECT_NEAR(b.upper, exact, 1e-12);
        EXPECT_NEAR(b.lower, exact, 1e-12);
    }
}

TEST(Bounds, SoundOnRandomChunks) {
    std::mt19937_64 rng(3);
    std::normal_distribution<float> g(0.0f, 2.0f);
    for (int trial = 0; trial < 20000; ++trial) {
        const size_t d = trial % 2 == 0 ? 4 : 64;
        const size_t len = 1 + rng() % 128;
        std::vector<float> keys(len * d), q(d);
        for (float& x : keys) x = g(rng);
        for (float& x : q) x = g(rng);
        const FloatRows r = rows(keys, d);
        const ChunkBounds b = bound_chunk(q, make_abstract(r), ScoreMode::kLogit);
        ASSERT_LE(b.lower, b.upper);
        for (size_t t = 0; t < len; ++t) {
            const double s = oracle::logit(q, r.row(t));
            ASSERT_LE(b.lower - 1e-9, s);
            ASSERT_LE(s, b.upper + 1e-9);
        }
    }
}

TEST(Bounds, SoftmaxModeBoundsNormalizedWeights) {
    std::mt19937_64 rng(4);
    std::normal_distribution<float> g;
    std::vector<float> keys(50 * 8), q(8);
    for (float& x : keys) x = g(rng);
    for (float& x : q) x = g(rng);
    const FloatRows r = rows(keys, 8);
    double peak = -1e300;
    for (size_t t = 0; t < 50; ++t) peak = std::max(peak, oracle::logit(q, r.row(t)));
    double z = 0.0;
    for (size_t t = 0; t < 50; ++t) z += std::exp(oracle::logit(q, r.row(t)) - peak);
    const double lse = peak + std::log(z);
    const auto weights = score_tokens(q, r, ScoreMode::kSoftmax);
    const ChunkBounds b = bound_chunk(q, make_abstract(r, 10, 20), ScoreMode::kSoftmax, lse);
    for (size_t t = 10; t < 30; ++t) {
        EXPECT_LE(b.lower, weights[t].score + 1e-12);
        EXPECT_GE(b.upper, weights[t].score - 1e-12);
    }
}

TEST(Bounds, DimensionMismatchThrows) {
    const std::vector<float> keys = {1, 0};
    EXPECT_THROW(bound_chunk(std::vector<float>{1, 2, 3}, make_abstract(rows(keys, 2)), ScoreMode::kLogit),
                 PreconditionError);
}

TEST(RankKey, HigherScoreThenLowerIndexWins) {
    EXPECT_TRUE((RankKey{2.0, 9}) > (RankKey{1.0, 0}));
    EXPECT_TRUE((RankKey{1.0, 3}) > (RankKey{1.0, 4}));
    EXPECT_FALSE((RankKey{1.0, 4}) > (RankKey{1.0, 4}));
    EXPECT_TRUE((RankKey{1.0, 4}) < (RankKey{1.0, 3}));
}

}  // namespace
}  // namespace kvtier
