// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "kvtier/types.hpp"

namespace kvtier {

enum class ScoreMode {
    kSoftmax,  ///< softmax(q.k / sqrt(d)) over the scored keys
    kLogit,    ///< q.k / sqrt(d)
};

struct TokenScore {
    uint32_t token_index = 0;
    double score = 0.0;
};

struct ChunkBounds {
    double upper = 0.0;
    double lower = 0.0;
};

/// Element-wise extrema of the keys of a contiguous chunk.
struct ChunkAbstract {
    std::vector<float> max_key;
    std::vector<float> min_key;
    uint32_t chunk_len = 0;

    size_t dim() const { return max_key.size(); }
};

/// Scores every row of `keys` against `query`. In softmax mode the scores of
/// one call sum to one.
std::vector<TokenScore> score_tokens(std::span<const float> query, const FloatRows& keys, ScoreMode mode);

/// q.k / sqrt(d) without validation; the hot path of selection.
double token_logit(std::span<const float> query, std::span<const float> key);

/// Abstract of rows [first, first + count) of `keys`.
ChunkAbstract make_abstract(const FloatRows& keys, size_t first, size_t count);
ChunkAbstract make_abstract(const FloatRows& keys);

/// Abstract of the union of two chunks.
ChunkAbstract merge_abstracts(const ChunkAbstract& a, const ChunkAbstract& b);

/// Sign-aware bound on q.k / sqrt(d) over every key inside the abstract's box:
///   upper = sum_i max(q_i * max_i, q_i * min_i) / sqrt(d)
///   lower = sum_i min(q_i * max_i, q_i * min_i) / sqrt(d)
/// In softmax mode both are mapped through exp(x - log_normalizer), which
/// bounds the normalized weight when log_normalizer is the log-sum-exp of all
/// logits of the step.
ChunkBounds bound_chunk(std::span<const float> query, const ChunkAbstract& abstract, ScoreMode mode,
                        double log_normalizer = 0.0);

/// Total order used for top-k: higher score first, ties to the lower token index.
struct RankKey {
    double score;
    uint32_t token;

    friend bool operator>(const RankKey& a, const RankKey& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.token < b.token;
    }
    friend bool operator<(const RankKey& a, const RankKey& b) { return b > a; }
    bool operator==(const RankKey&) const = default;
};

}  // namespace kvtier
