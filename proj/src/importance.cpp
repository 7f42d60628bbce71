// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvtier/importance.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kvtier/error.hpp"

namespace kvtier {

namespace {

void require_finite(std::span<const float> v, const char* what) {
    for (float x : v) {
        if (!std::isfinite(x)) throw ValidationError(std::string("non-finite value in ") + what);
    }
}

}  // namespace

double token_logit(std::span<const float> query, std::span<const float> key) {
    double acc = 0.0;
    for (size_t i = 0; i < query.size(); ++i) acc += static_cast<double>(query[i]) * key[i];
    return acc / std::sqrt(static_cast<double>(query.size()));
}

std::vector<TokenScore> score_tokens(std::span<const float> query, const FloatRows& keys, ScoreMode mode) {
    if (keys.rows() == 0) throw PreconditionError("score_tokens: no keys");
    if (query.size() != keys.dim()) {
        throw PreconditionError("score_tokens: query has " + std::to_string(query.size()) + " dims, keys have " +
                                std::to_string(keys.dim()));
    }
    require_finite(query, "query");
    require_finite(keys.data(), "keys");

    std::vector<TokenScore> out(keys.rows());
    double peak = -std::numeric_limits<double>::infinity();
    for (size_t t = 0; t < keys.rows(); ++t) {
        out[t] = {static_cast<uint32_t>(t), token_logit(query, keys.row(t))};
        peak = std::max(peak, out[t].score);
    }
    if (mode == ScoreMode::kLogit) return out;

    double denom = 0.0;
    for (auto& s : out) {
        s.score = std::exp(s.score - peak);
        denom += s.score;
    }
    for (auto& s : out) s.score /= denom;
    return out;
}

ChunkAbstract make_abstract(const FloatRows& keys, size_t first, size_t count) {
    if (count == 0) throw PreconditionError("make_abstract: empty chunk");
    if (first + count > keys.rows()) throw PreconditionError("make_abstract: chunk exceeds key rows");
    ChunkAbstract a;
    auto head = keys.row(first);
    a.max_key.assign(head.begin(), head.end());
    a.min_key.assign(head.begin(), head.end());
    a.chunk_len = static_cast<uint32_t>(count);
    for (size_t t = first + 1; t < first + count; ++t) {
        auto k = keys.row(t);
        for (size_t i = 0; i < k.size(); ++i) {
            a.max_key[i] = std::max(a.max_key[i], k[i]);
            a.min_key[i] = std::min(a.min_key[i], k[i]);
        }
    }
    return a;
}

ChunkAbstract make_abstract(const FloatRows& keys) { return make_abstract(keys, 0, keys.rows()); }

ChunkAbstract merge_abstracts(const ChunkAbstract& a, const ChunkAbstract& b) {
    if (a.dim() != b.dim()) throw PreconditionError("merge_abstracts: dimension mismatch");
    ChunkAbstract out = a;
    for (size_t i = 0; i < a.dim(); ++i) {
        out.max_key[i] = std::max(a.max_key[i], b.max_key[i]);
        out.min_key[i] = std::min(a.min_key[i], b.min_key[i]);
    }
    out.chunk_len = a.chunk_len + b.chunk_len;
    return out;
}

ChunkBounds bound_chunk(std::span<const float> query, const ChunkAbstract& abstract, ScoreMode mode,
                        double log_normalizer) {
    if (query.size() != abstract.dim()) {
        throw PreconditionError("bound_chunk: query has " + std::to_string(query.size()) + " dims, abstract has " +
                                std::to_string(abstract.dim()));
    }
    double hi = 0.0;
    double lo = 0.0;
    for (size_t i = 0; i < query.size(); ++i) {
        const double q = query[i];
        const double a = q * abstract.max_key[i];
        const double b = q * abstract.min_key[i];
        hi += std::max(a, b);
        lo += std::min(a, b);
    }
    const double scale = std::sqrt(static_cast<double>(query.size()));
    ChunkBounds bounds{hi / scale, lo / scale};
    if (mode == ScoreMode::kSoftmax) {
        bounds.upper = std::exp(bounds.upper - log_normalizer);
        bounds.lower = std::exp(bounds.lower - log_normalizer);
    }
    return bounds;
}

}  // namespace kvtier
