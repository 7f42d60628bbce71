// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kvtier/types.hpp"

namespace kvtier {

inline constexpr char kTraceMagic[4] = {'K', 'V', 'T', 'R'};
inline constexpr uint32_t kTraceVersion = 1;
inline constexpr size_t kTraceHeaderBytes = 32;
inline constexpr uint32_t kMaxHeadDim = 4096;
inline constexpr uint32_t kFlagHasValues = 1u;

struct TraceHeader {
    uint32_t version = kTraceVersion;
    uint32_t n_layers = 1;
    uint32_t n_heads = 1;
    uint32_t head_dim = 1;
    uint32_t n_context = 1;
    uint32_t n_steps = 1;
    bool has_values = false;

    size_t key_count() const { return size_t{n_layers} * n_heads * n_context * head_dim; }
    size_t query_count() const { return size_t{n_steps} * n_layers * n_heads * head_dim; }
    /// Exact file size implied by the header.
    size_t file_bytes() const;

    bool operator==(const TraceHeader&) const = default;
};

/// Keys and values are indexed [layer][head][token][dim], queries
/// [step][layer][head][dim]; all row-major.
struct AttentionTrace {
    TraceHeader header;
    std::vector<float> keys;
    std::vector<float> values;
    std::vector<float> queries;

    FloatRows keys_of(uint32_t layer, uint32_t head) const;
    FloatRows values_of(uint32_t layer, uint32_t head) const;
    std::span<const float> query(uint32_t step, uint32_t layer, uint32_t head) const;
    std::span<const float> key(uint32_t layer, uint32_t head, uint32_t token) const;
};

/// Controls the attention-desert structure of a synthetic trace.
struct DesertProfile {
    double desert_rate = 0.7;
    uint32_t n_hot_regions = 3;
    double score_gap = 1.0;
    uint64_t seed = 0;
    /// Per-layer hot-token density; when set it overrides 1 - desert_rate.
    std::optional<std::vector<double>> per_layer_density;
};

struct Finding {
    std::string path;
    std::string message;
};

struct ValidationReport {
    std::vector<Finding> findings;
    bool clean() const { return findings.empty(); }
};

/// Structural and numeric checks; never throws.
ValidationReport validate(const AttentionTrace& trace);

/// Throws ValidationError naming the first failing invariant.
void check_header(const TraceHeader& header);

/// Serializes to the little-endian .kvtr layout.
std::vector<uint8_t> encode_trace(const AttentionTrace& trace);
/// Parses a .kvtr image. With check_finite, any NaN/Inf raises ValidationError.
AttentionTrace decode_trace(std::span<const uint8_t> bytes, bool check_finite = true);

void write_trace(const AttentionTrace& trace, const std::filesystem::path& path);
AttentionTrace read_trace(const std::filesystem::path& path, bool check_finite = true);

/// Number of planted hot tokens for a context of n tokens at the given density.
uint32_t hot_token_count(double hot_density, uint32_t n);

/// Hot regions planted for one (layer, head), sorted by start.
std::vector<TokenRange> planted_hot_regions(const DesertProfile& profile, const TraceHeader& shape, uint32_t layer,
                                            uint32_t head);

/// Deterministic synthetic trace. Every hot-region token scores above every
/// desert token by at least score_gap (raw q.k) for every step, layer and head.
AttentionTrace generate_synthetic(const DesertProfile& profile, const TraceHeader& shape);

}  // namespace kvtier
