// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "kvtier/importance.hpp"
#include "kvtier/types.hpp"

namespace kvtier {

enum class ChunkState : uint8_t { kCandidate, kConfirmedImportant, kDesert };

std::string_view to_string(ChunkState state);

struct ChunkNode {
    /// May extend past the real context into sentinel padding.
    TokenRange range;
    ChunkBounds bounds;
    Tier residency = Tier::kWarm;
    ChunkState state = ChunkState::kCandidate;
    /// Arena indices of the two halves after a split, -1 for leaves.
    std::array<int32_t, 2> children{-1, -1};
    /// Only the abstract is local; the keys live on the cold tier.
    bool abstract_only = false;
    /// Extrema over the node's real tokens; empty for sentinel-only nodes.
    ChunkAbstract abstract;

    bool is_leaf() const { return children[0] < 0; }
};

/// Adaptive partition of one (layer, head) context. Tokens at or past
/// `n_real` are sentinels with -inf logits that are never selected.
class ChunkTree {
public:
    ChunkTree() = default;
    ChunkTree(uint32_t n_real, uint32_t n_padded) : n_real_(n_real), n_padded_(n_padded) {}

    uint32_t n_real() const { return n_real_; }
    uint32_t n_padded() const { return n_padded_; }

    std::vector<ChunkNode>& nodes() { return nodes_; }
    const std::vector<ChunkNode>& nodes() const { return nodes_; }
    std::vector<int32_t>& roots() { return roots_; }
    const std::vector<int32_t>& roots() const { return roots_; }

    int32_t add(ChunkNode node);
    /// Leaf indices in token order.
    std::vector<int32_t> leaves() const;
    /// Part of the node's range that holds real tokens (possibly empty).
    TokenRange real_range(const ChunkNode& node) const;

private:
    uint32_t n_real_ = 0;
    uint32_t n_padded_ = 0;
    std::vector<ChunkNode> nodes_;
    std::vector<int32_t> roots_;
};

struct ChunkPlanConfig {
    uint32_t default_chunk_size = 64;
    uint32_t early_chunk_size = 8;
    uint32_t early_layers = 2;
    double early_steps_fraction = 0.075;
    /// Offline per-layer important-token density estimates.
    std::vector<double> rho;
};

/// Throws ConfigError when chunk sizes are not powers of two or out of order.
void check_plan_config(const ChunkPlanConfig& config);

uint64_t next_pow2(uint64_t n);
bool is_pow2(uint64_t n);

/// Modeled evaluation count when n tokens start as m chunks under density rho:
///   A(m) = m * sum_{i=0}^{L-1} (2 rho)^i,  L = max(1, log2(n / m)).
double chunk_eval_cost(uint64_t n, uint64_t m, double rho);

/// Power-of-two chunk count minimizing chunk_eval_cost for the padded context,
/// clamped so that the chunk size stays within [min_chunk, max_chunk].
uint32_t plan_chunk_count(uint32_t n, double rho, uint32_t min_chunk = 8, uint32_t max_chunk = 64);

/// m uniform leaves over the context padded to a power of two.
ChunkTree build_partition(uint32_t n, uint32_t m, const FloatRows& keys);
/// Uniform leaves of `chunk_tokens` tokens over the padded context.
ChunkTree build_partition_by_size(uint32_t n, uint32_t chunk_tokens, const FloatRows& keys);

/// Cold-tier view used while selecting; implemented by the tiered store.
class ColdTierAccess {
public:
    virtual ~ColdTierAccess() = default;
    /// Pulls the range's KV from the cold tier. Throws on failure.
    virtual void fetch(TokenRange range) = 0;
};

/// Residency of fixed-size base chunks (the storage granularity) and the
/// abstracts of the cold ones.
struct ResidencyLayout {
    uint32_t chunk_tokens = 64;
    std::vector<Tier> tiers;
    /// One entry per base chunk; only cold entries need to be filled.
    std::vector<ChunkAbstract> cold_abstracts;
    /// Cold chunks are represented by their abstracts until fetched.
    bool abstracts_only = true;

    TokenRange chunk_range(size_t index, uint32_t n_real) const;
};

/// Re-cuts the tree so every cold base chunk is exactly one leaf (abstracts
/// are never split or merged) and refreshes leaf residency.
void align_to_residency(ChunkTree& tree, const ResidencyLayout& layout, const FloatRows& keys);

struct SelectionResult {
    std::vector<uint32_t> important_tokens;
    uint64_t eval_count = 0;
    std::vector<TokenRange> fetch_set;
    std::vector<TokenRange> desert_chunks;
};

/// Branch-and-bound exact top-k over the tree's leaves. The tree is updated
/// in place: split children are added, final leaf states are set.
SelectionResult select_top_k(ChunkTree& tree, std::span<const float> query, uint32_t k, const FloatRows& keys,
                             ColdTierAccess* cold);

/// Token-level exact top-k: every memory-resident token is scored; cold
/// abstract-only chunks are bounded and fetched only while they can still
/// contribute.
SelectionResult select_token_level(const ResidencyLayout& layout, std::span<const float> query, uint32_t k,
                                   const FloatRows& keys, ColdTierAccess* cold);

/// Seed for the next step: adjacent desert leaves coalesced, other leaves kept.
/// Abstract-only leaves never merge.
ChunkTree merge_desert(const ChunkTree& tree);

/// Fraction of fixed slots of `slot_tokens` real tokens that lie entirely in
/// desert leaves.
double desert_rate(const ChunkTree& tree, uint32_t slot_tokens);
/// Same metric computed from the selected token set alone.
double desert_rate(std::span<const uint32_t> important_tokens, uint32_t n, uint32_t slot_tokens);

/// Brute-force top-k by q.k with ties to the lower index; sorted ascending.
std::vector<uint32_t> brute_force_top_k(std::span<const float> query, const FloatRows& keys, uint32_t k);

/// One line per leaf: "start end state upper lower residency".
void dump_partition(const ChunkTree& tree, std::ostream& out);

}  // namespace kvtier
