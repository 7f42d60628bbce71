// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <list>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "kvtier/chunk_tree.hpp"
#include "kvtier/importance.hpp"
#include "kvtier/trace.hpp"
#include "kvtier/types.hpp"

namespace kvtier {

struct TierConfig {
    uint64_t hot_capacity = 1;
    uint64_t warm_capacity = 1;
    std::filesystem::path cold_path = "cold_tier";
    /// bytes per ms between the hot and warm tiers
    double bandwidth_hot_warm = 16.0e6;
    /// bytes per ms between the warm and cold tiers
    double bandwidth_warm_cold = 2.0e6;
    /// Layers whose KV never goes to the cold tier.
    uint32_t early_layers_pinned = 2;
    /// Accesses within the window that exempt a token's chunk from cold eviction.
    uint32_t hot_frequency_threshold = 4;
    uint32_t frequency_window = 16;
    bool frequency_exemption = true;
};

void check_tier_config(const TierConfig& config);

/// Shape of the KV held by a store; chunk_tokens is the storage granularity per layer.
struct StoreGeometry {
    uint32_t n_layers = 1;
    uint32_t n_heads = 1;
    uint32_t n_context = 1;
    uint32_t head_dim = 1;
    std::vector<uint32_t> chunk_tokens;

    /// K and V in fp16.
    uint64_t token_bytes() const { return uint64_t{4} * head_dim; }
    /// max_key and min_key in trace float format.
    uint64_t abstract_bytes() const { return uint64_t{8} * head_dim; }
    size_t chunk_count(uint32_t layer) const;
};

struct ChunkRecord {
    TokenRange range;
    Tier tier = Tier::kWarm;
    uint64_t bytes = 0;
    bool replica_on_cold = false;
    bool pinned = false;
    uint64_t access_count = 0;
    uint64_t last_use = 0;
};

class ResidencyMap {
public:
    ResidencyMap() = default;
    explicit ResidencyMap(const StoreGeometry& geometry);

    std::vector<ChunkRecord>& records(uint32_t layer, uint32_t head) { return records_[slot(layer, head)]; }
    const std::vector<ChunkRecord>& records(uint32_t layer, uint32_t head) const {
        return records_[slot(layer, head)];
    }
    size_t chunk_index(uint32_t layer, uint32_t token) const { return token / chunk_tokens_[layer]; }
    uint64_t occupancy(Tier tier) const { return occupancy_[static_cast<size_t>(tier)]; }
    /// Cold-resident KV bytes summed over the heads of a layer.
    uint64_t cold_bytes(uint32_t layer) const;
    void set_tier(ChunkRecord& record, Tier tier);
    uint32_t n_layers() const { return static_cast<uint32_t>(chunk_tokens_.size()); }
    uint32_t n_heads() const { return n_heads_; }

private:
    size_t slot(uint32_t layer, uint32_t head) const { return size_t{layer} * n_heads_ + head; }

    uint32_t n_heads_ = 1;
    std::vector<uint32_t> chunk_tokens_;
    std::vector<std::vector<ChunkRecord>> records_;
    uint64_t occupancy_[3] = {0, 0, 0};
};

struct LayerLedger {
    uint64_t abstract_bytes = 0;
    uint64_t cold_to_warm = 0;
    uint64_t warm_to_hot = 0;
    uint64_t hot_to_warm = 0;
    uint64_t fetch_ops = 0;
    /// Cold-resident KV bytes when the step began.
    uint64_t cold_resident_bytes = 0;
};

/// Per-step transfer counters, reset by TieredStore::begin_step.
struct TransferLedger {
    uint32_t step = 0;
    std::vector<LayerLedger> layers;
};

/// (abstract bytes + cold KV fetched) / cold-resident KV bytes for the layer;
/// zero when nothing is cold.
double transmission_ratio(const TransferLedger& ledger, uint32_t layer);

/// CSV header and one row per layer: step, layer, abstract_bytes, cold_to_warm, warm_to_hot, hot_to_warm, r
void write_ledger_csv_header(std::ostream& out);
void write_ledger_csv_rows(const TransferLedger& ledger, std::ostream& out);

/// Sliding-window access counts per token.
class FrequencyTable {
public:
    FrequencyTable() = default;
    FrequencyTable(uint32_t n_tokens, uint32_t window);

    void touch(uint32_t token, uint32_t step);
    /// Accesses within the window ending at `step`.
    uint32_t count(uint32_t token, uint32_t step) const;
    uint32_t max_count(TokenRange range, uint32_t step) const;
    uint32_t window() const { return window_; }

private:
    uint32_t window_ = 16;
    std::vector<uint64_t> masks_;
    std::vector<uint32_t> last_step_;
};

struct ColdAbstract {
    size_t chunk_index = 0;
    TokenRange range;
    ChunkAbstract abstract;
};

/// Raw fp16 K and V for one chunk, as read from the cold tier.
struct ChunkPayload {
    TokenRange range;
    std::vector<uint16_t> keys;
    std::vector<uint16_t> values;
};

class TieredStore {
public:
    TieredStore(TierConfig config, StoreGeometry geometry);
    ~TieredStore();
    TieredStore(const TieredStore&) = delete;
    TieredStore& operator=(const TieredStore&) = delete;

    /// Pinned layers fill hot then warm. Remaining chunks fill hot, then warm,
    /// then cold in order of descending prior (ties by layer, head, start).
    /// Every chunk of an unpinned layer gets a cold replica and an abstract
    /// record. `prior`, when given, is indexed [layer * n_heads + head][chunk].
    void place_initial(const AttentionTrace& trace, const std::vector<std::vector<double>>* prior = nullptr);

    void begin_step(uint32_t step);

    /// Reads the abstracts of the currently cold chunks of (layer, head).
    std::vector<ColdAbstract> load_abstracts(uint32_t layer, uint32_t head);

    /// Tier of every base chunk plus, when with_abstracts, the cold abstracts.
    ResidencyLayout layout(uint32_t layer, uint32_t head, bool with_abstracts);

    /// Moves a cold chunk to the warm tier, evicting LRU warm chunks if needed.
    ChunkPayload fetch_chunk(uint32_t layer, uint32_t head, TokenRange range);
    /// Reads every cold chunk of (layer, head) for evaluation without changing residency.
    void stage_cold(uint32_t layer, uint32_t head);

    /// Accounts the warm-to-hot transfer of selected tokens not resident hot.
    void record_compute_transfer(uint32_t layer, uint32_t head, std::span<const uint32_t> tokens);
    void record_writeback(uint32_t layer, uint64_t bytes);

    void touch(uint32_t layer, uint32_t head, std::span<const uint32_t> tokens);
    bool frequency_exempt(uint32_t layer, uint32_t head, TokenRange range) const;

    const TransferLedger& ledger() const { return ledger_; }
    const ResidencyMap& residency() const { return residency_; }
    const StoreGeometry& geometry() const { return geometry_; }
    const TierConfig& config() const { return config_; }
    const FrequencyTable& frequency(uint32_t layer, uint32_t head) const;
    /// KV bytes written to the cold tier by evictions (zero while replicas exist).
    uint64_t cold_write_bytes() const { return cold_write_bytes_; }

    std::filesystem::path data_path(uint32_t layer, uint32_t head) const;
    std::filesystem::path abstract_path(uint32_t layer, uint32_t head) const;

private:
    struct Files;

    struct LruEntry {
        uint32_t layer;
        uint32_t head;
        size_t chunk;
    };

    bool pinned(uint32_t layer) const { return layer < config_.early_layers_pinned; }
    size_t slot(uint32_t layer, uint32_t head) const { return size_t{layer} * geometry_.n_heads + head; }
    size_t record_id(uint32_t layer, uint32_t head, size_t chunk) const { return record_base_[slot(layer, head)] + chunk; }
    ChunkPayload read_record(uint32_t layer, uint32_t head, size_t chunk);
    /// Frees warm space for `bytes`; false when no victim can be found.
    bool evict_for(uint64_t bytes, size_t incoming_id);
    void mark_used(uint32_t layer, uint32_t head, size_t chunk);
    void write_cold_files(const AttentionTrace& trace, uint32_t layer, uint32_t head);
    Files& files(uint32_t layer, uint32_t head);

    TierConfig config_;
    StoreGeometry geometry_;
    ResidencyMap residency_;
    TransferLedger ledger_;
    std::vector<FrequencyTable> frequency_;
    std::vector<std::unique_ptr<Files>> files_;
    std::vector<size_t> record_base_;
    /// Warm unpinned chunks, least recently used first.
    std::list<LruEntry> lru_;
    std::vector<std::optional<std::list<LruEntry>::iterator>> lru_pos_;
    uint64_t tick_ = 0;
    uint64_t cold_write_bytes_ = 0;
    uint32_t step_ = 0;
};

/// ColdTierAccess bound to one (layer, head) of a store.
class StoreColdAccess : public ColdTierAccess {
public:
    StoreColdAccess(TieredStore& store, uint32_t layer, uint32_t head) : store_(store), layer_(layer), head_(head) {}
    void fetch(TokenRange range) override { store_.fetch_chunk(layer_, head_, range); }

private:
    TieredStore& store_;
    uint32_t layer_;
    uint32_t head_;
};

}  // namespace kvtier
