// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kvtier/chunk_tree.hpp"
#include "kvtier/pipeline.hpp"
#include "kvtier/tiered_store.hpp"
#include "kvtier/trace.hpp"

namespace kvtier {

struct RunConfig {
    std::filesystem::path trace;
    ChunkPlanConfig plan;
    /// Zero capacities are derived from hot_fraction / warm_fraction of the total KV bytes.
    TierConfig tiers{.hot_capacity = 0, .warm_capacity = 0};
    /// B and B_cold are overwritten by the tier bandwidths.
    PipelineParams pipeline;
    double importance_rate = 0.10;
    double early_layer_rate = 0.50;
    bool iakm = true;
    bool lka = true;
    bool dtp = true;
    uint64_t seed = 0;
    double hot_fraction = 0.10;
    double warm_fraction = 0.30;
    /// Modeled cost of one importance evaluation (token score or chunk bound).
    double eval_ms_per_eval = 1.0e-4;
    /// Decoding steps to run; zero means every step in the trace.
    uint32_t max_steps = 0;
};

/// Throws ConfigError naming the offending field.
void check_run_config(const RunConfig& config);

/// Schedule used for the headline latency: dtp when enabled, otherwise none.
ScheduleMode run_schedule_mode(const RunConfig& config);

struct StepMetrics {
    uint32_t step = 0;
    uint32_t layer = 0;
    uint32_t k = 0;
    /// Mean over heads.
    double recall = 0.0;
    /// Summed over heads.
    uint64_t eval_count = 0;
    double desert_rate = 0.0;
    /// Desert rate recomputed from the final partitions; equals desert_rate.
    double desert_rate_check = 0.0;
    /// Mean cosine similarity of selected-KV and full-KV attention outputs.
    std::optional<double> output_similarity;
    /// Largest softmax mass left out of the selection over the heads.
    std::optional<double> dropped_mass;
    LayerLedger ledger;
    double r = 0.0;
    /// Modeled latency of the whole step in each mode.
    double latency_none_ms = 0.0;
    double latency_prefetch_ms = 0.0;
    double latency_dtp_ms = 0.0;
    double latency_ms = 0.0;
};

struct RunReport {
    TraceHeader shape;
    uint32_t steps = 0;
    ScheduleMode mode = ScheduleMode::kNone;
    /// One entry per (step, layer), step-major.
    std::vector<StepMetrics> rows;
    std::vector<StepSchedule> schedules;
    std::vector<TransferLedger> ledgers;
    uint64_t cold_write_bytes = 0;
};

/// Chunk size for a layer at a step: the early size for early layers and
/// early steps, otherwise the size implied by the planned chunk count.
uint32_t planned_chunk_size(const ChunkPlanConfig& plan, uint32_t layer, uint32_t step, uint32_t n_steps, uint32_t n,
                            double density);

/// Size of the storage chunks of a layer.
uint32_t storage_chunk_size(const ChunkPlanConfig& plan, uint32_t layer, uint32_t n, double density);

/// k = ceil(rate * n).
uint32_t top_k_count(double rate, uint32_t n);

RunReport run(const RunConfig& config, const AttentionTrace& trace);
/// Reads config.trace and runs it.
RunReport run(const RunConfig& config);

/// Softmax-weighted sum of the values of `tokens` for one query.
std::vector<double> attention_output(std::span<const float> query, const FloatRows& keys, const FloatRows& values,
                                     std::span<const uint32_t> tokens);
/// attention_output over every token.
std::vector<double> oracle_output(std::span<const float> query, const FloatRows& keys, const FloatRows& values);
double cosine_similarity(std::span<const double> a, std::span<const double> b);

struct MetricSummary {
    std::string field;
    double mean = 0.0;
    double p95 = 0.0;
};

/// Mean and nearest-rank 95th percentile of every numeric StepMetrics field.
std::vector<MetricSummary> summarize(const RunReport& report);

/// Writes steps.csv, summary.json-lines, schedule.csv and ledger.csv into `dir`.
void write_reports(const RunReport& report, const RunConfig& config, const std::filesystem::path& dir);
void write_steps_csv(const RunReport& report, std::ostream& out);
void write_summary(const RunReport& report, const RunConfig& config, std::ostream& out);

struct AblationRow {
    std::string variant;
    double latency_ms = 0.0;
    double eval_count = 0.0;
    double r = 0.0;
    double recall = 0.0;
    double desert_rate = 0.0;
};

/// Per-layer-row means of a report, as shown in the ablation table.
AblationRow ablation_row(const std::string& variant, const RunReport& report);

/// baseline, +IAKM, +LKA and ALL on one trace; each variant's reports go to
/// dir/<variant>/ and the table to dir/ablation.csv.
std::vector<AblationRow> ablate(const RunConfig& config, const AttentionTrace& trace, const std::filesystem::path& dir);
/// The flag settings of a named variant applied to `base`.
RunConfig ablation_variant(const RunConfig& base, const std::string& variant);
void write_ablation_csv(const std::vector<AblationRow>& rows, std::ostream& out);

/// Parses flat "key = value" text. Keys are RunConfig field names, nested
/// ones dotted (plan.default_chunk_size, tiers.hot_capacity, pipeline.T_c).
/// '#' starts a comment. Unknown keys and malformed values raise ConfigError.
void apply_config_text(RunConfig& config, const std::string& text);
void apply_config_value(RunConfig& config, const std::string& key, const std::string& value);
RunConfig load_config(const std::filesystem::path& path);

}  // namespace kvtier
