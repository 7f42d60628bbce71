// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvtier/engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kvtier/error.hpp"

namespace kvtier {

namespace {

constexpr double kMaxFallbackDensity = 0.99;

void require_rate(double value, const char* name) {
    if (!(value > 0.0 && value <= 1.0)) throw ConfigError(std::string(name) + " must lie in (0, 1]");
}

/// Configured density of a layer, else the selection rate capped below one.
double layer_density(const ChunkPlanConfig& plan, uint32_t layer, double density) {
    return layer < plan.rho.size() ? plan.rho[layer] : std::min(density, kMaxFallbackDensity);
}

/// Fraction of slots lying entirely inside the given (sorted, disjoint) ranges.
double desert_rate_of_ranges(std::span<const TokenRange> ranges, uint32_t n, uint32_t slot_tokens) {
    const size_t slots = (size_t{n} + slot_tokens - 1) / slot_tokens;
    if (slots == 0) return 0.0;
    size_t covered = 0;
    for (const TokenRange& r : ranges) {
        for (size_t s = r.start / slot_tokens; s * slot_tokens < r.end; ++s) {
            const uint64_t lo = s * slot_tokens;
            const uint64_t hi = std::min<uint64_t>(lo + slot_tokens, n);
            if (lo >= r.start && hi <= r.end) ++covered;
        }
    }
    return static_cast<double>(covered) / static_cast<double>(slots);
}

struct Accumulator {
    double recall = 0.0;
    double desert = 0.0;
    double desert_check = 0.0;
    double similarity = 0.0;
    double dropped = 0.0;
    uint64_t evals = 0;
};

}  // namespace

void check_run_config(const RunConfig& config) {
    require_rate(config.importance_rate, "importance_rate");
    require_rate(config.early_layer_rate, "early_layer_rate");
    check_plan_config(config.plan);
    if (!(config.hot_fraction > 0.0 && config.hot_fraction <= 1.0)) throw ConfigError("hot_fraction must lie in (0, 1]");
    if (!(config.warm_fraction > 0.0 && config.warm_fraction <= 1.0)) {
        throw ConfigError("warm_fraction must lie in (0, 1]");
    }
    if (!(config.eval_ms_per_eval >= 0.0) || !std::isfinite(config.eval_ms_per_eval)) {
        throw ConfigError("eval_ms_per_eval must be a finite value >= 0");
    }
    TierConfig tiers = config.tiers;
    tiers.hot_capacity = std::max<uint64_t>(tiers.hot_capacity, 1);
    tiers.warm_capacity = std::max<uint64_t>(tiers.warm_capacity, 1);
    check_tier_config(tiers);
    PipelineParams p = config.pipeline;
    p.B = config.tiers.bandwidth_hot_warm;
    p.B_cold = config.tiers.bandwidth_warm_cold;
    check_pipeline_params(p);
}

ScheduleMode run_schedule_mode(const RunConfig& config) {
    return config.dtp ? ScheduleMode::kDtp : ScheduleMode::kNone;
}

uint32_t top_k_count(double rate, uint32_t n) {
    const double k = std::ceil(rate * n - 1e-9);
    return static_cast<uint32_t>(std::clamp(k, 0.0, static_cast<double>(n)));
}

uint32_t storage_chunk_size(const ChunkPlanConfig& plan, uint32_t layer, uint32_t n, double density) {
    if (layer < plan.early_layers) return plan.early_chunk_size;
    const uint64_t padded = next_pow2(n);
    const uint32_t m =
        plan_chunk_count(n, layer_density(plan, layer, density), plan.early_chunk_size, plan.default_chunk_size);
    return static_cast<uint32_t>(padded / m);
}

uint32_t planned_chunk_size(const ChunkPlanConfig& plan, uint32_t layer, uint32_t step, uint32_t n_steps, uint32_t n,
                            double density) {
    const auto early_steps = static_cast<uint32_t>(std::floor(plan.early_steps_fraction * n_steps + 1e-9));
    if (step < early_steps) return plan.early_chunk_size;
    return storage_chunk_size(plan, layer, n, density);
}

std::vector<double> attention_output(std::span<const float> query, const FloatRows& keys, const FloatRows& values,
                                     std::span<const uint32_t> tokens) {
    if (values.rows() == 0) throw PreconditionError("attention_output: the trace carries no values");
    if (values.rows() != keys.rows()) throw PreconditionError("attention_output: key and value rows differ");
    if (tokens.empty()) throw PreconditionError("attention_output: empty token set");
    std::vector<double> logits;
    logits.reserve(tokens.size());
    double peak = -std::numeric_limits<double>::infinity();
    for (uint32_t t : tokens) {
        logits.push_back(token_logit(query, keys.row(t)));
        peak = std::max(peak, logits.back());
    }
    std::vector<double> out(values.dim(), 0.0);
    double denom = 0.0;
    for (size_t i = 0; i < tokens.size(); ++i) {
        const double w = std::exp(logits[i] - peak);
        denom += w;
        auto v = values.row(tokens[i]);
        for (size_t j = 0; j < out.size(); ++j) out[j] += w * v[j];
    }
    for (double& x : out) x /= denom;
    return out;
}

std::vector<double> oracle_output(std::span<const float> query, const FloatRows& keys, const FloatRows& values) {
    std::vector<uint32_t> all(keys.rows());
    for (uint32_t t = 0; t < all.size(); ++t) all[t] = t;
    return attention_output(query, keys, values, all);
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw PreconditionError("cosine_similarity: length mismatch");
    double dot = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 && nb == 0.0) return 1.0;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / std::sqrt(na * nb);
}

namespace {

double dropped_softmax_mass(std::span<const float> query, const FloatRows& keys, std::span<const uint32_t> selected) {
    std::vector<double> logits(keys.rows());
    double peak = -std::numeric_limits<double>::infinity();
    for (size_t t = 0; t < keys.rows(); ++t) {
        logits[t] = token_logit(query, keys.row(t));
        peak = std::max(peak, logits[t]);
    }
    double total = 0.0;
    for (double& x : logits) {
        x = std::exp(x - peak);
        total += x;
    }
    double kept = 0.0;
    for (uint32_t t : selected) kept += logits[t];
    return std::max(0.0, 1.0 - kept / total);
}

}  // namespace

RunReport run(const RunConfig& config, const AttentionTrace& trace) {
    check_run_config(config);
    const ValidationReport findings = validate(trace);
    if (!findings.clean()) {
        throw ValidationError("trace invalid at " + findings.findings.front().path + ": " +
                              findings.findings.front().message);
    }
    const TraceHeader& h = trace.header;
    const uint32_t n = h.n_context;
    const uint32_t steps = config.max_steps == 0 ? h.n_steps : std::min(config.max_steps, h.n_steps);

    StoreGeometry geometry;
    geometry.n_layers = h.n_layers;
    geometry.n_heads = h.n_heads;
    geometry.n_context = n;
    geometry.head_dim = h.head_dim;
    for (uint32_t l = 0; l < h.n_layers; ++l) {
        geometry.chunk_tokens.push_back(storage_chunk_size(config.plan, l, n, config.importance_rate));
    }

    TierConfig tiers = config.tiers;
    const uint64_t total_bytes = uint64_t{h.n_layers} * h.n_heads * n * geometry.token_bytes();
    if (tiers.hot_capacity == 0) {
        tiers.hot_capacity = std::max<uint64_t>(1, static_cast<uint64_t>(config.hot_fraction * total_bytes));
    }
    if (tiers.warm_capacity == 0) {
        tiers.warm_capacity = std::max<uint64_t>(1, static_cast<uint64_t>(config.warm_fraction * total_bytes));
    }
    PipelineParams params = config.pipeline;
    params.B = tiers.bandwidth_hot_warm;
    params.B_cold = tiers.bandwidth_warm_cold;

    TieredStore store(tiers, geometry);
    store.place_initial(trace);

    RunReport report;
    report.shape = h;
    report.steps = steps;
    report.mode = run_schedule_mode(config);

    const size_t slots = size_t{h.n_layers} * h.n_heads;
    std::vector<ChunkTree> trees(slots);
    std::vector<uint32_t> tree_chunk(slots, 0);

    for (uint32_t step = 0; step < steps; ++step) {
        store.begin_step(step);
        std::vector<LayerLoad> loads(h.n_layers);
        const size_t first_row = report.rows.size();
        for (uint32_t l = 0; l < h.n_layers; ++l) {
            const double rate = l < config.plan.early_layers ? config.early_layer_rate : config.importance_rate;
            const uint32_t k = top_k_count(rate, n);
            const uint32_t slot_tokens = geometry.chunk_tokens[l];
            Accumulator acc;
            for (uint32_t hd = 0; hd < h.n_heads; ++hd) {
                const FloatRows keys = trace.keys_of(l, hd);
                const auto query = trace.query(step, l, hd);
                const ResidencyLayout layout = store.layout(l, hd, config.lka);
                if (!config.lka) store.stage_cold(l, hd);
                StoreColdAccess cold(store, l, hd);

                SelectionResult result;
                double check = 0.0;
                try {
                    if (config.iakm) {
                        const size_t s = size_t{l} * h.n_heads + hd;
                        const uint32_t size = planned_chunk_size(config.plan, l, step, steps, n, config.importance_rate);
                        if (tree_chunk[s] != size) {
                            trees[s] = build_partition_by_size(n, size, keys);
                            tree_chunk[s] = size;
                        } else {
                            trees[s] = merge_desert(trees[s]);
                        }
                        align_to_residency(trees[s], layout, keys);
                        result = select_top_k(trees[s], query, k, keys, &cold);
                        check = desert_rate(trees[s], slot_tokens);
                    } else {
                        result = select_token_level(layout, query, k, keys, &cold);
                        check = desert_rate_of_ranges(result.desert_chunks, n, slot_tokens);
                    }
                } catch (const Error& e) {
                    throw Error("step " + std::to_string(step) + " layer " + std::to_string(l) + " head " +
                                std::to_string(hd) + ": " + e.what());
                }

                store.record_compute_transfer(l, hd, result.important_tokens);
                store.touch(l, hd, result.important_tokens);

                const std::vector<uint32_t> oracle = brute_force_top_k(query, keys, k);
                size_t hits = 0;
                for (size_t i = 0, j = 0; i < oracle.size() && j < result.important_tokens.size();) {
                    if (oracle[i] == result.important_tokens[j]) {
                        ++hits;
                        ++i;
                        ++j;
                    } else if (oracle[i] < result.important_tokens[j]) {
                        ++i;
                    } else {
                        ++j;
                    }
                }
                acc.recall += k == 0 ? 1.0 : static_cast<double>(hits) / k;
                acc.evals += result.eval_count;
                acc.desert += desert_rate(result.important_tokens, n, slot_tokens);
                acc.desert_check += check;
                if (h.has_values && k > 0) {
                    const FloatRows values = trace.values_of(l, hd);
                    const auto selected = attention_output(query, keys, values, result.important_tokens);
                    const auto full = oracle_output(query, keys, values);
                    acc.similarity += cosine_similarity(selected, full);
                    acc.dropped = std::max(acc.dropped, dropped_softmax_mass(query, keys, result.important_tokens));
                }
            }
            if (step > 0) store.record_writeback(l, uint64_t{h.n_heads} * geometry.token_bytes());

            StepMetrics m;
            m.step = step;
            m.layer = l;
            m.k = k;
            m.recall = acc.recall / h.n_heads;
            m.eval_count = acc.evals;
            m.desert_rate = acc.desert / h.n_heads;
            m.desert_rate_check = acc.desert_check / h.n_heads;
            if (h.has_values && k > 0) {
                m.output_similarity = acc.similarity / h.n_heads;
                m.dropped_mass = acc.dropped;
            }
            m.ledger = store.ledger().layers[l];
            m.r = transmission_ratio(store.ledger(), l);
            report.rows.push_back(m);

            loads[l].D_cold = static_cast<double>(m.ledger.abstract_bytes + m.ledger.cold_to_warm);
            loads[l].D_warm = static_cast<double>(m.ledger.warm_to_hot);
            loads[l].eval_ms = static_cast<double>(acc.evals) * config.eval_ms_per_eval;
        }

        StepSchedule chosen;
        double totals[3] = {0.0, 0.0, 0.0};
        for (ScheduleMode mode : {ScheduleMode::kNone, ScheduleMode::kPrefetch, ScheduleMode::kDtp}) {
            StepSchedule s = build_schedule(loads, params, mode);
            totals[static_cast<size_t>(mode)] = s.total_ms;
            if (mode == report.mode) chosen = std::move(s);
        }
        for (size_t i = first_row; i < report.rows.size(); ++i) {
            StepMetrics& m = report.rows[i];
            m.latency_none_ms = totals[0];
            m.latency_prefetch_ms = totals[1];
            m.latency_dtp_ms = totals[2];
            m.latency_ms = chosen.total_ms;
        }
        report.schedules.push_back(std::move(chosen));
        report.ledgers.push_back(store.ledger());
    }
    report.cold_write_bytes = store.cold_write_bytes();
    return report;
}

RunReport run(const RunConfig& config) { return run(config, read_trace(config.trace)); }

}  // namespace kvtier
