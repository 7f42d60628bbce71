// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string_view>
#include <vector>

namespace kvtier {

/// Latency model inputs. Times are in ms, bandwidths in bytes/ms.
struct PipelineParams {
    double T_c = 3.125;
    double T_0 = 0.0;
    double B = 16.0e6;
    double B_cold = 2.0e6;
    /// compressed size / original size
    double delta = 0.3125;
    /// original bytes decompressed per ms; t(x) = x / decompress_rate
    double decompress_rate = 8.0e6;
};

/// Throws ConfigError naming the first invalid field.
void check_pipeline_params(const PipelineParams& params);

struct ThetaSolution {
    double theta = 0.0;
    bool feasible = true;
    /// LHS - RHS of the hiding condition at theta = 1 when infeasible, else 0.
    double residual_ms = 0.0;
    /// delta = 1, so no theta can help.
    bool compression_ineffective = false;
};

/// Smallest theta in [0, 1] with
///   T_0 + (D (1 - theta) + D theta delta) / B <= T_c + D theta / decompress_rate,
/// taken at equality for interior solutions.
ThetaSolution solve_theta(double D, const PipelineParams& params);

/// Work of one layer in one decoding step.
struct LayerLoad {
    /// bytes read from the cold tier
    double D_cold = 0.0;
    /// bytes moved from the warm to the hot tier
    double D_warm = 0.0;
    double eval_ms = 0.0;
};

enum class ScheduleMode : uint8_t { kNone, kPrefetch, kDtp };

std::string_view to_string(ScheduleMode mode);
/// Accepts "none", "prefetch" or "dtp"; throws ConfigError otherwise.
ScheduleMode parse_schedule_mode(std::string_view text);

struct LayerTiming {
    /// start of the layer's eval + transfer leg
    double load_start = 0.0;
    double overhead_ms = 0.0;
    double eval_ms = 0.0;
    double cold_ms = 0.0;
    double warm_ms = 0.0;
    double compute_start = 0.0;
    double compute_ms = 0.0;
    double decompress_ms = 0.0;
    double theta = 0.0;
    /// Compute-side idle time between the previous layer's compute and this one's.
    double idle_ms = 0.0;

    double load_ms() const { return overhead_ms + eval_ms + cold_ms + warm_ms; }
    double load_end() const { return load_start + load_ms(); }
    double busy_ms() const { return decompress_ms + compute_ms; }
    double compute_end() const { return compute_start + busy_ms(); }
};

struct StepSchedule {
    ScheduleMode mode = ScheduleMode::kNone;
    std::vector<LayerTiming> layers;
    double total_ms = 0.0;
    double idle_ms = 0.0;
};

/// none: eval, transfer and compute run back to back per layer.
/// prefetch: layer l+1's eval and transfer start together with layer l's compute.
/// dtp: prefetch with each layer's warm leg partly compressed; a layer keeps
/// its solved theta only when that does not lengthen the step.
StepSchedule build_schedule(const std::vector<LayerLoad>& loads, const PipelineParams& params, ScheduleMode mode);

struct ModeSummary {
    ScheduleMode mode;
    double total_ms;
    double idle_ms;
};

/// One row per mode, in the order none, prefetch, dtp.
std::vector<ModeSummary> compare_modes(const std::vector<LayerLoad>& loads, const PipelineParams& params);

/// step, layer, mode, eval_ms, cold_ms, warm_ms, compute_ms, decompress_ms, theta, idle_ms
void write_schedule_csv_header(std::ostream& out);
void write_schedule_csv_rows(const StepSchedule& schedule, uint32_t step, std::ostream& out);

}  // namespace kvtier
