// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvtier/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <string>

#include "kvtier/error.hpp"

namespace kvtier {

namespace {

void require_positive(double value, const char* name) {
    if (!(value > 0.0) || !std::isfinite(value)) {
        throw ConfigError(std::string("pipeline parameter ") + name + " must be a positive finite number");
    }
}

}  // namespace

void check_pipeline_params(const PipelineParams& p) {
    require_positive(p.T_c, "T_c");
    if (!(p.T_0 >= 0.0) || !std::isfinite(p.T_0)) throw ConfigError("pipeline parameter T_0 must be >= 0");
    require_positive(p.B, "B");
    require_positive(p.B_cold, "B_cold");
    require_positive(p.delta, "delta");
    if (p.delta > 1.0) throw ConfigError("pipeline parameter delta must be <= 1");
    require_positive(p.decompress_rate, "decompress_rate");
}

ThetaSolution solve_theta(double D, const PipelineParams& p) {
    if (!(D >= 0.0) || !std::isfinite(D)) throw PreconditionError("solve_theta: D must be a finite value >= 0");
    auto lhs = [&](double theta) { return p.T_0 + (D * (1.0 - theta) + D * theta * p.delta) / p.B; };
    auto rhs = [&](double theta) { return p.T_c + D * theta / p.decompress_rate; };

    ThetaSolution out;
    if (lhs(0.0) <= rhs(0.0)) return out;

    const double slope = D * (1.0 - p.delta) / p.B + D / p.decompress_rate;
    const double theta = (p.T_0 + D / p.B - p.T_c) / slope;
    if (theta <= 1.0) {
        out.theta = theta;
        return out;
    }
    out.theta = 1.0;
    out.feasible = false;
    out.residual_ms = lhs(1.0) - rhs(1.0);
    out.compression_ineffective = p.delta >= 1.0;
    return out;
}

std::string_view to_string(ScheduleMode mode) {
    switch (mode) {
        case ScheduleMode::kNone:
            return "none";
        case ScheduleMode::kPrefetch:
            return "prefetch";
        case ScheduleMode::kDtp:
            return "dtp";
    }
    return "unknown";
}

ScheduleMode parse_schedule_mode(std::string_view text) {
    if (text == "none") return ScheduleMode::kNone;
    if (text == "prefetch") return ScheduleMode::kPrefetch;
    if (text == "dtp") return ScheduleMode::kDtp;
    throw ConfigError("unknown schedule mode '" + std::string(text) + "' (expected none, prefetch or dtp)");
}

namespace {

LayerTiming layer_timing(const LayerLoad& load, const PipelineParams& p, double theta) {
    LayerTiming t;
    t.overhead_ms = p.T_0;
    t.eval_ms = load.eval_ms;
    t.cold_ms = load.D_cold / p.B_cold;
    t.warm_ms = (load.D_warm * (1.0 - theta) + load.D_warm * theta * p.delta) / p.B;
    t.compute_ms = p.T_c;
    t.decompress_ms = load.D_warm * theta / p.decompress_rate;
    t.theta = theta;
    return t;
}

/// Places the intervals and returns the makespan.
double lay_out(std::vector<LayerTiming>& layers, bool overlap) {
    double clock = 0.0;
    double prev_compute_start = 0.0;
    double prev_compute_end = 0.0;
    for (size_t l = 0; l < layers.size(); ++l) {
        LayerTiming& t = layers[l];
        if (l == 0) {
            t.load_start = 0.0;
        } else {
            t.load_start = overlap ? prev_compute_start : prev_compute_end;
        }
        t.compute_start = std::max(t.load_end(), prev_compute_end);
        t.idle_ms = t.compute_start - prev_compute_end;
        prev_compute_start = t.compute_start;
        prev_compute_end = t.compute_end();
        clock = std::max(clock, prev_compute_end);
    }
    return clock;
}

void finish(StepSchedule& s) {
    s.idle_ms = 0.0;
    for (const LayerTiming& t : s.layers) s.idle_ms += t.idle_ms;
}

}  // namespace

StepSchedule build_schedule(const std::vector<LayerLoad>& loads, const PipelineParams& params, ScheduleMode mode) {
    check_pipeline_params(params);
    for (const LayerLoad& l : loads) {
        if (!(l.D_cold >= 0.0) || !(l.D_warm >= 0.0) || !(l.eval_ms >= 0.0)) {
            throw PreconditionError("build_schedule: layer loads must be non-negative");
        }
    }
    StepSchedule s;
    s.mode = mode;
    s.layers.reserve(loads.size());
    for (const LayerLoad& l : loads) s.layers.push_back(layer_timing(l, params, 0.0));

    if (mode == ScheduleMode::kNone) {
        s.total_ms = lay_out(s.layers, false);
        finish(s);
        return s;
    }

    s.total_ms = lay_out(s.layers, true);
    if (mode == ScheduleMode::kDtp) {
        for (size_t l = 0; l < loads.size(); ++l) {
            PipelineParams local = params;
            local.T_0 = params.T_0 + loads[l].eval_ms + s.layers[l].cold_ms;
            const ThetaSolution sol = solve_theta(loads[l].D_warm, local);
            if (sol.theta <= 0.0) continue;
            std::vector<LayerTiming> trial = s.layers;
            trial[l] = layer_timing(loads[l], params, sol.theta);
            const double total = lay_out(trial, true);
            if (total <= s.total_ms) {
                s.layers = std::move(trial);
                s.total_ms = total;
            }
        }
        s.total_ms = lay_out(s.layers, true);
    }
    finish(s);
    return s;
}

std::vector<ModeSummary> compare_modes(const std::vector<LayerLoad>& loads, const PipelineParams& params) {
    std::vector<ModeSummary> out;
    for (ScheduleMode m : {ScheduleMode::kNone, ScheduleMode::kPrefetch, ScheduleMode::kDtp}) {
        const StepSchedule s = build_schedule(loads, params, m);
        out.push_back({m, s.total_ms, s.idle_ms});
    }
    return out;
}

void write_schedule_csv_header(std::ostream& out) {
    out << "step,layer,mode,eval_ms,cold_ms,warm_ms,compute_ms,decompress_ms,theta,idle_ms\n";
}

void write_schedule_csv_rows(const StepSchedule& schedule, uint32_t step, std::ostream& out) {
    const auto flags = out.flags();
    out << std::setprecision(17);
    for (size_t l = 0; l < schedule.layers.size(); ++l) {
        const LayerTiming& t = schedule.layers[l];
        out << step << ',' << l << ',' << to_string(schedule.mode) << ',' << t.overhead_ms + t.eval_ms << ','
            << t.cold_ms << ',' << t.warm_ms << ',' << t.compute_ms << ',' << t.decompress_ms << ',' << t.theta
            << ',' << t.idle_ms << '\n';
    }
    out.flags(flags);
}

}  // namespace kvtier
