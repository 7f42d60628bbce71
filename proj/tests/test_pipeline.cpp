// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "kvtier/error.hpp"
#include "kvtier/pipeline.hpp"
#include "oracles.hpp"

namespace kvtier {
namespace {

PipelineParams theta_params(double T0) {
    PipelineParams p;
    p.T_0 = T0;
    p.T_c = 10.0;
    p.B = 8.0;
    p.delta = 0.25;
    p.decompress_rate = 32.0;
    return p;
}

double lhs(double D, const PipelineParams& p, double theta) {
    return p.T_0 + (D * (1 - theta) + D * theta * p.delta) / p.B;
}
double rhs(double D, const PipelineParams& p, double theta) { return p.T_c + D * theta / p.decompress_rate; }

TEST(Theta, WorkedValues) {
    const ThetaSolution a = solve_theta(64.0, theta_params(4.0));
    EXPECT_NEAR(a.theta, 0.25, 1e-9);
    EXPECT_TRUE(a.feasible);

    const ThetaSolution b = solve_theta(64.0, theta_params(0.0));
    EXPECT_EQ(b.theta, 0.0);
    EXPECT_TRUE(b.feasible);

    const ThetaSolution c = solve_theta(64.0, theta_params(20.0));
    EXPECT_EQ(c.theta, 1.0);
    EXPECT_FALSE(c.feasible);
    EXPECT_NEAR(c.residual_ms, 10.0, 1e-9);
    EXPECT_FALSE(c.compression_ineffective);

    EXPECT_EQ(solve_theta(0.0, theta_params(4.0)).theta, 0.0);
    PipelineParams flat = theta_params(20.0);
    flat.delta = 1.0;
    EXPECT_TRUE(solve_theta(64.0, flat).compression_ineffective);
    EXPECT_THROW(solve_theta(-1.0, flat), PreconditionError);
}

TEST(Theta, SmallestSatisfyingFraction) {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 2000; ++i) {
        PipelineParams p;
        p.T_0 = 20 * u(rng);
        p.T_c = 0.1 + 20 * u(rng);
        p.B = 0.5 + 10 * u(rng);
        p.delta = 0.05 + 0.95 * u(rng);
        p.decompress_rate = 0.5 + 50 * u(rng);
        const double D = 200 * u(rng);
        const ThetaSolution s = solve_theta(D, p);
        ASSERT_GE(s.theta, 0.0);
        ASSERT_LE(s.theta, 1.0);
        if (s.feasible) {
            EXPECT_LE(lhs(D, p, s.theta), rhs(D, p, s.theta) + 1e-9);
            if (s.theta > 0.0) {
                const double below = std::max(0.0, s.theta - 1e-6);
                EXPECT_GT(lhs(D, p, below), rhs(D, p, below) - 1e-9);
                EXPECT_NEAR(lhs(D, p, s.theta), rhs(D, p, s.theta), 1e-9 * std::max(1.0, lhs(D, p, 0.0)));
            }
        } else {
            EXPECT_GT(lhs(D, p, 1.0), rhs(D, p, 1.0));
            EXPECT_NEAR(s.residual_ms, lhs(D, p, 1.0) - rhs(D, p, 1.0), 1e-9 * std::max(1.0, s.residual_ms));
        }
    }
}

TEST(Params, Validation) {
    PipelineParams p;
    EXPECT_NO_THROW(check_pipeline_params(p));
    p.delta = 1.5;
    EXPECT_THROW(check_pipeline_params(p), ConfigError);
    p = PipelineParams{};
    p.B = 0;
    EXPECT_THROW(check_pipeline_params(p), ConfigError);
    p = PipelineParams{};
    p.T_0 = -1;
    EXPECT_THROW(check_pipeline_params(p), ConfigError);
    EXPECT_EQ(parse_schedule_mode("dtp"), ScheduleMode::kDtp);
    EXPECT_THROW(parse_schedule_mode("eager"), ConfigError);
}

std::vector<LayerLoad> random_loads(std::mt19937_64& rng, const PipelineParams& p) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const size_t layers = 1 + rng() % 40;
    std::vector<LayerLoad> loads(layers);
    for (LayerLoad& l : loads) {
        l.D_warm = p.B * 20.0 * u(rng);
        l.D_cold = u(rng) < 0.5 ? 0.0 : p.B_cold * 5.0 * u(rng);
        l.eval_ms = 0.5 * u(rng);
    }
    return loads;
}

TEST(Schedule, ModesAreOrdered) {
    std::mt19937_64 rng(99);
    PipelineParams p;
    for (int i = 0; i < 1000; ++i) {
        const auto loads = random_loads(rng, p);
        const auto modes = compare_modes(loads, p);
        ASSERT_EQ(modes.size(), 3u);
        EXPECT_EQ(modes[0].mode, ScheduleMode::kNone);
        EXPECT_LE(modes[1].total_ms, modes[0].total_ms + 1e-9);
        EXPECT_LE(modes[2].total_ms, modes[1].total_ms + 1e-9);
    }
}

TEST(Schedule, PerLayerCalibration) {
    PipelineParams p;
    p.T_c = 3.125;
    p.T_0 = 0.0;
    std::vector<LayerLoad> loads(8, LayerLoad{0.0, 9.06 * p.B, 0.0});
    const StepSchedule s = build_schedule(loads, p, ScheduleMode::kPrefetch);
    EXPECT_NEAR(s.layers[0].idle_ms, 9.06, 1e-9);
    for (size_t l = 1; l < loads.size(); ++l) EXPECT_NEAR(s.layers[l].idle_ms, 5.935, 1e-9);
    EXPECT_NEAR(s.total_ms, 8 * 9.06 + 3.125, 1e-9);
}

TEST(Schedule, SingleLayerStep) {
    PipelineParams p;
    p.T_c = 100.0;
    const double eval = 1.75;
    const std::vector<LayerLoad> loads = {{0.0, 290.0 * p.B, eval}};
    EXPECT_DOUBLE_EQ(build_schedule(loads, p, ScheduleMode::kNone).total_ms, 390.0 + eval);
    EXPECT_DOUBLE_EQ(build_schedule(loads, p, ScheduleMode::kPrefetch).total_ms, 390.0 + eval);
}

TEST(Schedule, ZeroLoads) {
    PipelineParams p;
    std::vector<LayerLoad> loads(6);
    loads[0].eval_ms = 0.5;
    for (ScheduleMode m : {ScheduleMode::kNone, ScheduleMode::kPrefetch, ScheduleMode::kDtp}) {
        const StepSchedule s = build_schedule(loads, p, m);
        EXPECT_DOUBLE_EQ(s.total_ms, 0.5 + 6 * p.T_c);
        EXPECT_DOUBLE_EQ(s.idle_ms, 0.5);
    }
    EXPECT_DOUBLE_EQ(build_schedule({}, p, ScheduleMode::kDtp).total_ms, 0.0);
    EXPECT_THROW(build_schedule({LayerLoad{-1.0, 0.0, 0.0}}, p, ScheduleMode::kNone), PreconditionError);
}

TEST(Schedule, MonotoneInLoad) {
    std::mt19937_64 rng(5);
    PipelineParams p;
    for (int i = 0; i < 300; ++i) {
        auto loads = random_loads(rng, p);
        const double none = build_schedule(loads, p, ScheduleMode::kNone).total_ms;
        const double pre = build_schedule(loads, p, ScheduleMode::kPrefetch).total_ms;
        loads[rng() % loads.size()].D_warm += p.B * 3.0;
        EXPECT_GE(build_schedule(loads, p, ScheduleMode::kNone).total_ms, none);
        EXPECT_GE(build_schedule(loads, p, ScheduleMode::kPrefetch).total_ms, pre);
    }
}

// Events per layer: load start, load end, compute start, compute end.
double critical_path(const StepSchedule& s, bool overlap) {
    std::vector<oracle::Edge> edges;
    const size_t n = s.layers.size();
    for (size_t l = 0; l < n; ++l) {
        const LayerTiming& t = s.layers[l];
        edges.push_back({4 * l, 4 * l + 1, t.load_ms()});
        edges.push_back({4 * l + 1, 4 * l + 2, 0.0});
        edges.push_back({4 * l + 2, 4 * l + 3, t.busy_ms()});
        if (l + 1 < n) {
            edges.push_back({4 * l + 3, 4 * l + 6, 0.0});
            edges.push_back({overlap ? 4 * l + 2 : 4 * l + 3, 4 * l + 4, 0.0});
        }
    }
    return n == 0 ? 0.0 : oracle::longest_paths(4 * n, edges).back();
}

TEST(Schedule, MatchesLongestPathOracle) {
    std::mt19937_64 rng(77);
    PipelineParams p;
    for (int i = 0; i < 300; ++i) {
        const auto loads = random_loads(rng, p);
        for (ScheduleMode m : {ScheduleMode::kNone, ScheduleMode::kPrefetch, ScheduleMode::kDtp}) {
            const StepSchedule s = build_schedule(loads, p, m);
            EXPECT_NEAR(s.total_ms, critical_path(s, m != ScheduleMode::kNone), 1e-9) << to_string(m);
            for (const LayerTiming& t : s.layers) {
                EXPECT_GE(t.idle_ms, -1e-12);
                EXPECT_GE(t.compute_start + 1e-12, t.load_end());
            }
        }
    }
}

TEST(Schedule, CsvRows) {
    PipelineParams p;
    const StepSchedule s = build_schedule({{0, p.B, 0.25}, {0, 2 * p.B, 0}}, p, ScheduleMode::kPrefetch);
    std::ostringstream out;
    write_schedule_csv_header(out);
    write_schedule_csv_rows(s, 3, out);
    EXPECT_EQ(out.str(),
              "step,layer,mode,eval_ms,cold_ms,warm_ms,compute_ms,decompress_ms,theta,idle_ms\n"
              "3,0,prefetch,0.25,0,1,3.125,0,0,1.25\n"
              "3,1,prefetch,0,0,2,3.125,0,0,0\n");
}

}  // namespace
}  // namespace kvtier
