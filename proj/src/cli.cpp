// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvtier/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "kvtier/codec.hpp"
#include "kvtier/engine.hpp"
#include "kvtier/error.hpp"
#include "kvtier/fp16.hpp"
#include "kvtier/pipeline.hpp"
#include "kvtier/trace.hpp"

namespace kvtier {

namespace {

uint64_t seed_fallback() {
    if (const char* env = std::getenv("KVTIER_SEED")) {
        try {
            return std::stoull(env);
        } catch (const std::exception&) {
            throw ConfigError(std::string("KVTIER_SEED is not an unsigned integer: ") + env);
        }
    }
    return 0;
}

/// Flags shared by run and ablate; each is applied only when given explicitly.
struct RunFlags {
    std::string trace;
    std::string config;
    std::string out = "results";
    double importance_rate = 0.0;
    double early_layer_rate = 0.0;
    uint32_t chunk_size = 0;
    uint32_t early_chunk_size = 0;
    uint32_t early_layers = 0;
    uint32_t pinned_layers = 0;
    uint64_t hot_capacity = 0;
    uint64_t warm_capacity = 0;
    std::string cold_path;
    uint32_t max_steps = 0;
    uint64_t seed = 0;
    std::string iakm;
    std::string lka;
    std::string dtp;
    std::vector<std::string> sets;

    struct Options {
        CLI::Option* trace;
        CLI::Option* importance_rate;
        CLI::Option* early_layer_rate;
        CLI::Option* chunk_size;
        CLI::Option* early_chunk_size;
        CLI::Option* early_layers;
        CLI::Option* pinned_layers;
        CLI::Option* hot_capacity;
        CLI::Option* warm_capacity;
        CLI::Option* cold_path;
        CLI::Option* max_steps;
        CLI::Option* seed;
        CLI::Option* iakm;
        CLI::Option* lka;
        CLI::Option* dtp;
    } opt{};

    void attach(CLI::App* app, bool with_modes) {
        opt.trace = app->add_option("--trace", trace, "Input .kvtr trace")->required();
        app->add_option("--config", config, "key = value config file");
        app->add_option("--out", out, "Output directory")->capture_default_str();
        opt.importance_rate = app->add_option("--importance-rate", importance_rate, "Fraction of tokens selected");
        opt.early_layer_rate = app->add_option("--early-layer-rate", early_layer_rate, "Selection rate of early layers");
        opt.chunk_size = app->add_option("--chunk-size", chunk_size, "Default initial chunk size (power of two)");
        opt.early_chunk_size = app->add_option("--early-chunk-size", early_chunk_size, "Chunk size of early layers/steps");
        opt.early_layers = app->add_option("--early-layers", early_layers, "Layers using the early chunk size and rate");
        opt.pinned_layers = app->add_option("--pinned-layers", pinned_layers, "Layers never stored on the cold tier");
        opt.hot_capacity = app->add_option("--hot-capacity", hot_capacity, "Hot tier bytes");
        opt.warm_capacity = app->add_option("--warm-capacity", warm_capacity, "Warm tier bytes");
        opt.cold_path = app->add_option("--cold-path", cold_path, "Cold tier directory");
        opt.max_steps = app->add_option("--max-steps", max_steps, "Decoding steps to run (0 = all)");
        opt.seed = app->add_option("--seed", seed, "Seed (falls back to KVTIER_SEED)");
        if (with_modes) {
            const std::vector<std::string> onoff = {"on", "off"};
            opt.iakm = app->add_option("--iakm", iakm, "Chunk-tree selection")->check(CLI::IsMember(onoff));
            opt.lka = app->add_option("--lka", lka, "Abstract-first cold access")->check(CLI::IsMember(onoff));
            opt.dtp = app->add_option("--dtp", dtp, "Prefetch with dynamic compression")->check(CLI::IsMember(onoff));
        }
        app->add_option("--set", sets, "Extra key=value config overrides (repeatable)");
    }

    RunConfig build() const {
        RunConfig c = config.empty() ? RunConfig{} : load_config(config);
        const std::filesystem::path default_cold = TierConfig{}.cold_path;
        for (const std::string& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
            apply_config_value(c, s.substr(0, eq), s.substr(eq + 1));
        }
        c.trace = trace;
        if (opt.importance_rate->count()) c.importance_rate = importance_rate;
        if (opt.early_layer_rate->count()) c.early_layer_rate = early_layer_rate;
        if (opt.chunk_size->count()) c.plan.default_chunk_size = chunk_size;
        if (opt.early_chunk_size->count()) c.plan.early_chunk_size = early_chunk_size;
        if (opt.early_layers->count()) c.plan.early_layers = early_layers;
        if (opt.pinned_layers->count()) c.tiers.early_layers_pinned = pinned_layers;
        if (opt.hot_capacity->count()) c.tiers.hot_capacity = hot_capacity;
        if (opt.warm_capacity->count()) c.tiers.warm_capacity = warm_capacity;
        if (opt.cold_path->count()) c.tiers.cold_path = cold_path;
        if (opt.max_steps->count()) c.max_steps = max_steps;
        if (opt.seed->count()) {
            c.seed = seed;
        } else if (c.seed == 0) {
            c.seed = seed_fallback();
        }
        if (opt.iakm && opt.iakm->count()) c.iakm = iakm == "on";
        if (opt.lka && opt.lka->count()) c.lka = lka == "on";
        if (opt.dtp && opt.dtp->count()) c.dtp = dtp == "on";
        if (c.tiers.cold_path == default_cold) c.tiers.cold_path = std::filesystem::path(out) / "cold_tier";
        return c;
    }
};

void print_summary(const std::vector<MetricSummary>& rows, std::ostream& out) {
    out << std::left << std::setw(22) << "field" << std::right << std::setw(18) << "mean" << std::setw(18) << "p95"
        << '\n';
    for (const MetricSummary& s : rows) {
        out << std::left << std::setw(22) << s.field << std::right << std::setw(18) << std::setprecision(8) << s.mean
            << std::setw(18) << s.p95 << '\n';
    }
}

void print_ablation(const std::vector<AblationRow>& rows, std::ostream& out) {
    out << std::left << std::setw(10) << "variant" << std::right << std::setw(16) << "latency_ms" << std::setw(14)
        << "eval_count" << std::setw(12) << "r" << std::setw(10) << "recall" << std::setw(13) << "desert_rate" << '\n';
    for (const AblationRow& r : rows) {
        out << std::left << std::setw(10) << r.variant << std::right << std::setprecision(8) << std::setw(16)
            << r.latency_ms << std::setw(14) << r.eval_count << std::setw(12) << r.r << std::setw(10) << r.recall
            << std::setw(13) << r.desert_rate << '\n';
    }
}

struct Calibration {
    double read_bandwidth = 0.0;
    double decompress_rate = 0.0;
    double delta = 0.0;
};

Calibration calibrate(const std::filesystem::path& dir, size_t bytes, uint64_t seed) {
    using Clock = std::chrono::steady_clock;
    std::filesystem::create_directories(dir);
    const std::filesystem::path file = dir / "kvtier_calibration.bin";

    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::vector<uint16_t> halves(bytes / 2);
    for (uint16_t& h : halves) h = float_to_half(normal(rng));
    {
        std::ofstream out(file, std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(halves.data()), static_cast<std::streamsize>(halves.size() * 2));
        if (!out) throw IoError("cannot write " + file.string());
    }
    std::vector<uint16_t> back(halves.size());
    const auto t0 = Clock::now();
    {
        std::ifstream in(file, std::ios::binary);
        in.read(reinterpret_cast<char*>(back.data()), static_cast<std::streamsize>(back.size() * 2));
        if (!in) throw IoError("cannot read back " + file.string());
    }
    const auto t1 = Clock::now();
    std::filesystem::remove(file);

    const std::vector<uint8_t> packed = Int4BlockCodec::compress(halves);
    const auto t2 = Clock::now();
    const std::vector<uint16_t> restored = Int4BlockCodec::decompress(packed, halves.size());
    const auto t3 = Clock::now();

    auto ms = [](Clock::duration d) {
        return std::max(1e-6, std::chrono::duration<double, std::milli>(d).count());
    };
    Calibration c;
    c.read_bandwidth = static_cast<double>(halves.size() * 2) / ms(t1 - t0);
    c.decompress_rate = static_cast<double>(restored.size() * 2) / ms(t3 - t2);
    c.delta = Int4BlockCodec::ratio(halves.size());
    return c;
}

int dispatch(CLI::App& app, std::ostream& out, std::ostream& err, int argc, const char* const* argv) {
    app.require_subcommand(1);

    // gen-trace
    TraceHeader shape;
    shape.n_context = 4096;
    shape.n_layers = 8;
    shape.n_heads = 4;
    shape.head_dim = 64;
    shape.n_steps = 128;
    DesertProfile profile;
    std::string trace_out;
    auto* gen = app.add_subcommand("gen-trace", "Write a synthetic .kvtr trace");
    gen->add_option("--n", shape.n_context, "Context tokens")->capture_default_str();
    gen->add_option("--layers", shape.n_layers, "Layers")->capture_default_str();
    gen->add_option("--heads", shape.n_heads, "Heads per layer")->capture_default_str();
    gen->add_option("--dim", shape.head_dim, "Head dimension")->capture_default_str();
    gen->add_option("--steps", shape.n_steps, "Decoding steps")->capture_default_str();
    gen->add_option("--desert-rate", profile.desert_rate, "Fraction of desert tokens")->capture_default_str();
    gen->add_option("--regions", profile.n_hot_regions, "Hot regions per head")->capture_default_str();
    gen->add_option("--gap", profile.score_gap, "Score gap between hot and desert tokens")->capture_default_str();
    gen->add_flag("--values", shape.has_values, "Include value vectors");
    auto* gen_seed = gen->add_option("--seed", profile.seed, "Seed (falls back to KVTIER_SEED)");
    gen->add_option("-o,--out", trace_out, "Output path")->required();

    // validate
    std::string validate_path;
    auto* val = app.add_subcommand("validate", "Check a .kvtr trace");
    val->add_option("trace", validate_path, "Trace file")->required();

    // run / ablate
    RunFlags run_flags;
    auto* run_cmd = app.add_subcommand("run", "Run the decode loop over a trace and write reports");
    run_flags.attach(run_cmd, true);
    RunFlags ablate_flags;
    ablate_flags.out = "ablation";
    auto* ablate_cmd = app.add_subcommand("ablate", "Run baseline, +IAKM, +LKA and ALL on one trace");
    ablate_flags.attach(ablate_cmd, false);

    // solve-theta
    double D = 0.0;
    PipelineParams params;
    params.T_0 = 0.0;
    auto* theta = app.add_subcommand("solve-theta", "Solve the compression fraction for one layer");
    theta->add_option("--D", D, "Bytes to transfer")->required();
    theta->add_option("--B", params.B, "Bandwidth, bytes/ms")->required();
    theta->add_option("--T0", params.T_0, "Evaluation + other transfer overhead, ms")->required();
    theta->add_option("--Tc", params.T_c, "Compute time, ms")->required();
    theta->add_option("--delta", params.delta, "Compression ratio (compressed/original)")->required();
    theta->add_option("--decompress-rate", params.decompress_rate, "Original bytes decompressed per ms")->required();

    // calibrate
    std::string profile_out = "calibration.cfg";
    std::string calib_dir = std::filesystem::temp_directory_path().string();
    size_t calib_bytes = size_t{64} << 20;
    uint64_t calib_seed = 0;
    auto* calib = app.add_subcommand("calibrate", "Measure file-read and codec throughput into a config profile");
    calib->add_option("-o,--out", profile_out, "Profile path")->capture_default_str();
    calib->add_option("--dir", calib_dir, "Scratch directory for the read test")->capture_default_str();
    calib->add_option("--bytes", calib_bytes, "Payload size")->capture_default_str();
    auto* calib_seed_opt = calib->add_option("--seed", calib_seed, "Seed (falls back to KVTIER_SEED)");

    // report
    std::string report_dir;
    auto* rep = app.add_subcommand("report", "Print the summary table of a results directory");
    rep->add_option("dir", report_dir, "Directory written by run")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    if (gen->parsed()) {
        if (!gen_seed->count()) profile.seed = seed_fallback();
        const AttentionTrace trace = generate_synthetic(profile, shape);
        write_trace(trace, trace_out);
        out << "wrote " << trace_out << " (" << shape.file_bytes() << " bytes)\n";
        return kExitOk;
    }
    if (val->parsed()) {
        AttentionTrace trace;
        try {
            trace = read_trace(validate_path, false);
        } catch (const Error& e) {
            err << validate_path << ": " << e.what() << '\n';
            return kExitFindings;
        }
        const ValidationReport report = validate(trace);
        for (const Finding& f : report.findings) out << f.path << ": " << f.message << '\n';
        if (!report.clean()) return kExitFindings;
        out << validate_path << ": ok\n";
        return kExitOk;
    }
    if (run_cmd->parsed()) {
        const RunConfig config = run_flags.build();
        const RunReport report = run(config);
        write_reports(report, config, run_flags.out);
        print_summary(summarize(report), out);
        return kExitOk;
    }
    if (ablate_cmd->parsed()) {
        const RunConfig config = ablate_flags.build();
        const std::vector<AblationRow> rows = ablate(config, read_trace(config.trace), ablate_flags.out);
        print_ablation(rows, out);
        return kExitOk;
    }
    if (theta->parsed()) {
        params.B_cold = params.B;
        check_pipeline_params(params);
        const ThetaSolution sol = solve_theta(D, params);
        out << std::setprecision(12) << "theta = " << sol.theta << '\n';
        out << "feasible = " << (sol.feasible ? "true" : "false") << '\n';
        if (!sol.feasible) {
            out << "residual_idle_ms = " << sol.residual_ms << '\n';
            if (sol.compression_ineffective) out << "compression cannot help: delta = 1\n";
        }
        return kExitOk;
    }
    if (calib->parsed()) {
        if (!calib_seed_opt->count()) calib_seed = seed_fallback();
        const Calibration c = calibrate(calib_dir, calib_bytes, calib_seed);
        std::ofstream file(profile_out, std::ios::trunc);
        if (!file) throw IoError("cannot write " + profile_out);
        file << std::setprecision(10) << "tiers.bandwidth_warm_cold = " << c.read_bandwidth << '\n'
             << "pipeline.decompress_rate = " << c.decompress_rate << '\n'
             << "pipeline.delta = " << c.delta << '\n';
        out << std::setprecision(10) << "read bandwidth " << c.read_bandwidth << " bytes/ms, decompress "
            << c.decompress_rate << " bytes/ms, delta " << c.delta << "\nwrote " << profile_out << '\n';
        return kExitOk;
    }
    if (rep->parsed()) {
        const std::filesystem::path path = std::filesystem::path(report_dir) / "summary.json-lines";
        std::ifstream in(path);
        if (!in) throw IoError("cannot read " + path.string());
        std::vector<MetricSummary> rows;
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto j = nlohmann::json::parse(line);
            if (j.contains("run")) {
                out << "run: " << j["run"].dump() << '\n';
                continue;
            }
            rows.push_back({j.at("field").get<std::string>(), j.at("mean").get<double>(), j.at("p95").get<double>()});
        }
        print_summary(rows, out);
        return kExitOk;
    }
    return kExitUsage;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app("kvtier: tiered KV-cache selection and transfer simulator", "kvtier");
    try {
        return dispatch(app, out, err, argc, argv);
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const nlohmann::json::exception& e) {
        err << "error: malformed summary: " << e.what() << '\n';
        return kExitFindings;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitFindings;
    }
}

}  // namespace kvtier
