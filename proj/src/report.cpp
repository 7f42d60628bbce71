// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <ostream>

#include <json.hpp>

#include "kvtier/engine.hpp"
#include "kvtier/error.hpp"

namespace kvtier {

namespace {

struct Field {
    const char* name;
    std::function<std::optional<double>(const StepMetrics&)> get;
};

const std::vector<Field>& metric_fields() {
    static const std::vector<Field> fields = {
        {"k", [](const StepMetrics& m) { return std::optional<double>(m.k); }},
        {"recall", [](const StepMetrics& m) { return std::optional<double>(m.recall); }},
        {"eval_count", [](const StepMetrics& m) { return std::optional<double>(static_cast<double>(m.eval_count)); }},
        {"desert_rate", [](const StepMetrics& m) { return std::optional<double>(m.desert_rate); }},
        {"desert_rate_check", [](const StepMetrics& m) { return std::optional<double>(m.desert_rate_check); }},
        {"output_similarity", [](const StepMetrics& m) { return m.output_similarity; }},
        {"dropped_mass", [](const StepMetrics& m) { return m.dropped_mass; }},
        {"abstract_bytes",
         [](const StepMetrics& m) { return std::optional<double>(static_cast<double>(m.ledger.abstract_bytes)); }},
        {"cold_to_warm",
         [](const StepMetrics& m) { return std::optional<double>(static_cast<double>(m.ledger.cold_to_warm)); }},
        {"warm_to_hot",
         [](const StepMetrics& m) { return std::optional<double>(static_cast<double>(m.ledger.warm_to_hot)); }},
        {"hot_to_warm",
         [](const StepMetrics& m) { return std::optional<double>(static_cast<double>(m.ledger.hot_to_warm)); }},
        {"fetch_ops", [](const StepMetrics& m) { return std::optional<double>(static_cast<double>(m.ledger.fetch_ops)); }},
        {"cold_resident_bytes",
         [](const StepMetrics& m) { return std::optional<double>(static_cast<double>(m.ledger.cold_resident_bytes)); }},
        {"r", [](const StepMetrics& m) { return std::optional<double>(m.r); }},
        {"latency_none_ms", [](const StepMetrics& m) { return std::optional<double>(m.latency_none_ms); }},
        {"latency_prefetch_ms", [](const StepMetrics& m) { return std::optional<double>(m.latency_prefetch_ms); }},
        {"latency_dtp_ms", [](const StepMetrics& m) { return std::optional<double>(m.latency_dtp_ms); }},
        {"latency_ms", [](const StepMetrics& m) { return std::optional<double>(m.latency_ms); }},
    };
    return fields;
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    return out;
}

}  // namespace

std::vector<MetricSummary> summarize(const RunReport& report) {
    std::vector<MetricSummary> out;
    for (const Field& f : metric_fields()) {
        std::vector<double> xs;
        xs.reserve(report.rows.size());
        for (const StepMetrics& m : report.rows) {
            if (auto v = f.get(m)) xs.push_back(*v);
        }
        if (xs.empty()) continue;
        double sum = 0.0;
        for (double x : xs) sum += x;
        std::sort(xs.begin(), xs.end());
        const size_t rank = static_cast<size_t>(std::ceil(0.95 * static_cast<double>(xs.size())));
        out.push_back({f.name, sum / static_cast<double>(xs.size()), xs[std::max<size_t>(rank, 1) - 1]});
    }
    return out;
}

void write_steps_csv(const RunReport& report, std::ostream& out) {
    const auto flags = out.flags();
    out << std::setprecision(17);
    out << "step,layer";
    for (const Field& f : metric_fields()) out << ',' << f.name;
    out << '\n';
    for (const StepMetrics& m : report.rows) {
        out << m.step << ',' << m.layer;
        for (const Field& f : metric_fields()) {
            out << ',';
            if (auto v = f.get(m)) out << *v;
        }
        out << '\n';
    }
    out.flags(flags);
}

void write_summary(const RunReport& report, const RunConfig& config, std::ostream& out) {
    nlohmann::ordered_json run;
    run["layers"] = report.shape.n_layers;
    run["heads"] = report.shape.n_heads;
    run["head_dim"] = report.shape.head_dim;
    run["context"] = report.shape.n_context;
    run["steps"] = report.steps;
    run["mode"] = std::string(to_string(report.mode));
    run["iakm"] = config.iakm;
    run["lka"] = config.lka;
    run["dtp"] = config.dtp;
    run["importance_rate"] = config.importance_rate;
    run["early_layer_rate"] = config.early_layer_rate;
    run["seed"] = config.seed;
    run["rows"] = report.rows.size();
    run["cold_write_bytes"] = report.cold_write_bytes;
    out << nlohmann::ordered_json{{"run", run}}.dump() << '\n';
    for (const MetricSummary& s : summarize(report)) {
        nlohmann::ordered_json line;
        line["field"] = s.field;
        line["mean"] = s.mean;
        line["p95"] = s.p95;
        out << line.dump() << '\n';
    }
}

void write_reports(const RunReport& report, const RunConfig& config, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    {
        auto out = open_out(dir / "steps.csv");
        write_steps_csv(report, out);
    }
    {
        auto out = open_out(dir / "summary.json-lines");
        write_summary(report, config, out);
    }
    {
        auto out = open_out(dir / "schedule.csv");
        write_schedule_csv_header(out);
        for (uint32_t s = 0; s < report.schedules.size(); ++s) write_schedule_csv_rows(report.schedules[s], s, out);
    }
    {
        auto out = open_out(dir / "ledger.csv");
        write_ledger_csv_header(out);
        for (const TransferLedger& l : report.ledgers) write_ledger_csv_rows(l, out);
    }
}

AblationRow ablation_row(const std::string& variant, const RunReport& report) {
    AblationRow row;
    row.variant = variant;
    if (report.rows.empty()) return row;
    for (const StepMetrics& m : report.rows) {
        row.latency_ms += m.latency_ms;
        row.eval_count += static_cast<double>(m.eval_count);
        row.r += m.r;
        row.recall += m.recall;
        row.desert_rate += m.desert_rate;
    }
    const auto n = static_cast<double>(report.rows.size());
    row.latency_ms /= n;
    row.eval_count /= n;
    row.r /= n;
    row.recall /= n;
    row.desert_rate /= n;
    return row;
}

namespace {

struct Variant {
    const char* name;
    const char* dir;
    bool iakm;
    bool lka;
    bool dtp;
};

constexpr Variant kVariants[] = {
    {"baseline", "baseline", false, false, false},
    {"+IAKM", "iakm", true, false, false},
    {"+LKA", "lka", false, true, false},
    {"ALL", "all", true, true, true},
};

const Variant& find_variant(const std::string& name) {
    for (const Variant& v : kVariants) {
        if (name == v.name || name == v.dir) return v;
    }
    throw ConfigError("unknown ablation variant '" + name + "' (expected baseline, +IAKM, +LKA or ALL)");
}

}  // namespace

RunConfig ablation_variant(const RunConfig& base, const std::string& variant) {
    const Variant& v = find_variant(variant);
    RunConfig out = base;
    out.iakm = v.iakm;
    out.lka = v.lka;
    out.dtp = v.dtp;
    return out;
}

std::vector<AblationRow> ablate(const RunConfig& config, const AttentionTrace& trace,
                                const std::filesystem::path& dir) {
    std::vector<AblationRow> rows;
    for (const Variant& v : kVariants) {
        RunConfig c = ablation_variant(config, v.name);
        const std::filesystem::path sub = dir / v.dir;
        c.tiers.cold_path = sub / "cold_tier";
        const RunReport report = run(c, trace);
        write_reports(report, c, sub);
        rows.push_back(ablation_row(v.name, report));
    }
    auto out = open_out(dir / "ablation.csv");
    write_ablation_csv(rows, out);
    return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, std::ostream& out) {
    const auto flags = out.flags();
    out << std::setprecision(17);
    out << "variant,latency_ms,eval_count,r,recall,desert_rate\n";
    for (const AblationRow& r : rows) {
        out << r.variant << ',' << r.latency_ms << ',' << r.eval_count << ',' << r.r << ',' << r.recall << ','
            << r.desert_rate << '\n';
    }
    out.flags(flags);
}

}  // namespace kvtier
