// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "kvtier/engine.hpp"
#include "kvtier/error.hpp"

namespace kvtier {

namespace {

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return std::string(s.substr(first, last - first + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    const char* end = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc() || ptr != end) throw ConfigError("invalid value '" + value + "' for " + key);
    return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "on" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "off" || value == "no") return false;
    throw ConfigError("invalid boolean '" + value + "' for " + key);
}

std::vector<double> parse_list(const std::string& key, const std::string& value) {
    std::vector<double> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_number<double>(key, trim(item)));
    return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

template <typename T>
Setter number(T RunConfig::*field) {
    return [field](RunConfig& c, const std::string& k, const std::string& v) { c.*field = parse_number<T>(k, v); };
}

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"trace", [](RunConfig& c, const std::string&, const std::string& v) { c.trace = v; }},
        {"importance_rate", number(&RunConfig::importance_rate)},
        {"early_layer_rate", number(&RunConfig::early_layer_rate)},
        {"iakm", [](RunConfig& c, const std::string& k, const std::string& v) { c.iakm = parse_bool(k, v); }},
        {"lka", [](RunConfig& c, const std::string& k, const std::string& v) { c.lka = parse_bool(k, v); }},
        {"dtp", [](RunConfig& c, const std::string& k, const std::string& v) { c.dtp = parse_bool(k, v); }},
        {"seed", number(&RunConfig::seed)},
        {"hot_fraction", number(&RunConfig::hot_fraction)},
        {"warm_fraction", number(&RunConfig::warm_fraction)},
        {"eval_ms_per_eval", number(&RunConfig::eval_ms_per_eval)},
        {"max_steps", number(&RunConfig::max_steps)},
        {"plan.default_chunk_size",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.plan.default_chunk_size = parse_number<uint32_t>(k, v);
         }},
        {"plan.early_chunk_size",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.plan.early_chunk_size = parse_number<uint32_t>(k, v);
         }},
        {"plan.early_layers",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.plan.early_layers = parse_number<uint32_t>(k, v);
         }},
        {"plan.early_steps_fraction",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.plan.early_steps_fraction = parse_number<double>(k, v);
         }},
        {"plan.rho", [](RunConfig& c, const std::string& k, const std::string& v) { c.plan.rho = parse_list(k, v); }},
        {"tiers.hot_capacity",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.tiers.hot_capacity = parse_number<uint64_t>(k, v);
         }},
        {"tiers.warm_capacity",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.tiers.warm_capacity = parse_number<uint64_t>(k, v);
         }},
        {"tiers.cold_path", [](RunConfig& c, const std::string&, const std::string& v) { c.tiers.cold_path = v; }},
        {"tiers.bandwidth_hot_warm",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.tiers.bandwidth_hot_warm = parse_number<double>(k, v);
         }},
        {"tiers.bandwidth_warm_cold",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.tiers.bandwidth_warm_cold = parse_number<double>(k, v);
         }},
        {"tiers.early_layers_pinned",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.tiers.early_layers_pinned = parse_number<uint32_t>(k, v);
         }},
        {"tiers.hot_frequency_threshold",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.tiers.hot_frequency_threshold = parse_number<uint32_t>(k, v);
         }},
        {"tiers.frequency_window",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.tiers.frequency_window = parse_number<uint32_t>(k, v);
         }},
        {"tiers.frequency_exemption",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.tiers.frequency_exemption = parse_bool(k, v);
         }},
        {"pipeline.T_c",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.pipeline.T_c = parse_number<double>(k, v); }},
        {"pipeline.T_0",
         [](RunConfig& c, const std::string& k, const std::string& v) { c.pipeline.T_0 = parse_number<double>(k, v); }},
        {"pipeline.B",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.tiers.bandwidth_hot_warm = parse_number<double>(k, v);
         }},
        {"pipeline.B_cold",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.tiers.bandwidth_warm_cold = parse_number<double>(k, v);
         }},
        {"pipeline.delta",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.pipeline.delta = parse_number<double>(k, v);
         }},
        {"pipeline.decompress_rate",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.pipeline.decompress_rate = parse_number<double>(k, v);
         }},
    };
    return table;
}

}  // namespace

void apply_config_value(RunConfig& config, const std::string& key, const std::string& value) {
    const auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(config, key, value);
}

void apply_config_text(RunConfig& config, const std::string& text) {
    std::istringstream in(text);
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        const std::string body = trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        }
        const std::string key = trim(std::string_view(body).substr(0, eq));
        const std::string value = trim(std::string_view(body).substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
        try {
            apply_config_value(config, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
        }
    }
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    RunConfig config;
    apply_config_text(config, ss.str());
    return config;
}

}  // namespace kvtier
