/*
 * Copyright 2026 The confood Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *   http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "confood/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstring>
#include <set>
#include <sstream>

#include "confood/errors.hpp"

namespace confood {

using nlohmann::json;

namespace {

enum class Type { String, Int, Real, Bool, IntList };

const std::map<std::string, Type>& key_types() {
    static const std::map<std::string, Type> types{
        {"model", Type::String},    {"probe_cmd", Type::String}, {"layers", Type::IntList},
        {"max_drop", Type::Int},    {"step", Type::Int},         {"inclusive_bound", Type::Bool},
        {"method", Type::String},   {"epsilon", Type::Real},     {"runs", Type::Int},
        {"cal_frac", Type::Real},   {"seed", Type::Int},         {"out_dir", Type::String},
        {"jobs", Type::Int},        {"n_id", Type::Int},         {"n_ood", Type::Int},
        {"rho_id", Type::Real},     {"rho_ood", Type::Real},
    };
    return types;
}

Type type_of(const std::string& key, std::string_view layer) {
    auto it = key_types().find(key);
    if (it == key_types().end()) {
        throw ConfigError("unknown " + std::string(layer) + " setting \"" + key + "\"");
    }
    return it->second;
}

std::vector<int> parse_int_list(const std::string& text) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(std::remove_if(item.begin(), item.end(), [](unsigned char c) { return std::isspace(c); }),
                   item.end());
        int v = 0;
        auto [end, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
        if (item.empty() || ec != std::errc() || end != item.data() + item.size()) {
            throw ConfigError("not a comma-separated integer list: \"" + text + "\"");
        }
        out.push_back(v);
    }
    return out;
}

// Converts a raw environment string to a typed JSON value.
json from_env_string(const std::string& key, const std::string& raw) {
    try {
        switch (type_of(key, "environment")) {
            case Type::String: return raw;
            case Type::Int: {
                std::size_t pos = 0;
                long long v = std::stoll(raw, &pos);
                if (pos != raw.size()) throw std::invalid_argument(raw);
                return v;
            }
            case Type::Real: {
                std::size_t pos = 0;
                double v = std::stod(raw, &pos);
                if (pos != raw.size()) throw std::invalid_argument(raw);
                return v;
            }
            case Type::Bool:
                if (raw == "1" || raw == "true") return true;
                if (raw == "0" || raw == "false") return false;
                throw std::invalid_argument(raw);
            case Type::IntList: return parse_int_list(raw);
        }
    } catch (const std::logic_error&) {
        throw ConfigError("environment setting " + key + " has invalid value \"" + raw + "\"");
    }
    return raw;
}

void check_keys(const json& layer, std::string_view name) {
    if (!layer.is_object()) {
        throw ConfigError(std::string(name) + " settings must be a JSON object");
    }
    for (const auto& [key, value] : layer.items()) type_of(key, name);
}

template <typename T>
T get_as(const json& merged, const std::string& key) {
    try {
        return merged.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("setting \"" + key + "\": " + e.what());
    }
}

std::size_t get_count(const json& merged, const std::string& key) {
    const auto v = get_as<long long>(merged, key);
    if (v < 0) throw ConfigError("setting \"" + key + "\" must be non-negative");
    return static_cast<std::size_t>(v);
}

}  // namespace

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> k;
        for (const auto& [key, type] : key_types()) k.push_back(key);
        return k;
    }();
    return keys;
}

std::map<std::string, std::string> environment_settings(char** envp) {
    std::map<std::string, std::string> out;
    constexpr std::string_view prefix = "CONFOOD_";
    for (char** e = envp; e && *e; ++e) {
        std::string_view entry(*e);
        if (!entry.starts_with(prefix)) continue;
        auto eq = entry.find('=');
        if (eq == std::string_view::npos) continue;
        std::string key(entry.substr(prefix.size(), eq - prefix.size()));
        if (key == "CONFIG") continue;
        std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
        out[key] = std::string(entry.substr(eq + 1));
    }
    return out;
}

RunConfig resolve_config(const ConfigSources& sources) {
    const RunConfig defaults;
    json merged = to_json(defaults);

    for (const auto& [key, raw] : sources.env) merged[key] = from_env_string(key, raw);
    if (sources.file) {
        check_keys(*sources.file, "config file");
        for (const auto& [key, value] : sources.file->items()) {
            // Lists may also be written as "7,15,22" in files.
            if (type_of(key, "config file") == Type::IntList && value.is_string()) {
                merged[key] = parse_int_list(value.get<std::string>());
            } else {
                merged[key] = value;
            }
        }
    }
    check_keys(sources.flags, "flag");
    for (const auto& [key, value] : sources.flags.items()) merged[key] = value;

    RunConfig cfg;
    const auto model = get_as<std::string>(merged, "model");
    if (model == "synthetic") {
        cfg.model = ModelKind::Synthetic;
    } else if (model == "probe") {
        cfg.model = ModelKind::Probe;
    } else {
        throw ConfigError("model must be \"synthetic\" or \"probe\", got \"" + model + "\"");
    }
    cfg.probe_cmd = get_as<std::string>(merged, "probe_cmd");
    if (cfg.model == ModelKind::Probe && cfg.probe_cmd.empty()) {
        throw ConfigError("--model probe needs --probe-cmd");
    }

    cfg.detection.layers = get_as<std::vector<int>>(merged, "layers");
    cfg.detection.budget.max_drop = get_count(merged, "max_drop");
    cfg.detection.budget.step = get_count(merged, "step");
    cfg.detection.budget.inclusive_bound = get_as<bool>(merged, "inclusive_bound");
    const auto method = get_as<std::string>(merged, "method");
    auto parsed = parse_merge_method(method);
    if (!parsed) {
        throw ConfigError("unknown merging method \"" + method + "\" (expected hm, am, gm or bonferroni)");
    }
    cfg.detection.method = *parsed;
    cfg.detection.epsilon = get_as<double>(merged, "epsilon");
    cfg.detection.validate();

    cfg.split.runs = get_count(merged, "runs");
    cfg.split.calibration_fraction = get_as<double>(merged, "cal_frac");
    cfg.seed = get_as<std::uint64_t>(merged, "seed");
    cfg.split.seed = cfg.seed;
    cfg.split.validate();

    cfg.out_dir = get_as<std::string>(merged, "out_dir");
    cfg.jobs = std::max<std::size_t>(1, get_count(merged, "jobs"));
    cfg.n_id = get_count(merged, "n_id");
    cfg.n_ood = get_count(merged, "n_ood");
    cfg.rho_id = get_as<double>(merged, "rho_id");
    cfg.rho_ood = get_as<double>(merged, "rho_ood");
    return cfg;
}

json to_json(const RunConfig& cfg) {
    return {{"model", cfg.model == ModelKind::Synthetic ? "synthetic" : "probe"},
            {"probe_cmd", cfg.probe_cmd},
            {"layers", cfg.detection.layers},
            {"max_drop", cfg.detection.budget.max_drop},
            {"step", cfg.detection.budget.step},
            {"inclusive_bound", cfg.detection.budget.inclusive_bound},
            {"method", to_string(cfg.detection.method)},
            {"epsilon", cfg.detection.epsilon},
            {"runs", cfg.split.runs},
            {"cal_frac", cfg.split.calibration_fraction},
            {"seed", cfg.seed},
            {"out_dir", cfg.out_dir},
            {"jobs", cfg.jobs},
            {"n_id", cfg.n_id},
            {"n_ood", cfg.n_ood},
            {"rho_id", cfg.rho_id},
            {"rho_ood", cfg.rho_ood}};
}

}  // namespace confood
