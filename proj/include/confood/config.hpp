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

// Run settings for the command line tool, resolved from four layers with
// precedence flags > config file > environment > defaults.
//
// Every layer uses the same keys. The config file is a JSON object; the
// environment uses CONFOOD_<KEY> in upper case (CONFOOD_MAX_DROP=40), and
// CONFOOD_CONFIG names the config file when --config is not given.

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "confood/dropout.hpp"
#include "confood/evaluation.hpp"

namespace confood {

enum class ModelKind { Synthetic, Probe };

struct RunConfig {
    ModelKind model = ModelKind::Synthetic;
    std::string probe_cmd;
    DetectionConfig detection{};
    eval::SplitSpec split{};
    std::uint64_t seed = 7;
    std::string out_dir = ".";
    std::size_t jobs = 1;
    std::size_t n_id = 200;
    std::size_t n_ood = 200;
    double rho_id = 0.95;
    double rho_ood = 0.2;
};

/// All recognised keys.
const std::vector<std::string>& config_keys();

struct ConfigSources {
    /// Only the flags the user actually set.
    nlohmann::json flags = nlohmann::json::object();
    std::optional<nlohmann::json> file;
    /// Key -> raw string, already stripped of the CONFOOD_ prefix and lower-cased.
    std::map<std::string, std::string> env;
};

/// Collects CONFOOD_* variables (except CONFOOD_CONFIG) from an environ-style array.
std::map<std::string, std::string> environment_settings(char** envp);

/// Merges the layers and validates the result. Unknown keys in any layer and
/// ill-typed values are ConfigErrors.
RunConfig resolve_config(const ConfigSources& sources);

nlohmann::json to_json(const RunConfig& cfg);

}  // namespace confood
