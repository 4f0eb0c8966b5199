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

#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace confood::io {

/// Writes to a sibling temporary file and renames it over `path`, so readers
/// never see a partial file. Throws ConfigError on failure.
void write_text_atomic(const std::filesystem::path& path, std::string_view content);

void write_json(const std::filesystem::path& path, const nlohmann::json& doc);
void write_jsonl(const std::filesystem::path& path, std::span<const nlohmann::json> lines);

/// Throws ConfigError if the file is missing or not valid JSON.
nlohmann::json read_json(const std::filesystem::path& path);
/// Blank lines are skipped.
std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);

}  // namespace confood::io
