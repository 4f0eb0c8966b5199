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

// Dropout-tolerance non-conformity measure and the per-query detection
// driver built on it.
//
// For one (query, layer) the driver ranks the layer's neurons by activation,
// zeroes a growing set of the most activated ones in steps of `step`, and
// records the first count at which the model's answer differs from its
// no-dropout answer. The score is 1 - count / layer width. Scores of several
// layers are turned into conformal p-values and merged.

#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "confood/conformal.hpp"

namespace confood {

struct Query {
    std::string id;
    /// Payload sent to the model; synthetic queries use their id.
    std::string text;
};

using Response = std::string;
using NeuronList = std::vector<std::size_t>;

/// A model that can be probed with neuron ablations.
///
/// Implementations must decode deterministically so that answer() is
/// reproducible for a fixed query.
class SubjectModel {
public:
    virtual ~SubjectModel() = default;

    /// The no-dropout answer.
    virtual Response answer(const Query& query) = 0;

    /// The min(m, width) most activated neurons of `layer_id`, distinct, in
    /// ascending order of activation (the most activated neuron is last).
    virtual NeuronList top_activated(const Query& query, int layer_id, std::size_t m) = 0;

    /// Answer with the given neurons of `layer_id` zeroed. Survivors are not rescaled.
    virtual Response answer_with_dropout(const Query& query, int layer_id,
                                         std::span<const std::size_t> dropped) = 0;

    /// Total neuron count of the layer. Throws ConfigError for an unknown layer.
    virtual std::size_t layer_width(int layer_id) = 0;

    /// True if distinct queries may be probed from several threads at once.
    virtual bool supports_concurrency() const { return false; }
};

/// Semantic-equivalence verdict between two responses.
class Judge {
public:
    virtual ~Judge() = default;
    virtual bool same(const Response& a, const Response& b) = 0;
    virtual bool supports_concurrency() const { return false; }
};

/// Exact string equality.
class ExactMatchJudge final : public Judge {
public:
    bool same(const Response& a, const Response& b) override { return a == b; }
    bool supports_concurrency() const override { return true; }
};

struct DropoutBudget {
    /// Maximum neurons dropped from one layer.
    std::size_t max_drop = 30;
    /// Neurons added per iteration.
    std::size_t step = 5;
    /// Also try max_drop itself. Off by default: the loop runs while count < max_drop.
    bool inclusive_bound = false;

    /// Throws ConfigError unless 1 <= step <= max_drop.
    void validate() const;

    /// Drop counts tried in order: step, 2*step, ... below (or up to) max_drop.
    std::vector<std::size_t> tried_counts() const;
};

struct ToleranceRecord {
    std::string query_id;
    int layer_id = 0;
    bool changed = false;
    /// Present iff changed.
    std::optional<std::size_t> dropped_count;
    std::size_t layer_width = 0;
    /// 1 - dropped_count / layer_width; present iff changed.
    std::optional<NonconformityScore> alpha;
};

struct DetectionConfig {
    std::vector<int> layers{7, 15, 22};
    DropoutBudget budget{};
    MergeMethod method = MergeMethod::Arithmetic;
    double epsilon = 0.1;

    /// Non-empty, distinct layers; valid budget; epsilon in [0, 1].
    void validate() const;
};

using CalibrationMap = std::map<int, CalibrationSet>;

struct LayerDetection {
    ToleranceRecord record;
    std::optional<PValue> p_value;
};

struct QueryDetection {
    std::string query_id;
    Outcome outcome = Outcome::InDistribution;
    /// Absent when no layer changed its response (default in-distribution).
    std::optional<MergedPValue> merged;
    std::vector<LayerDetection> layers;
};

/// Dropout tolerance of one (query, layer). Calls answer() once, then at most
/// one answer_with_dropout() per tried count.
ToleranceRecord measure_tolerance(SubjectModel& model, Judge& judge, const Query& query, int layer_id,
                                  const DropoutBudget& budget);

/// Same, against an already obtained no-dropout answer.
ToleranceRecord measure_tolerance(SubjectModel& model, Judge& judge, const Query& query,
                                  const Response& original, int layer_id, const DropoutBudget& budget);

/// One record per configured layer, sharing a single no-dropout answer.
std::vector<ToleranceRecord> measure_query(SubjectModel& model, Judge& judge, const Query& query,
                                           const DetectionConfig& cfg);

/// Converts already measured records into p-values, merges the defined ones
/// and applies the threshold. Pure; used by detect_query and the evaluation
/// harness.
QueryDetection score_query(std::span<const ToleranceRecord> records, const CalibrationMap& calibration,
                           const DetectionConfig& cfg);

/// Full detection of one query. Throws ConfigError before touching the model
/// if a configured layer has no calibration set.
QueryDetection detect_query(SubjectModel& model, Judge& judge, const Query& query,
                            const CalibrationMap& calibration, const DetectionConfig& cfg);

struct LayerCalibrationStats {
    int layer_id = 0;
    std::size_t queries = 0;
    std::size_t unchanged = 0;
};

struct CalibrationResult {
    CalibrationMap sets;
    std::vector<LayerCalibrationStats> stats;
};

/// Builds one calibration set per configured layer from the defined scores of
/// `records` (any order, several layers mixed). Throws ConfigError when a
/// layer has no defined score.
CalibrationResult calibrate_from_records(std::span<const ToleranceRecord> records, const DetectionConfig& cfg,
                                         const std::string& source_manifest = {});

/// Measures every calibration query on every configured layer, then
/// calibrate_from_records.
CalibrationResult calibrate(SubjectModel& model, Judge& judge, std::span<const Query> queries,
                            const DetectionConfig& cfg, const std::string& source_manifest = {});

/// JSONL lines for a detection: one per layer (tolerance record and p-value)
/// followed by one summary line (merged_p, outcome). Absent fields are omitted.
std::vector<nlohmann::json> to_jsonl_records(const QueryDetection& detection);
nlohmann::json to_json(const ToleranceRecord& record);
ToleranceRecord tolerance_record_from_json(const nlohmann::json& doc);
/// Single object per query: outcome, merged_p and the per-layer lines nested.
nlohmann::json to_json(const QueryDetection& detection);

}  // namespace confood
