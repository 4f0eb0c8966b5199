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

#include "confood/dropout.hpp"

#include <algorithm>
#include <set>
#include <unordered_set>

#include "confood/errors.hpp"

namespace confood {

void DropoutBudget::validate() const {
    if (step < 1 || step > max_drop) {
        throw ConfigError("dropout budget needs 1 <= step <= max_drop (step=" + std::to_string(step) +
                          ", max_drop=" + std::to_string(max_drop) + ")");
    }
}

std::vector<std::size_t> DropoutBudget::tried_counts() const {
    validate();
    std::vector<std::size_t> counts;
    for (std::size_t i = step; inclusive_bound ? i <= max_drop : i < max_drop; i += step) {
        counts.push_back(i);
    }
    return counts;
}

void DetectionConfig::validate() const {
    if (layers.empty()) {
        throw ConfigError("at least one layer is required");
    }
    std::set<int> seen(layers.begin(), layers.end());
    if (seen.size() != layers.size()) {
        throw ConfigError("configured layers must be distinct");
    }
    budget.validate();
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) {
        throw ConfigError("epsilon must lie in [0, 1]");
    }
}

ToleranceRecord measure_tolerance(SubjectModel& model, Judge& judge, const Query& query,
                                  const Response& original, int layer_id, const DropoutBudget& budget) {
    const auto counts = budget.tried_counts();
    const std::size_t width = model.layer_width(layer_id);
    if (width == 0) {
        throw ProbeError("layer " + std::to_string(layer_id) + " reports zero width");
    }

    NeuronList ranked = model.top_activated(query, layer_id, budget.max_drop);
    const std::size_t expected = std::min(budget.max_drop, width);
    if (ranked.size() != expected) {
        throw ProbeError("top_activated returned " + std::to_string(ranked.size()) + " neurons, expected " +
                         std::to_string(expected));
    }
    std::unordered_set<std::size_t> distinct;
    for (std::size_t id : ranked) {
        if (id >= width || !distinct.insert(id).second) {
            throw ProbeError("top_activated returned an invalid or repeated neuron id " + std::to_string(id));
        }
    }
    // Ranked ascending; the most activated neurons go first.
    std::reverse(ranked.begin(), ranked.end());

    ToleranceRecord record;
    record.query_id = query.id;
    record.layer_id = layer_id;
    record.layer_width = width;

    for (std::size_t count : counts) {
        if (count > ranked.size()) break;
        Response ablated =
            model.answer_with_dropout(query, layer_id, std::span<const std::size_t>(ranked.data(), count));
        // Reflexivity is decided here rather than trusted to the judge.
        const bool same = ablated == original || judge.same(original, ablated);
        if (!same) {
            record.changed = true;
            record.dropped_count = count;
            record.alpha = NonconformityScore(1.0 - static_cast<double>(count) / static_cast<double>(width));
            break;
        }
    }
    return record;
}

ToleranceRecord measure_tolerance(SubjectModel& model, Judge& judge, const Query& query, int layer_id,
                                  const DropoutBudget& budget) {
    budget.validate();
    const Response original = model.answer(query);
    return measure_tolerance(model, judge, query, original, layer_id, budget);
}

std::vector<ToleranceRecord> measure_query(SubjectModel& model, Judge& judge, const Query& query,
                                           const DetectionConfig& cfg) {
    cfg.validate();
    const Response original = model.answer(query);
    std::vector<ToleranceRecord> records;
    records.reserve(cfg.layers.size());
    for (int layer : cfg.layers) {
        records.push_back(measure_tolerance(model, judge, query, original, layer, cfg.budget));
    }
    return records;
}

namespace {

void require_calibration(const CalibrationMap& calibration, const DetectionConfig& cfg) {
    for (int layer : cfg.layers) {
        if (!calibration.contains(layer)) {
            throw ConfigError("no calibration set for layer " + std::to_string(layer));
        }
    }
}

}  // namespace

QueryDetection score_query(std::span<const ToleranceRecord> records, const CalibrationMap& calibration,
                           const DetectionConfig& cfg) {
    require_calibration(calibration, cfg);

    QueryDetection detection;
    std::vector<double> defined;
    for (int layer : cfg.layers) {
        auto it = std::find_if(records.begin(), records.end(),
                               [layer](const ToleranceRecord& r) { return r.layer_id == layer; });
        if (it == records.end()) {
            throw UsageError("no tolerance record for layer " + std::to_string(layer));
        }
        if (detection.query_id.empty()) detection.query_id = it->query_id;

        LayerDetection entry{*it, std::nullopt};
        if (it->alpha) {
            entry.p_value = compute_p_value(*it->alpha, calibration.at(layer));
            defined.push_back(entry.p_value->value());
        }
        detection.layers.push_back(std::move(entry));
    }

    if (!defined.empty()) {
        detection.merged = merge_p_values(std::span<const double>(defined), cfg.method);
        detection.outcome = detect(*detection.merged, cfg.epsilon);
    }
    return detection;
}

QueryDetection detect_query(SubjectModel& model, Judge& judge, const Query& query,
                            const CalibrationMap& calibration, const DetectionConfig& cfg) {
    cfg.validate();
    require_calibration(calibration, cfg);
    auto records = measure_query(model, judge, query, cfg);
    auto detection = score_query(records, calibration, cfg);
    detection.query_id = query.id;
    return detection;
}

CalibrationResult calibrate_from_records(std::span<const ToleranceRecord> records, const DetectionConfig& cfg,
                                         const std::string& source_manifest) {
    cfg.validate();
    CalibrationResult result;
    for (int layer : cfg.layers) {
        LayerCalibrationStats stats{layer, 0, 0};
        std::vector<double> scores;
        for (const auto& r : records) {
            if (r.layer_id != layer) continue;
            ++stats.queries;
            if (r.alpha) {
                scores.push_back(r.alpha->value());
            } else {
                ++stats.unchanged;
            }
        }
        if (scores.empty()) {
            throw ConfigError("layer " + std::to_string(layer) + " has no defined calibration score (" +
                              std::to_string(stats.unchanged) + " of " + std::to_string(stats.queries) +
                              " responses unchanged)");
        }
        result.sets.emplace(layer, CalibrationSet(layer, std::move(scores), source_manifest));
        result.stats.push_back(stats);
    }
    return result;
}

CalibrationResult calibrate(SubjectModel& model, Judge& judge, std::span<const Query> queries,
                            const DetectionConfig& cfg, const std::string& source_manifest) {
    if (queries.empty()) {
        throw UsageError("calibration needs at least one query");
    }
    cfg.validate();
    std::vector<ToleranceRecord> records;
    records.reserve(queries.size() * cfg.layers.size());
    for (const auto& q : queries) {
        auto per_query = measure_query(model, judge, q, cfg);
        records.insert(records.end(), per_query.begin(), per_query.end());
    }
    return calibrate_from_records(records, cfg, source_manifest);
}

nlohmann::json to_json(const ToleranceRecord& record) {
    nlohmann::json j{{"query_id", record.query_id},
                     {"layer_id", record.layer_id},
                     {"changed", record.changed},
                     {"layer_width", record.layer_width}};
    if (record.dropped_count) j["dropped_count"] = *record.dropped_count;
    if (record.alpha) j["alpha"] = record.alpha->value();
    return j;
}

ToleranceRecord tolerance_record_from_json(const nlohmann::json& doc) {
    try {
        ToleranceRecord r;
        r.query_id = doc.at("query_id").get<std::string>();
        r.layer_id = doc.at("layer_id").get<int>();
        r.changed = doc.at("changed").get<bool>();
        r.layer_width = doc.at("layer_width").get<std::size_t>();
        if (doc.contains("dropped_count")) r.dropped_count = doc.at("dropped_count").get<std::size_t>();
        if (doc.contains("alpha")) r.alpha = NonconformityScore(doc.at("alpha").get<double>());
        if (r.changed != r.dropped_count.has_value() || r.changed != r.alpha.has_value()) {
            throw ConfigError("tolerance record: changed, dropped_count and alpha disagree");
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("tolerance record: ") + e.what());
    }
}

std::vector<nlohmann::json> to_jsonl_records(const QueryDetection& detection) {
    std::vector<nlohmann::json> lines;
    for (const auto& layer : detection.layers) {
        auto j = to_json(layer.record);
        if (layer.p_value) j["p_value"] = layer.p_value->value();
        lines.push_back(std::move(j));
    }
    nlohmann::json summary{{"query_id", detection.query_id}, {"outcome", to_string(detection.outcome)}};
    if (detection.merged) summary["merged_p"] = detection.merged->value;
    lines.push_back(std::move(summary));
    return lines;
}

nlohmann::json to_json(const QueryDetection& detection) {
    nlohmann::json j{{"query_id", detection.query_id}, {"outcome", to_string(detection.outcome)}};
    if (detection.merged) {
        j["merged_p"] = detection.merged->value;
        j["method"] = to_string(detection.merged->method);
        j["inputs_used"] = detection.merged->inputs_used;
    }
    auto layers = nlohmann::json::array();
    for (const auto& layer : detection.layers) {
        auto entry = to_json(layer.record);
        entry.erase("query_id");
        if (layer.p_value) entry["p_value"] = layer.p_value->value();
        layers.push_back(std::move(entry));
    }
    j["layers"] = std::move(layers);
    return j;
}

}  // namespace confood
