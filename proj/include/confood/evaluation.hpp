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

// Detection experiments: repeated calibration/test splits of the in-domain
// queries, ROC/AUROC with out-of-domain queries as positives, and
// false-alarm curves over a grid of thresholds.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "confood/conformal.hpp"
#include "confood/dropout.hpp"

namespace confood::eval {

struct SplitSpec {
    /// Share of the in-domain queries used for calibration; the rest is the test set.
    double calibration_fraction = 0.2;
    std::size_t runs = 5;
    std::uint64_t seed = 0;

    void validate() const;
};

struct RocPoint {
    double fpr;
    double tpr;
};

struct RocCurve {
    /// From (0, 0) to (1, 1), one point per distinct score.
    std::vector<RocPoint> points;
    /// Trapezoidal area under `points`.
    double auroc = 0.0;
};

/// Pr(positive > negative) + 0.5 Pr(tie), by midranks. Higher score = more OOD.
/// Throws UsageError if either list is empty.
double auroc(std::span<const double> positive, std::span<const double> negative);

/// Thresholds sweep every observed score from +inf down to -inf.
RocCurve roc_curve(std::span<const double> positive, std::span<const double> negative);

/// OOD iff strictly more than half the votes are OOD; ties go to InDistribution.
Outcome majority_vote(std::span<const Outcome> votes);

enum class BaselineKind { BaseScore, SinglePValue, MajorityVote, EnsembleMerged };

struct BaselineSpec {
    BaselineKind kind;
    std::vector<int> layers;
    MergeMethod method = MergeMethod::Arithmetic;

    static BaselineSpec base_score(int layer);
    static BaselineSpec single_p_value(int layer);
    static BaselineSpec majority(std::vector<int> layers);
    static BaselineSpec ensemble(std::vector<int> layers, MergeMethod method);

    /// File-name safe label, e.g. "single_p_15" or "ensemble_arithmetic_7-15-22".
    std::string name() const;
};

/// Base score and single p-value per configured layer, majority vote, and the
/// merged ensemble with the configured method.
std::vector<BaselineSpec> default_baselines(const DetectionConfig& cfg);

struct MeasuredQuery {
    std::string query_id;
    std::vector<ToleranceRecord> records;
};

/// Measures every query on every configured layer. Uses up to `threads`
/// workers when both model and judge allow concurrent use.
std::vector<MeasuredQuery> measure_all(SubjectModel& model, Judge& judge, std::span<const Query> queries,
                                       const DetectionConfig& cfg, std::size_t threads = 1);

/// Higher means more OOD. Undefined scores map to 0.
///   BaseScore: alpha.  SinglePValue: 1 - p.  EnsembleMerged: 1 - merged p.
///   MajorityVote: 1 if the vote at cfg.epsilon is OOD, else 0.
double detection_score(const MeasuredQuery& query, const CalibrationMap& calibration, const BaselineSpec& baseline,
                       const DetectionConfig& cfg);

/// Decision at threshold `epsilon`; nullopt for BaseScore, which has no threshold semantics.
std::optional<Outcome> detection_outcome(const MeasuredQuery& query, const CalibrationMap& calibration,
                                         const BaselineSpec& baseline, const DetectionConfig& cfg, double epsilon);

/// {0, 0.05, ..., 0.5}.
std::vector<double> default_epsilon_grid();

struct GuaranteeCurve {
    std::vector<double> epsilons;
    /// per_run[r][e]: share of in-domain test queries flagged OOD at epsilons[e].
    std::vector<std::vector<double>> per_run;
    std::vector<double> mean;
};

struct BaselineResult {
    BaselineSpec spec;
    std::vector<double> auroc_per_run;
    double auroc_mean = 0.0;
    /// Sample standard deviation across runs; 0 for a single run.
    double auroc_std = 0.0;
    std::vector<RocCurve> roc_per_run;
    std::optional<GuaranteeCurve> guarantee;
};

struct LayerDiagnostics {
    int layer_id;
    double id_unchanged_fraction;
    double ood_unchanged_fraction;
};

struct EvaluationReport {
    SplitSpec split;
    DetectionConfig cfg;
    std::size_t n_id = 0;
    std::size_t n_ood = 0;
    std::vector<BaselineResult> baselines;
    std::vector<LayerDiagnostics> layers;
    /// calibration_sizes[r][layer]: defined calibration scores in run r.
    std::vector<std::map<int, std::size_t>> calibration_sizes;

    /// Throws UsageError if no baseline has that name.
    const BaselineResult& find(const std::string& name) const;

    nlohmann::json to_json() const;
    /// auroc.csv, roc_<baseline>.csv and guarantee_<baseline>.csv into `dir`.
    void write_csv(const std::filesystem::path& dir) const;
};

/// Scores already measured queries under every baseline for every split.
/// Throws ConfigError (naming the run) when a layer gets no defined
/// calibration score.
EvaluationReport evaluate_measured(std::span<const MeasuredQuery> id_queries, std::span<const MeasuredQuery> ood_queries,
                                   const SplitSpec& split, const DetectionConfig& cfg,
                                   std::span<const BaselineSpec> baselines,
                                   std::span<const double> epsilons = {});

/// measure_all on both query sets, then evaluate_measured. Each query is
/// measured once; runs differ only in the split.
EvaluationReport run_experiment(SubjectModel& model, Judge& judge, std::span<const Query> id_queries,
                                std::span<const Query> ood_queries, const SplitSpec& split,
                                const DetectionConfig& cfg, std::span<const BaselineSpec> baselines,
                                std::size_t threads = 1);

}  // namespace confood::eval
