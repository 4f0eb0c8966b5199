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

// Inductive conformal anomaly detection: calibration sets, smoothed p-values
// and valid merging of several p-values into one.
//
// Everything here is immutable after construction and free of shared state.

#pragma once

#include <compare>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace confood {

/// Non-conformity score in [0, 1]; larger means less typical of the
/// calibration distribution. An undefined score is modelled by an empty
/// std::optional, never by a sentinel value.
class NonconformityScore {
public:
    /// Throws UsageError unless 0 <= value <= 1.
    explicit NonconformityScore(double value);

    double value() const noexcept { return value_; }

    auto operator<=>(const NonconformityScore&) const = default;

private:
    double value_;
};

/// Calibration scores of one layer, kept sorted ascending so a p-value is a
/// single rank query.
class CalibrationSet {
public:
    /// Sorts `scores`. Throws ConfigError if empty or any score lies outside [0, 1].
    CalibrationSet(int layer_id, std::vector<double> scores, std::string source_manifest = {});

    int layer_id() const noexcept { return layer_id_; }
    std::span<const double> scores() const noexcept { return scores_; }
    std::size_t size() const noexcept { return scores_.size(); }
    const std::string& source_manifest() const noexcept { return source_manifest_; }

    /// Number of calibration scores >= alpha.
    std::size_t count_at_least(double alpha) const;

    nlohmann::json to_json() const;
    /// Rejects unsorted score arrays and missing fields with ConfigError.
    static CalibrationSet from_json(const nlohmann::json& doc);

private:
    int layer_id_;
    std::vector<double> scores_;
    std::string source_manifest_;
};

/// Conformal p-value held as the exact rational numerator / denominator with
/// numerator in [1, denominator] and denominator = calibration size + 1.
class PValue {
public:
    PValue(std::size_t numerator, std::size_t denominator);

    std::size_t numerator() const noexcept { return numerator_; }
    std::size_t denominator() const noexcept { return denominator_; }
    std::size_t calibration_size() const noexcept { return denominator_ - 1; }
    double value() const noexcept {
        return static_cast<double>(numerator_) / static_cast<double>(denominator_);
    }

    bool operator==(const PValue&) const = default;

private:
    std::size_t numerator_;
    std::size_t denominator_;
};

enum class MergeMethod { Harmonic, Arithmetic, Geometric, Bonferroni };

std::string_view to_string(MergeMethod method);
/// Accepts the short names (hm, am, gm, bonferroni/bm) and the full names.
std::optional<MergeMethod> parse_merge_method(std::string_view name);

/// Scaling constant that makes the order-r mean of `k` p-values a valid
/// p-value under arbitrary dependence:
///   Arithmetic 2, Geometric e, Bonferroni k, and for the harmonic mean the
///   exact finite-k constant (y+k)^2 / ((y+1)k) with y^2 = k((y+1)ln(1+y) - y),
///   which equals 2 at k = 2 and behaves like ln k for large k.
/// Requires k >= 2.
double merging_constant(MergeMethod method, std::size_t k);

/// Unscaled order-r mean M_{r,k}: harmonic, arithmetic, geometric (product
/// form) or minimum.
double generalized_mean(MergeMethod method, std::span<const double> ps);

struct MergedPValue {
    double value;
    MergeMethod method;
    /// Number of p-values actually merged.
    std::size_t inputs_used;
};

/// min(1, a_{r,k} * M_{r,k}(ps)) with k = ps.size(); a single input passes
/// through unscaled. Throws UsageError on an empty list or values outside (0, 1].
MergedPValue merge_p_values(std::span<const double> ps, MergeMethod method);
MergedPValue merge_p_values(std::span<const PValue> ps, MergeMethod method);

/// (#{calibration scores >= alpha} + 1) / (|calibration| + 1).
PValue compute_p_value(NonconformityScore alpha, const CalibrationSet& calibration);

enum class Outcome { InDistribution, OOD };

std::string_view to_string(Outcome outcome);

/// OOD iff p < epsilon (strict). epsilon must lie in [0, 1].
Outcome detect(double p, double epsilon);
Outcome detect(const PValue& p, double epsilon);
Outcome detect(const MergedPValue& p, double epsilon);

}  // namespace confood
