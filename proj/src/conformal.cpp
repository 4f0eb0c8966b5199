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

#include "confood/conformal.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "confood/errors.hpp"

namespace confood {

NonconformityScore::NonconformityScore(double value) : value_(value) {
    if (!(value >= 0.0 && value <= 1.0)) {
        throw UsageError("non-conformity score must lie in [0, 1], got " + std::to_string(value));
    }
}

CalibrationSet::CalibrationSet(int layer_id, std::vector<double> scores, std::string source_manifest)
    : layer_id_(layer_id), scores_(std::move(scores)), source_manifest_(std::move(source_manifest)) {
    if (scores_.empty()) {
        throw ConfigError("calibration set for layer " + std::to_string(layer_id_) + " is empty");
    }
    for (double s : scores_) {
        if (!(s >= 0.0 && s <= 1.0)) {
            throw ConfigError("calibration score outside [0, 1] for layer " + std::to_string(layer_id_));
        }
    }
    std::sort(scores_.begin(), scores_.end());
}

std::size_t CalibrationSet::count_at_least(double alpha) const {
    auto first = std::lower_bound(scores_.begin(), scores_.end(), alpha);
    return static_cast<std::size_t>(scores_.end() - first);
}

nlohmann::json CalibrationSet::to_json() const {
    return {{"layer_id", layer_id_}, {"scores", scores_}, {"source_manifest", source_manifest_}};
}

CalibrationSet CalibrationSet::from_json(const nlohmann::json& doc) {
    if (!doc.is_object() || !doc.contains("layer_id") || !doc.contains("scores")) {
        throw ConfigError("calibration document needs \"layer_id\" and \"scores\"");
    }
    std::vector<double> scores;
    try {
        scores = doc.at("scores").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("calibration scores: ") + e.what());
    }
    if (!std::is_sorted(scores.begin(), scores.end())) {
        throw ConfigError("calibration scores are not sorted ascending");
    }
    int layer = 0;
    std::string manifest;
    try {
        layer = doc.at("layer_id").get<int>();
        if (doc.contains("source_manifest")) {
            manifest = doc.at("source_manifest").get<std::string>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("calibration document: ") + e.what());
    }
    return CalibrationSet(layer, std::move(scores), std::move(manifest));
}

PValue::PValue(std::size_t numerator, std::size_t denominator)
    : numerator_(numerator), denominator_(denominator) {
    if (denominator_ < 2 || numerator_ < 1 || numerator_ > denominator_) {
        throw UsageError("p-value lattice point out of range: " + std::to_string(numerator) + "/" +
                         std::to_string(denominator));
    }
}

std::string_view to_string(MergeMethod method) {
    switch (method) {
        case MergeMethod::Harmonic: return "harmonic";
        case MergeMethod::Arithmetic: return "arithmetic";
        case MergeMethod::Geometric: return "geometric";
        case MergeMethod::Bonferroni: return "bonferroni";
    }
    return "unknown";
}

std::optional<MergeMethod> parse_merge_method(std::string_view name) {
    if (name == "hm" || name == "harmonic") return MergeMethod::Harmonic;
    if (name == "am" || name == "arithmetic") return MergeMethod::Arithmetic;
    if (name == "gm" || name == "geometric") return MergeMethod::Geometric;
    if (name == "bm" || name == "bonferroni") return MergeMethod::Bonferroni;
    return std::nullopt;
}

namespace {

// Root of y^2 = k((y+1)ln(1+y) - y) on (0, inf). The left side minus the
// right is negative just above 0 and eventually positive, with one crossing.
double harmonic_root(double k) {
    auto f = [k](double y) { return y * y - k * ((y + 1.0) * std::log1p(y) - y); };
    double lo = 0.0;
    double hi = 1.0;
    while (f(hi) < 0.0) {
        lo = hi;
        hi *= 2.0;
    }
    for (int iter = 0; iter < 200 && hi - lo > 1e-15 * hi; ++iter) {
        double mid = 0.5 * (lo + hi);
        (f(mid) < 0.0 ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

}  // namespace

double merging_constant(MergeMethod method, std::size_t k) {
    if (k < 2) {
        throw UsageError("merging constant needs at least two p-values");
    }
    const double kd = static_cast<double>(k);
    switch (method) {
        case MergeMethod::Arithmetic: return 2.0;
        case MergeMethod::Geometric: return std::numbers::e;
        case MergeMethod::Bonferroni: return kd;
        case MergeMethod::Harmonic: {
            if (k == 2) return 2.0;
            const double y = harmonic_root(kd);
            return (y + kd) * (y + kd) / ((y + 1.0) * kd);
        }
    }
    throw UsageError("unknown merge method");
}

double generalized_mean(MergeMethod method, std::span<const double> ps) {
    if (ps.empty()) {
        throw UsageError("mean of an empty p-value list");
    }
    const double k = static_cast<double>(ps.size());
    switch (method) {
        case MergeMethod::Arithmetic:
            return std::accumulate(ps.begin(), ps.end(), 0.0) / k;
        case MergeMethod::Harmonic: {
            double inv = 0.0;
            for (double p : ps) inv += 1.0 / p;
            return k / inv;
        }
        case MergeMethod::Geometric: {
            double prod = std::accumulate(ps.begin(), ps.end(), 1.0, std::multiplies<>());
            return std::pow(prod, 1.0 / k);
        }
        case MergeMethod::Bonferroni:
            return *std::min_element(ps.begin(), ps.end());
    }
    throw UsageError("unknown merge method");
}

MergedPValue merge_p_values(std::span<const double> ps, MergeMethod method) {
    if (ps.empty()) {
        throw UsageError("cannot merge an empty p-value list");
    }
    for (double p : ps) {
        if (!(p > 0.0 && p <= 1.0)) {
            throw UsageError("p-value outside (0, 1]: " + std::to_string(p));
        }
    }
    if (ps.size() == 1) {
        return {ps.front(), method, 1};
    }
    const double scaled = merging_constant(method, ps.size()) * generalized_mean(method, ps);
    return {std::min(1.0, scaled), method, ps.size()};
}

MergedPValue merge_p_values(std::span<const PValue> ps, MergeMethod method) {
    std::vector<double> values;
    values.reserve(ps.size());
    for (const auto& p : ps) values.push_back(p.value());
    return merge_p_values(std::span<const double>(values), method);
}

PValue compute_p_value(NonconformityScore alpha, const CalibrationSet& calibration) {
    return PValue(calibration.count_at_least(alpha.value()) + 1, calibration.size() + 1);
}

std::string_view to_string(Outcome outcome) {
    return outcome == Outcome::OOD ? "OOD" : "InDistribution";
}

Outcome detect(double p, double epsilon) {
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) {
        throw UsageError("detection threshold must lie in [0, 1]");
    }
    return p < epsilon ? Outcome::OOD : Outcome::InDistribution;
}

Outcome detect(const PValue& p, double epsilon) {
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) {
        throw UsageError("detection threshold must lie in [0, 1]");
    }
    // numerator/denominator < epsilon, compared without forming the quotient.
    return static_cast<double>(p.numerator()) < epsilon * static_cast<double>(p.denominator())
               ? Outcome::OOD
               : Outcome::InDistribution;
}

Outcome detect(const MergedPValue& p, double epsilon) { return detect(p.value, epsilon); }

}  // namespace confood
