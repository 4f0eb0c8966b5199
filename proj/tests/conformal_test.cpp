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

#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "confood/conformal.hpp"
#include "confood/errors.hpp"

namespace confood {
namespace {

// Reference values below were computed independently with mpmath at 40 digits.
constexpr double kHarmonicConstant3 = 2.745643576732724396883465645766393355646;
constexpr double kHarmonicConstant4 = 3.218741088336956245629676260565731157617;
constexpr double kHarmonicConstant10 = 4.559778560272899979896691616957059067661;

PValue p_of(double alpha, std::vector<double> cal) {
    return compute_p_value(NonconformityScore(alpha), CalibrationSet(0, std::move(cal)));
}

TEST(NonconformityScore, RejectsOutOfRange) {
    EXPECT_THROW(NonconformityScore(-0.01), UsageError);
    EXPECT_THROW(NonconformityScore(1.01), UsageError);
    EXPECT_THROW(NonconformityScore(std::nan("")), UsageError);
    EXPECT_DOUBLE_EQ(NonconformityScore(0.0).value(), 0.0);
    EXPECT_DOUBLE_EQ(NonconformityScore(1.0).value(), 1.0);
}

TEST(CalibrationSet, SortsAndCounts) {
    CalibrationSet set(15, {0.5, 0.1, 0.9, 0.5});
    EXPECT_EQ(set.layer_id(), 15);
    EXPECT_EQ(set.size(), 4u);
    EXPECT_TRUE(std::is_sorted(set.scores().begin(), set.scores().end()));
    EXPECT_EQ(set.count_at_least(0.5), 3u);
    EXPECT_EQ(set.count_at_least(0.51), 1u);
    EXPECT_EQ(set.count_at_least(0.0), 4u);
    EXPECT_EQ(set.count_at_least(0.95), 0u);
}

TEST(CalibrationSet, RejectsEmptyAndOutOfRange) {
    EXPECT_THROW(CalibrationSet(0, {}), ConfigError);
    EXPECT_THROW(CalibrationSet(0, {0.2, 1.5}), ConfigError);
    EXPECT_THROW(CalibrationSet(0, {-0.1}), ConfigError);
}

TEST(CalibrationSet, JsonRoundTrip) {
    CalibrationSet set(7, {0.75, 0.25, 0.5}, "cal.jsonl");
    auto back = CalibrationSet::from_json(set.to_json());
    EXPECT_EQ(back.layer_id(), 7);
    EXPECT_EQ(back.source_manifest(), "cal.jsonl");
    ASSERT_EQ(back.size(), 3u);
    EXPECT_DOUBLE_EQ(back.scores()[0], 0.25);
    EXPECT_DOUBLE_EQ(back.scores()[2], 0.75);
}

TEST(CalibrationSet, FromJsonRejectsUnsorted) {
    auto doc = CalibrationSet(7, {0.25, 0.5}).to_json();
    doc["scores"] = {0.5, 0.25};
    EXPECT_THROW(CalibrationSet::from_json(doc), ConfigError);
    EXPECT_THROW(CalibrationSet::from_json(nlohmann::json::object()), ConfigError);
}

TEST(PValue, WorkedExamples) {
    auto above_all = p_of(0.95, {0.1, 0.2, 0.3});
    EXPECT_EQ(above_all, PValue(1, 4));
    EXPECT_DOUBLE_EQ(above_all.value(), 0.25);

    EXPECT_DOUBLE_EQ(p_of(0.0, {0.1, 0.2, 0.3}).value(), 1.0);

    auto middle = p_of(0.4, {0.2, 0.5, 0.9});
    EXPECT_EQ(middle.numerator(), 3u);
    EXPECT_EQ(middle.denominator(), 4u);
    EXPECT_DOUBLE_EQ(middle.value(), 0.75);
}

TEST(PValue, TiesCountAsAtLeast) {
    EXPECT_EQ(p_of(0.5, {0.5, 0.5, 0.5}), PValue(4, 4));
}

TEST(PValue, ConstructorChecksRange) {
    EXPECT_THROW(PValue(0, 4), UsageError);
    EXPECT_THROW(PValue(5, 4), UsageError);
    EXPECT_THROW(PValue(1, 1), UsageError);
    EXPECT_EQ(PValue(1, 2).calibration_size(), 1u);
}

TEST(PValue, LatticeAndAntitoneOnRandomSets) {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<std::size_t> size(1, 60);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<double> cal(size(rng));
        for (auto& s : cal) s = std::round(u(rng) * 20) / 20;  // ties on purpose
        CalibrationSet set(0, cal);
        double a = std::round(u(rng) * 20) / 20;
        double b = std::round(u(rng) * 20) / 20;
        if (a > b) std::swap(a, b);
        auto pa = compute_p_value(NonconformityScore(a), set);
        auto pb = compute_p_value(NonconformityScore(b), set);
        EXPECT_EQ(pa.denominator(), cal.size() + 1);
        EXPECT_GE(pa.numerator(), 1u);
        EXPECT_GE(pa.numerator(), pb.numerator());
    }
}

TEST(MergingConstant, KnownValues) {
    EXPECT_DOUBLE_EQ(merging_constant(MergeMethod::Arithmetic, 3), 2.0);
    EXPECT_DOUBLE_EQ(merging_constant(MergeMethod::Geometric, 3), std::exp(1.0));
    EXPECT_DOUBLE_EQ(merging_constant(MergeMethod::Bonferroni, 3), 3.0);
    EXPECT_DOUBLE_EQ(merging_constant(MergeMethod::Bonferroni, 7), 7.0);
    EXPECT_NEAR(merging_constant(MergeMethod::Harmonic, 2), 2.0, 1e-12);
    EXPECT_NEAR(merging_constant(MergeMethod::Harmonic, 3), kHarmonicConstant3, 1e-12);
    EXPECT_NEAR(merging_constant(MergeMethod::Harmonic, 4), kHarmonicConstant4, 1e-12);
    EXPECT_NEAR(merging_constant(MergeMethod::Harmonic, 10), kHarmonicConstant10, 1e-12);
    EXPECT_THROW(merging_constant(MergeMethod::Arithmetic, 1), UsageError);
}

TEST(MergingConstant, HarmonicApproachesLogK) {
    // The finite-k constant exceeds ln k and the ratio slowly falls towards 1.
    double prev_ratio = INFINITY;
    for (std::size_t k : {3u, 10u, 100u, 10000u, 1000000u}) {
        const double c = merging_constant(MergeMethod::Harmonic, k);
        const double ratio = c / std::log(static_cast<double>(k));
        EXPECT_GT(ratio, 1.0) << k;
        EXPECT_LT(ratio, prev_ratio) << k;
        prev_ratio = ratio;
    }
}

TEST(Merge, WorkedTriple) {
    const std::vector<double> ps{0.1, 0.3, 0.5};
    EXPECT_NEAR(merge_p_values(ps, MergeMethod::Arithmetic).value, 0.6, 1e-12);
    EXPECT_NEAR(merge_p_values(ps, MergeMethod::Bonferroni).value, 0.3, 1e-12);
    EXPECT_NEAR(merge_p_values(ps, MergeMethod::Geometric).value, 0.6703859466778805045691376181649775201282, 1e-12);
    EXPECT_NEAR(merge_p_values(ps, MergeMethod::Harmonic).value, 0.5371911345781417298250258872151639174091, 1e-12);
    EXPECT_EQ(merge_p_values(ps, MergeMethod::Harmonic).inputs_used, 3u);
}

TEST(Merge, IdenticalInputsNeverShrink) {
    for (auto m : {MergeMethod::Harmonic, MergeMethod::Arithmetic, MergeMethod::Geometric, MergeMethod::Bonferroni}) {
        for (double p : {0.01, 0.04, 0.2, 0.7}) {
            const std::vector<double> ps(3, p);
            EXPECT_GE(merge_p_values(ps, m).value, p) << to_string(m);
        }
    }
    const std::vector<double> small(3, 0.04);
    EXPECT_NEAR(merge_p_values(small, MergeMethod::Arithmetic).value, 0.08, 1e-15);
    EXPECT_NEAR(merge_p_values(small, MergeMethod::Geometric).value, 0.1087312731383618094144114988541064999103, 1e-12);
}

TEST(Merge, CapsAtOne) {
    const std::vector<double> ps{0.9, 0.8, 1.0};
    for (auto m : {MergeMethod::Harmonic, MergeMethod::Arithmetic, MergeMethod::Geometric, MergeMethod::Bonferroni}) {
        EXPECT_DOUBLE_EQ(merge_p_values(ps, m).value, 1.0);
    }
}

TEST(Merge, SingleInputPassesThrough) {
    const std::vector<double> one{0.5};
    for (auto m : {MergeMethod::Harmonic, MergeMethod::Arithmetic, MergeMethod::Geometric, MergeMethod::Bonferroni}) {
        auto merged = merge_p_values(one, m);
        EXPECT_DOUBLE_EQ(merged.value, 0.5);
        EXPECT_EQ(merged.inputs_used, 1u);
        EXPECT_EQ(detect(merged, 0.05), Outcome::InDistribution);
    }
}

TEST(Merge, RejectsBadInput) {
    EXPECT_THROW(merge_p_values(std::vector<double>{}, MergeMethod::Arithmetic), UsageError);
    EXPECT_THROW(merge_p_values(std::vector<double>{0.0, 0.5}, MergeMethod::Arithmetic), UsageError);
    EXPECT_THROW(merge_p_values(std::vector<double>{1.2}, MergeMethod::Arithmetic), UsageError);
}

TEST(Merge, PValueOverloadMatchesDoubles) {
    const std::vector<PValue> ps{PValue(1, 5), PValue(3, 5), PValue(2, 5)};
    const std::vector<double> ds{0.2, 0.6, 0.4};
    EXPECT_DOUBLE_EQ(merge_p_values(ps, MergeMethod::Geometric).value,
                     merge_p_values(ds, MergeMethod::Geometric).value);
}

TEST(MergeMethodNames, ParseAndPrint) {
    EXPECT_EQ(parse_merge_method("am"), MergeMethod::Arithmetic);
    EXPECT_EQ(parse_merge_method("hm"), MergeMethod::Harmonic);
    EXPECT_EQ(parse_merge_method("gm"), MergeMethod::Geometric);
    EXPECT_EQ(parse_merge_method("bonferroni"), MergeMethod::Bonferroni);
    EXPECT_EQ(parse_merge_method("bm"), MergeMethod::Bonferroni);
    EXPECT_EQ(parse_merge_method("arithmetic"), MergeMethod::Arithmetic);
    EXPECT_FALSE(parse_merge_method("median").has_value());
    for (auto m : {MergeMethod::Harmonic, MergeMethod::Arithmetic, MergeMethod::Geometric, MergeMethod::Bonferroni}) {
        EXPECT_EQ(parse_merge_method(to_string(m)), m);
    }
}

TEST(Detect, StrictThreshold) {
    EXPECT_EQ(detect(0.05, 0.05), Outcome::InDistribution);
    EXPECT_EQ(detect(0.049, 0.05), Outcome::OOD);
    EXPECT_EQ(detect(1.0, 0.99), Outcome::InDistribution);
    EXPECT_EQ(detect(PValue(1, 20), 0.05), Outcome::InDistribution);
    EXPECT_EQ(detect(PValue(1, 21), 0.05), Outcome::OOD);
    EXPECT_EQ(detect(PValue(1, 2), 0.0), Outcome::InDistribution);
    EXPECT_THROW(detect(0.5, 1.5), UsageError);
    EXPECT_THROW(detect(0.5, -0.1), UsageError);
}

}  // namespace
}  // namespace confood
