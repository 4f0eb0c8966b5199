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

#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "confood/dropout.hpp"
#include "confood/errors.hpp"
#include "confood/synthetic.hpp"

namespace confood {
namespace {

// Flips its answer once `threshold[layer]` neurons are dropped. Records calls.
class ThresholdModel : public SubjectModel {
public:
    ThresholdModel(std::size_t width, std::map<int, std::size_t> threshold)
        : width_(width), threshold_(std::move(threshold)) {}

    Response answer(const Query&) override {
        ++answers;
        return "yes";
    }
    NeuronList top_activated(const Query&, int, std::size_t m) override {
        NeuronList out(std::min(m, width_));
        // Neuron i has activation i, so ascending order is 0, 1, ...
        std::iota(out.begin(), out.end(), width_ - out.size());
        return out;
    }
    Response answer_with_dropout(const Query&, int layer, std::span<const std::size_t> dropped) override {
        ++dropouts;
        last_dropped.assign(dropped.begin(), dropped.end());
        auto it = threshold_.find(layer);
        return it != threshold_.end() && dropped.size() >= it->second ? "no" : "yes";
    }
    std::size_t layer_width(int) override { return width_; }

    int answers = 0;
    int dropouts = 0;
    NeuronList last_dropped;

private:
    std::size_t width_;
    std::map<int, std::size_t> threshold_;
};

// Fails the test on any call.
class UntouchableModel : public SubjectModel {
public:
    Response answer(const Query&) override {
        ADD_FAILURE() << "model called";
        return {};
    }
    NeuronList top_activated(const Query&, int, std::size_t) override {
        ADD_FAILURE() << "model called";
        return {};
    }
    Response answer_with_dropout(const Query&, int, std::span<const std::size_t>) override {
        ADD_FAILURE() << "model called";
        return {};
    }
    std::size_t layer_width(int) override {
        ADD_FAILURE() << "model called";
        return 1;
    }
};

class CountingJudge : public Judge {
public:
    bool same(const Response& a, const Response& b) override {
        ++calls;
        return a == b;
    }
    int calls = 0;
};

class BrokenJudge : public Judge {
public:
    bool same(const Response&, const Response&) override { throw ProbeError("judge unavailable"); }
};

const Query kQuery{"q", "q"};

TEST(DropoutBudget, TriedCounts) {
    EXPECT_EQ((DropoutBudget{30, 5, false}.tried_counts()), (std::vector<std::size_t>{5, 10, 15, 20, 25}));
    EXPECT_EQ((DropoutBudget{30, 5, true}.tried_counts()), (std::vector<std::size_t>{5, 10, 15, 20, 25, 30}));
    EXPECT_EQ((DropoutBudget{7, 3, false}.tried_counts()), (std::vector<std::size_t>{3, 6}));
    EXPECT_EQ((DropoutBudget{5, 5, false}.tried_counts()), (std::vector<std::size_t>{}));
    EXPECT_THROW((DropoutBudget{5, 0, false}.validate()), ConfigError);
    EXPECT_THROW((DropoutBudget{5, 6, false}.validate()), ConfigError);
}

TEST(DetectionConfig, Validation) {
    DetectionConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    cfg.layers = {};
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg.layers = {3, 3};
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg.layers = {3};
    cfg.epsilon = 1.5;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(MeasureTolerance, FirstIterationFlips) {
    ThresholdModel model(100, {{7, 1}});
    CountingJudge judge;
    auto r = measure_tolerance(model, judge, kQuery, 7, DropoutBudget{});
    EXPECT_TRUE(r.changed);
    EXPECT_EQ(r.dropped_count, 5u);
    ASSERT_TRUE(r.alpha);
    EXPECT_DOUBLE_EQ(r.alpha->value(), 0.95);
    EXPECT_EQ(r.layer_width, 100u);
    EXPECT_EQ(model.answers, 1);
    EXPECT_EQ(model.dropouts, 1);
}

TEST(MeasureTolerance, DropsMostActivatedFirst) {
    ThresholdModel model(100, {{7, 12}});
    CountingJudge judge;
    auto r = measure_tolerance(model, judge, kQuery, 7, DropoutBudget{});
    EXPECT_EQ(r.dropped_count, 15u);
    // Most activated is id 99, then 98, ...
    ASSERT_EQ(model.last_dropped.size(), 15u);
    EXPECT_EQ(model.last_dropped.front(), 99u);
    EXPECT_EQ(model.last_dropped.back(), 85u);
    EXPECT_EQ(model.dropouts, 3);
}

TEST(MeasureTolerance, UnchangedWithinBudget) {
    ThresholdModel model(100, {{7, 30}});
    CountingJudge judge;
    auto r = measure_tolerance(model, judge, kQuery, 7, DropoutBudget{});
    EXPECT_FALSE(r.changed);
    EXPECT_FALSE(r.dropped_count);
    EXPECT_FALSE(r.alpha);
    EXPECT_EQ(model.dropouts, 5);
    // Same strings never reach the judge.
    EXPECT_EQ(judge.calls, 0);

    ThresholdModel again(100, {{7, 30}});
    auto inclusive = measure_tolerance(again, judge, kQuery, 7, DropoutBudget{30, 5, true});
    EXPECT_TRUE(inclusive.changed);
    EXPECT_EQ(inclusive.dropped_count, 30u);
    EXPECT_DOUBLE_EQ(inclusive.alpha->value(), 0.7);
}

TEST(MeasureTolerance, AlphaUsesLayerWidth) {
    ThresholdModel model(40, {{1, 25}});
    CountingJudge judge;
    auto r = measure_tolerance(model, judge, kQuery, 1, DropoutBudget{});
    EXPECT_EQ(r.dropped_count, 25u);
    EXPECT_DOUBLE_EQ(r.alpha->value(), 1.0 - 25.0 / 40.0);
    EXPECT_EQ(judge.calls, 1);
}

TEST(MeasureTolerance, NarrowLayerStopsAtWidth) {
    ThresholdModel model(12, {{1, 100}});
    CountingJudge judge;
    auto r = measure_tolerance(model, judge, kQuery, 1, DropoutBudget{});
    EXPECT_FALSE(r.changed);
    EXPECT_EQ(model.dropouts, 2);  // 5 and 10; 15 exceeds the width
}

TEST(MeasureTolerance, JudgeFailureIsProbeError) {
    ThresholdModel model(100, {{7, 5}});
    BrokenJudge judge;
    EXPECT_THROW(measure_tolerance(model, judge, kQuery, 7, DropoutBudget{}), ProbeError);
}

TEST(MeasureTolerance, RejectsMalformedNeuronLists) {
    class BadModel : public ThresholdModel {
    public:
        using ThresholdModel::ThresholdModel;
        NeuronList top_activated(const Query&, int, std::size_t m) override { return NeuronList(m, 3); }
    };
    BadModel model(100, {});
    CountingJudge judge;
    EXPECT_THROW(measure_tolerance(model, judge, kQuery, 7, DropoutBudget{}), ProbeError);
}

TEST(MeasureQuery, SharesOneAnswer) {
    ThresholdModel model(100, {{7, 5}, {15, 10}});
    CountingJudge judge;
    DetectionConfig cfg;
    auto records = measure_query(model, judge, kQuery, cfg);
    ASSERT_EQ(records.size(), 3u);
    EXPECT_EQ(model.answers, 1);
    EXPECT_EQ(records[0].dropped_count, 5u);
    EXPECT_EQ(records[1].dropped_count, 10u);
    EXPECT_FALSE(records[2].changed);
}

CalibrationMap uniform_calibration(const std::vector<int>& layers, std::vector<double> scores) {
    CalibrationMap map;
    for (int l : layers) map.emplace(l, CalibrationSet(l, scores));
    return map;
}

ToleranceRecord changed_record(int layer, std::size_t count, std::size_t width) {
    ToleranceRecord r;
    r.query_id = "q";
    r.layer_id = layer;
    r.layer_width = width;
    r.changed = true;
    r.dropped_count = count;
    r.alpha = NonconformityScore(1.0 - static_cast<double>(count) / static_cast<double>(width));
    return r;
}

ToleranceRecord unchanged_record(int layer, std::size_t width) {
    ToleranceRecord r;
    r.query_id = "q";
    r.layer_id = layer;
    r.layer_width = width;
    return r;
}

TEST(ScoreQuery, AllUnchangedDefaultsToInDistribution) {
    DetectionConfig cfg;
    auto cal = uniform_calibration(cfg.layers, {0.5});
    std::vector<ToleranceRecord> recs{unchanged_record(7, 100), unchanged_record(15, 100), unchanged_record(22, 100)};
    auto d = score_query(recs, cal, cfg);
    EXPECT_EQ(d.outcome, Outcome::InDistribution);
    EXPECT_FALSE(d.merged);
    EXPECT_EQ(d.layers.size(), 3u);
}

TEST(ScoreQuery, SmallPValuesMergeToOod) {
    // 24 calibration scores below the test alpha: p = 1/25 = 0.04 per layer.
    DetectionConfig cfg;
    auto cal = uniform_calibration(cfg.layers, std::vector<double>(24, 0.5));
    std::vector<ToleranceRecord> recs{changed_record(7, 5, 100), changed_record(15, 5, 100),
                                      changed_record(22, 5, 100)};
    auto d = score_query(recs, cal, cfg);
    ASSERT_TRUE(d.merged);
    EXPECT_NEAR(d.merged->value, 0.08, 1e-15);
    EXPECT_EQ(d.merged->inputs_used, 3u);
    EXPECT_EQ(d.outcome, Outcome::OOD);
}

TEST(ScoreQuery, SingleDefinedLayerPassesThrough) {
    DetectionConfig cfg;
    cfg.epsilon = 0.05;
    // alpha 0.5 against {0.25, 0.25, 0.75}: p = 2/4.
    auto cal = uniform_calibration(cfg.layers, {0.25, 0.25, 0.75});
    std::vector<ToleranceRecord> recs{unchanged_record(7, 100), changed_record(15, 50, 100),
                                      unchanged_record(22, 100)};
    for (auto m : {MergeMethod::Harmonic, MergeMethod::Arithmetic, MergeMethod::Geometric, MergeMethod::Bonferroni}) {
        cfg.method = m;
        auto d = score_query(recs, cal, cfg);
        ASSERT_TRUE(d.merged);
        EXPECT_DOUBLE_EQ(d.merged->value, 0.5);
        EXPECT_EQ(d.merged->inputs_used, 1u);
        EXPECT_EQ(d.outcome, Outcome::InDistribution);
    }
}

TEST(DetectQuery, MissingCalibrationFailsBeforeModelCalls) {
    UntouchableModel model;
    CountingJudge judge;
    DetectionConfig cfg;
    auto cal = uniform_calibration({7, 15}, {0.5});
    EXPECT_THROW(detect_query(model, judge, kQuery, cal, cfg), ConfigError);
}

TEST(DetectQuery, EpsilonZeroIsNeverOod) {
    ThresholdModel model(100, {{7, 5}, {15, 5}, {22, 5}});
    CountingJudge judge;
    DetectionConfig cfg;
    cfg.epsilon = 0.0;
    auto cal = uniform_calibration(cfg.layers, std::vector<double>(500, 0.1));
    auto d = detect_query(model, judge, kQuery, cal, cfg);
    ASSERT_TRUE(d.merged);
    EXPECT_EQ(d.outcome, Outcome::InDistribution);
}

TEST(Calibrate, ConstantConstruction) {
    ThresholdModel model(100, {{7, 25}});
    CountingJudge judge;
    DetectionConfig cfg;
    cfg.layers = {7};
    std::vector<Query> queries;
    for (int i = 0; i < 10; ++i) queries.push_back({"q" + std::to_string(i), "q"});
    auto result = calibrate(model, judge, queries, cfg, "ten");
    const auto& set = result.sets.at(7);
    ASSERT_EQ(set.size(), 10u);
    for (double s : set.scores()) EXPECT_DOUBLE_EQ(s, 0.75);
    EXPECT_EQ(set.source_manifest(), "ten");
    EXPECT_EQ(result.stats.at(0).unchanged, 0u);
}

TEST(Calibrate, AllUndefinedLayerIsAnError) {
    ThresholdModel model(100, {{7, 5}});
    CountingJudge judge;
    DetectionConfig cfg;
    cfg.layers = {7, 15};
    std::vector<Query> queries{{"a", "a"}, {"b", "b"}};
    try {
        calibrate(model, judge, queries, cfg);
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("layer 15"), std::string::npos);
    }
}

TEST(Calibrate, SizesMatchOracleChangeCounts) {
    synthetic::SyntheticSpec spec;
    spec.n_id = 60;
    spec.n_ood = 1;
    synthetic::SyntheticModel model(synthetic::generate(spec));
    ExactMatchJudge judge;
    DetectionConfig cfg;
    const auto corpus = synthetic::generate(spec);
    const auto queries = corpus.queries(synthetic::Domain::InDistribution);
    auto result = calibrate(model, judge, queries, cfg);
    for (const auto& st : result.stats) {
        std::size_t reachable = 0;
        for (const auto& q : queries) {
            // Reachable iff the first tried count at or above t* is still tried.
            if (model.oracle(q, st.layer_id) <= cfg.budget.tried_counts().back()) ++reachable;
        }
        EXPECT_EQ(result.sets.at(st.layer_id).size(), reachable) << "layer " << st.layer_id;
        EXPECT_EQ(st.unchanged, queries.size() - reachable);
    }
}

TEST(RecordJson, RoundTripAndConsistency) {
    auto r = changed_record(15, 10, 40);
    auto back = tolerance_record_from_json(to_json(r));
    EXPECT_EQ(back.query_id, "q");
    EXPECT_EQ(back.layer_id, 15);
    EXPECT_EQ(back.dropped_count, 10u);
    EXPECT_DOUBLE_EQ(back.alpha->value(), 0.75);

    auto u = to_json(unchanged_record(7, 32));
    EXPECT_FALSE(u.contains("alpha"));
    EXPECT_FALSE(tolerance_record_from_json(u).changed);
    u["changed"] = true;
    EXPECT_THROW(tolerance_record_from_json(u), ConfigError);
}

TEST(RecordJson, DetectionLines) {
    DetectionConfig cfg;
    auto cal = uniform_calibration(cfg.layers, std::vector<double>(24, 0.5));
    std::vector<ToleranceRecord> recs{changed_record(7, 5, 100), unchanged_record(15, 100),
                                      changed_record(22, 5, 100)};
    auto d = score_query(recs, cal, cfg);
    auto lines = to_jsonl_records(d);
    ASSERT_EQ(lines.size(), 4u);
    EXPECT_TRUE(lines[0].contains("p_value"));
    EXPECT_FALSE(lines[1].contains("p_value"));
    EXPECT_EQ(lines[3]["outcome"], "OOD");
    EXPECT_TRUE(lines[3].contains("merged_p"));
    auto doc = to_json(d);
    EXPECT_EQ(doc["layers"].size(), 3u);
    EXPECT_EQ(doc["inputs_used"], 2);
}

}  // namespace
}  // namespace confood
