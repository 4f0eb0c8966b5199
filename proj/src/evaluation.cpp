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

#include "confood/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "confood/errors.hpp"
#include "confood/io.hpp"

namespace confood::eval {

void SplitSpec::validate() const {
    if (!(calibration_fraction > 0.0 && calibration_fraction < 1.0)) {
        throw ConfigError("calibration fraction must lie in (0, 1)");
    }
    if (runs < 1) {
        throw ConfigError("at least one run is required");
    }
}

double auroc(std::span<const double> positive, std::span<const double> negative) {
    if (positive.empty() || negative.empty()) {
        throw UsageError("AUROC needs at least one positive and one negative score");
    }
    struct Entry {
        double score;
        bool positive;
    };
    std::vector<Entry> all;
    all.reserve(positive.size() + negative.size());
    for (double s : positive) all.push_back({s, true});
    for (double s : negative) all.push_back({s, false});
    std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.score < b.score; });

    // Sum of 1-based midranks of the positives.
    double rank_sum = 0.0;
    std::size_t i = 0;
    while (i < all.size()) {
        std::size_t j = i;
        while (j < all.size() && all[j].score == all[i].score) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k) {
            if (all[k].positive) rank_sum += midrank;
        }
        i = j;
    }
    const double np = static_cast<double>(positive.size());
    const double nn = static_cast<double>(negative.size());
    return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

RocCurve roc_curve(std::span<const double> positive, std::span<const double> negative) {
    if (positive.empty() || negative.empty()) {
        throw UsageError("ROC needs at least one positive and one negative score");
    }
    std::vector<double> pos(positive.begin(), positive.end());
    std::vector<double> neg(negative.begin(), negative.end());
    std::sort(pos.begin(), pos.end(), std::greater<>());
    std::sort(neg.begin(), neg.end(), std::greater<>());

    RocCurve curve;
    curve.points.push_back({0.0, 0.0});
    const double np = static_cast<double>(pos.size());
    const double nn = static_cast<double>(neg.size());
    std::size_t ip = 0;
    std::size_t in = 0;
    while (ip < pos.size() || in < neg.size()) {
        // Next threshold: the largest score not yet admitted.
        double threshold = -INFINITY;
        if (ip < pos.size()) threshold = std::max(threshold, pos[ip]);
        if (in < neg.size()) threshold = std::max(threshold, neg[in]);
        while (ip < pos.size() && pos[ip] >= threshold) ++ip;
        while (in < neg.size() && neg[in] >= threshold) ++in;
        curve.points.push_back({static_cast<double>(in) / nn, static_cast<double>(ip) / np});
    }
    for (std::size_t k = 1; k < curve.points.size(); ++k) {
        const auto& a = curve.points[k - 1];
        const auto& b = curve.points[k];
        curve.auroc += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0;
    }
    return curve;
}

Outcome majority_vote(std::span<const Outcome> votes) {
    if (votes.empty()) {
        throw UsageError("majority vote over no detections");
    }
    const auto ood = static_cast<std::size_t>(std::count(votes.begin(), votes.end(), Outcome::OOD));
    return 2 * ood > votes.size() ? Outcome::OOD : Outcome::InDistribution;
}

BaselineSpec BaselineSpec::base_score(int layer) { return {BaselineKind::BaseScore, {layer}}; }
BaselineSpec BaselineSpec::single_p_value(int layer) { return {BaselineKind::SinglePValue, {layer}}; }
BaselineSpec BaselineSpec::majority(std::vector<int> layers) { return {BaselineKind::MajorityVote, std::move(layers)}; }
BaselineSpec BaselineSpec::ensemble(std::vector<int> layers, MergeMethod method) {
    return {BaselineKind::EnsembleMerged, std::move(layers), method};
}

std::string BaselineSpec::name() const {
    std::string joined;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (i) joined += '-';
        joined += std::to_string(layers[i]);
    }
    switch (kind) {
        case BaselineKind::BaseScore: return "base_score_" + joined;
        case BaselineKind::SinglePValue: return "single_p_" + joined;
        case BaselineKind::MajorityVote: return "majority_vote_" + joined;
        case BaselineKind::EnsembleMerged: return "ensemble_" + std::string(to_string(method)) + "_" + joined;
    }
    return "unknown";
}

std::vector<BaselineSpec> default_baselines(const DetectionConfig& cfg) {
    std::vector<BaselineSpec> out;
    for (int layer : cfg.layers) out.push_back(BaselineSpec::base_score(layer));
    for (int layer : cfg.layers) out.push_back(BaselineSpec::single_p_value(layer));
    out.push_back(BaselineSpec::majority(cfg.layers));
    out.push_back(BaselineSpec::ensemble(cfg.layers, cfg.method));
    return out;
}

std::vector<MeasuredQuery> measure_all(SubjectModel& model, Judge& judge, std::span<const Query> queries,
                                       const DetectionConfig& cfg, std::size_t threads) {
    cfg.validate();
    std::vector<MeasuredQuery> out(queries.size());
    auto measure_one = [&](std::size_t i) {
        out[i].query_id = queries[i].id;
        out[i].records = measure_query(model, judge, queries[i], cfg);
    };

    const bool parallel = threads > 1 && queries.size() > 1 && model.supports_concurrency() &&
                          judge.supports_concurrency();
    if (!parallel) {
        for (std::size_t i = 0; i < queries.size(); ++i) measure_one(i);
        return out;
    }

    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> workers;
    const std::size_t n_workers = std::min(threads, queries.size());
    for (std::size_t w = 0; w < n_workers; ++w) {
        workers.emplace_back([&] {
            for (std::size_t i = next++; i < queries.size(); i = next++) {
                try {
                    measure_one(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                    next = queries.size();
                }
            }
        });
    }
    for (auto& t : workers) t.join();
    if (failure) std::rethrow_exception(failure);
    return out;
}

namespace {

const ToleranceRecord& record_for(const MeasuredQuery& q, int layer) {
    for (const auto& r : q.records) {
        if (r.layer_id == layer) return r;
    }
    throw UsageError("query " + q.query_id + " has no record for layer " + std::to_string(layer));
}

std::optional<PValue> layer_p_value(const MeasuredQuery& q, const CalibrationMap& calibration, int layer) {
    const auto& r = record_for(q, layer);
    if (!r.alpha) return std::nullopt;
    auto it = calibration.find(layer);
    if (it == calibration.end()) {
        throw ConfigError("no calibration set for layer " + std::to_string(layer));
    }
    return compute_p_value(*r.alpha, it->second);
}

std::optional<MergedPValue> merged_p_value(const MeasuredQuery& q, const CalibrationMap& calibration,
                                           const BaselineSpec& baseline) {
    std::vector<double> defined;
    for (int layer : baseline.layers) {
        if (auto p = layer_p_value(q, calibration, layer)) defined.push_back(p->value());
    }
    if (defined.empty()) return std::nullopt;
    return merge_p_values(std::span<const double>(defined), baseline.method);
}

Outcome vote(const MeasuredQuery& q, const CalibrationMap& calibration, const BaselineSpec& baseline, double epsilon) {
    std::vector<Outcome> votes;
    for (int layer : baseline.layers) {
        auto p = layer_p_value(q, calibration, layer);
        votes.push_back(p ? detect(*p, epsilon) : Outcome::InDistribution);
    }
    return majority_vote(votes);
}

}  // namespace

double detection_score(const MeasuredQuery& query, const CalibrationMap& calibration, const BaselineSpec& baseline,
                       const DetectionConfig& cfg) {
    switch (baseline.kind) {
        case BaselineKind::BaseScore: {
            const auto& r = record_for(query, baseline.layers.at(0));
            return r.alpha ? r.alpha->value() : 0.0;
        }
        case BaselineKind::SinglePValue: {
            auto p = layer_p_value(query, calibration, baseline.layers.at(0));
            return p ? 1.0 - p->value() : 0.0;
        }
        case BaselineKind::MajorityVote:
            return vote(query, calibration, baseline, cfg.epsilon) == Outcome::OOD ? 1.0 : 0.0;
        case BaselineKind::EnsembleMerged: {
            auto merged = merged_p_value(query, calibration, baseline);
            return merged ? 1.0 - merged->value : 0.0;
        }
    }
    throw UsageError("unknown baseline kind");
}

std::optional<Outcome> detection_outcome(const MeasuredQuery& query, const CalibrationMap& calibration,
                                         const BaselineSpec& baseline, const DetectionConfig&, double epsilon) {
    switch (baseline.kind) {
        case BaselineKind::BaseScore:
            return std::nullopt;
        case BaselineKind::SinglePValue: {
            auto p = layer_p_value(query, calibration, baseline.layers.at(0));
            return p ? detect(*p, epsilon) : Outcome::InDistribution;
        }
        case BaselineKind::MajorityVote:
            return vote(query, calibration, baseline, epsilon);
        case BaselineKind::EnsembleMerged: {
            auto merged = merged_p_value(query, calibration, baseline);
            return merged ? detect(*merged, epsilon) : Outcome::InDistribution;
        }
    }
    return std::nullopt;
}

std::vector<double> default_epsilon_grid() {
    std::vector<double> grid;
    for (int i = 0; i <= 10; ++i) grid.push_back(0.05 * i);
    return grid;
}

const BaselineResult& EvaluationReport::find(const std::string& name) const {
    for (const auto& b : baselines) {
        if (b.spec.name() == name) return b;
    }
    throw UsageError("no baseline named " + name);
}

namespace {

double mean_of(std::span<const double> xs) {
    return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double sample_std(std::span<const double> xs) {
    if (xs.size() < 2) return 0.0;
    const double m = mean_of(xs);
    double ss = 0.0;
    for (double x : xs) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

void check_baselines(std::span<const BaselineSpec> baselines, const DetectionConfig& cfg) {
    const std::set<int> configured(cfg.layers.begin(), cfg.layers.end());
    for (const auto& b : baselines) {
        if (b.layers.empty()) throw ConfigError("baseline " + b.name() + " has no layers");
        if ((b.kind == BaselineKind::BaseScore || b.kind == BaselineKind::SinglePValue) && b.layers.size() != 1) {
            throw ConfigError("baseline " + b.name() + " takes exactly one layer");
        }
        for (int layer : b.layers) {
            if (!configured.contains(layer)) {
                throw ConfigError("baseline " + b.name() + " uses unconfigured layer " + std::to_string(layer));
            }
        }
    }
}

}  // namespace

EvaluationReport evaluate_measured(std::span<const MeasuredQuery> id_queries, std::span<const MeasuredQuery> ood_queries,
                                   const SplitSpec& split, const DetectionConfig& cfg,
                                   std::span<const BaselineSpec> baselines, std::span<const double> epsilons) {
    split.validate();
    cfg.validate();
    check_baselines(baselines, cfg);
    if (id_queries.size() < 2 || ood_queries.empty()) {
        throw UsageError("evaluation needs at least two in-domain and one out-of-domain query");
    }
    const std::vector<double> grid =
        epsilons.empty() ? default_epsilon_grid() : std::vector<double>(epsilons.begin(), epsilons.end());

    EvaluationReport report;
    report.split = split;
    report.cfg = cfg;
    report.n_id = id_queries.size();
    report.n_ood = ood_queries.size();

    for (int layer : cfg.layers) {
        auto unchanged = [layer](std::span<const MeasuredQuery> qs) {
            std::size_t count = 0;
            for (const auto& q : qs) count += record_for(q, layer).changed ? 0 : 1;
            return static_cast<double>(count) / static_cast<double>(qs.size());
        };
        report.layers.push_back({layer, unchanged(id_queries), unchanged(ood_queries)});
    }

    for (const auto& b : baselines) {
        BaselineResult result{b, {}, 0.0, 0.0, {}, std::nullopt};
        if (b.kind != BaselineKind::BaseScore) {
            result.guarantee = GuaranteeCurve{grid, {}, std::vector<double>(grid.size(), 0.0)};
        }
        report.baselines.push_back(std::move(result));
    }

    const std::size_t n = id_queries.size();
    std::size_t n_cal = static_cast<std::size_t>(std::lround(split.calibration_fraction * static_cast<double>(n)));
    n_cal = std::clamp<std::size_t>(n_cal, 1, n - 1);

    for (std::size_t run = 0; run < split.runs; ++run) {
        std::seed_seq seq{static_cast<std::uint32_t>(split.seed), static_cast<std::uint32_t>(split.seed >> 32),
                          static_cast<std::uint32_t>(run)};
        std::mt19937_64 rng(seq);
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);

        std::vector<ToleranceRecord> cal_records;
        for (std::size_t k = 0; k < n_cal; ++k) {
            const auto& recs = id_queries[order[k]].records;
            cal_records.insert(cal_records.end(), recs.begin(), recs.end());
        }
        CalibrationResult calibration;
        try {
            calibration = calibrate_from_records(cal_records, cfg, "run " + std::to_string(run));
        } catch (const ConfigError& e) {
            throw ConfigError("run " + std::to_string(run) + " aborted: " + e.what());
        }
        std::map<int, std::size_t> sizes;
        for (const auto& [layer, set] : calibration.sets) sizes[layer] = set.size();
        report.calibration_sizes.push_back(std::move(sizes));

        std::vector<const MeasuredQuery*> test_id;
        for (std::size_t k = n_cal; k < n; ++k) test_id.push_back(&id_queries[order[k]]);

        for (auto& result : report.baselines) {
            std::vector<double> pos;
            std::vector<double> neg;
            for (const auto& q : ood_queries) pos.push_back(detection_score(q, calibration.sets, result.spec, cfg));
            for (const auto* q : test_id) neg.push_back(detection_score(*q, calibration.sets, result.spec, cfg));
            auto curve = roc_curve(pos, neg);
            result.auroc_per_run.push_back(curve.auroc);
            result.roc_per_run.push_back(std::move(curve));

            if (result.guarantee) {
                std::vector<double> rates;
                for (double eps : grid) {
                    std::size_t alarms = 0;
                    for (const auto* q : test_id) {
                        alarms += detection_outcome(*q, calibration.sets, result.spec, cfg, eps) == Outcome::OOD;
                    }
                    rates.push_back(static_cast<double>(alarms) / static_cast<double>(test_id.size()));
                }
                result.guarantee->per_run.push_back(std::move(rates));
            }
        }
    }

    for (auto& result : report.baselines) {
        result.auroc_mean = mean_of(result.auroc_per_run);
        result.auroc_std = sample_std(result.auroc_per_run);
        if (result.guarantee) {
            auto& g = *result.guarantee;
            for (std::size_t e = 0; e < g.epsilons.size(); ++e) {
                double sum = 0.0;
                for (const auto& run_rates : g.per_run) sum += run_rates[e];
                g.mean[e] = sum / static_cast<double>(g.per_run.size());
            }
        }
    }
    return report;
}

EvaluationReport run_experiment(SubjectModel& model, Judge& judge, std::span<const Query> id_queries,
                                std::span<const Query> ood_queries, const SplitSpec& split,
                                const DetectionConfig& cfg, std::span<const BaselineSpec> baselines,
                                std::size_t threads) {
    if (id_queries.empty() || ood_queries.empty()) {
        throw UsageError("both in-domain and out-of-domain queries are required");
    }
    split.validate();
    cfg.validate();
    check_baselines(baselines, cfg);
    const auto id_measured = measure_all(model, judge, id_queries, cfg, threads);
    const auto ood_measured = measure_all(model, judge, ood_queries, cfg, threads);
    return evaluate_measured(id_measured, ood_measured, split, cfg, baselines);
}

namespace {

std::string_view kind_name(BaselineKind kind) {
    switch (kind) {
        case BaselineKind::BaseScore: return "base_score";
        case BaselineKind::SinglePValue: return "single_p_value";
        case BaselineKind::MajorityVote: return "majority_vote";
        case BaselineKind::EnsembleMerged: return "ensemble";
    }
    return "unknown";
}

// Shortest round-trip text for CSV cells.
std::string num(double x) {
    std::ostringstream ss;
    ss.precision(17);
    ss << x;
    return ss.str();
}

}  // namespace

nlohmann::json EvaluationReport::to_json() const {
    nlohmann::json j;
    j["split"] = {{"calibration_fraction", split.calibration_fraction}, {"runs", split.runs}, {"seed", split.seed}};
    j["config"] = {{"layers", cfg.layers},
                   {"max_drop", cfg.budget.max_drop},
                   {"step", cfg.budget.step},
                   {"inclusive_bound", cfg.budget.inclusive_bound},
                   {"method", to_string(cfg.method)},
                   {"epsilon", cfg.epsilon}};
    j["n_id"] = n_id;
    j["n_ood"] = n_ood;

    auto rows = nlohmann::json::array();
    for (const auto& b : baselines) {
        nlohmann::json row{{"name", b.spec.name()},
                           {"kind", kind_name(b.spec.kind)},
                           {"layers", b.spec.layers},
                           {"auroc_mean", b.auroc_mean},
                           {"auroc_std", b.auroc_std},
                           {"auroc_runs", b.auroc_per_run}};
        if (b.spec.kind == BaselineKind::EnsembleMerged) row["method"] = to_string(b.spec.method);
        auto rocs = nlohmann::json::array();
        for (const auto& curve : b.roc_per_run) {
            auto pts = nlohmann::json::array();
            for (const auto& p : curve.points) pts.push_back({p.fpr, p.tpr});
            rocs.push_back(std::move(pts));
        }
        row["roc_runs"] = std::move(rocs);
        if (b.guarantee) {
            row["false_alarm"] = {{"epsilons", b.guarantee->epsilons},
                                  {"mean", b.guarantee->mean},
                                  {"runs", b.guarantee->per_run}};
        }
        rows.push_back(std::move(row));
    }
    j["baselines"] = std::move(rows);

    auto diag = nlohmann::json::array();
    for (const auto& l : layers) {
        diag.push_back({{"layer_id", l.layer_id},
                        {"id_unchanged_fraction", l.id_unchanged_fraction},
                        {"ood_unchanged_fraction", l.ood_unchanged_fraction}});
    }
    auto sizes = nlohmann::json::array();
    for (const auto& run : calibration_sizes) {
        nlohmann::json entry = nlohmann::json::object();
        for (const auto& [layer, size] : run) entry[std::to_string(layer)] = size;
        sizes.push_back(std::move(entry));
    }
    j["diagnostics"] = {{"layers", std::move(diag)}, {"calibration_sizes", std::move(sizes)}};
    return j;
}

void EvaluationReport::write_csv(const std::filesystem::path& dir) const {
    std::string summary = "baseline,auroc_mean,auroc_std";
    for (std::size_t r = 0; r < split.runs; ++r) summary += ",run_" + std::to_string(r);
    summary += '\n';

    for (const auto& b : baselines) {
        summary += b.spec.name() + "," + num(b.auroc_mean) + "," + num(b.auroc_std);
        for (double a : b.auroc_per_run) summary += "," + num(a);
        summary += '\n';

        std::string roc = "run,fpr,tpr\n";
        for (std::size_t r = 0; r < b.roc_per_run.size(); ++r) {
            for (const auto& p : b.roc_per_run[r].points) {
                roc += std::to_string(r) + "," + num(p.fpr) + "," + num(p.tpr) + "\n";
            }
        }
        io::write_text_atomic(dir / ("roc_" + b.spec.name() + ".csv"), roc);

        if (b.guarantee) {
            const auto& g = *b.guarantee;
            std::string text = "epsilon,rate";
            for (std::size_t r = 0; r < g.per_run.size(); ++r) text += ",run_" + std::to_string(r);
            text += '\n';
            for (std::size_t e = 0; e < g.epsilons.size(); ++e) {
                text += num(g.epsilons[e]) + "," + num(g.mean[e]);
                for (const auto& run_rates : g.per_run) text += "," + num(run_rates[e]);
                text += '\n';
            }
            io::write_text_atomic(dir / ("guarantee_" + b.spec.name() + ".csv"), text);
        }
    }
    io::write_text_atomic(dir / "auroc.csv", summary);
}

}  // namespace confood::eval
