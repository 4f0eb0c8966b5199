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

// confood: simulate corpora, calibrate, detect and evaluate.
//
// Exit codes: 0 success (or in-distribution for single-query detect),
// 1 out-of-distribution for single-query detect, 2 usage or configuration
// error, 3 probe failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "confood/config.hpp"
#include "confood/dropout.hpp"
#include "confood/errors.hpp"
#include "confood/evaluation.hpp"
#include "confood/io.hpp"
#include "confood/probe.hpp"
#include "confood/synthetic.hpp"

extern char** environ;

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace confood;

constexpr int kExitOk = 0;
constexpr int kExitOod = 1;
constexpr int kExitConfig = 2;
constexpr int kExitProbe = 3;

// Flags shared by every subcommand. Only flags the user set reach the config.
struct CommonFlags {
    std::optional<std::string> config_path;
    std::optional<std::string> model;
    std::optional<std::string> probe_cmd;
    std::optional<std::string> layers;
    std::optional<long long> max_drop;
    std::optional<long long> step;
    std::optional<bool> inclusive_bound;
    std::optional<std::string> method;
    std::optional<double> epsilon;
    std::optional<long long> runs;
    std::optional<double> cal_frac;
    std::optional<long long> seed;
    std::optional<std::string> out_dir;
    std::optional<long long> jobs;
    std::optional<long long> n_id;
    std::optional<long long> n_ood;
    std::optional<double> rho_id;
    std::optional<double> rho_ood;

    void attach(CLI::App& app) {
        app.add_option("--config", config_path, "JSON config file (default: $CONFOOD_CONFIG)");
        app.add_option("--model", model, "Subject model: synthetic or probe")
            ->check(CLI::IsMember({"synthetic", "probe"}));
        app.add_option("--probe-cmd", probe_cmd, "Command line of the probe process (run via /bin/sh -c)");
        app.add_option("--layers", layers, "Comma-separated layer ids (default 7,15,22)");
        app.add_option("--max-drop", max_drop, "Maximum neurons dropped per layer (default 30)");
        app.add_option("--step", step, "Neurons added per dropout iteration (default 5)");
        app.add_option("--inclusive-bound", inclusive_bound, "Also try dropping exactly --max-drop neurons");
        app.add_option("--method", method, "Merging function: hm, am, gm or bonferroni (default am)");
        app.add_option("--epsilon", epsilon, "Detection threshold on the merged p-value (default 0.1)");
        app.add_option("--runs", runs, "Evaluation runs with fresh calibration/test splits (default 5)");
        app.add_option("--cal-frac", cal_frac, "Share of in-domain queries used for calibration (default 0.2)");
        app.add_option("--seed", seed, "Corpus and split seed (default 7)");
        app.add_option("--out-dir", out_dir, "Output directory (must exist)");
        app.add_option("--jobs", jobs, "Worker threads for measuring queries (default 1)");
        app.add_option("--n-id", n_id, "In-domain queries to simulate (default 200)");
        app.add_option("--n-ood", n_ood, "Out-of-domain queries to simulate (default 200)");
        app.add_option("--rho-id", rho_id, "Redundancy of simulated in-domain queries (default 0.95)");
        app.add_option("--rho-ood", rho_ood, "Redundancy of simulated out-of-domain queries (default 0.2)");
    }

    json flags_json() const {
        json j = json::object();
        auto put = [&j](const char* key, const auto& opt) {
            if (opt) j[key] = *opt;
        };
        put("model", model);
        put("probe_cmd", probe_cmd);
        put("max_drop", max_drop);
        put("step", step);
        put("inclusive_bound", inclusive_bound);
        put("method", method);
        put("epsilon", epsilon);
        put("runs", runs);
        put("cal_frac", cal_frac);
        put("seed", seed);
        put("out_dir", out_dir);
        put("jobs", jobs);
        put("n_id", n_id);
        put("n_ood", n_ood);
        put("rho_id", rho_id);
        put("rho_ood", rho_ood);
        if (layers) {
            std::vector<int> ids;
            std::stringstream ss(*layers);
            std::string item;
            while (std::getline(ss, item, ',')) {
                try {
                    std::size_t pos = 0;
                    ids.push_back(std::stoi(item, &pos));
                    if (pos != item.size()) throw std::invalid_argument(item);
                } catch (const std::logic_error&) {
                    throw ConfigError("--layers expects comma-separated integers, got \"" + *layers + "\"");
                }
            }
            j["layers"] = ids;
        }
        return j;
    }

    RunConfig resolve() const {
        ConfigSources sources;
        sources.flags = flags_json();
        sources.env = environment_settings(environ);
        std::optional<std::string> path = config_path;
        if (!path) {
            if (const char* env = std::getenv("CONFOOD_CONFIG"); env && *env) path = env;
        }
        if (path) sources.file = io::read_json(*path);
        return resolve_config(sources);
    }
};

fs::path require_dir(const std::string& dir) {
    if (!fs::is_directory(dir)) {
        throw ConfigError("output directory does not exist: " + dir);
    }
    return dir;
}

std::string timestamp() {
    const auto now = std::chrono::system_clock::now();
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch()).count();
    return std::to_string(secs);
}

synthetic::SyntheticCorpus load_corpus(const std::string& dir) {
    return synthetic::SyntheticCorpus(synthetic::SyntheticSpec::from_json(io::read_json(fs::path(dir) / "corpus.json")));
}

std::vector<Query> load_queries(const std::string& path) {
    std::vector<Query> out;
    for (const auto& line : io::read_jsonl(path)) {
        if (!line.contains("query_id") || !line["query_id"].is_string()) {
            throw ConfigError(path + ": every line needs a string \"query_id\"");
        }
        Query q;
        q.id = line["query_id"].get<std::string>();
        q.text = line.contains("text") ? line["text"].get<std::string>() : q.id;
        out.push_back(std::move(q));
    }
    if (out.empty()) throw ConfigError(path + " holds no queries");
    return out;
}

// Owns whatever model/judge pair the configuration asks for.
struct Subject {
    std::unique_ptr<SubjectModel> model_owner;
    std::unique_ptr<Judge> judge_owner;
    SubjectModel* model = nullptr;
    Judge* judge = nullptr;
};

Subject open_subject(const RunConfig& cfg, const std::optional<std::string>& corpus_dir) {
    Subject s;
    if (cfg.model == ModelKind::Probe) {
        auto client = std::make_unique<probe::ProbeClient>(cfg.probe_cmd);
        client->handshake(cfg.detection.layers);
        s.model = client.get();
        s.judge = client.get();
        s.model_owner = std::move(client);
        return s;
    }
    if (!corpus_dir) {
        throw ConfigError("the synthetic model needs --corpus");
    }
    s.model_owner = std::make_unique<synthetic::SyntheticModel>(load_corpus(*corpus_dir));
    s.judge_owner = std::make_unique<ExactMatchJudge>();
    s.model = s.model_owner.get();
    s.judge = s.judge_owner.get();
    return s;
}

int cmd_simulate(const CommonFlags& flags, const std::optional<std::string>& widths) {
    const RunConfig cfg = flags.resolve();
    const fs::path dir = require_dir(cfg.out_dir);

    synthetic::SyntheticSpec spec;
    spec.seed = cfg.seed;
    spec.n_id = cfg.n_id;
    spec.n_ood = cfg.n_ood;
    spec.rho_id = cfg.rho_id;
    spec.rho_ood = cfg.rho_ood;
    const std::vector<std::size_t> default_widths{32, 40, 48};
    std::vector<std::size_t> w;
    if (widths) {
        std::stringstream ss(*widths);
        std::string item;
        while (std::getline(ss, item, ',')) {
            try {
                w.push_back(std::stoul(item));
            } catch (const std::logic_error&) {
                throw ConfigError("--widths expects comma-separated integers");
            }
        }
        if (w.size() != cfg.detection.layers.size()) {
            throw ConfigError("--widths needs one width per layer");
        }
    } else if (cfg.detection.layers.size() == default_widths.size()) {
        w = default_widths;
    } else {
        w.assign(cfg.detection.layers.size(), 40);
    }
    spec.layers.clear();
    for (std::size_t i = 0; i < w.size(); ++i) spec.layers.push_back({cfg.detection.layers[i], w[i]});

    const auto corpus = synthetic::generate(spec);
    if (std::abs(spec.rho_id - spec.rho_ood) < 0.05) {
        std::cerr << "warning: rho-id and rho-ood are nearly equal; the two classes are indistinguishable\n";
    }
    io::write_json(dir / "corpus.json", spec.to_json());
    const auto id_lines = corpus.export_jsonl(synthetic::Domain::InDistribution);
    const auto ood_lines = corpus.export_jsonl(synthetic::Domain::OutOfDistribution);
    io::write_jsonl(dir / "id.jsonl", id_lines);
    io::write_jsonl(dir / "ood.jsonl", ood_lines);
    std::cout << "wrote " << id_lines.size() << " in-domain and " << ood_lines.size() << " out-of-domain queries to "
              << dir.string() << "\n";
    return kExitOk;
}

int cmd_calibrate(const CommonFlags& flags, const std::optional<std::string>& corpus_dir,
                  std::optional<std::string> queries_path) {
    const RunConfig cfg = flags.resolve();
    const fs::path dir = require_dir(cfg.out_dir);
    if (!queries_path) {
        if (!corpus_dir) throw ConfigError("calibrate needs --queries or --corpus");
        queries_path = (fs::path(*corpus_dir) / "id.jsonl").string();
    }
    const auto queries = load_queries(*queries_path);
    auto subject = open_subject(cfg, corpus_dir);

    const std::string source = fs::path(*queries_path).filename().string() + " (" + std::to_string(queries.size()) +
                               " queries, m=" + std::to_string(cfg.detection.budget.max_drop) +
                               ", n=" + std::to_string(cfg.detection.budget.step) + ")";
    const auto result = calibrate(*subject.model, *subject.judge, queries, cfg.detection, source);

    json manifest{{"created", timestamp()}, {"queries", *queries_path}, {"config", to_json(cfg)}};
    auto layers = json::array();
    for (const auto& st : result.stats) {
        const auto& set = result.sets.at(st.layer_id);
        io::write_json(dir / ("calibration_" + std::to_string(st.layer_id) + ".json"), set.to_json());
        layers.push_back({{"layer_id", st.layer_id},
                          {"queries", st.queries},
                          {"unchanged", st.unchanged},
                          {"calibration_size", set.size()}});
        std::cout << "layer " << st.layer_id << ": " << set.size() << " scores, " << st.unchanged << " of "
                  << st.queries << " responses unchanged\n";
    }
    manifest["layers"] = std::move(layers);
    io::write_json(dir / "calibration_manifest.json", manifest);
    return kExitOk;
}

CalibrationMap load_calibration(const std::string& dir, const DetectionConfig& cfg) {
    CalibrationMap sets;
    for (int layer : cfg.layers) {
        const fs::path path = fs::path(dir) / ("calibration_" + std::to_string(layer) + ".json");
        if (!fs::exists(path)) {
            throw ConfigError("missing calibration file " + path.string());
        }
        auto set = CalibrationSet::from_json(io::read_json(path));
        if (set.layer_id() != layer) {
            throw ConfigError(path.string() + " holds layer " + std::to_string(set.layer_id()));
        }
        sets.emplace(layer, std::move(set));
    }
    return sets;
}

int cmd_detect(const CommonFlags& flags, const std::optional<std::string>& corpus_dir,
               const std::string& calibration_dir, const std::optional<std::string>& single,
               const std::optional<std::string>& queries_path, const std::optional<std::string>& records_path) {
    const RunConfig cfg = flags.resolve();
    if (single.has_value() == queries_path.has_value()) {
        throw ConfigError("detect needs exactly one of --query or --queries");
    }
    const auto calibration = load_calibration(calibration_dir, cfg.detection);
    const std::vector<Query> queries = single ? std::vector<Query>{{*single, *single}} : load_queries(*queries_path);
    auto subject = open_subject(cfg, corpus_dir);

    std::vector<json> record_lines;
    Outcome last = Outcome::InDistribution;
    for (const auto& q : queries) {
        const auto detection = detect_query(*subject.model, *subject.judge, q, calibration, cfg.detection);
        std::cout << to_json(detection).dump() << "\n";
        auto lines = to_jsonl_records(detection);
        record_lines.insert(record_lines.end(), lines.begin(), lines.end());
        last = detection.outcome;
    }
    if (records_path) io::write_jsonl(*records_path, record_lines);
    if (single) return last == Outcome::OOD ? kExitOod : kExitOk;
    return kExitOk;
}

int cmd_evaluate(const CommonFlags& flags, const std::optional<std::string>& corpus_dir,
                 const std::optional<std::string>& id_path, const std::optional<std::string>& ood_path,
                 bool all_methods) {
    const RunConfig cfg = flags.resolve();
    const fs::path dir = require_dir(cfg.out_dir);

    std::vector<Query> id_queries;
    std::vector<Query> ood_queries;
    if (id_path || ood_path) {
        if (!id_path || !ood_path) throw ConfigError("--id-queries and --ood-queries go together");
        id_queries = load_queries(*id_path);
        ood_queries = load_queries(*ood_path);
    } else if (corpus_dir) {
        id_queries = load_queries((fs::path(*corpus_dir) / "id.jsonl").string());
        ood_queries = load_queries((fs::path(*corpus_dir) / "ood.jsonl").string());
    } else {
        throw ConfigError("evaluate needs --corpus or --id-queries/--ood-queries");
    }
    auto subject = open_subject(cfg, corpus_dir);

    auto baselines = eval::default_baselines(cfg.detection);
    if (all_methods) {
        for (auto m : {MergeMethod::Harmonic, MergeMethod::Arithmetic, MergeMethod::Geometric, MergeMethod::Bonferroni}) {
            if (m != cfg.detection.method) baselines.push_back(eval::BaselineSpec::ensemble(cfg.detection.layers, m));
        }
    }
    const auto report = eval::run_experiment(*subject.model, *subject.judge, id_queries, ood_queries, cfg.split,
                                             cfg.detection, baselines, cfg.jobs);
    io::write_json(dir / "report.json", report.to_json());
    report.write_csv(dir);

    std::printf("%-36s %10s %10s\n", "baseline", "AUROC", "std");
    for (const auto& b : report.baselines) {
        std::printf("%-36s %10.4f %10.4f\n", b.spec.name().c_str(), b.auroc_mean, b.auroc_std);
    }
    for (const auto& l : report.layers) {
        std::printf("layer %d: unchanged responses %.1f%% in-domain, %.1f%% out-of-domain\n", l.layer_id,
                    100.0 * l.id_unchanged_fraction, 100.0 * l.ood_unchanged_fraction);
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Conformal out-of-distribution detection from dropout tolerance"};
    app.require_subcommand(1);

    CommonFlags common;
    std::optional<std::string> corpus_dir;
    std::optional<std::string> widths;
    std::optional<std::string> queries_path;
    std::optional<std::string> calibration_dir_opt;
    std::optional<std::string> single_query;
    std::optional<std::string> records_path;
    std::optional<std::string> id_path;
    std::optional<std::string> ood_path;
    bool all_methods = false;

    auto* simulate = app.add_subcommand("simulate", "Write a synthetic corpus (corpus.json, id.jsonl, ood.jsonl)");
    common.attach(*simulate);
    simulate->add_option("--widths", widths, "Comma-separated layer widths, one per layer (default 32,40,48)");

    auto* calib = app.add_subcommand("calibrate", "Measure calibration queries and write per-layer calibration sets");
    common.attach(*calib);
    calib->add_option("--corpus", corpus_dir, "Synthetic corpus directory");
    calib->add_option("--queries", queries_path, "JSONL of calibration queries (default <corpus>/id.jsonl)");

    auto* detect = app.add_subcommand("detect", "Detect queries; single-query mode exits 1 for OOD, 0 otherwise");
    common.attach(*detect);
    detect->add_option("--corpus", corpus_dir, "Synthetic corpus directory");
    detect->add_option("--calibration", calibration_dir_opt, "Directory holding calibration_<layer>.json")->required();
    detect->add_option("--query", single_query, "Single query (id for synthetic, text for probe)");
    detect->add_option("--queries", queries_path, "JSONL of queries (batch mode, always exits 0)");
    detect->add_option("--records", records_path, "Also write per-layer tolerance records as JSONL");

    auto* evaluate = app.add_subcommand("evaluate", "Run the split/calibrate/score protocol and write report + CSVs");
    common.attach(*evaluate);
    evaluate->add_option("--corpus", corpus_dir, "Synthetic corpus directory");
    evaluate->add_option("--id-queries", id_path, "JSONL of in-domain queries");
    evaluate->add_option("--ood-queries", ood_path, "JSONL of out-of-domain queries");
    evaluate->add_flag("--all-methods", all_methods, "Also evaluate the ensemble with every other merging function");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*simulate) return cmd_simulate(common, widths);
        if (*calib) return cmd_calibrate(common, corpus_dir, queries_path);
        if (*detect) {
            return cmd_detect(common, corpus_dir, *calibration_dir_opt, single_query, queries_path, records_path);
        }
        if (*evaluate) return cmd_evaluate(common, corpus_dir, id_path, ood_path, all_methods);
    } catch (const ProbeError& e) {
        std::cerr << "probe error: " << e.what() << "\n";
        return kExitProbe;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
    return kExitConfig;
}
