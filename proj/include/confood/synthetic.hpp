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

// Redundant-voter subject models.
//
// Each layer of a query holds positive neuron contributions v and a
// background mass B. A layer votes "A" while the contributions of its
// surviving neurons sum to more than B; the model answers "A" iff every
// layer votes "A", and "B" otherwise. A redundancy parameter rho shapes v:
// rho = 1 spreads mass evenly (many neurons must be dropped to flip the
// vote), small rho concentrates it in a few neurons.
// In-domain queries draw a high rho, out-of-domain queries a low one.
//
// Because the exact minimum number of neurons to drop is a prefix-sum scan,
// the family doubles as an oracle for the dropout driver.

#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "confood/dropout.hpp"

namespace confood::synthetic {

inline constexpr std::string_view kAnswerA = "A";
inline constexpr std::string_view kAnswerB = "B";

/// One layer of one query.
class VoterLayer {
public:
    /// `activation` defaults to `contribution`. Throws ConfigError on an empty
    /// or non-positive contribution vector, negative background, or an
    /// activation vector of the wrong size.
    VoterLayer(std::vector<double> contribution, double background, std::vector<double> activation = {});

    std::size_t width() const noexcept { return contribution_.size(); }
    std::span<const double> contribution() const noexcept { return contribution_; }
    std::span<const double> activation() const noexcept { return activation_; }
    double background() const noexcept { return background_; }

    /// True iff the contributions of neurons not in `dropped` sum to more than the background.
    bool votes_a(std::span<const std::size_t> dropped) const;

    /// The min(m, width) most activated neuron ids, ascending by activation.
    /// Ties are broken by lower id ranking higher.
    NeuronList top_activated(std::size_t m) const;

private:
    std::vector<double> contribution_;
    std::vector<double> activation_;
    double background_;
};

/// Smallest t such that dropping the t largest contributions leaves at most
/// the background; width + 1 if no such t exists.
std::size_t oracle_tolerance(const VoterLayer& layer);

struct LayerShape {
    int layer_id;
    std::size_t width;
};

enum class Domain { InDistribution, OutOfDistribution };

struct SyntheticSpec {
    std::uint64_t seed = 7;
    std::size_t n_id = 200;
    std::size_t n_ood = 200;
    double rho_id = 0.95;
    double rho_ood = 0.2;
    /// Std. dev. of the per-query shift of rho, shared by all layers of a query.
    double query_jitter = 0.1;
    /// Std. dev. of the independent per-layer shift of rho.
    double layer_jitter = 0.2;
    /// c in v_i ~ exp(-i (1 - rho) c).
    double spread = 0.12;
    /// Background mass as a fraction of the layer's total contribution, drawn uniformly.
    double background_min = 0.3;
    double background_max = 0.8;
    std::vector<LayerShape> layers{{7, 32}, {15, 40}, {22, 48}};
    /// Activation = contribution * exp(activation_noise * z), so the
    /// activation ranking no longer matches influence.
    bool shuffled_activation = false;
    double activation_noise = 0.5;

    /// Throws ConfigError on an unusable spec.
    void validate() const;

    nlohmann::json to_json() const;
    /// Unknown keys are rejected.
    static SyntheticSpec from_json(const nlohmann::json& doc);
};

struct QueryInstance {
    std::string query_id;
    Domain domain;
    std::size_t index;
    /// Query-level redundancy (before the per-layer shift).
    double rho;
    std::map<int, double> layer_rho;
    std::map<int, VoterLayer> layers;
};

std::string make_query_id(Domain domain, std::size_t index);
/// Inverse of make_query_id.
std::optional<std::pair<Domain, std::size_t>> parse_query_id(std::string_view id);

/// Regenerates one query from (spec.seed, domain, index). Deterministic.
QueryInstance generate_instance(const SyntheticSpec& spec, Domain domain, std::size_t index);

class SyntheticCorpus {
public:
    explicit SyntheticCorpus(SyntheticSpec spec);

    const SyntheticSpec& spec() const noexcept { return spec_; }
    std::vector<Query> queries(Domain domain) const;
    /// Throws UsageError for ids outside the corpus.
    QueryInstance instance(std::string_view query_id) const;

    /// One line per query: query_id, rho, layer_widths, B (per layer), seed.
    std::vector<nlohmann::json> export_jsonl(Domain domain) const;

private:
    SyntheticSpec spec_;
};

/// Validates the spec and builds the corpus.
SyntheticCorpus generate(const SyntheticSpec& spec);

/// SubjectModel over redundant voters. Either backed by a corpus (instances
/// regenerated from the query id) or by instances registered explicitly.
class SyntheticModel final : public SubjectModel {
public:
    explicit SyntheticModel(SyntheticCorpus corpus);
    explicit SyntheticModel(std::map<int, std::size_t> layer_widths);

    /// Registers (or replaces) a hand-built query. Widths must match.
    void add_instance(std::string query_id, std::map<int, VoterLayer> layers);

    Response answer(const Query& query) override;
    NeuronList top_activated(const Query& query, int layer_id, std::size_t m) override;
    Response answer_with_dropout(const Query& query, int layer_id, std::span<const std::size_t> dropped) override;
    std::size_t layer_width(int layer_id) override;
    bool supports_concurrency() const override { return true; }

    /// Exact minimum drop count for a query's layer.
    std::size_t oracle(const Query& query, int layer_id) const;

    std::size_t answer_calls() const noexcept { return answer_calls_.load(); }
    std::size_t dropout_calls() const noexcept { return dropout_calls_.load(); }

private:
    std::map<int, VoterLayer> layers_for(const Query& query) const;
    const VoterLayer& layer_of(const std::map<int, VoterLayer>& layers, int layer_id) const;

    std::optional<SyntheticCorpus> corpus_;
    std::map<int, std::size_t> widths_;
    std::map<std::string, std::map<int, VoterLayer>, std::less<>> manual_;
    std::atomic<std::size_t> answer_calls_{0};
    std::atomic<std::size_t> dropout_calls_{0};
};

}  // namespace confood::synthetic
