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

#include "confood/synthetic.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <set>
#include <unordered_set>

#include "confood/errors.hpp"

namespace confood::synthetic {

VoterLayer::VoterLayer(std::vector<double> contribution, double background, std::vector<double> activation)
    : contribution_(std::move(contribution)), activation_(std::move(activation)), background_(background) {
    if (contribution_.empty()) {
        throw ConfigError("voter layer needs at least one neuron");
    }
    for (double v : contribution_) {
        if (!(v > 0.0) || !std::isfinite(v)) {
            throw ConfigError("neuron contributions must be positive and finite");
        }
    }
    if (!(background_ >= 0.0) || !std::isfinite(background_)) {
        throw ConfigError("background mass must be non-negative");
    }
    if (activation_.empty()) {
        activation_ = contribution_;
    } else if (activation_.size() != contribution_.size()) {
        throw ConfigError("activation and contribution vectors differ in size");
    }
}

bool VoterLayer::votes_a(std::span<const std::size_t> dropped) const {
    std::vector<bool> off(width(), false);
    for (std::size_t id : dropped) {
        if (id >= width()) {
            throw UsageError("neuron id " + std::to_string(id) + " outside layer of width " +
                             std::to_string(width()));
        }
        off[id] = true;
    }
    double active = 0.0;
    for (std::size_t i = 0; i < width(); ++i) {
        if (!off[i]) active += contribution_[i];
    }
    return active > background_;
}

NeuronList VoterLayer::top_activated(std::size_t m) const {
    NeuronList ids(width());
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    std::stable_sort(ids.begin(), ids.end(),
                     [this](std::size_t a, std::size_t b) { return activation_[a] > activation_[b]; });
    ids.resize(std::min(m, ids.size()));
    std::reverse(ids.begin(), ids.end());
    return ids;
}

std::size_t oracle_tolerance(const VoterLayer& layer) {
    std::vector<double> sorted(layer.contribution().begin(), layer.contribution().end());
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    const std::size_t n = sorted.size();
    // remaining[t] = sum of sorted[t..n), accumulated from the small end.
    std::vector<double> remaining(n + 1, 0.0);
    for (std::size_t t = n; t-- > 0;) {
        remaining[t] = remaining[t + 1] + sorted[t];
    }
    for (std::size_t t = 0; t <= n; ++t) {
        if (remaining[t] <= layer.background()) return t;
    }
    return n + 1;
}

void SyntheticSpec::validate() const {
    auto in_unit = [](double r) { return r > 0.0 && r <= 1.0; };
    if (!in_unit(rho_id) || !in_unit(rho_ood)) {
        throw ConfigError("rho must lie in (0, 1]");
    }
    if (n_id == 0 || n_ood == 0) {
        throw ConfigError("corpus needs at least one in-domain and one out-of-domain query");
    }
    if (!(query_jitter >= 0.0) || !(layer_jitter >= 0.0) || !(activation_noise >= 0.0)) {
        throw ConfigError("jitter and noise levels must be non-negative");
    }
    if (!(spread > 0.0)) {
        throw ConfigError("spread must be positive");
    }
    // B must stay below the total mass or the no-dropout answer is already "B".
    if (!(background_min >= 0.0 && background_min <= background_max && background_max < 1.0)) {
        throw ConfigError("background fractions need 0 <= min <= max < 1");
    }
    if (layers.empty()) {
        throw ConfigError("at least one layer is required");
    }
    std::set<int> ids;
    for (const auto& l : layers) {
        if (l.width == 0) throw ConfigError("layer width must be positive");
        if (!ids.insert(l.layer_id).second) throw ConfigError("duplicate layer id");
    }
}

nlohmann::json SyntheticSpec::to_json() const {
    auto layer_list = nlohmann::json::array();
    for (const auto& l : layers) {
        layer_list.push_back({{"layer_id", l.layer_id}, {"width", l.width}});
    }
    return {{"seed", seed},
            {"n_id", n_id},
            {"n_ood", n_ood},
            {"rho_id", rho_id},
            {"rho_ood", rho_ood},
            {"query_jitter", query_jitter},
            {"layer_jitter", layer_jitter},
            {"spread", spread},
            {"background_min", background_min},
            {"background_max", background_max},
            {"layers", layer_list},
            {"shuffled_activation", shuffled_activation},
            {"activation_noise", activation_noise}};
}

SyntheticSpec SyntheticSpec::from_json(const nlohmann::json& doc) {
    if (!doc.is_object()) throw ConfigError("synthetic spec must be a JSON object");
    SyntheticSpec s;
    try {
        for (const auto& [key, value] : doc.items()) {
            if (key == "seed") s.seed = value.get<std::uint64_t>();
            else if (key == "n_id") s.n_id = value.get<std::size_t>();
            else if (key == "n_ood") s.n_ood = value.get<std::size_t>();
            else if (key == "rho_id") s.rho_id = value.get<double>();
            else if (key == "rho_ood") s.rho_ood = value.get<double>();
            else if (key == "query_jitter") s.query_jitter = value.get<double>();
            else if (key == "layer_jitter") s.layer_jitter = value.get<double>();
            else if (key == "spread") s.spread = value.get<double>();
            else if (key == "background_min") s.background_min = value.get<double>();
            else if (key == "background_max") s.background_max = value.get<double>();
            else if (key == "shuffled_activation") s.shuffled_activation = value.get<bool>();
            else if (key == "activation_noise") s.activation_noise = value.get<double>();
            else if (key == "layers") {
                s.layers.clear();
                for (const auto& l : value) {
                    s.layers.push_back({l.at("layer_id").get<int>(), l.at("width").get<std::size_t>()});
                }
            } else {
                throw ConfigError("unknown synthetic spec key \"" + key + "\"");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("synthetic spec: ") + e.what());
    }
    s.validate();
    return s;
}

std::string make_query_id(Domain domain, std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s-%06zu", domain == Domain::InDistribution ? "id" : "ood", index);
    return buf;
}

std::optional<std::pair<Domain, std::size_t>> parse_query_id(std::string_view id) {
    Domain domain;
    std::string_view digits;
    if (id.starts_with("id-")) {
        domain = Domain::InDistribution;
        digits = id.substr(3);
    } else if (id.starts_with("ood-")) {
        domain = Domain::OutOfDistribution;
        digits = id.substr(4);
    } else {
        return std::nullopt;
    }
    std::size_t index = 0;
    auto [end, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), index);
    if (ec != std::errc() || end != digits.data() + digits.size() || digits.empty()) {
        return std::nullopt;
    }
    return std::pair{domain, index};
}

QueryInstance generate_instance(const SyntheticSpec& spec, Domain domain, std::size_t index) {
    const bool in_domain = domain == Domain::InDistribution;
    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                      static_cast<std::uint32_t>(in_domain ? 1 : 2), static_cast<std::uint32_t>(index),
                      static_cast<std::uint32_t>(static_cast<std::uint64_t>(index) >> 32)};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> background(spec.background_min, spec.background_max);

    static constexpr double kRhoFloor = 0.01;
    auto clamp_rho = [](double r) { return std::clamp(r, kRhoFloor, 1.0); };

    QueryInstance inst;
    inst.query_id = make_query_id(domain, index);
    inst.domain = domain;
    inst.index = index;
    const double base = in_domain ? spec.rho_id : spec.rho_ood;
    const double query_shift = spec.query_jitter * normal(rng);
    inst.rho = clamp_rho(base + query_shift);

    for (const auto& shape : spec.layers) {
        const double rho = clamp_rho(base + query_shift + spec.layer_jitter * normal(rng));
        const double b = background(rng);

        // Rank r gets weight exp(-r (1 - rho) c); ranks are scattered over neuron ids.
        const std::size_t n = shape.width;
        std::vector<double> by_rank(n);
        for (std::size_t r = 0; r < n; ++r) {
            by_rank[r] = std::exp(-static_cast<double>(r) * (1.0 - rho) * spec.spread);
        }
        const double total = std::accumulate(by_rank.begin(), by_rank.end(), 0.0);
        std::vector<std::size_t> ids(n);
        std::iota(ids.begin(), ids.end(), std::size_t{0});
        std::shuffle(ids.begin(), ids.end(), rng);

        std::vector<double> contribution(n);
        for (std::size_t r = 0; r < n; ++r) {
            contribution[ids[r]] = by_rank[r] / total;
        }
        std::vector<double> activation;
        if (spec.shuffled_activation) {
            activation.resize(n);
            for (std::size_t i = 0; i < n; ++i) {
                activation[i] = contribution[i] * std::exp(spec.activation_noise * normal(rng));
            }
        }
        inst.layer_rho.emplace(shape.layer_id, rho);
        inst.layers.emplace(shape.layer_id, VoterLayer(std::move(contribution), b, std::move(activation)));
    }
    return inst;
}

SyntheticCorpus::SyntheticCorpus(SyntheticSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

std::vector<Query> SyntheticCorpus::queries(Domain domain) const {
    const std::size_t n = domain == Domain::InDistribution ? spec_.n_id : spec_.n_ood;
    std::vector<Query> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto id = make_query_id(domain, i);
        out.push_back({id, id});
    }
    return out;
}

QueryInstance SyntheticCorpus::instance(std::string_view query_id) const {
    auto parsed = parse_query_id(query_id);
    if (!parsed) {
        throw UsageError("not a synthetic query id: " + std::string(query_id));
    }
    const auto [domain, index] = *parsed;
    const std::size_t n = domain == Domain::InDistribution ? spec_.n_id : spec_.n_ood;
    if (index >= n) {
        throw UsageError("query id outside the corpus: " + std::string(query_id));
    }
    return generate_instance(spec_, domain, index);
}

std::vector<nlohmann::json> SyntheticCorpus::export_jsonl(Domain domain) const {
    std::vector<nlohmann::json> lines;
    for (const auto& q : queries(domain)) {
        const auto inst = instance(q.id);
        auto widths = nlohmann::json::array();
        auto backgrounds = nlohmann::json::array();
        for (const auto& shape : spec_.layers) {
            widths.push_back(shape.width);
            backgrounds.push_back(inst.layers.at(shape.layer_id).background());
        }
        lines.push_back(
            {{"query_id", q.id}, {"rho", inst.rho}, {"layer_widths", widths}, {"B", backgrounds}, {"seed", spec_.seed}});
    }
    return lines;
}

SyntheticCorpus generate(const SyntheticSpec& spec) {
    spec.validate();
    return SyntheticCorpus(spec);
}

SyntheticModel::SyntheticModel(SyntheticCorpus corpus) : corpus_(std::move(corpus)) {
    for (const auto& shape : corpus_->spec().layers) {
        widths_.emplace(shape.layer_id, shape.width);
    }
}

SyntheticModel::SyntheticModel(std::map<int, std::size_t> layer_widths) : widths_(std::move(layer_widths)) {}

void SyntheticModel::add_instance(std::string query_id, std::map<int, VoterLayer> layers) {
    for (const auto& [layer, voter] : layers) {
        auto it = widths_.find(layer);
        if (it == widths_.end() || it->second != voter.width()) {
            throw ConfigError("instance layer " + std::to_string(layer) + " does not match the model's widths");
        }
    }
    manual_.insert_or_assign(std::move(query_id), std::move(layers));
}

std::map<int, VoterLayer> SyntheticModel::layers_for(const Query& query) const {
    if (auto it = manual_.find(query.id); it != manual_.end()) {
        return it->second;
    }
    if (!corpus_) {
        throw UsageError("unknown query " + query.id);
    }
    return corpus_->instance(query.id).layers;
}

const VoterLayer& SyntheticModel::layer_of(const std::map<int, VoterLayer>& layers, int layer_id) const {
    auto it = layers.find(layer_id);
    if (it == layers.end()) {
        throw ConfigError("synthetic model has no layer " + std::to_string(layer_id));
    }
    return it->second;
}

Response SyntheticModel::answer(const Query& query) {
    ++answer_calls_;
    const auto layers = layers_for(query);
    const bool a = std::all_of(layers.begin(), layers.end(), [](const auto& kv) { return kv.second.votes_a({}); });
    return std::string(a ? kAnswerA : kAnswerB);
}

NeuronList SyntheticModel::top_activated(const Query& query, int layer_id, std::size_t m) {
    const auto layers = layers_for(query);
    return layer_of(layers, layer_id).top_activated(m);
}

Response SyntheticModel::answer_with_dropout(const Query& query, int layer_id, std::span<const std::size_t> dropped) {
    ++answer_calls_;
    ++dropout_calls_;
    const auto layers = layers_for(query);
    const auto& target = layer_of(layers, layer_id);
    bool a = target.votes_a(dropped);
    for (const auto& [id, voter] : layers) {
        if (id != layer_id) a = a && voter.votes_a({});
    }
    return std::string(a ? kAnswerA : kAnswerB);
}

std::size_t SyntheticModel::layer_width(int layer_id) {
    auto it = widths_.find(layer_id);
    if (it == widths_.end()) {
        throw ConfigError("synthetic model has no layer " + std::to_string(layer_id));
    }
    return it->second;
}

std::size_t SyntheticModel::oracle(const Query& query, int layer_id) const {
    const auto layers = layers_for(query);
    return oracle_tolerance(layer_of(layers, layer_id));
}

}  // namespace confood::synthetic
