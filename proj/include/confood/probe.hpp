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

// Line-delimited JSON protocol to an out-of-process subject model.
//
// Requests, one object per line, answered in order:
//   {"op":"answer","query":Q}
//   {"op":"top_activated","query":Q,"layer_id":L,"m":M}
//   {"op":"answer_with_dropout","query":Q,"layer_id":L,"neurons":[...]}
//   {"op":"layer_width","layer_id":L}
//   {"op":"judge","a":R1,"b":R2}
// Responses:
//   {"ok":true,"result":...}   result: string | [ids] | int | "same"/"different"
//   {"ok":false,"error":"..."}

#pragma once

#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <sys/types.h>

#include <json.hpp>

#include "confood/dropout.hpp"

namespace confood::probe {

nlohmann::json answer_request(const Query& query);
nlohmann::json top_activated_request(const Query& query, int layer_id, std::size_t m);
nlohmann::json dropout_request(const Query& query, int layer_id, std::span<const std::size_t> neurons);
nlohmann::json layer_width_request(int layer_id);
nlohmann::json judge_request(const Response& a, const Response& b);

/// Answers one request with `model` and `judge`. Never throws: failures come
/// back as {"ok":false,"error":...}. The query text doubles as the query id.
nlohmann::json handle_request(const nlohmann::json& request, SubjectModel& model, Judge& judge);

/// Reads requests from `in` until EOF and writes one response line per request.
/// Unparseable lines get an error response.
void serve(std::istream& in, std::ostream& out, SubjectModel& model, Judge& judge);

/// SubjectModel and Judge backed by a child process speaking the protocol on
/// its stdin/stdout. The command runs through /bin/sh -c. One request at a
/// time; every failure (spawn, EOF, malformed line, ok=false) is a ProbeError.
class ProbeClient final : public SubjectModel, public Judge {
public:
    explicit ProbeClient(const std::string& command);
    ~ProbeClient() override;

    ProbeClient(const ProbeClient&) = delete;
    ProbeClient& operator=(const ProbeClient&) = delete;

    /// Asks for the width of every layer; a ProbeError here is a failed handshake.
    void handshake(std::span<const int> layers);

    Response answer(const Query& query) override;
    NeuronList top_activated(const Query& query, int layer_id, std::size_t m) override;
    Response answer_with_dropout(const Query& query, int layer_id, std::span<const std::size_t> dropped) override;
    std::size_t layer_width(int layer_id) override;
    bool same(const Response& a, const Response& b) override;

    /// Sends one request and returns its "result". Exposed for protocol tests.
    nlohmann::json call(const nlohmann::json& request);

private:
    std::string read_line();

    int fd_ = -1;
    pid_t child_ = -1;
    std::string buffer_;
};

}  // namespace confood::probe
