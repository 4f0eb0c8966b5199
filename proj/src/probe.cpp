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

#include "confood/probe.hpp"

#include <cerrno>
#include <cstring>

#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include "confood/errors.hpp"

namespace confood::probe {

using nlohmann::json;

json answer_request(const Query& query) { return {{"op", "answer"}, {"query", query.text}}; }

json top_activated_request(const Query& query, int layer_id, std::size_t m) {
    return {{"op", "top_activated"}, {"query", query.text}, {"layer_id", layer_id}, {"m", m}};
}

json dropout_request(const Query& query, int layer_id, std::span<const std::size_t> neurons) {
    return {{"op", "answer_with_dropout"},
            {"query", query.text},
            {"layer_id", layer_id},
            {"neurons", std::vector<std::size_t>(neurons.begin(), neurons.end())}};
}

json layer_width_request(int layer_id) { return {{"op", "layer_width"}, {"layer_id", layer_id}}; }

json judge_request(const Response& a, const Response& b) { return {{"op", "judge"}, {"a", a}, {"b", b}}; }

json handle_request(const json& request, SubjectModel& model, Judge& judge) {
    try {
        if (!request.is_object() || !request.contains("op")) {
            return {{"ok", false}, {"error", "request needs an \"op\""}};
        }
        const auto op = request.at("op").get<std::string>();
        auto query = [&] {
            auto text = request.at("query").get<std::string>();
            return Query{text, text};
        };
        if (op == "answer") {
            return {{"ok", true}, {"result", model.answer(query())}};
        }
        if (op == "top_activated") {
            return {{"ok", true},
                    {"result", model.top_activated(query(), request.at("layer_id").get<int>(),
                                                   request.at("m").get<std::size_t>())}};
        }
        if (op == "answer_with_dropout") {
            auto neurons = request.at("neurons").get<std::vector<std::size_t>>();
            return {{"ok", true},
                    {"result", model.answer_with_dropout(query(), request.at("layer_id").get<int>(), neurons)}};
        }
        if (op == "layer_width") {
            return {{"ok", true}, {"result", model.layer_width(request.at("layer_id").get<int>())}};
        }
        if (op == "judge") {
            const auto a = request.at("a").get<std::string>();
            const auto b = request.at("b").get<std::string>();
            const bool same = a == b || judge.same(a, b);
            return {{"ok", true}, {"result", same ? "same" : "different"}};
        }
        return {{"ok", false}, {"error", "unknown op \"" + op + "\""}};
    } catch (const std::exception& e) {
        return {{"ok", false}, {"error", e.what()}};
    }
}

void serve(std::istream& in, std::ostream& out, SubjectModel& model, Judge& judge) {
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json response;
        try {
            response = handle_request(json::parse(line), model, judge);
        } catch (const json::parse_error& e) {
            response = {{"ok", false}, {"error", std::string("malformed request: ") + e.what()}};
        }
        out << response.dump() << '\n' << std::flush;
    }
}

ProbeClient::ProbeClient(const std::string& command) {
    int fds[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, fds) != 0) {
        throw ProbeError(std::string("socketpair: ") + std::strerror(errno));
    }
    const pid_t pid = ::fork();
    if (pid < 0) {
        ::close(fds[0]);
        ::close(fds[1]);
        throw ProbeError(std::string("fork: ") + std::strerror(errno));
    }
    if (pid == 0) {
        ::dup2(fds[1], STDIN_FILENO);
        ::dup2(fds[1], STDOUT_FILENO);
        ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
        ::_exit(127);
    }
    ::close(fds[1]);
    fd_ = fds[0];
    child_ = pid;
}

ProbeClient::~ProbeClient() {
    if (fd_ >= 0) {
        ::shutdown(fd_, SHUT_RDWR);
        ::close(fd_);
    }
    if (child_ > 0) {
        int status = 0;
        ::waitpid(child_, &status, 0);
    }
}

std::string ProbeClient::read_line() {
    for (;;) {
        if (auto nl = buffer_.find('\n'); nl != std::string::npos) {
            std::string line = buffer_.substr(0, nl);
            buffer_.erase(0, nl + 1);
            return line;
        }
        char chunk[4096];
        const ssize_t got = ::recv(fd_, chunk, sizeof chunk, 0);
        if (got == 0) {
            throw ProbeError("probe closed the connection");
        }
        if (got < 0) {
            if (errno == EINTR) continue;
            throw ProbeError(std::string("probe read: ") + std::strerror(errno));
        }
        buffer_.append(chunk, static_cast<std::size_t>(got));
    }
}

json ProbeClient::call(const json& request) {
    const std::string line = request.dump() + "\n";
    std::size_t sent = 0;
    while (sent < line.size()) {
        const ssize_t n = ::send(fd_, line.data() + sent, line.size() - sent, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw ProbeError(std::string("probe write: ") + std::strerror(errno));
        }
        sent += static_cast<std::size_t>(n);
    }

    json response;
    try {
        response = json::parse(read_line());
    } catch (const json::parse_error& e) {
        throw ProbeError(std::string("malformed probe response: ") + e.what());
    }
    if (!response.is_object() || !response.contains("ok") || !response["ok"].is_boolean()) {
        throw ProbeError("probe response lacks a boolean \"ok\"");
    }
    if (!response["ok"].get<bool>()) {
        std::string message = "probe error";
        if (response.contains("error") && response["error"].is_string()) {
            message += ": " + response["error"].get<std::string>();
        }
        throw ProbeError(message);
    }
    if (!response.contains("result")) {
        throw ProbeError("probe response lacks \"result\"");
    }
    return response["result"];
}

namespace {

template <typename T>
T result_as(const json& result, const char* op) {
    try {
        return result.get<T>();
    } catch (const json::exception& e) {
        throw ProbeError(std::string("bad result for ") + op + ": " + e.what());
    }
}

}  // namespace

void ProbeClient::handshake(std::span<const int> layers) {
    for (int layer : layers) {
        if (layer_width(layer) == 0) {
            throw ProbeError("probe reports zero width for layer " + std::to_string(layer));
        }
    }
}

Response ProbeClient::answer(const Query& query) {
    return result_as<std::string>(call(answer_request(query)), "answer");
}

NeuronList ProbeClient::top_activated(const Query& query, int layer_id, std::size_t m) {
    return result_as<NeuronList>(call(top_activated_request(query, layer_id, m)), "top_activated");
}

Response ProbeClient::answer_with_dropout(const Query& query, int layer_id, std::span<const std::size_t> dropped) {
    return result_as<std::string>(call(dropout_request(query, layer_id, dropped)), "answer_with_dropout");
}

std::size_t ProbeClient::layer_width(int layer_id) {
    return result_as<std::size_t>(call(layer_width_request(layer_id)), "layer_width");
}

bool ProbeClient::same(const Response& a, const Response& b) {
    if (a == b) return true;
    const auto verdict = result_as<std::string>(call(judge_request(a, b)), "judge");
    if (verdict == "same") return true;
    if (verdict == "different") return false;
    throw ProbeError("judge returned \"" + verdict + "\"");
}

}  // namespace confood::probe
