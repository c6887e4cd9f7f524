#include "doppel/gateway.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>

#include <httplib.h>

#include "doppel/error.hpp"

namespace doppel {

using nlohmann::json;
using nlohmann::ordered_json;

std::string complete_prompt(Gateway& gw, std::string_view prompt, double temperature,
                            std::string_view model) {
    ChatRequest request{std::string(model), {{"user", std::string(prompt)}}, temperature};
    return gw.complete(request);
}

ordered_json chat_request_json(const ChatRequest& request) {
    ordered_json messages = ordered_json::array();
    for (const auto& m : request.messages) {
        ordered_json msg;
        msg["role"] = m.role;
        msg["content"] = m.content;
        messages.push_back(std::move(msg));
    }
    ordered_json body;
    body["model"] = request.model;
    body["messages"] = std::move(messages);
    body["temperature"] = request.temperature;
    return body;
}

std::string parse_chat_response(const json& response) {
    try {
        return response.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception& e) {
        throw Error(ErrorCode::GatewayError,
                    std::string("chat response lacks choices[0].message.content: ") + e.what());
    }
}

ordered_json embedding_request_json(std::string_view model, std::string_view text) {
    ordered_json body;
    body["model"] = model;
    body["input"] = text;
    return body;
}

Embedding parse_embedding_response(const json& response) {
    try {
        return response.at("data").at(0).at("embedding").get<Embedding>();
    } catch (const json::exception& e) {
        throw Error(ErrorCode::GatewayError,
                    std::string("embedding response lacks data[0].embedding: ") + e.what());
    }
}

std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed) {
    std::uint64_t h = seed;
    for (const unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

std::string prompt_hash(const ChatRequest& request) {
    std::uint64_t h = fnv1a64("");
    for (const auto& m : request.messages) {
        h = fnv1a64(m.role, h);
        h = fnv1a64(std::string_view("\0", 1), h);
        h = fnv1a64(m.content, h);
        h = fnv1a64(std::string_view("\0", 1), h);
    }
    return hex64(h);
}

std::string text_hash(std::string_view text) { return hex64(fnv1a64(text)); }

Embedding hashing_embedding(std::string_view text, std::size_t dim) {
    Embedding v(dim, 0.0f);
    if (dim == 0) return v;
    std::string token;
    auto flush = [&] {
        if (token.empty()) return;
        const auto h = fnv1a64(token);
        const auto slot = static_cast<std::size_t>(h % dim);
        v[slot] += (h >> 63) ? -1.0f : 1.0f;
        token.clear();
    };
    for (const unsigned char c : text) {
        if (std::isalnum(c)) {
            token += static_cast<char>(std::tolower(c));
        } else {
            flush();
        }
    }
    flush();
    double norm = 0.0;
    for (const float x : v) norm += static_cast<double>(x) * x;
    if (norm > 0.0) {
        const double inv = 1.0 / std::sqrt(norm);
        for (float& x : v) x = static_cast<float>(x * inv);
    }
    return v;
}

// ---------------------------------------------------------------------------

GatewayConfig gateway_config_from_json(const json& j, const std::filesystem::path& base_dir) {
    GatewayConfig c;
    c.provider = j.value("provider", c.provider);
    auto endpoint = [](const json& e, EndpointConfig d) {
        d.base_url = e.value("base_url", d.base_url);
        d.model = e.value("model", d.model);
        d.api_key_env = e.value("api_key_env", d.api_key_env);
        d.timeout_seconds = e.value("timeout_seconds", d.timeout_seconds);
        return d;
    };
    if (j.contains("chat")) c.chat = endpoint(j.at("chat"), c.chat);
    if (j.contains("embedding")) {
        c.embedding = endpoint(j.at("embedding"), c.embedding);
    } else {
        // Same service for both unless configured separately.
        c.embedding.base_url = c.chat.base_url;
        c.embedding.api_key_env = c.chat.api_key_env;
    }
    if (j.contains("replay")) {
        std::filesystem::path replay = j.at("replay").get<std::string>();
        c.replay = replay.is_relative() && !base_dir.empty() ? base_dir / replay : replay;
    }
    c.hashing_dim = j.value("hashing_dim", c.hashing_dim);
    return c;
}

std::unique_ptr<Gateway> make_gateway(const GatewayConfig& config) {
    if (config.provider == "http") return std::make_unique<HttpGateway>(config);
    if (config.provider == "scripted") return ScriptedGateway::from_file(config.replay);
    if (config.provider == "hashing") return std::make_unique<HashingGateway>(config.hashing_dim);
    throw Error(ErrorCode::InvalidArgument, "unknown gateway provider '" + config.provider + "'");
}

// ---------------------------------------------------------------------------

HttpGateway::HttpGateway(GatewayConfig config) : config_(std::move(config)) {}

json HttpGateway::post(const EndpointConfig& endpoint, std::string_view suffix,
                       const std::string& body) {
    // Split "scheme://host[:port][/prefix]" into client origin and path prefix.
    const auto& url = endpoint.base_url;
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos)
        throw Error(ErrorCode::GatewayError, "base_url must include a scheme: " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    const std::string origin = url.substr(0, path_start);
    std::string path = path_start == std::string::npos ? "" : url.substr(path_start);
    while (!path.empty() && path.back() == '/') path.pop_back();
    path += suffix;

    httplib::Client client(origin);
    const auto timeout = std::chrono::milliseconds(
        static_cast<std::int64_t>(endpoint.timeout_seconds * 1000.0));
    client.set_connection_timeout(timeout);
    client.set_read_timeout(timeout);
    client.set_write_timeout(timeout);

    httplib::Headers headers;
    if (!endpoint.api_key_env.empty()) {
        if (const char* key = std::getenv(endpoint.api_key_env.c_str()))
            headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    const auto res = client.Post(path, headers, body, "application/json");
    if (!res)
        throw Error(ErrorCode::GatewayError,
                    "request to " + origin + path + " failed: " + httplib::to_string(res.error()));
    if (res->status != 200)
        throw Error(ErrorCode::GatewayError,
                    "request to " + origin + path + " returned HTTP " + std::to_string(res->status));
    json parsed = json::parse(res->body, nullptr, false);
    if (parsed.is_discarded())
        throw Error(ErrorCode::GatewayError, "response from " + origin + path + " is not JSON");
    return parsed;
}

std::string HttpGateway::complete(const ChatRequest& request) {
    ChatRequest req = request;
    if (req.model.empty()) req.model = config_.chat.model;
    return parse_chat_response(post(config_.chat, "/chat/completions", chat_request_json(req).dump()));
}

Embedding HttpGateway::embed(std::string_view text) {
    return parse_embedding_response(post(
        config_.embedding, "/embeddings", embedding_request_json(config_.embedding.model, text).dump()));
}

// ---------------------------------------------------------------------------

std::unique_ptr<ScriptedGateway> ScriptedGateway::from_json(const json& replay) {
    auto gw = std::make_unique<ScriptedGateway>();
    for (const auto& c : replay.value("completions", json::array()))
        gw->add_completion(c.at("hash").get<std::string>(), c.at("text").get<std::string>());
    for (const auto& t : replay.value("ordinal_completions", json::array()))
        gw->add_ordinal_completion(t.get<std::string>());
    for (const auto& e : replay.value("embeddings", json::array())) {
        const std::string hash =
            e.contains("hash") ? e.at("hash").get<std::string>() : text_hash(e.at("text").get<std::string>());
        gw->add_embedding(hash, e.at("vector").get<Embedding>());
    }
    if (replay.contains("embedding_fallback_dim"))
        gw->set_embedding_fallback(replay.at("embedding_fallback_dim").get<std::size_t>());
    return gw;
}

std::unique_ptr<ScriptedGateway> ScriptedGateway::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoError, "cannot open replay file " + path.string());
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw Error(ErrorCode::IoError, "replay file is not JSON: " + path.string());
    return from_json(j);
}

void ScriptedGateway::add_completion(std::string hash, std::string text) {
    std::lock_guard lock(mu_);
    by_hash_[std::move(hash)] = std::move(text);
}

void ScriptedGateway::add_ordinal_completion(std::string text) {
    std::lock_guard lock(mu_);
    by_ordinal_.push_back(std::move(text));
}

void ScriptedGateway::add_embedding(std::string hash, Embedding vector) {
    std::lock_guard lock(mu_);
    embeddings_[std::move(hash)] = std::move(vector);
}

std::string ScriptedGateway::complete(const ChatRequest& request) {
    std::lock_guard lock(mu_);
    const auto hash = prompt_hash(request);
    std::string reply;
    if (const auto it = by_hash_.find(hash); it != by_hash_.end()) {
        reply = it->second;
    } else if (next_ordinal_ < by_ordinal_.size()) {
        reply = by_ordinal_[next_ordinal_++];
    } else {
        throw Error(ErrorCode::GatewayError, "scripted gateway: unmatched completion " + hash);
    }
    calls_.push_back({request, reply});
    return reply;
}

Embedding ScriptedGateway::embed(std::string_view text) {
    std::lock_guard lock(mu_);
    ++embed_calls_;
    if (const auto it = embeddings_.find(text_hash(text)); it != embeddings_.end()) return it->second;
    if (fallback_dim_) return hashing_embedding(text, *fallback_dim_);
    throw Error(ErrorCode::GatewayError, "scripted gateway: unmatched embedding " + text_hash(text));
}

std::vector<RecordedCall> ScriptedGateway::calls() const {
    std::lock_guard lock(mu_);
    return calls_;
}

std::size_t ScriptedGateway::embed_calls() const {
    std::lock_guard lock(mu_);
    return embed_calls_;
}

std::string FunctionGateway::complete(const ChatRequest& request) {
    auto reply = complete_(request);
    calls_.push_back({request, reply});
    return reply;
}

Embedding FunctionGateway::embed(std::string_view text) {
    ++embed_calls_;
    return embed_(text);
}

std::string HashingGateway::complete(const ChatRequest&) {
    throw Error(ErrorCode::GatewayError, "hashing gateway has no chat backend");
}

}  // namespace doppel
