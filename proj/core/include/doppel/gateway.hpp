#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace doppel {

using Embedding = std::vector<float>;

struct ChatMessage {
    std::string role;  // "system" | "user" | "assistant"
    std::string content;

    bool operator==(const ChatMessage&) const = default;
};

struct ChatRequest {
    std::string model;
    std::vector<ChatMessage> messages;
    double temperature = 0.8;

    bool operator==(const ChatRequest&) const = default;
};

// Chat-completion and embedding capability shared by the memory builder, the
// memory manager and the impersonator. Implementations throw
// Error(GatewayError) on transport or protocol failures.
class Gateway {
public:
    virtual ~Gateway() = default;

    virtual std::string complete(const ChatRequest& request) = 0;
    virtual Embedding embed(std::string_view text) = 0;
};

// Convenience for single-prompt calls (memory stages, manager prompts).
std::string complete_prompt(Gateway& gw, std::string_view prompt, double temperature,
                            std::string_view model = {});

// --- wire format -----------------------------------------------------------

nlohmann::ordered_json chat_request_json(const ChatRequest& request);
// Reads choices[0].message.content.
std::string parse_chat_response(const nlohmann::json& response);
nlohmann::ordered_json embedding_request_json(std::string_view model, std::string_view text);
// Reads data[0].embedding.
Embedding parse_embedding_response(const nlohmann::json& response);

// 64-bit FNV-1a, rendered as 16 lowercase hex digits.
std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

// Key used by the scripted provider: hash over every message's role and content.
std::string prompt_hash(const ChatRequest& request);
std::string text_hash(std::string_view text);

// Deterministic bag-of-words feature-hashing embedder (L2 normalised). Serves
// as an offline embedding backend.
Embedding hashing_embedding(std::string_view text, std::size_t dim);

// --- configuration ---------------------------------------------------------

struct EndpointConfig {
    std::string base_url;      // e.g. "https://api.openai.com/v1"
    std::string model;
    std::string api_key_env;   // name of the environment variable holding the key
    double timeout_seconds = 30.0;
};

struct GatewayConfig {
    std::string provider = "http";  // "http" | "scripted" | "hashing"
    EndpointConfig chat;
    EndpointConfig embedding{"", "text-embedding-3-small", "", 30.0};
    std::filesystem::path replay;   // scripted provider
    std::size_t hashing_dim = 64;   // "hashing" provider / scripted fallback
};

GatewayConfig gateway_config_from_json(const nlohmann::json& j,
                                       const std::filesystem::path& base_dir = {});
std::unique_ptr<Gateway> make_gateway(const GatewayConfig& config);

// --- providers -------------------------------------------------------------

class HttpGateway final : public Gateway {
public:
    explicit HttpGateway(GatewayConfig config);

    std::string complete(const ChatRequest& request) override;
    Embedding embed(std::string_view text) override;

private:
    nlohmann::json post(const EndpointConfig& endpoint, std::string_view suffix,
                        const std::string& body);

    GatewayConfig config_;
};

struct RecordedCall {
    ChatRequest request;
    std::string response;
};

// Replays fixed completions and vectors. Completions are matched by prompt
// hash first, then by call ordinal; embeddings by text hash, then by the
// optional hashing fallback. Anything unmatched throws Error(GatewayError).
class ScriptedGateway final : public Gateway {
public:
    ScriptedGateway() = default;

    static std::unique_ptr<ScriptedGateway> from_json(const nlohmann::json& replay);
    static std::unique_ptr<ScriptedGateway> from_file(const std::filesystem::path& path);

    void add_completion(std::string hash, std::string text);
    void add_ordinal_completion(std::string text);
    void add_embedding(std::string hash, Embedding vector);
    void set_embedding_fallback(std::size_t dim) { fallback_dim_ = dim; }

    std::string complete(const ChatRequest& request) override;
    Embedding embed(std::string_view text) override;

    std::vector<RecordedCall> calls() const;
    std::size_t embed_calls() const;

private:
    mutable std::mutex mu_;
    std::map<std::string, std::string> by_hash_;
    std::vector<std::string> by_ordinal_;
    std::size_t next_ordinal_ = 0;
    std::map<std::string, Embedding> embeddings_;
    std::optional<std::size_t> fallback_dim_;
    std::vector<RecordedCall> calls_;
    std::size_t embed_calls_ = 0;
};

// Gateway backed by callables; records every call. Used to script agents
// whose answers depend on the prompt.
class FunctionGateway final : public Gateway {
public:
    using CompleteFn = std::function<std::string(const ChatRequest&)>;
    using EmbedFn = std::function<Embedding(std::string_view)>;

    FunctionGateway(CompleteFn complete, EmbedFn embed)
        : complete_(std::move(complete)), embed_(std::move(embed)) {}

    std::string complete(const ChatRequest& request) override;
    Embedding embed(std::string_view text) override;

    const std::vector<RecordedCall>& calls() const { return calls_; }
    std::size_t embed_calls() const { return embed_calls_; }
    void reset_counts() {
        calls_.clear();
        embed_calls_ = 0;
    }

private:
    CompleteFn complete_;
    EmbedFn embed_;
    std::vector<RecordedCall> calls_;
    std::size_t embed_calls_ = 0;
};

class HashingGateway final : public Gateway {
public:
    explicit HashingGateway(std::size_t dim) : dim_(dim) {}

    std::string complete(const ChatRequest& request) override;
    Embedding embed(std::string_view text) override { return hashing_embedding(text, dim_); }

private:
    std::size_t dim_;
};

}  // namespace doppel
