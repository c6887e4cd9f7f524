#include <cmath>
#include <fstream>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>

#include "doppel/error.hpp"
#include "doppel/gateway.hpp"
#include "support/fixtures.hpp"

namespace doppel {
namespace {

using nlohmann::json;

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no doppel::Error thrown";
    return ErrorCode::IoError;
}

TEST(Wire, ChatRequestShape) {
    const ChatRequest r{"m", {{"system", "s"}, {"user", "u"}}, 0.5};
    EXPECT_EQ(chat_request_json(r).dump(),
              R"({"model":"m","messages":[{"role":"system","content":"s"},{"role":"user","content":"u"}],"temperature":0.5})");
    EXPECT_EQ(embedding_request_json("e", "hi").dump(), R"({"model":"e","input":"hi"})");
}

TEST(Wire, ParseResponses) {
    EXPECT_EQ(parse_chat_response(json::parse(R"({"choices":[{"message":{"content":"ok"}}]})")), "ok");
    EXPECT_EQ(code_of([] { parse_chat_response(json::parse(R"({"choices":[]})")); }), ErrorCode::GatewayError);
    const auto e = parse_embedding_response(json::parse(R"({"data":[{"embedding":[1,0.5]}]})"));
    EXPECT_EQ(e, (Embedding{1.0F, 0.5F}));
    EXPECT_EQ(code_of([] { parse_embedding_response(json::parse("{}")); }), ErrorCode::GatewayError);
}

TEST(Hashing, FnvKnownValues) {
    EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
    EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
    EXPECT_EQ(hex64(0xabcULL), "0000000000000abc");
    EXPECT_EQ(text_hash("a"), "af63dc4c8601ec8c");
}

TEST(Hashing, PromptHashSeparatesFields) {
    const ChatRequest a{"", {{"user", "ab"}}};
    const ChatRequest b{"", {{"usera", "b"}}};
    const ChatRequest c{"other-model", {{"user", "ab"}}, 0.1};
    EXPECT_NE(prompt_hash(a), prompt_hash(b));
    EXPECT_EQ(prompt_hash(a), prompt_hash(c));
    EXPECT_EQ(prompt_hash(a).size(), 16U);
}

TEST(Hashing, EmbeddingIsNormalisedBagOfWords) {
    const auto v = hashing_embedding("Hello, hello WORLD", 32);
    double norm = 0;
    for (const float x : v) norm += x * x;
    EXPECT_NEAR(norm, 1.0, 1e-6);
    EXPECT_EQ(v, hashing_embedding("world hello hello", 32));
    const auto zero = hashing_embedding("   ...  ", 8);
    EXPECT_TRUE(std::all_of(zero.begin(), zero.end(), [](float x) { return x == 0.0F; }));
    EXPECT_TRUE(hashing_embedding("x", 0).empty());
}

TEST(CompletePrompt, SendsSingleUserMessage) {
    FunctionGateway gw([](const ChatRequest&) { return std::string("r"); }, [](std::string_view) { return Embedding{}; });
    EXPECT_EQ(complete_prompt(gw, "hi", 0.0, "m"), "r");
    ASSERT_EQ(gw.calls().size(), 1U);
    EXPECT_EQ(gw.calls()[0].request, (ChatRequest{"m", {{"user", "hi"}}, 0.0}));
}

TEST(Scripted, HashThenOrdinalThenError) {
    ScriptedGateway gw;
    const ChatRequest known{"", {{"user", "known"}}};
    gw.add_completion(prompt_hash(known), "by hash");
    gw.add_ordinal_completion("first");
    EXPECT_EQ(gw.complete(known), "by hash");
    EXPECT_EQ(gw.complete({"", {{"user", "x"}}}), "first");
    EXPECT_EQ(gw.complete(known), "by hash");
    EXPECT_EQ(code_of([&] { gw.complete({"", {{"user", "y"}}}); }), ErrorCode::GatewayError);
    EXPECT_EQ(gw.calls().size(), 3U);
}

TEST(Scripted, EmbeddingsAndFallback) {
    ScriptedGateway gw;
    gw.add_embedding(text_hash("a"), {1, 2});
    EXPECT_EQ(gw.embed("a"), (Embedding{1, 2}));
    EXPECT_EQ(code_of([&] { gw.embed("b"); }), ErrorCode::GatewayError);
    gw.set_embedding_fallback(4);
    EXPECT_EQ(gw.embed("b"), hashing_embedding("b", 4));
    EXPECT_EQ(gw.embed_calls(), 3U);
}

TEST(Scripted, FromJsonAndFile) {
    const ChatRequest r{"", {{"user", "q"}}};
    const json j = {{"completions", {{{"hash", prompt_hash(r)}, {"text", "A"}}}},
                    {"ordinal_completions", {"B"}},
                    {"embeddings", {{{"text", "t"}, {"vector", {0.5}}}, {{"hash", text_hash("u")}, {"vector", {2}}}}},
                    {"embedding_fallback_dim", 3}};
    testing::TempDir dir;
    {
        std::ofstream out(dir / "replay.json");
        out << j.dump();
    }
    auto gw = ScriptedGateway::from_file(dir / "replay.json");
    EXPECT_EQ(gw->complete(r), "A");
    EXPECT_EQ(gw->complete({"", {{"user", "z"}}}), "B");
    EXPECT_EQ(gw->embed("t"), (Embedding{0.5}));
    EXPECT_EQ(gw->embed("u"), (Embedding{2}));
    EXPECT_EQ(gw->embed("v").size(), 3U);
    EXPECT_EQ(code_of([&] { ScriptedGateway::from_file(dir / "missing.json"); }), ErrorCode::IoError);
}

TEST(Hashing, GatewayHasNoChat) {
    HashingGateway gw(8);
    EXPECT_EQ(gw.embed("a b").size(), 8U);
    EXPECT_EQ(code_of([&] { gw.complete({}); }), ErrorCode::GatewayError);
}

TEST(Config, ParsesEndpointsAndReplayPath) {
    const auto c = gateway_config_from_json(json::parse(R"({
        "provider": "scripted",
        "chat": {"base_url": "http://h/v1", "model": "m", "api_key_env": "K", "timeout_seconds": 5},
        "replay": "r.json", "hashing_dim": 12})"),
                                            "/base");
    EXPECT_EQ(c.provider, "scripted");
    EXPECT_EQ(c.chat.model, "m");
    EXPECT_EQ(c.chat.timeout_seconds, 5.0);
    EXPECT_EQ(c.embedding.base_url, "http://h/v1");
    EXPECT_EQ(c.embedding.api_key_env, "K");
    EXPECT_EQ(c.embedding.model, "text-embedding-3-small");
    EXPECT_EQ(c.replay, std::filesystem::path("/base/r.json"));
    EXPECT_EQ(c.hashing_dim, 12U);

    const auto abs = gateway_config_from_json(json::parse(R"({"replay": "/x/r.json"})"), "/base");
    EXPECT_EQ(abs.replay, std::filesystem::path("/x/r.json"));
}

TEST(Config, MakeGateway) {
    GatewayConfig c;
    c.provider = "hashing";
    c.hashing_dim = 5;
    EXPECT_EQ(make_gateway(c)->embed("x").size(), 5U);
    c.provider = "carrier-pigeon";
    EXPECT_EQ(code_of([&] { make_gateway(c); }), ErrorCode::InvalidArgument);
}

class HttpGatewayTest : public ::testing::Test {
protected:
    void SetUp() override {
        server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
            last_body_ = req.body;
            last_auth_ = req.get_header_value("Authorization");
            const auto body = json::parse(req.body);
            const json reply = {{"choices", {{{"message", {{"role", "assistant"}, {"content", "echo " + body["model"].get<std::string>()}}}}}}};
            res.set_content(reply.dump(), "application/json");
        });
        server_.Post("/v1/embeddings", [](const httplib::Request&, httplib::Response& res) {
            res.set_content(R"({"data":[{"embedding":[0.25,0.75]}]})", "application/json");
        });
        server_.Post("/broken/chat/completions", [](const httplib::Request&, httplib::Response& res) {
            res.status = 503;
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    void TearDown() override {
        server_.stop();
        thread_.join();
    }

    GatewayConfig config(const std::string& prefix) const {
        GatewayConfig c;
        c.chat = {"http://127.0.0.1:" + std::to_string(port_) + prefix, "chat-model", "DOPPEL_TEST_KEY", 5.0};
        c.embedding = {c.chat.base_url, "embed-model", "", 5.0};
        return c;
    }

    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
    std::string last_body_, last_auth_;
};

TEST_F(HttpGatewayTest, RoundTrip) {
    ::setenv("DOPPEL_TEST_KEY", "sekrit", 1);
    HttpGateway gw(config("/v1/"));
    EXPECT_EQ(gw.complete({"", {{"user", "hi"}}, 0.0}), "echo chat-model");
    EXPECT_EQ(last_auth_, "Bearer sekrit");
    EXPECT_EQ(json::parse(last_body_)["messages"][0]["content"], "hi");
    EXPECT_EQ(gw.complete({"override", {{"user", "hi"}}}), "echo override");
    EXPECT_EQ(gw.embed("x"), (Embedding{0.25F, 0.75F}));
    ::unsetenv("DOPPEL_TEST_KEY");
}

TEST_F(HttpGatewayTest, FailuresAreGatewayErrors) {
    HttpGateway broken(config("/broken"));
    EXPECT_EQ(code_of([&] { broken.complete({"", {{"user", "hi"}}}); }), ErrorCode::GatewayError);
    auto c = config("/v1");
    c.chat.base_url = "127.0.0.1/v1";
    HttpGateway no_scheme(c);
    EXPECT_EQ(code_of([&] { no_scheme.complete({"", {{"user", "hi"}}}); }), ErrorCode::GatewayError);
    try {
        broken.complete({"", {{"user", "hi"}}});
    } catch (const Error& e) {
        EXPECT_TRUE(e.retryable());
    }
}

}  // namespace
}  // namespace doppel
