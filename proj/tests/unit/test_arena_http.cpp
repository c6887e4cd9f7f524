#include <gtest/gtest.h>
#include <httplib.h>

#include "doppel/arena_http.hpp"
#include "support/fixtures.hpp"

namespace doppel {
namespace {

using nlohmann::json;

constexpr std::int64_t kT0 = 1'700'000'000'000;

class ArenaHttpTest : public ::testing::Test {
protected:
    void start(std::vector<RosterEntry> roster) {
        clock_ = std::make_shared<ManualClock>(kT0);
        ArenaConfig config;
        config.seed = 3;
        arena_ = std::make_unique<Arena>(config, std::move(roster), testing::small_pool(), clock_,
                                         testing::scripted_factory([](const ChatRequest&) {
                                             return std::string("hey<|msg|>what's up");
                                         }));
        ArenaServer::Options options;
        options.tick_interval = std::chrono::milliseconds(20);
        options.max_wait = std::chrono::seconds(2);
        server_ = std::make_unique<ArenaServer>(*arena_, options);
        const int port = server_->start("127.0.0.1", 0);
        client_ = std::make_unique<httplib::Client>("127.0.0.1", port);
    }

    void TearDown() override {
        if (server_) server_->stop();
    }

    httplib::Result post(const std::string& path, const json& body, const httplib::Headers& headers = {}) {
        return client_->Post(path, headers, body.dump(), "application/json");
    }

    // Registers a participant and opens their first session.
    std::tuple<std::string, std::string, std::string> enrol() {
        auto reg = post("/participants", {{"initials", "AB"}, {"interviewer", "alex"}, {"ai_familiarity", 3}});
        EXPECT_EQ(reg->status, 201);
        const auto r = json::parse(reg->body);
        const std::string pid = r["participant_id"], token = r["token"];
        auto s = post("/sessions", {{"participant_id", pid}}, {{"X-Participant-Token", token}});
        EXPECT_EQ(s->status, 201);
        const auto sj = json::parse(s->body);
        EXPECT_TRUE(sj.contains("topic"));
        EXPECT_TRUE(sj.contains("prompt"));
        return {pid, token, sj["session_id"].get<std::string>()};
    }

    std::shared_ptr<ManualClock> clock_;
    std::unique_ptr<Arena> arena_;
    std::unique_ptr<ArenaServer> server_;
    std::unique_ptr<httplib::Client> client_;
};

TEST_F(ArenaHttpTest, AiSessionEndToEnd) {
    start({{"cfg-hidden", InterlocutorKind::AI, {}}});
    const auto [pid, token, sid] = enrol();
    const httplib::Headers auth{{"X-Participant-Token", token}};
    const std::string base = "/sessions/" + sid;

    EXPECT_EQ(post(base + "/messages", {{"text", "hello"}})->status, 401);
    EXPECT_EQ(post(base + "/messages", {{"text", "hello"}}, {{"X-Participant-Token", "forged"}})->status, 401);
    EXPECT_EQ(post(base + "/messages", {{"text", "hello"}}, auth)->status, 202);
    EXPECT_EQ(post(base + "/end-turn", json::object(), auth)->status, 202);
    auto again = post(base + "/messages", {{"text", "more"}}, auth);
    EXPECT_EQ(again->status, 409);
    EXPECT_EQ(json::parse(again->body)["error"], "NotYourTurn");

    clock_->set(kT0 + 60'000);
    auto ev = client_->Get(base + "/events?since=0&wait=1", auth);
    ASSERT_EQ(ev->status, 200);
    auto j = json::parse(ev->body);
    // The ticker delivers both messages shortly after the clock moved.
    for (int i = 0; i < 50 && j["messages"].size() < 3; ++i) {
        ev = client_->Get(base + "/events?since=0&wait=1", auth);
        j = json::parse(ev->body);
    }
    ASSERT_EQ(j["messages"].size(), 3U);
    EXPECT_EQ(j["messages"][0]["from"], "you");
    EXPECT_EQ(j["messages"][1]["from"], "partner");
    EXPECT_EQ(j["messages"][1]["text"], "hey");
    EXPECT_EQ(j["cursor"], 3);
    EXPECT_EQ(j["phase"], "live");
    EXPECT_EQ(ev->body.find("cfg-hidden"), std::string::npos);
    EXPECT_EQ(ev->get_header_value("Access-Control-Allow-Origin"), "*");

    auto early = post(base + "/verdict", {{"rating", 2}}, auth);
    EXPECT_EQ(early->status, 409);
    EXPECT_EQ(json::parse(early->body)["error"], "NotAwaitingVerdict");

    clock_->set(kT0 + 181'000);
    EXPECT_EQ(post(base + "/messages", {{"text", "late"}}, auth)->status, 409);
    EXPECT_EQ(post(base + "/verdict", {{"rating", 4}}, auth)->status, 422);
    EXPECT_EQ(post(base + "/verdict", {{"rating", "six"}}, auth)->status, 422);
    EXPECT_EQ(post(base + "/verdict", {{"rating", 6}, {"reasons", {"astrology"}}}, auth)->status, 422);
    auto reveal = post(base + "/verdict", {{"rating", 6}, {"reasons", {"stylistic-flow"}}, {"free_text", "hm"}}, auth);
    ASSERT_EQ(reveal->status, 200);
    const auto rj = json::parse(reveal->body);
    EXPECT_EQ(rj["config_id"], "cfg-hidden");
    EXPECT_EQ(rj["interlocutor"], "ai");
    EXPECT_EQ(rj["correct"], false);
    auto twice = post(base + "/verdict", {{"rating", 6}}, auth);
    EXPECT_EQ(twice->status, 409);
    EXPECT_EQ(json::parse(twice->body)["error"], "AlreadyRevealed");
}

TEST_F(ArenaHttpTest, RegistrationAndSessionErrors) {
    start({{"cfg-a", InterlocutorKind::AI, {}}});
    auto bad = post("/participants", {{"initials", "AB"}});
    EXPECT_EQ(bad->status, 422);
    EXPECT_EQ(json::parse(bad->body)["error"], "InvalidQuestionnaire");
    EXPECT_EQ(client_->Post("/participants", "{not json", "application/json")->status, 422);

    EXPECT_EQ(post("/sessions", {{"participant_id", "p-0404"}}, {{"X-Participant-Token", "x"}})->status, 404);
    const auto [pid, token, sid] = enrol();
    EXPECT_EQ(post("/sessions", {{"participant_id", pid}})->status, 401);
    EXPECT_EQ(post("/sessions", {{"participant_id", pid}}, {{"X-Participant-Token", token}})->status, 422);
    EXPECT_EQ(post("/sessions", json::object(), {{"X-Participant-Token", token}})->status, 400);
    EXPECT_EQ(client_->Get("/sessions/s-999999/events", {{"X-Participant-Token", token}})->status, 404);

    auto preflight = client_->Options("/sessions");
    EXPECT_EQ(preflight->status, 204);
    EXPECT_NE(preflight->get_header_value("Access-Control-Allow-Headers").find("X-Participant-Token"),
              std::string::npos);
}

TEST_F(ArenaHttpTest, ConfederateRelay) {
    start({{"human", InterlocutorKind::Human, {}}});
    const auto [pid, token, sid] = enrol();
    const httplib::Headers auth{{"X-Participant-Token", token}};

    auto open = client_->Get("/confederate/sessions");
    ASSERT_EQ(open->status, 200);
    const auto list = json::parse(open->body);
    ASSERT_EQ(list.size(), 1U);
    EXPECT_EQ(list[0]["session_id"], sid);

    const std::string cbase = "/confederate/sessions/" + sid;
    auto join = post(cbase + "/join", json::object());
    ASSERT_EQ(join->status, 201);
    const httplib::Headers cauth{{"X-Confederate-Token", json::parse(join->body)["token"].get<std::string>()}};
    EXPECT_EQ(post(cbase + "/join", json::object())->status, 422);
    EXPECT_EQ(post(cbase + "/messages", {{"text", "hi"}}, auth)->status, 401);

    EXPECT_EQ(post("/sessions/" + sid + "/messages", {{"text", "hello?"}}, auth)->status, 202);
    EXPECT_EQ(post("/sessions/" + sid + "/end-turn", json::object(), auth)->status, 202);
    auto ev = client_->Get(cbase + "/events?since=0", cauth);
    ASSERT_EQ(ev->status, 200);
    auto j = json::parse(ev->body);
    ASSERT_EQ(j["messages"].size(), 1U);
    EXPECT_EQ(j["messages"][0]["from"], "partner");
    EXPECT_EQ(j["your_turn"], true);

    EXPECT_EQ(post(cbase + "/messages", {{"text", "yo"}}, cauth)->status, 202);
    EXPECT_EQ(post(cbase + "/end-turn", json::object(), cauth)->status, 202);
    j = json::parse(client_->Get("/sessions/" + sid + "/events?since=1", auth)->body);
    ASSERT_EQ(j["messages"].size(), 1U);
    EXPECT_EQ(j["messages"][0]["text"], "yo");
    EXPECT_EQ(j["your_turn"], true);

    EXPECT_EQ(post(cbase + "/leave", json::object(), cauth)->status, 202);
    auto gone = post("/sessions/" + sid + "/messages", {{"text", "hello?"}}, auth);
    EXPECT_EQ(gone->status, 409);
    EXPECT_EQ(json::parse(gone->body)["error"], "ConfederateDisconnected");
    EXPECT_TRUE(arena_->record(sid).excluded);
}

TEST_F(ArenaHttpTest, LongPollReturnsOnNewMessage) {
    start({{"human", InterlocutorKind::Human, {}}});
    const auto [pid, token, sid] = enrol();
    const std::string cbase = "/confederate/sessions/" + sid;
    const httplib::Headers cauth{
        {"X-Confederate-Token", json::parse(post(cbase + "/join", json::object())->body)["token"].get<std::string>()}};

    std::thread poster([&, token = token, sid = sid] {
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
        httplib::Client c(client_->host(), client_->port());
        c.Post("/sessions/" + sid + "/messages", {{"X-Participant-Token", token}}, R"({"text":"ping"})",
               "application/json");
    });
    const auto start_time = std::chrono::steady_clock::now();
    auto ev = client_->Get(cbase + "/events?since=0&wait=2", cauth);
    poster.join();
    ASSERT_EQ(ev->status, 200);
    EXPECT_EQ(json::parse(ev->body)["messages"].size(), 1U);
    EXPECT_LT(std::chrono::steady_clock::now() - start_time, std::chrono::milliseconds(1900));
}

}  // namespace
}  // namespace doppel
