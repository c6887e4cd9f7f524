#include <gtest/gtest.h>

#include "doppel/error.hpp"
#include "doppel/memory.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

namespace doppel {
namespace {

using testing::ts;

MemoryNode node(std::string id, int tier, std::int64_t at, Embedding e, std::vector<NodeId> children = {}) {
    MemoryNode n;
    n.id = std::move(id);
    n.tier = tier;
    n.text = "text of " + n.id;
    n.date_start = n.date_end = ts(at);
    n.children = std::move(children);
    if (tier == kFirstOrder) n.sources = {"c1"};
    n.embedding = std::move(e);
    return n;
}

Conversation conversation(const std::string& id, std::int64_t start, std::vector<std::string> senders) {
    Conversation c{id, "me", {}};
    for (std::size_t i = 0; i < senders.size(); ++i)
        c.messages.push_back(Message{senders[i], ts(start + static_cast<std::int64_t>(i) * 60), id + " line " + std::to_string(i)});
    return c;
}

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no doppel::Error thrown";
    return ErrorCode::IoError;
}

TEST(Cosine, Basics) {
    const Embedding a{1, 0}, b{0, 1}, c{2, 0}, z{0, 0};
    EXPECT_DOUBLE_EQ(cosine_similarity(a, b), 0.0);
    EXPECT_DOUBLE_EQ(cosine_similarity(a, c), 1.0);
    EXPECT_DOUBLE_EQ(cosine_similarity(a, z), 0.0);
    EXPECT_EQ(code_of([&] { cosine_similarity(a, Embedding{1}); }), ErrorCode::DimensionMismatch);
}

TEST(Store, AddFindAndTiers) {
    MemoryStore s(2, ts(0));
    s.add(node("b", 1, 0, {1, 0}));
    s.add(node("a", 1, 0, {0, 1}));
    s.add(node("p", 2, 0, {1, 1}, {"a", "b"}));
    EXPECT_EQ(s.size(), 3U);
    EXPECT_EQ(s.at("p").children.size(), 2U);
    EXPECT_EQ(s.find("zz"), nullptr);
    const auto t1 = s.tier(kFirstOrder);
    ASSERT_EQ(t1.size(), 2U);
    EXPECT_EQ(t1[0]->id, "a");
    EXPECT_EQ(code_of([&] { s.add(node("a", 1, 0, {1, 1})); }), ErrorCode::InvalidArgument);
    EXPECT_EQ(code_of([&] { s.add(node("x", 1, 0, {1, 1, 1})); }), ErrorCode::DimensionMismatch);
    EXPECT_EQ(code_of([&] { s.add(node("y", 4, 0, {1, 1})); }), ErrorCode::InvalidArgument);
    EXPECT_EQ(code_of([&] { s.at("missing"); }), ErrorCode::InvalidArgument);
}

TEST(Store, SearchTiesBrokenById) {
    MemoryStore s(2, ts(0));
    s.add(node("c", 1, 0, {1, 0}));
    s.add(node("a", 1, 0, {2, 0}));
    s.add(node("b", 1, 0, {0, 1}));
    const Embedding q{1, 0};
    const auto hits = s.search_tier(kFirstOrder, q, 2);
    ASSERT_EQ(hits.size(), 2U);
    EXPECT_EQ(hits[0].node->id, "a");
    EXPECT_EQ(hits[1].node->id, "c");
    EXPECT_DOUBLE_EQ(hits[0].similarity, 1.0);
    EXPECT_EQ(s.search_tier(kFirstOrder, q, 10).size(), 3U);
    EXPECT_TRUE(s.search_tier(kTopOrder, q, 3).empty());
    EXPECT_EQ(code_of([&] { s.search_tier(kFirstOrder, q, 0); }), ErrorCode::InvalidArgument);
    EXPECT_EQ(code_of([&] { s.search_tier(kFirstOrder, Embedding{1}, 1); }), ErrorCode::DimensionMismatch);
}

TEST(Store, SearchMatchesOracle) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        const bool quantize = trial % 2 == 0;
        const auto store = testing::random_store(rng, 1 + rng() % 120, 8, quantize);
        Embedding q(8);
        std::normal_distribution<float> g;
        for (auto& x : q) x = quantize ? static_cast<float>(static_cast<int>(rng() % 3) - 1) : g(rng);
        const std::size_t k = 1 + rng() % 10;
        std::vector<std::string> got;
        for (const auto& h : store.search_tier(kFirstOrder, q, k)) got.push_back(h.node->id);
        EXPECT_EQ(got, oracle::ranking(store, q, k));
    }
}

TEST(Store, JsonRoundTripAndCopy) {
    std::mt19937_64 rng(3);
    const auto store = testing::random_store(rng, 40);
    EXPECT_TRUE(validate_store(store).empty());
    const auto back = MemoryStore::from_json(store.to_json());
    EXPECT_EQ(back, store);
    MemoryStore copy;
    copy = store;
    EXPECT_EQ(copy, store);
    const Embedding q(8, 1.0F);
    EXPECT_EQ(copy.search_tier(kFirstOrder, q, 5)[0].node->id, store.search_tier(kFirstOrder, q, 5)[0].node->id);
}

TEST(Store, SaveLoadBitExact) {
    std::mt19937_64 rng(4);
    const auto store = testing::random_store(rng, 30);
    testing::TempDir dir;
    store.save(dir / "a.json");
    const auto loaded = MemoryStore::load(dir / "a.json");
    EXPECT_EQ(loaded, store);
    loaded.save(dir / "b.json");
    EXPECT_EQ(testing::read_file(dir / "a.json"), testing::read_file(dir / "b.json"));
}

TEST(Store, CorruptDocuments) {
    testing::TempDir dir;
    {
        std::ofstream(dir / "bad.json") << "{not json";
    }
    EXPECT_EQ(code_of([&] { MemoryStore::load(dir / "bad.json"); }), ErrorCode::StoreCorrupt);
    EXPECT_EQ(code_of([&] { MemoryStore::load(dir / "missing.json"); }), ErrorCode::IoError);
    EXPECT_EQ(code_of([] { MemoryStore::from_json(nlohmann::json::object()); }), ErrorCode::StoreCorrupt);
    EXPECT_EQ(code_of([] {
                  MemoryStore::from_json({{"version", 99}, {"embed_dim", 1}, {"built_at", "2024-01-01T00:00:00Z"}, {"nodes", nlohmann::json::array()}});
              }),
              ErrorCode::StoreCorrupt);
    std::mt19937_64 rng(5);
    auto j = testing::random_store(rng, 3).to_json();
    j["nodes"][0]["embedding"] = {1.0};
    EXPECT_EQ(code_of([&] { MemoryStore::from_json(j); }), ErrorCode::StoreCorrupt);
    j = testing::random_store(rng, 3).to_json();
    j["nodes"][0]["date_start"] = "yesterday";
    EXPECT_EQ(code_of([&] { MemoryStore::from_json(j); }), ErrorCode::StoreCorrupt);
}

TEST(Validate, DetectsBrokenHierarchies) {
    MemoryStore s(1, ts(0));
    s.add(node("a", 1, 0, {1}));
    s.add(node("b", 1, 100, {1}));
    auto p = node("p", 2, 0, {1}, {"a", "b"});
    p.date_end = ts(50);  // does not span b
    s.add(p);
    s.add(node("q", 2, 0, {1}, {"a", "ghost"}));
    s.add(node("r", 3, 0, {1}, {"a"}));
    const auto problems = validate_store(s);
    const auto mentions = [&](const std::string& needle) {
        return std::any_of(problems.begin(), problems.end(), [&](const std::string& p) { return p.find(needle) != std::string::npos; });
    };
    EXPECT_TRUE(mentions("does not span child b"));
    EXPECT_TRUE(mentions("unknown child ghost"));
    EXPECT_TRUE(mentions("a: has 3 parents"));
    EXPECT_TRUE(mentions("child a is not one tier below"));
    EXPECT_TRUE(mentions("b: not reachable"));
}

TEST(ParseLines, FormatsAndRefs) {
    const auto lines = parse_generated_lines(
        "intro prose\n"
        "[2024-01-02 03:04:05] likes tea\n"
        "- [2024-01-02 03:04:06] plays chess (refs: 1, 3,4)\n"
        "[2024-13-02 03:04:05] bad date\n"
        "[2024-01-02 03:04:07]    \n"
        "[2024-01-02 03:04:08] (refs: 2)\n");
    ASSERT_EQ(lines.size(), 2U);
    EXPECT_EQ(lines[0].text, "likes tea");
    EXPECT_FALSE(lines[0].refs);
    EXPECT_EQ(lines[1].text, "plays chess");
    EXPECT_EQ(*lines[1].refs, (std::vector<std::string>{"1", "3", "4"}));
    EXPECT_EQ(lines[1].timestamp, *parse_datetime("2024-01-02 03:04:06"));
}

TEST(Prompts, FirstOrderCarriesTranscript) {
    const auto c = conversation("c1", 0, {"ana", "me"});
    const auto p = first_order_prompt(c, "Alex");
    EXPECT_NE(p.find("long-term memory log about Alex"), std::string::npos);
    EXPECT_NE(p.find("Conversation:\n" + render_transcript(c.messages, "me")), std::string::npos);
}

TEST(FirstOrder, TwoWellFormedLines) {
    const auto c = conversation("c7", 0, {"ana", "me", "ana", "me"});
    ScriptedGateway gw;
    gw.add_ordinal_completion("[2024-01-01 00:01:00] studies law\n[2030-01-01 00:00:00] moved abroad");
    BuildReport report;
    const auto nodes = synthesize_first_order(c, gw, {}, &report);
    ASSERT_EQ(nodes.size(), 2U);
    EXPECT_EQ(nodes[0].id, "m1-c7-001");
    EXPECT_EQ(nodes[1].id, "m1-c7-002");
    EXPECT_EQ(nodes[0].sources, std::vector<std::string>{"c7"});
    EXPECT_EQ(nodes[0].date_start, ts(60));
    EXPECT_EQ(nodes[1].date_start, c.end());  // clamped into the conversation's range
    EXPECT_EQ(gw.calls()[0].request.temperature, 0.0);
}

TEST(FirstOrder, RetryThenSkip) {
    const auto c = conversation("c2", 0, {"ana", "me"});
    ScriptedGateway gw;
    for (int i = 0; i < 3; ++i) gw.add_ordinal_completion("I would rather not.");
    BuildReport report;
    EXPECT_EQ(code_of([&] { synthesize_first_order(c, gw, {}, &report); }), ErrorCode::MalformedGeneration);
    EXPECT_EQ(gw.calls().size(), 3U);
    EXPECT_EQ(report.retries, 2U);
    EXPECT_EQ(report.skipped_conversations, std::vector<std::string>{"c2"});
}

TEST(FirstOrder, NoneMeansNoNodesAndSingleMessageStaysInRange) {
    const auto c = conversation("c3", 500, {"me"});
    ScriptedGateway gw;
    gw.add_ordinal_completion("NONE");
    gw.add_ordinal_completion("[2020-01-01 00:00:00] early");
    EXPECT_TRUE(synthesize_first_order(c, gw, {}).empty());
    const auto nodes = synthesize_first_order(c, gw, {});
    ASSERT_EQ(nodes.size(), 1U);
    EXPECT_EQ(nodes[0].date_start, ts(500));
    EXPECT_EQ(nodes[0].date_end, ts(500));
}

TEST(FirstOrder, GatewayErrorsRetriedThenRethrown) {
    int calls = 0;
    FunctionGateway gw(
        [&](const ChatRequest&) -> std::string {
            ++calls;
            throw Error(ErrorCode::GatewayError, "down");
        },
        [](std::string_view) { return Embedding{}; });
    EXPECT_EQ(code_of([&] { synthesize_first_order(conversation("c", 0, {"me"}), gw, {}); }), ErrorCode::GatewayError);
    EXPECT_EQ(calls, 3);
}

std::vector<MemoryNode> tier1(std::size_t n) {
    std::vector<MemoryNode> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(node("m1-c-" + std::to_string(100 + i), 1, static_cast<std::int64_t>(i) * 10, {}));
    return out;
}

TEST(Consolidate, GroupsAbAndC) {
    const auto nodes = tier1(3);
    ScriptedGateway gw;
    gw.add_ordinal_completion("[2024-01-01 00:00:00] a and b (refs: 1, 2)\n[2024-01-01 00:00:20] c alone (refs: 3)");
    const auto parents = consolidate(nodes, gw, {});
    ASSERT_EQ(parents.size(), 2U);
    EXPECT_EQ(parents[0].id, "m2-000001");
    EXPECT_EQ(parents[0].children, (std::vector<NodeId>{nodes[0].id, nodes[1].id}));
    EXPECT_EQ(parents[0].date_start, ts(0));
    EXPECT_EQ(parents[0].date_end, ts(10));
    EXPECT_EQ(parents[1].children, std::vector<NodeId>{nodes[2].id});
    EXPECT_EQ(parents[1].tier, kSecondOrder);
}

TEST(Consolidate, SingletonAndAbstract) {
    const auto nodes = tier1(1);
    ScriptedGateway gw;
    gw.add_ordinal_completion("[2024-01-01 00:00:00] alone (refs: 1)");
    const auto parents = consolidate(nodes, gw, {});
    ASSERT_EQ(parents.size(), 1U);
    gw.add_ordinal_completion("[2024-01-01 00:00:00] quiz bowl participation (2018-2020) (refs: 1)");
    const auto top = abstract(parents, gw, {});
    ASSERT_EQ(top.size(), 1U);
    EXPECT_EQ(top[0].id, "m3-000001");
    EXPECT_EQ(top[0].text, "quiz bowl participation (2018-2020)");
    EXPECT_EQ(top[0].children, std::vector<NodeId>{parents[0].id});
}

TEST(Consolidate, UnknownRefsDroppedAndUncoveredFallBack) {
    const auto nodes = tier1(3);
    ScriptedGateway gw;
    gw.add_ordinal_completion("[2024-01-01 00:00:00] ghost (refs: 9, x)\n[2024-01-01 00:00:00] pair (refs: 1, 1, 2)");
    BuildReport report;
    const auto parents = consolidate(nodes, gw, {}, &report);
    ASSERT_EQ(parents.size(), 2U);
    EXPECT_EQ(parents[0].children.size(), 2U);
    EXPECT_EQ(parents[1].children, std::vector<NodeId>{nodes[2].id});
    EXPECT_EQ(parents[1].text, nodes[2].text);
    EXPECT_EQ(report.dropped_refs, 3U);
    EXPECT_EQ(report.identity_fallbacks, 1U);
}

TEST(Consolidate, MalformedWindowIsIdentity) {
    const auto nodes = tier1(4);
    ScriptedGateway gw;
    for (int i = 0; i < 3; ++i) gw.add_ordinal_completion("[2024-01-01 00:00:00] no refs here");
    BuildReport report;
    const auto parents = consolidate(nodes, gw, {}, &report);
    ASSERT_EQ(parents.size(), 4U);
    EXPECT_EQ(report.malformed_windows, 1U);
    EXPECT_EQ(report.identity_fallbacks, 4U);
}

TEST(Consolidate, RejectsWrongTierAndBadWindow) {
    ScriptedGateway gw;
    auto nodes = tier1(2);
    EXPECT_EQ(code_of([&] { abstract(nodes, gw, {}); }), ErrorCode::InvalidArgument);
    BuildOptions o;
    o.window = 5;
    o.overlap = 5;
    EXPECT_EQ(code_of([&] { consolidate(nodes, gw, o); }), ErrorCode::InvalidArgument);
    EXPECT_EQ(code_of([&] { consolidate_tier(nodes, 1, gw, {}); }), ErrorCode::InvalidArgument);
}

// Partition and span checked against a hand oracle over random groupings and
// sliding windows.
TEST(Consolidate, PartitionAndSpanProperty) {
    for (std::uint64_t seed = 0; seed < 60; ++seed) {
        std::mt19937_64 rng(seed);
        auto nodes = tier1(1 + rng() % 140);
        std::shuffle(nodes.begin(), nodes.end(), rng);
        auto agent = testing::memory_agent(seed);
        BuildOptions o;
        o.window = 5 + rng() % 40;
        o.overlap = rng() % o.window;
        const auto parents = consolidate(nodes, *agent, o);
        std::map<NodeId, int> seen;
        std::map<NodeId, const MemoryNode*> by_id;
        for (const auto& n : nodes) by_id[n.id] = &n;
        for (std::size_t i = 0; i < parents.size(); ++i) {
            const auto& p = parents[i];
            ASSERT_FALSE(p.children.empty());
            for (const auto& c : p.children) {
                ++seen[c];
                EXPECT_LE(p.date_start, by_id.at(c)->date_start);
                EXPECT_GE(p.date_end, by_id.at(c)->date_end);
            }
            if (i) EXPECT_LE(parents[i - 1].date_start, p.date_start);
        }
        EXPECT_EQ(seen.size(), nodes.size());
        for (const auto& [_, count] : seen) EXPECT_EQ(count, 1);
    }
}

std::vector<Conversation> conversations(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<Conversation> out;
    for (std::size_t i = 0; i < n; ++i) {
        char id[16];
        std::snprintf(id, sizeof id, "c%03zu", i);
        out.push_back(testing::random_conversation(rng, id, static_cast<std::int64_t>(i) * 86400, 12));
    }
    return out;
}

TEST(Build, ProducesValidStore) {
    const auto convs = conversations(25, 1);
    auto agent = testing::memory_agent(7);
    BuildOptions o;
    o.window = 12;
    o.overlap = 3;
    const auto result = build_store(convs, *agent, o);
    EXPECT_TRUE(validate_store(result.store).empty());
    EXPECT_FALSE(result.store.tier(kFirstOrder).empty());
    EXPECT_FALSE(result.store.tier(kTopOrder).empty());
    EXPECT_EQ(result.store.embed_dim(), 16U);
    EXPECT_EQ(result.store.built_at(), convs.back().end());
    for (const auto* n : result.store.tier(kFirstOrder))
        EXPECT_EQ(n->embedding, hashing_embedding(n->line(), 16));
}

TEST(Build, RejectsUnsortedInput) {
    auto convs = conversations(3, 2);
    std::swap(convs[0], convs[2]);
    auto agent = testing::memory_agent();
    EXPECT_EQ(code_of([&] { build_store(convs, *agent); }), ErrorCode::UnsortedInput);
}

TEST(Build, MalformedConversationIsSkipped) {
    const auto convs = conversations(4, 3);
    FunctionGateway gw(
        [&](const ChatRequest& r) {
            const auto& p = r.messages.back().content;
            if (p.find(convs[1].messages.front().text) != std::string::npos && p.find("long-term memory log") != std::string::npos)
                return std::string("gibberish");
            return testing::memory_agent_reply(p, 1);
        },
        [](std::string_view t) { return hashing_embedding(t, 4); });
    const auto result = build_store(convs, gw);
    EXPECT_EQ(result.report.skipped_conversations, std::vector<std::string>{convs[1].id});
    EXPECT_TRUE(validate_store(result.store).empty());
}

TEST(Build, CrashResumeEqualsUninterrupted) {
    const auto convs = conversations(20, 4);
    BuildOptions o;
    o.batch_size = 3;
    o.window = 10;
    o.overlap = 2;
    auto clean_agent = testing::memory_agent(5);
    const auto clean = build_store(convs, *clean_agent, o);

    for (const std::size_t crash_after : {5UL, 17UL, 40UL, 200UL}) {
        testing::TempDir dir;
        o.checkpoint = dir / "build.checkpoint";
        std::size_t calls = 0;
        FunctionGateway crashing(
            [&](const ChatRequest& r) {
                if (++calls > crash_after) throw Error(ErrorCode::IoError, "simulated crash");
                return testing::memory_agent_reply(r.messages.back().content, 5);
            },
            [](std::string_view t) { return hashing_embedding(t, 16); });
        bool crashed = false;
        try {
            build_store(convs, crashing, o);
        } catch (const Error& e) {
            crashed = e.code() == ErrorCode::IoError;
        }
        auto resume_agent = testing::memory_agent(5);
        const auto resumed = build_store(convs, *resume_agent, o);
        EXPECT_EQ(resumed.store, clean.store) << "crash after " << crash_after << (crashed ? "" : " (no crash)");
        EXPECT_EQ(resumed.report, clean.report);
    }
}

TEST(Build, CorruptCheckpoint) {
    testing::TempDir dir;
    {
        std::ofstream(dir / "cp") << "garbage";
    }
    BuildOptions o;
    o.checkpoint = dir / "cp";
    auto agent = testing::memory_agent();
    EXPECT_EQ(code_of([&] { build_store(conversations(2, 1), *agent, o); }), ErrorCode::StoreCorrupt);
}

}  // namespace
}  // namespace doppel
