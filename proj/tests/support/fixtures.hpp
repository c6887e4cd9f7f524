#pragma once

// Scripted agents and random generators shared by unit and acceptance tests.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <memory>
#include <cstdint>
#include <filesystem>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "doppel/analysis.hpp"
#include "doppel/arena.hpp"
#include "doppel/dataset.hpp"
#include "doppel/gateway.hpp"
#include "doppel/ingest.hpp"
#include "doppel/memory.hpp"
#include "doppel/persona.hpp"
#include "doppel/retrieval.hpp"

namespace doppel::testing {

inline constexpr std::int64_t kEpoch2024 = 1'704'067'200;  // 2024-01-01T00:00:00Z

inline Timestamp ts(std::int64_t offset_seconds) { return from_unix(kEpoch2024 + offset_seconds); }

// Unique scratch directory removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::uint64_t counter = 0;
        const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
        path_ = std::filesystem::temp_directory_path() /
                ("doppel-test-" + std::to_string(stamp) + "-" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::uint64_t uniform_int(std::mt19937_64& rng, std::uint64_t lo, std::uint64_t hi) {
    return lo + rng() % (hi - lo + 1);
}

// Messages with log-uniform gaps in [min_gap, max_gap] seconds.
inline std::vector<Message> random_stream(std::mt19937_64& rng, std::size_t n, double min_gap = 60.0,
                                          double max_gap = 48.0 * 3600.0,
                                          const std::vector<std::string>& senders = {"me", "ana", "bo"}) {
    std::vector<Message> out;
    std::int64_t t = 0;
    std::uniform_real_distribution<double> u(std::log(min_gap), std::log(max_gap));
    for (std::size_t i = 0; i < n; ++i) {
        if (i) t += static_cast<std::int64_t>(std::llround(std::exp(u(rng))));
        out.push_back(Message{senders[rng() % senders.size()], ts(t), "msg " + std::to_string(i)});
    }
    return out;
}

// Conversation with unique message texts, alternating runs of owner and
// partner messages a few minutes apart.
inline Conversation random_conversation(std::mt19937_64& rng, const std::string& id, std::int64_t start,
                                        std::size_t max_messages = 30, const std::string& owner = "me") {
    Conversation c{id, owner, {}};
    const auto n = static_cast<std::size_t>(uniform_int(rng, 1, max_messages));
    std::int64_t t = start;
    const std::vector<std::string> partners{"ana", "bo"};
    for (std::size_t i = 0; i < n; ++i) {
        const bool is_owner = rng() % 2 == 0;
        const std::string sender = is_owner ? owner : partners[rng() % partners.size()];
        c.messages.push_back(Message{sender, ts(t), id + " m" + std::to_string(i) + " " + sender});
        t += static_cast<std::int64_t>(uniform_int(rng, 1, 600));
    }
    return c;
}

// Random three-tier store with a valid hierarchy and random embeddings.
inline MemoryStore random_store(std::mt19937_64& rng, std::size_t tier1, std::size_t dim = 8,
                                bool quantize = false) {
    MemoryStore store(dim, ts(400 * 86400));
    std::normal_distribution<float> g(0.0F, 1.0F);
    const auto embedding = [&] {
        Embedding e(dim);
        for (auto& x : e) x = quantize ? static_cast<float>(static_cast<int>(rng() % 3) - 1) : g(rng);
        return e;
    };
    std::vector<MemoryNode> t1, t2;
    for (std::size_t i = 0; i < tier1; ++i) {
        MemoryNode n;
        char id[32];
        std::snprintf(id, sizeof id, "m1-c%03zu-%03zu", i / 10, i % 10 + 1);
        n.id = id;
        n.tier = kFirstOrder;
        n.text = "fact " + std::to_string(i);
        n.date_start = n.date_end = ts(static_cast<std::int64_t>(i) * 3600);
        n.sources = {"c" + std::to_string(i / 10)};
        n.embedding = embedding();
        t1.push_back(n);
    }
    const auto group = [&](const std::vector<MemoryNode>& children, int tier, std::vector<MemoryNode>& out) {
        std::size_t i = 0, ordinal = 0;
        while (i < children.size()) {
            const auto size = std::min<std::size_t>(uniform_int(rng, 1, 4), children.size() - i);
            MemoryNode p;
            char id[32];
            std::snprintf(id, sizeof id, "m%d-%06zu", tier, ++ordinal);
            p.id = id;
            p.tier = tier;
            p.text = "group " + std::string(id);
            p.date_start = children[i].date_start;
            p.date_end = children[i].date_end;
            for (std::size_t k = i; k < i + size; ++k) {
                p.children.push_back(children[k].id);
                p.date_start = std::min(p.date_start, children[k].date_start);
                p.date_end = std::max(p.date_end, children[k].date_end);
            }
            p.embedding = embedding();
            out.push_back(std::move(p));
            i += size;
        }
    };
    group(t1, kSecondOrder, t2);
    std::vector<MemoryNode> t3;
    group(t2, kTopOrder, t3);
    for (auto& n : t1) store.add(std::move(n));
    for (auto& n : t2) store.add(std::move(n));
    for (auto& n : t3) store.add(std::move(n));
    return store;
}

// Deterministic per-prompt coin: depends only on the prompt text and a seed.
inline std::uint64_t prompt_coin(std::string_view prompt, std::uint64_t seed) { return fnv1a64(prompt, seed ^ 0x5bd1e995ULL); }

inline std::string last_user_content(const ChatRequest& r) { return r.messages.empty() ? "" : r.messages.back().content; }

// Memory-builder agent. Stage-1 prompts get one dated memory per owner
// message ("NONE" when the owner never speaks); consolidation prompts get
// groups of up to three consecutive labels, plus an occasional bogus or
// duplicate ref that the builder must drop.
inline std::string memory_agent_reply(const std::string& prompt, std::uint64_t seed) {
    const auto coin = prompt_coin(prompt, seed);
    std::istringstream in(prompt);
    std::string line, out;
    if (prompt.find("long-term memory log") != std::string::npos) {
        bool in_conversation = false;
        while (std::getline(in, line)) {
            if (line == "Conversation:") {
                in_conversation = true;
                continue;
            }
            if (!in_conversation || line.size() < 21) continue;
            const auto stamp = line.substr(0, 19);
            const auto rest = line.substr(20);
            if (rest.rfind("Me: ", 0) == 0) out += "[" + stamp + "] the user said " + rest.substr(4) + "\n";
        }
        return out.empty() ? "NONE" : out;
    }
    std::vector<std::string> stamps;
    bool in_memories = false;
    while (std::getline(in, line)) {
        if (line == "Memories:") {
            in_memories = true;
            continue;
        }
        if (!in_memories || line.empty()) continue;
        const auto open = line.find('[');
        if (open != std::string::npos && line.size() > open + 20) stamps.push_back(line.substr(open + 1, 19));
    }
    std::size_t i = 0;
    std::uint64_t state = coin;
    while (i < stamps.size()) {
        state = state * 6364136223846793005ULL + 1442695040888963407ULL;
        const std::size_t size = 1 + (state >> 33) % 3;
        const auto end = std::min(i + size, stamps.size());
        out += "[" + stamps[i] + "] episode " + std::to_string(i + 1) + " (refs: ";
        for (std::size_t k = i; k < end; ++k) out += (k == i ? "" : ", ") + std::to_string(k + 1);
        if ((state >> 20) % 7 == 0) out += ", 999";
        if ((state >> 24) % 11 == 0 && i > 0) out += ", " + std::to_string(i);  // already used by the previous group
        out += ")\n";
        i = end;
    }
    return out.empty() ? "nothing" : out;
}

inline std::unique_ptr<FunctionGateway> memory_agent(std::uint64_t seed = 1, std::size_t dim = 16) {
    return std::make_unique<FunctionGateway>(
        [seed](const ChatRequest& r) { return memory_agent_reply(last_user_content(r), seed); },
        [dim](std::string_view text) { return hashing_embedding(text, dim); });
}

inline bool is_cache_check(std::string_view p) { return p.find("Answer with only 'Yes' or 'No'.") != std::string_view::npos; }
inline bool is_selection(std::string_view p) {
    return p.find("Which of these memory abstractions") != std::string_view::npos;
}
inline bool is_summary(std::string_view p) { return p.find("Create a concise summary") != std::string_view::npos; }

// Memory-manager agent with prompt-keyed pseudo-random answers: cache
// checks say yes about a third of the time, selections occasionally come
// back without any usable number, summaries say "NO" about 40% of the time.
inline std::string manager_agent_reply(const std::string& prompt, std::uint64_t seed) {
    const auto coin = prompt_coin(prompt, seed);
    if (is_cache_check(prompt)) return coin % 3 == 0 ? "Yes" : "No";
    if (is_selection(prompt)) {
        if (coin % 10 == 0) return "None of them look relevant.";
        std::size_t count = 0;
        std::istringstream in(prompt);
        std::string line;
        bool in_list = false;
        while (std::getline(in, line)) {
            if (line.find("top-level memory abstractions") != std::string::npos) {
                in_list = true;
                continue;
            }
            if (in_list && line.find(". [") != std::string::npos) ++count;
            if (in_list && line.rfind("Which of these", 0) == 0) break;
        }
        if (count == 0) return "none";
        std::string reply = "Expand ";
        const auto picks = 1 + (coin >> 8) % 3;
        for (std::size_t i = 0; i < picks; ++i) {
            reply += std::to_string(1 + (coin >> (12 + 8 * i)) % count);
            reply += i + 1 < picks ? " and " : " because they fit.";
        }
        if ((coin >> 40) % 5 == 0) reply += " Not " + std::to_string(count + 5) + ".";
        return reply;
    }
    if (is_summary(prompt)) return coin % 5 < 2 ? "NO" : "summary " + hex64(coin).substr(0, 6);
    return "unexpected prompt";
}

inline std::unique_ptr<FunctionGateway> manager_agent(std::uint64_t seed, std::size_t dim = 8) {
    return std::make_unique<FunctionGateway>(
        [seed](const ChatRequest& r) { return manager_agent_reply(last_user_content(r), seed); },
        [dim](std::string_view text) { return hashing_embedding(text, dim); });
}

// Fifteen-message example conversation for persona fixtures.
inline std::vector<Message> icl_fixture(const std::string& owner = "me") {
    std::vector<Message> out;
    for (int i = 0; i < 15; ++i)
        out.push_back(Message{i % 2 ? owner : "friend", ts(i * 30), "example line " + std::to_string(i)});
    return out;
}

// Interlocutor factory whose personas answer through `reply`; embeddings use
// the hashing backend.
inline InterlocutorFactory scripted_factory(std::function<std::string(const ChatRequest&)> reply, double wpm = 40.0) {
    return [reply = std::move(reply), wpm](const RosterEntry& entry) {
        PersonaProfile p;
        p.name = "Alex";
        p.owner_id = "alex";
        p.wpm = wpm;
        p.gateway.chat.model = entry.id;
        auto gw = std::make_shared<FunctionGateway>(reply, [](std::string_view t) { return hashing_embedding(t, 8); });
        return std::make_unique<Impersonator>(std::move(p), std::move(gw));
    };
}

// Small prompt pool with `per_category` cards of each kind.
inline std::vector<PromptCard> small_pool(std::size_t per_category = 5) {
    std::vector<PromptCard> pool;
    for (std::size_t i = 0; i < per_category; ++i) {
        pool.push_back({"s" + std::to_string(i), PromptCategory::Stylistic, "Style", "style prompt " + std::to_string(i)});
        pool.push_back({"c" + std::to_string(i), PromptCategory::Contextual, "Context", "context prompt " + std::to_string(i)});
    }
    return pool;
}

}  // namespace doppel::testing
