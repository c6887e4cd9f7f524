#include "doppel/retrieval.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <ostream>
#include <set>

#include <nlohmann/json.hpp>

#include "doppel/dataset.hpp"
#include "doppel/error.hpp"

namespace doppel {

std::string_view to_string(MemoryOrigin origin) {
    switch (origin) {
        case MemoryOrigin::Dense: return "dense";
        case MemoryOrigin::Zoomed: return "zoomed";
        case MemoryOrigin::Searched: return "searched";
        case MemoryOrigin::Consolidated: return "consolidated";
    }
    return "?";
}

std::string RetrievedMemory::line() const { return "[" + format_datetime(date_start) + "] " + text; }

void write_trace(std::ostream& out, std::span<const TraceStep> trace) {
    for (const auto& s : trace) {
        nlohmann::ordered_json j;
        j["step"] = s.step;
        j["prompt_id"] = s.prompt_id;
        j["decision"] = s.decision;
        j["node_ids"] = s.node_ids;
        out << j.dump() << '\n';
    }
}

void RetrievalCache::update(std::string key, RetrievalResult result, std::size_t turn) {
    entries_.push_back(Entry{std::move(key), std::move(result), turn});
    while (entries_.size() > capacity_) entries_.pop_front();
}

std::string query_window(std::span<const Message> history, std::size_t window, std::string_view owner) {
    const auto n = std::min(window, history.size());
    return render_transcript(history.last(n), owner);
}

// Manager prompts. The wording is a fixed protocol with the scripted test
// agents, which recognise each prompt by its question line.

std::string cache_check_prompt(std::string_view conversation, std::string_view previous) {
    std::string p = "Given the following conversation:\n\n";
    p += conversation;
    p += "\n\nAnd these previously retrieved memories:\n\n";
    p += previous;
    p +=
        "\n\nAre these memories sufficient to address the current conversation?\n"
        "Answer with only 'Yes' or 'No'.";
    return p;
}

std::string selection_prompt(std::string_view conversation, std::string_view abstractions,
                             std::span<const std::size_t> already_expanded) {
    std::string p = "Given the following conversation:\n\n";
    p += conversation;
    p += "\n\nAnd these top-level memory abstractions:\n\n";
    p += abstractions;
    p +=
        "\n\nWhich of these memory abstractions are most relevant to the conversation?\n"
        "Identify the numbers of the abstractions that should be expanded to retrieve more "
        "detailed memories.\n"
        "Explain your reasoning briefly for each selection.";
    if (!already_expanded.empty()) {
        p += "\nAbstractions already expanded without enough detail:";
        for (std::size_t i = 0; i < already_expanded.size(); ++i) {
            p += i == 0 ? " " : ", ";
            p += std::to_string(already_expanded[i]);
        }
        p += '.';
    }
    return p;
}

std::string summary_prompt(std::string_view conversation, std::string_view memories) {
    std::string p = "Given the following conversation:\n\n";
    p += conversation;
    p += "\n\nAnd these zoomed retrieved memories:\n\n";
    p += memories;
    p +=
        "\n\nCreate a concise summary of the information from these memories that is most "
        "relevant to the conversation.\n"
        "Focus on providing helpful context that would assist in continuing this conversation "
        "effectively.\n"
        "Include specific details like dates, names, and facts when they are important.\n"
        "If the memories are not enough to sufficiently answer the prompt, simply output \"NO\".";
    return p;
}

std::vector<std::size_t> parse_selection(std::string_view reply, std::size_t count) {
    std::vector<std::size_t> out;
    std::size_t i = 0;
    while (i < reply.size()) {
        if (!std::isdigit(static_cast<unsigned char>(reply[i]))) {
            ++i;
            continue;
        }
        std::size_t j = i;
        std::size_t value = 0;
        bool overflow = false;
        while (j < reply.size() && std::isdigit(static_cast<unsigned char>(reply[j]))) {
            if (value > 1'000'000) overflow = true;
            value = value * 10 + static_cast<std::size_t>(reply[j] - '0');
            ++j;
        }
        if (!overflow && value >= 1 && value <= count &&
            std::find(out.begin(), out.end(), value) == out.end())
            out.push_back(value);
        i = j;
    }
    return out;
}

namespace {

RetrievedMemory to_retrieved(const MemoryNode& n, MemoryOrigin origin) {
    return RetrievedMemory{n.id, n.tier, n.text, n.date_start, n.date_end, origin};
}

std::string memory_lines(const std::vector<RetrievedMemory>& memories) {
    std::string out;
    for (const auto& m : memories) {
        if (!out.empty()) out += '\n';
        out += m.line();
    }
    return out;
}

std::vector<NodeId> ids_of(const std::vector<RetrievedMemory>& memories) {
    std::vector<NodeId> ids;
    for (const auto& m : memories) ids.push_back(m.id);
    return ids;
}

std::string previous_summary(const RetrievalResult& cached) {
    if (cached.summary) return *cached.summary;
    return memory_lines(cached.memories);
}

bool is_yes(std::string_view reply) {
    const auto t = trim(reply);
    if (t.size() < 3) return false;
    return std::tolower(static_cast<unsigned char>(t[0])) == 'y' &&
           std::tolower(static_cast<unsigned char>(t[1])) == 'e' &&
           std::tolower(static_cast<unsigned char>(t[2])) == 's';
}

}  // namespace

RetrievalResult retrieve_bm(std::span<const Message> history, const MemoryStore& store, Gateway& gw,
                            const RetrievalOptions& options) {
    RetrievalResult result;
    const auto query = gw.embed(query_window(history, options.window, options.owner));
    for (const auto& hit : store.search_tier(kFirstOrder, query, std::max<std::size_t>(options.k, 1)))
        result.memories.push_back(to_retrieved(*hit.node, MemoryOrigin::Dense));
    result.trace.push_back({"dense", "", "top-" + std::to_string(options.k), ids_of(result.memories)});
    return result;
}

RetrievalResult retrieve_mm(std::span<const Message> history, const MemoryStore& store, Gateway& gw,
                            RetrievalCache& cache, const RetrievalOptions& options, std::size_t turn) {
    const std::string conversation = render_transcript(history, options.owner);
    const std::string window = query_window(history, options.window, options.owner);
    const auto ask = [&](const std::string& prompt) {
        return complete_prompt(gw, prompt, options.temperature, options.model);
    };

    std::vector<TraceStep> trace;
    if (const auto* cached = cache.lookup()) {
        const auto reply = ask(cache_check_prompt(conversation, previous_summary(cached->result)));
        const bool hit = is_yes(reply);
        trace.push_back({"cache-check", "prompt-1", hit ? "yes" : "no", ids_of(cached->result.memories)});
        if (hit) {
            RetrievalResult r = cached->result;
            r.served_from_cache = true;
            r.loops = 0;
            // Keep the cached provenance after the check.
            trace.insert(trace.end(), r.trace.begin(), r.trace.end());
            r.trace = std::move(trace);
            return r;
        }
    }

    const auto top = store.tier(kTopOrder);
    const auto fallback = [&](std::string reason) {
        RetrievalResult r = retrieve_bm(history, store, gw, options);
        trace.push_back({"fallback", "", std::move(reason), ids_of(r.memories)});
        trace.insert(trace.end(), r.trace.begin(), r.trace.end());
        r.trace = std::move(trace);
        return r;
    };
    if (top.empty()) return fallback("no-abstractions");

    std::string abstractions;
    for (std::size_t i = 0; i < top.size(); ++i) {
        if (i) abstractions += '\n';
        abstractions += std::to_string(i + 1) + ". " + top[i]->line();
    }

    std::optional<Embedding> query;
    const auto query_vector = [&]() -> const Embedding& {
        if (!query) query = gw.embed(window);
        return *query;
    };

    const std::size_t limit = std::max<std::size_t>(options.k, 1);
    const std::size_t max_loops = std::max<std::size_t>(options.max_loops, 1);
    std::vector<std::size_t> expanded;
    RetrievalResult result;
    for (std::size_t loop = 1; loop <= max_loops; ++loop) {
        result.loops = loop;
        const auto reply = ask(selection_prompt(conversation, abstractions, expanded));
        const auto selected = parse_selection(reply, top.size());
        if (selected.empty()) {
            trace.push_back({"select", "prompt-2", "malformed", {}});
            auto r = fallback("malformed-selection");
            r.loops = loop;
            return r;
        }
        std::vector<NodeId> selected_ids;
        for (const auto s : selected) {
            selected_ids.push_back(top[s - 1]->id);
            if (std::find(expanded.begin(), expanded.end(), s) == expanded.end()) expanded.push_back(s);
        }
        trace.push_back({"select", "prompt-2", "loop-" + std::to_string(loop), selected_ids});

        // Zoom: tier-2 children of each selection, then their tier-1 children.
        std::vector<const MemoryNode*> zoom2, zoom1;
        std::set<NodeId> seen;
        for (const auto s : selected) {
            for (const auto& c2 : top[s - 1]->children) {
                const auto* n2 = store.find(c2);
                if (!n2 || !seen.insert(n2->id).second) continue;
                zoom2.push_back(n2);
                for (const auto& c1 : n2->children) {
                    const auto* n1 = store.find(c1);
                    if (n1 && seen.insert(n1->id).second) zoom1.push_back(n1);
                }
            }
        }
        std::vector<NodeId> zoom_ids;
        for (const auto* n : zoom2) zoom_ids.push_back(n->id);
        for (const auto* n : zoom1) zoom_ids.push_back(n->id);
        trace.push_back({"zoom", "", std::to_string(zoom2.size()) + "+" + std::to_string(zoom1.size()), zoom_ids});

        if (options.use_search && !zoom1.empty() && zoom1.size() > limit) {
            // More zoomed first-order memories than fit: keep the closest to the query.
            const auto& q = query_vector();
            std::map<NodeId, double> sim;
            for (const auto* n : zoom1) sim[n->id] = cosine_similarity(q, n->embedding);
            std::stable_sort(zoom1.begin(), zoom1.end(), [&](const MemoryNode* a, const MemoryNode* b) {
                if (sim[a->id] != sim[b->id]) return sim[a->id] > sim[b->id];
                return a->id < b->id;
            });
        }

        std::vector<RetrievedMemory> accumulated;
        std::set<NodeId> taken;
        const auto take = [&](const MemoryNode& n, MemoryOrigin origin) {
            if (accumulated.size() >= limit || !taken.insert(n.id).second) return;
            accumulated.push_back(to_retrieved(n, origin));
        };
        for (const auto* n : zoom1) take(*n, MemoryOrigin::Zoomed);
        if (options.use_search && accumulated.size() < limit) {
            std::vector<NodeId> hits;
            for (const auto& hit : store.search_tier(kFirstOrder, query_vector(), limit)) {
                hits.push_back(hit.node->id);
                take(*hit.node, MemoryOrigin::Searched);
            }
            trace.push_back({"search", "", "tier-1", hits});
        }
        for (const auto* n : zoom2) take(*n, MemoryOrigin::Consolidated);
        result.memories = std::move(accumulated);

        const std::string reply_text = ask(summary_prompt(conversation, memory_lines(result.memories)));
        const auto summary = trim(reply_text);
        if (summary == "NO") {
            trace.push_back({"summarize", "prompt-3", "insufficient", ids_of(result.memories)});
            continue;
        }
        trace.push_back({"summarize", "prompt-3", "submit", ids_of(result.memories)});
        result.summary = std::string(summary);
        result.trace = std::move(trace);
        cache.update(window, result, turn);
        return result;
    }

    trace.push_back({"give-up", "", "loop-limit", ids_of(result.memories)});
    result.summary.reset();
    result.trace = std::move(trace);
    return result;
}

}  // namespace doppel
