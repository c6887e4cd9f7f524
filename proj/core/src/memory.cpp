#include "doppel/memory.hpp"

#include <algorithm>
#include <type_traits>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "doppel/dataset.hpp"
#include "doppel/error.hpp"

namespace doppel {

using nlohmann::json;

std::string MemoryNode::line() const { return "[" + format_datetime(date_start) + "] " + text; }

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size())
        throw Error(ErrorCode::DimensionMismatch, "cosine of vectors with different dimensions");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// ---------------------------------------------------------------------------
// MemoryStore

MemoryStore::MemoryStore(const MemoryStore& other)
    : nodes_(other.nodes_), embed_dim_(other.embed_dim_), built_at_(other.built_at_) {
    for (const auto& [_, node] : nodes_) index_node(node);
}

MemoryStore& MemoryStore::operator=(const MemoryStore& other) {
    if (this != &other) {
        MemoryStore copy(other);
        *this = std::move(copy);
    }
    return *this;
}

void MemoryStore::add(MemoryNode node) {
    if (embed_dim_ == 0 && nodes_.empty()) embed_dim_ = node.embedding.size();
    if (node.embedding.size() != embed_dim_)
        throw Error(ErrorCode::DimensionMismatch,
                    "node " + node.id + " has dimension " + std::to_string(node.embedding.size()) +
                        ", store has " + std::to_string(embed_dim_));
    if (node.tier < kFirstOrder || node.tier > kTopOrder)
        throw Error(ErrorCode::InvalidArgument, "node " + node.id + " has invalid tier");
    const auto id = node.id;
    const auto [it, inserted] = nodes_.emplace(id, std::move(node));
    if (!inserted) throw Error(ErrorCode::InvalidArgument, "duplicate node id " + id);
    index_node(it->second);
}

void MemoryStore::index_node(const MemoryNode& node) {
    auto& idx = index_[node.tier];
    idx.nodes.push_back(&node);
    idx.matrix.insert(idx.matrix.end(), node.embedding.begin(), node.embedding.end());
    double norm = 0.0;
    for (const float x : node.embedding) norm += static_cast<double>(x) * x;
    idx.norms.push_back(std::sqrt(norm));
}

const MemoryNode* MemoryStore::find(std::string_view id) const {
    const auto it = nodes_.find(id);
    return it == nodes_.end() ? nullptr : &it->second;
}

const MemoryNode& MemoryStore::at(std::string_view id) const {
    if (const auto* n = find(id)) return *n;
    throw Error(ErrorCode::InvalidArgument, "unknown memory node " + std::string(id));
}

std::vector<const MemoryNode*> MemoryStore::tier(int t) const {
    std::vector<const MemoryNode*> out;
    for (const auto& [_, node] : nodes_)
        if (node.tier == t) out.push_back(&node);
    return out;
}

std::vector<ScoredNode> MemoryStore::search_tier(int tier, std::span<const float> query,
                                                 std::size_t k) const {
    if (k == 0) throw Error(ErrorCode::InvalidArgument, "search_tier needs k >= 1");
    const auto it = index_.find(tier);
    if (it == index_.end() || it->second.nodes.empty()) return {};
    if (query.size() != embed_dim_)
        throw Error(ErrorCode::DimensionMismatch,
                    "query has dimension " + std::to_string(query.size()) + ", store has " +
                        std::to_string(embed_dim_));

    double qnorm = 0.0;
    for (const float x : query) qnorm += static_cast<double>(x) * x;
    qnorm = std::sqrt(qnorm);

    const auto& idx = it->second;
    std::vector<ScoredNode> scored;
    scored.reserve(idx.nodes.size());
    for (std::size_t row = 0; row < idx.nodes.size(); ++row) {
        const float* v = idx.matrix.data() + row * embed_dim_;
        double dot = 0.0;
        for (std::size_t d = 0; d < embed_dim_; ++d) dot += static_cast<double>(query[d]) * v[d];
        const double denom = qnorm * idx.norms[row];
        scored.push_back({idx.nodes[row], denom == 0.0 ? 0.0 : dot / denom});
    }
    const auto better = [](const ScoredNode& a, const ScoredNode& b) {
        if (a.similarity != b.similarity) return a.similarity > b.similarity;
        return a.node->id < b.node->id;
    };
    const auto top = std::min(k, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(top), scored.end(),
                      better);
    scored.resize(top);
    return scored;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

json node_to_json(const MemoryNode& n) {
    return json{{"id", n.id},
                {"tier", n.tier},
                {"text", n.text},
                {"date_start", format_rfc3339(n.date_start)},
                {"date_end", format_rfc3339(n.date_end)},
                {"children", n.children},
                {"sources", n.sources},
                {"embedding", n.embedding}};
}

Timestamp required_time(const json& j, const char* key) {
    auto t = parse_rfc3339(j.at(key).get<std::string>());
    if (!t) throw Error(ErrorCode::StoreCorrupt, std::string("bad timestamp in field ") + key);
    return *t;
}

MemoryNode node_from_json(const json& j) {
    MemoryNode n;
    n.id = j.at("id").get<std::string>();
    n.tier = j.at("tier").get<int>();
    n.text = j.at("text").get<std::string>();
    n.date_start = required_time(j, "date_start");
    n.date_end = required_time(j, "date_end");
    n.children = j.at("children").get<std::vector<NodeId>>();
    n.sources = j.at("sources").get<std::vector<std::string>>();
    n.embedding = j.at("embedding").get<Embedding>();
    return n;
}

void write_atomically(const std::filesystem::path& path, const std::string& content) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorCode::IoError, "cannot write " + tmp.string());
        out << content;
        if (!out) throw Error(ErrorCode::IoError, "failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace

json MemoryStore::to_json() const {
    json nodes = json::array();
    for (const auto& [_, n] : nodes_) nodes.push_back(node_to_json(n));
    return json{{"version", kVersion},
                {"embed_dim", embed_dim_},
                {"built_at", format_rfc3339(built_at_)},
                {"nodes", std::move(nodes)}};
}

MemoryStore MemoryStore::from_json(const json& j) {
    try {
        if (!j.contains("version"))
            throw Error(ErrorCode::StoreCorrupt, "memory store document lacks a version");
        if (j.at("version").get<int>() != kVersion)
            throw Error(ErrorCode::StoreCorrupt, "unsupported memory store version");
        MemoryStore store(j.at("embed_dim").get<std::size_t>(), required_time(j, "built_at"));
        for (const auto& n : j.at("nodes")) store.add(node_from_json(n));
        return store;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::StoreCorrupt, std::string("malformed memory store: ") + e.what());
    } catch (const Error& e) {
        if (e.code() == ErrorCode::StoreCorrupt) throw;
        throw Error(ErrorCode::StoreCorrupt, e.what());
    }
}

void MemoryStore::save(const std::filesystem::path& path) const { write_atomically(path, to_json().dump()); }

MemoryStore MemoryStore::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoError, "cannot open memory store " + path.string());
    const json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw Error(ErrorCode::StoreCorrupt, path.string() + " is not JSON");
    return from_json(j);
}

// ---------------------------------------------------------------------------
// Validation

std::vector<std::string> validate_store(const MemoryStore& store) {
    std::vector<std::string> problems;
    std::map<std::string, std::size_t> parent_count;

    for (const auto& [id, n] : store.nodes()) {
        if (n.embedding.size() != store.embed_dim())
            problems.push_back(id + ": embedding dimension differs from store");
        if (n.date_start > n.date_end) problems.push_back(id + ": date_start after date_end");
        if (n.tier == kFirstOrder) {
            if (n.sources.empty()) problems.push_back(id + ": tier-1 node without sources");
            if (!n.children.empty()) problems.push_back(id + ": tier-1 node with children");
            continue;
        }
        if (n.children.empty()) problems.push_back(id + ": tier-" + std::to_string(n.tier) + " node without children");
        for (const auto& child_id : n.children) {
            const auto* child = store.find(child_id);
            if (!child) {
                problems.push_back(id + ": unknown child " + child_id);
                continue;
            }
            if (child->tier != n.tier - 1) problems.push_back(id + ": child " + child_id + " is not one tier below");
            if (child->date_start < n.date_start || child->date_end > n.date_end)
                problems.push_back(id + ": date range does not span child " + child_id);
            ++parent_count[child_id];
        }
    }

    const bool has_upper = !store.tier(kSecondOrder).empty() || !store.tier(kTopOrder).empty();
    for (const auto& [id, n] : store.nodes()) {
        if (n.tier == kTopOrder || !has_upper) continue;
        const auto c = parent_count[id];
        if (c != 1) problems.push_back(id + ": has " + std::to_string(c) + " parents (partition requires 1)");
    }

    // Reachability from the top tier.
    std::set<std::string> reached;
    std::vector<const MemoryNode*> frontier = store.tier(kTopOrder);
    while (!frontier.empty()) {
        const auto* n = frontier.back();
        frontier.pop_back();
        if (!reached.insert(n->id).second) continue;
        for (const auto& c : n->children)
            if (const auto* child = store.find(c)) frontier.push_back(child);
    }
    for (const auto* n : store.tier(kFirstOrder))
        if (!reached.count(n->id)) problems.push_back(n->id + ": not reachable from any tier-3 node");
    return problems;
}

// ---------------------------------------------------------------------------
// Generation parsing and prompts

std::vector<GeneratedLine> parse_generated_lines(std::string_view completion) {
    std::vector<GeneratedLine> out;
    std::istringstream in{std::string(completion)};
    std::string raw;
    while (std::getline(in, raw)) {
        std::string_view line = trim(raw);
        // Tolerate list markers such as "- " or "* ".
        if (line.size() > 2 && (line[0] == '-' || line[0] == '*') && line[1] == ' ') line = trim(line.substr(2));
        if (line.size() < 22 || line[0] != '[' || line[20] != ']') continue;
        const auto ts = parse_datetime(line.substr(1, 19));
        if (!ts) continue;
        std::string_view body = trim(line.substr(21));

        GeneratedLine g{*ts, {}, std::nullopt};
        if (!body.empty() && body.back() == ')') {
            const auto open = body.rfind("(refs:");
            if (open != std::string_view::npos) {
                std::vector<std::string> refs;
                std::string token;
                for (const char c : body.substr(open + 6, body.size() - open - 7)) {
                    if (c == ',' || c == ' ' || c == '\t') {
                        if (!token.empty()) refs.push_back(std::move(token));
                        token.clear();
                    } else {
                        token += c;
                    }
                }
                if (!token.empty()) refs.push_back(std::move(token));
                g.refs = std::move(refs);
                body = trim(body.substr(0, open));
            }
        }
        if (body.empty()) continue;
        g.text = std::string(body);
        out.push_back(std::move(g));
    }
    return out;
}

std::string first_order_prompt(const Conversation& conversation, std::string_view owner_name) {
    std::string p;
    p += "You are maintaining a long-term memory log about ";
    p += owner_name;
    p += ". Read the conversation below, in which \"Me\" is ";
    p += owner_name;
    p +=
        ", and record the concrete facts it reveals about them: experiences, plans, "
        "relationships, preferences and events.\n\n"
        "Write one memory per line in exactly this format:\n"
        "[YYYY-MM-DD HH:MM:SS] <factual statement about ";
    p += owner_name;
    p +=
        ">\n"
        "Use the timestamp of the message where the fact appears. Do not add any other text. "
        "If the conversation reveals nothing worth remembering, write NONE.\n\n"
        "Conversation:\n";
    p += render_transcript(conversation.messages, conversation.owner);
    p += '\n';
    return p;
}

std::string consolidation_prompt(std::span<const MemoryNode* const> nodes, int target_tier,
                                 std::string_view owner_name) {
    std::string p;
    if (target_tier == kSecondOrder) {
        p += "Below are numbered memories about ";
        p += owner_name;
        p +=
            ", in chronological order. Reflect on them and combine memories that describe "
            "temporally or causally related experiences into consolidated memories that keep "
            "their core themes, dates and names.\n\n";
    } else {
        p += "Below are numbered consolidated memories about ";
        p += owner_name;
        p +=
            ", in chronological order. Identify recurring patterns across them and write short "
            "abstract generalizations, each naming the pattern and the years it covers, for "
            "example \"weekend hiking trips with college friends (2019-2021)\".\n\n";
    }
    p +=
        "Write one line per group in exactly this format:\n"
        "[YYYY-MM-DD HH:MM:SS] <memory text> (refs: <comma-separated numbers>)\n"
        "Use the date of the earliest memory in the group. Each number may appear in at most "
        "one group, and a memory may form a group on its own. Do not add any other text.\n\n"
        "Memories:\n";
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        p += std::to_string(i + 1);
        p += ". ";
        p += nodes[i]->line();
        p += '\n';
    }
    return p;
}

// ---------------------------------------------------------------------------
// Stages

namespace {

// Calls the gateway until `accept` approves a reply, at most 1 + max_retries
// times. Gateway errors count against the same budget and are rethrown once
// it is exhausted. Returns nullopt when every reply was rejected.
template <typename Accept>
auto generate_with_retries(Gateway& gw, const std::string& prompt, const BuildOptions& options,
                           BuildReport* report, Accept&& accept)
    -> std::optional<std::decay_t<decltype(accept(std::string{}).value())>> {
    for (int attempt = 0; attempt <= options.max_retries; ++attempt) {
        if (attempt > 0 && report) ++report->retries;
        std::string reply;
        try {
            reply = complete_prompt(gw, prompt, options.temperature, options.model);
        } catch (const Error& e) {
            if (!e.retryable() || attempt == options.max_retries) throw;
            continue;
        }
        if (auto parsed = accept(reply)) return parsed;
    }
    return std::nullopt;
}

std::string padded_id(int tier, std::size_t ordinal) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "m%d-%06zu", tier, ordinal);
    return buf;
}

bool chronological(const MemoryNode& a, const MemoryNode& b) {
    if (a.date_start != b.date_start) return a.date_start < b.date_start;
    return a.id < b.id;
}

}  // namespace

std::vector<MemoryNode> synthesize_first_order(const Conversation& conversation, Gateway& gw,
                                               const BuildOptions& options, BuildReport* report) {
    if (conversation.messages.empty())
        throw Error(ErrorCode::InvalidArgument, "conversation " + conversation.id + " is empty");
    const auto prompt = first_order_prompt(conversation, options.owner_name);

    auto lines = generate_with_retries(
        gw, prompt, options, report, [](const std::string& reply) -> std::optional<std::vector<GeneratedLine>> {
            if (trim(reply) == "NONE") return std::vector<GeneratedLine>{};
            auto parsed = parse_generated_lines(reply);
            if (parsed.empty()) return std::nullopt;
            return parsed;
        });
    if (!lines) {
        if (report) report->skipped_conversations.push_back(conversation.id);
        throw Error(ErrorCode::MalformedGeneration,
                    "no parseable memories for conversation " + conversation.id);
    }

    std::vector<MemoryNode> nodes;
    for (auto& g : *lines) {
        const auto ts = std::clamp(g.timestamp, conversation.start(), conversation.end());
        char suffix[16];
        std::snprintf(suffix, sizeof suffix, "-%03zu", nodes.size() + 1);
        MemoryNode n;
        n.id = "m1-" + conversation.id + suffix;
        n.tier = kFirstOrder;
        n.text = std::move(g.text);
        n.date_start = n.date_end = ts;
        n.sources = {conversation.id};
        nodes.push_back(std::move(n));
    }
    return nodes;
}

std::vector<MemoryNode> consolidate_tier(std::span<const MemoryNode> children, int target_tier,
                                         Gateway& gw, const BuildOptions& options,
                                         BuildReport* report) {
    if (target_tier != kSecondOrder && target_tier != kTopOrder)
        throw Error(ErrorCode::InvalidArgument, "consolidation targets tier 2 or 3");
    if (options.window == 0 || options.overlap >= options.window)
        throw Error(ErrorCode::InvalidArgument, "consolidation window must exceed its overlap");
    for (const auto& c : children)
        if (c.tier != target_tier - 1)
            throw Error(ErrorCode::InvalidArgument, "node " + c.id + " is not one tier below the target");

    std::vector<const MemoryNode*> ordered;
    for (const auto& c : children) ordered.push_back(&c);
    std::sort(ordered.begin(), ordered.end(),
              [](const MemoryNode* a, const MemoryNode* b) { return chronological(*a, *b); });

    std::set<std::string> claimed;
    std::vector<MemoryNode> parents;
    auto make_parent = [&](std::string text, std::vector<const MemoryNode*> members) {
        std::sort(members.begin(), members.end(),
                  [](const MemoryNode* a, const MemoryNode* b) { return chronological(*a, *b); });
        MemoryNode p;
        p.tier = target_tier;
        p.text = std::move(text);
        p.date_start = members.front()->date_start;
        p.date_end = members.front()->date_end;
        for (const auto* m : members) {
            p.date_start = std::min(p.date_start, m->date_start);
            p.date_end = std::max(p.date_end, m->date_end);
            p.children.push_back(m->id);
            claimed.insert(m->id);
        }
        parents.push_back(std::move(p));
    };

    const std::size_t step = options.window - options.overlap;
    for (std::size_t start = 0; start < ordered.size(); start += step) {
        const std::size_t stop = std::min(start + options.window, ordered.size());
        std::vector<const MemoryNode*> shown;
        for (std::size_t i = start; i < stop; ++i)
            if (!claimed.count(ordered[i]->id)) shown.push_back(ordered[i]);

        if (!shown.empty()) {
            const auto prompt = consolidation_prompt(shown, target_tier, options.owner_name);
            auto lines = generate_with_retries(
                gw, prompt, options, report,
                [](const std::string& reply) -> std::optional<std::vector<GeneratedLine>> {
                    auto parsed = parse_generated_lines(reply);
                    std::erase_if(parsed, [](const GeneratedLine& g) { return !g.refs; });
                    if (parsed.empty()) return std::nullopt;
                    return parsed;
                });
            if (!lines) {
                if (report) ++report->malformed_windows;
            } else {
                for (auto& g : *lines) {
                    std::vector<const MemoryNode*> members;
                    for (const auto& ref : *g.refs) {
                        std::size_t label = 0;
                        const bool numeric = !ref.empty() && std::all_of(ref.begin(), ref.end(), [](unsigned char c) { return std::isdigit(c) != 0; });
                        if (numeric) label = std::stoul(ref);
                        const MemoryNode* node =
                            numeric && label >= 1 && label <= shown.size() ? shown[label - 1] : nullptr;
                        const bool duplicate =
                            node && (claimed.count(node->id) ||
                                     std::find(members.begin(), members.end(), node) != members.end());
                        if (!node || duplicate) {
                            if (report) ++report->dropped_refs;
                            continue;
                        }
                        members.push_back(node);
                    }
                    if (!members.empty()) make_parent(std::move(g.text), std::move(members));
                }
            }
        }
        if (stop == ordered.size()) break;
    }

    for (const auto* node : ordered) {
        if (claimed.count(node->id)) continue;
        if (report) ++report->identity_fallbacks;
        make_parent(node->text, {node});
    }

    std::sort(parents.begin(), parents.end(), [](const MemoryNode& a, const MemoryNode& b) {
        if (a.date_start != b.date_start) return a.date_start < b.date_start;
        return a.children.front() < b.children.front();
    });
    for (std::size_t i = 0; i < parents.size(); ++i) parents[i].id = padded_id(target_tier, i + 1);
    return parents;
}

// ---------------------------------------------------------------------------
// Build

namespace {

enum class Stage { FirstOrder = 1, Consolidate = 2, Abstract = 3, Done = 4 };

struct Checkpoint {
    Stage stage = Stage::FirstOrder;
    std::size_t conversations_done = 0;
    std::vector<MemoryNode> nodes;
    BuildReport report;
};

json report_to_json(const BuildReport& r) {
    return json{{"skipped_conversations", r.skipped_conversations},
                {"malformed_windows", r.malformed_windows},
                {"dropped_refs", r.dropped_refs},
                {"identity_fallbacks", r.identity_fallbacks},
                {"retries", r.retries}};
}

BuildReport report_from_json(const json& j) {
    BuildReport r;
    r.skipped_conversations = j.at("skipped_conversations").get<std::vector<std::string>>();
    r.malformed_windows = j.at("malformed_windows").get<std::size_t>();
    r.dropped_refs = j.at("dropped_refs").get<std::size_t>();
    r.identity_fallbacks = j.at("identity_fallbacks").get<std::size_t>();
    r.retries = j.at("retries").get<std::size_t>();
    return r;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& cp) {
    json nodes = json::array();
    for (const auto& n : cp.nodes) nodes.push_back(node_to_json(n));
    const json doc{{"version", MemoryStore::kVersion},
                   {"stage", static_cast<int>(cp.stage)},
                   {"conversations_done", cp.conversations_done},
                   {"nodes", std::move(nodes)},
                   {"report", report_to_json(cp.report)}};
    write_atomically(path, doc.dump());
}

std::optional<Checkpoint> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    const json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw Error(ErrorCode::StoreCorrupt, "checkpoint " + path.string() + " is not JSON");
    try {
        Checkpoint cp;
        cp.stage = static_cast<Stage>(j.at("stage").get<int>());
        cp.conversations_done = j.at("conversations_done").get<std::size_t>();
        for (const auto& n : j.at("nodes")) cp.nodes.push_back(node_from_json(n));
        cp.report = report_from_json(j.at("report"));
        return cp;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::StoreCorrupt, std::string("malformed checkpoint: ") + e.what());
    }
}

void embed_nodes(std::vector<MemoryNode>& nodes, std::size_t first, Gateway& gw, const BuildOptions& options,
                 BuildReport* report) {
    for (std::size_t i = first; i < nodes.size(); ++i) {
        if (!nodes[i].embedding.empty()) continue;
        const auto text = nodes[i].line();
        for (int attempt = 0;; ++attempt) {
            try {
                nodes[i].embedding = gw.embed(text);
                break;
            } catch (const Error& e) {
                if (!e.retryable() || attempt >= options.max_retries) throw;
                if (report) ++report->retries;
            }
        }
    }
}

std::vector<MemoryNode> nodes_of_tier(const std::vector<MemoryNode>& nodes, int tier) {
    std::vector<MemoryNode> out;
    std::copy_if(nodes.begin(), nodes.end(), std::back_inserter(out),
                 [tier](const MemoryNode& n) { return n.tier == tier; });
    return out;
}

}  // namespace

BuildResult build_store(const std::vector<Conversation>& conversations, Gateway& gw,
                        const BuildOptions& options) {
    for (std::size_t i = 1; i < conversations.size(); ++i)
        if (conversations[i].start() < conversations[i - 1].start())
            throw Error(ErrorCode::UnsortedInput, "conversations must be sorted by start time");
    if (options.batch_size == 0) throw Error(ErrorCode::InvalidArgument, "batch size must be positive");

    Checkpoint cp;
    if (options.checkpoint) {
        if (auto loaded = load_checkpoint(*options.checkpoint)) cp = std::move(*loaded);
    }
    auto persist = [&] {
        if (options.checkpoint) save_checkpoint(*options.checkpoint, cp);
    };

    if (cp.stage == Stage::FirstOrder) {
        while (cp.conversations_done < conversations.size()) {
            const auto stop = std::min(cp.conversations_done + options.batch_size, conversations.size());
            // Work on a copy so a failure mid-batch leaves the checkpoint state untouched.
            auto nodes = cp.nodes;
            auto report = cp.report;
            for (auto i = cp.conversations_done; i < stop; ++i) {
                const auto first = nodes.size();
                try {
                    auto fresh = synthesize_first_order(conversations[i], gw, options, &report);
                    nodes.insert(nodes.end(), std::make_move_iterator(fresh.begin()),
                                 std::make_move_iterator(fresh.end()));
                } catch (const Error& e) {
                    if (e.code() != ErrorCode::MalformedGeneration) throw;
                }
                embed_nodes(nodes, first, gw, options, &report);
            }
            cp.nodes = std::move(nodes);
            cp.report = std::move(report);
            cp.conversations_done = stop;
            persist();
        }
        cp.stage = Stage::Consolidate;
        persist();
    }

    auto run_stage = [&](int target_tier, Stage next) {
        const auto lower = nodes_of_tier(cp.nodes, target_tier - 1);
        auto report = cp.report;
        if (!lower.empty()) {
            auto parents = consolidate_tier(lower, target_tier, gw, options, &report);
            embed_nodes(parents, 0, gw, options, &report);
            cp.nodes.insert(cp.nodes.end(), std::make_move_iterator(parents.begin()),
                            std::make_move_iterator(parents.end()));
        }
        cp.report = std::move(report);
        cp.stage = next;
        persist();
    };
    if (cp.stage == Stage::Consolidate) run_stage(kSecondOrder, Stage::Abstract);
    if (cp.stage == Stage::Abstract) run_stage(kTopOrder, Stage::Done);

    Timestamp built_at{};
    if (options.built_at) {
        built_at = *options.built_at;
    } else {
        for (const auto& c : conversations) built_at = std::max(built_at, c.end());
    }
    BuildResult result{MemoryStore(0, built_at), cp.report};
    for (auto& n : cp.nodes) result.store.add(std::move(n));
    return result;
}

}  // namespace doppel
