#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "doppel/gateway.hpp"
#include "doppel/ingest.hpp"
#include "doppel/time.hpp"

namespace doppel {

using NodeId = std::string;

inline constexpr int kFirstOrder = 1;
inline constexpr int kSecondOrder = 2;
inline constexpr int kTopOrder = 3;

struct MemoryNode {
    NodeId id;
    int tier = kFirstOrder;
    std::string text;  // statement without the date prefix
    Timestamp date_start;
    Timestamp date_end;
    std::vector<NodeId> children;      // tier k > 1 links to tier k - 1
    std::vector<std::string> sources;  // conversation ids, tier 1 only
    Embedding embedding;

    // "[YYYY-MM-DD HH:MM:SS] <text>", also the text that gets embedded.
    std::string line() const;

    bool operator==(const MemoryNode&) const = default;
};

struct ScoredNode {
    const MemoryNode* node;
    double similarity;
};

// Cosine similarity in double precision; 0 when either vector has zero norm.
double cosine_similarity(std::span<const float> a, std::span<const float> b);

// Immutable-after-build collection of memory nodes with one exhaustive-scan
// embedding index per tier.
class MemoryStore {
public:
    static constexpr int kVersion = 1;

    MemoryStore() = default;
    MemoryStore(std::size_t embed_dim, Timestamp built_at) : embed_dim_(embed_dim), built_at_(built_at) {}
    MemoryStore(const MemoryStore& other);
    MemoryStore& operator=(const MemoryStore& other);
    MemoryStore(MemoryStore&&) noexcept = default;
    MemoryStore& operator=(MemoryStore&&) noexcept = default;

    // Throws Error(DimensionMismatch) when the embedding dimension differs
    // from the store's, and Error(InvalidArgument) on duplicate ids.
    void add(MemoryNode node);

    const MemoryNode* find(std::string_view id) const;
    const MemoryNode& at(std::string_view id) const;
    const std::map<NodeId, MemoryNode, std::less<>>& nodes() const { return nodes_; }
    std::vector<const MemoryNode*> tier(int t) const;  // ascending id
    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }

    std::size_t embed_dim() const { return embed_dim_; }
    Timestamp built_at() const { return built_at_; }
    void set_built_at(Timestamp t) { built_at_ = t; }

    // Top-k nodes of `tier` by cosine similarity, descending; ties broken by
    // ascending node id. Throws Error(DimensionMismatch) or
    // Error(InvalidArgument) for k == 0.
    std::vector<ScoredNode> search_tier(int tier, std::span<const float> query, std::size_t k) const;

    nlohmann::json to_json() const;
    static MemoryStore from_json(const nlohmann::json& j);  // Error(StoreCorrupt)
    void save(const std::filesystem::path& path) const;
    static MemoryStore load(const std::filesystem::path& path);

    bool operator==(const MemoryStore& other) const {
        return embed_dim_ == other.embed_dim_ && built_at_ == other.built_at_ && nodes_ == other.nodes_;
    }

private:
    // Insertion-ordered; search results are ordered independently of it.
    struct TierIndex {
        std::vector<const MemoryNode*> nodes;
        std::vector<float> matrix;  // row-major, nodes.size() x embed_dim
        std::vector<double> norms;
    };
    void index_node(const MemoryNode& node);

    std::map<NodeId, MemoryNode, std::less<>> nodes_;
    std::size_t embed_dim_ = 0;
    Timestamp built_at_{};
    std::map<int, TierIndex> index_;
};

// Returns human-readable invariant violations; empty when the store is sound.
// Checks tier linkage, per-tier partition of children, date-span containment,
// uniform embedding dimension and tier-3 reachability of every tier-1 node.
std::vector<std::string> validate_store(const MemoryStore& store);

// ---------------------------------------------------------------------------
// Build pipeline

struct BuildOptions {
    std::string owner_name = "the user";  // how memories refer to the owner
    std::size_t batch_size = 50;          // conversations per checkpointed batch
    std::size_t window = 50;              // nodes per consolidation prompt
    std::size_t overlap = 10;             // nodes shared by adjacent windows
    int max_retries = 2;
    double temperature = 0.0;
    std::string model;
    std::optional<std::filesystem::path> checkpoint;
    std::optional<Timestamp> built_at;  // defaults to the latest conversation end
};

struct BuildReport {
    std::vector<std::string> skipped_conversations;  // MalformedGeneration after retries
    std::size_t malformed_windows = 0;
    std::size_t dropped_refs = 0;
    std::size_t identity_fallbacks = 0;
    std::size_t retries = 0;

    bool operator==(const BuildReport&) const = default;
};

// One parsed generation line: "[YYYY-MM-DD HH:MM:SS] text" with an optional
// trailing "(refs: 1, 2, ...)".
struct GeneratedLine {
    Timestamp timestamp;
    std::string text;
    std::optional<std::vector<std::string>> refs;
};
std::vector<GeneratedLine> parse_generated_lines(std::string_view completion);

std::string first_order_prompt(const Conversation& conversation, std::string_view owner_name);
std::string consolidation_prompt(std::span<const MemoryNode* const> nodes, int target_tier,
                                 std::string_view owner_name);

// Tier-1 memories for one conversation. Node dates are clamped to the
// conversation's range; embeddings are left empty. Throws
// Error(MalformedGeneration) after `max_retries` unparseable replies.
std::vector<MemoryNode> synthesize_first_order(const Conversation& conversation, Gateway& gw,
                                               const BuildOptions& options,
                                               BuildReport* report = nullptr);

// Groups `children` (all of tier target_tier - 1) into parent nodes. The result
// partitions the children; malformed windows and uncovered nodes fall back to
// one parent per child. Parent ids are "m<tier>-NNNNNN" in chronological order.
std::vector<MemoryNode> consolidate_tier(std::span<const MemoryNode> children, int target_tier,
                                         Gateway& gw, const BuildOptions& options,
                                         BuildReport* report = nullptr);

inline std::vector<MemoryNode> consolidate(std::span<const MemoryNode> tier1, Gateway& gw,
                                           const BuildOptions& options, BuildReport* report = nullptr) {
    return consolidate_tier(tier1, kSecondOrder, gw, options, report);
}

inline std::vector<MemoryNode> abstract(std::span<const MemoryNode> tier2, Gateway& gw,
                                        const BuildOptions& options, BuildReport* report = nullptr) {
    return consolidate_tier(tier2, kTopOrder, gw, options, report);
}

struct BuildResult {
    MemoryStore store;
    BuildReport report;
};

// Runs the three stages over chronologically sorted conversations, embedding
// every node. With options.checkpoint set, progress is persisted after each
// conversation batch and each stage, and a rerun resumes from it.
BuildResult build_store(const std::vector<Conversation>& conversations, Gateway& gw,
                        const BuildOptions& options = {});

}  // namespace doppel
