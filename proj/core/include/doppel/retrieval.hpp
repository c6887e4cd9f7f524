#pragma once

#include <cstddef>
#include <deque>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "doppel/gateway.hpp"
#include "doppel/ingest.hpp"
#include "doppel/memory.hpp"

namespace doppel {

inline constexpr std::size_t kMaxMemories = 7;

enum class MemoryOrigin { Dense, Zoomed, Searched, Consolidated };

std::string_view to_string(MemoryOrigin origin);

struct RetrievedMemory {
    NodeId id;
    int tier = kFirstOrder;
    std::string text;
    Timestamp date_start;
    Timestamp date_end;
    MemoryOrigin origin = MemoryOrigin::Dense;

    std::string line() const;  // "[YYYY-MM-DD HH:MM:SS] <text>"
    bool operator==(const RetrievedMemory&) const = default;
};

// One audit record per retrieval step.
struct TraceStep {
    std::string step;       // "cache-check", "select", "zoom", "search", "summarize", "fallback", "dense"
    std::string prompt_id;  // "prompt-1" .. "prompt-3", or empty
    std::string decision;
    std::vector<NodeId> node_ids;

    bool operator==(const TraceStep&) const = default;
};

struct RetrievalResult {
    std::vector<RetrievedMemory> memories;  // at most kMaxMemories
    std::optional<std::string> summary;
    bool served_from_cache = false;
    std::size_t loops = 0;  // selection prompts issued
    std::vector<TraceStep> trace;

    bool operator==(const RetrievalResult&) const = default;
};

void write_trace(std::ostream& out, std::span<const TraceStep> trace);

// Bounded FIFO of recent retrievals. Lookup always yields the newest entry;
// whether it is still sufficient is decided by the memory manager's prompt.
class RetrievalCache {
public:
    struct Entry {
        std::string key;  // query-window text, informational
        RetrievalResult result;
        std::size_t turn = 0;
    };

    explicit RetrievalCache(std::size_t capacity = 4) : capacity_(capacity == 0 ? 1 : capacity) {}

    void update(std::string key, RetrievalResult result, std::size_t turn);
    const Entry* lookup() const { return entries_.empty() ? nullptr : &entries_.back(); }

    std::size_t size() const { return entries_.size(); }
    std::size_t capacity() const { return capacity_; }
    const std::deque<Entry>& entries() const { return entries_; }

private:
    std::size_t capacity_;
    std::deque<Entry> entries_;
};

struct RetrievalOptions {
    std::size_t k = kMaxMemories;
    std::size_t window = 4;     // trailing messages used as the query
    std::size_t max_loops = 3;  // selection rounds per call
    bool use_search = true;     // add tier-1 search hits during zoom
    double temperature = 0.0;
    std::string model;
    std::string owner;  // rendered as "Me" in prompts and query windows
};

// Last `window` messages rendered one per line.
std::string query_window(std::span<const Message> history, std::size_t window, std::string_view owner);

// Dense baseline: embeds the query window, returns the top-k tier-1 nodes.
RetrievalResult retrieve_bm(std::span<const Message> history, const MemoryStore& store, Gateway& gw,
                            const RetrievalOptions& options = {});

// Hierarchical memory manager: cache check, abstraction selection, zoom,
// optional search, summarize; loops back on a "NO" summary up to max_loops.
RetrievalResult retrieve_mm(std::span<const Message> history, const MemoryStore& store, Gateway& gw,
                            RetrievalCache& cache, const RetrievalOptions& options = {},
                            std::size_t turn = 0);

std::string cache_check_prompt(std::string_view conversation, std::string_view previous);
std::string selection_prompt(std::string_view conversation, std::string_view abstractions,
                             std::span<const std::size_t> already_expanded = {});
std::string summary_prompt(std::string_view conversation, std::string_view memories);

// 1-based abstraction numbers mentioned in the reply, in order of first
// appearance, restricted to [1, count].
std::vector<std::size_t> parse_selection(std::string_view reply, std::size_t count);

}  // namespace doppel
