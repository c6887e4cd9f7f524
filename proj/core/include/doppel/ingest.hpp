#pragma once

#include <chrono>
#include <cstddef>
#include <functional>
#include <iosfwd>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "doppel/time.hpp"

namespace doppel {

struct Message {
    std::string sender;
    Timestamp timestamp;
    std::string text;

    bool operator==(const Message&) const = default;
};

struct Conversation {
    std::string id;
    std::string owner;  // the impersonated participant
    std::vector<Message> messages;

    Timestamp start() const { return messages.front().timestamp; }
    Timestamp end() const { return messages.back().timestamp; }

    bool operator==(const Conversation&) const = default;
};

inline constexpr Seconds kDefaultGap = std::chrono::hours{6};

// ---------------------------------------------------------------------------
// Export parsing

struct ParseResult {
    std::vector<Message> messages;  // sorted by timestamp (stable)
    std::size_t malformed = 0;
    std::vector<std::size_t> malformed_lines;  // 1-based
};

using ExportAdapter = std::function<ParseResult(std::istream&)>;

// Maps export-format ids to adapters. "jsonl" (the native format) and "tsv"
// are always present.
class AdapterRegistry {
public:
    AdapterRegistry();

    void add(std::string id, ExportAdapter adapter);
    bool contains(std::string_view id) const;
    std::vector<std::string> ids() const;
    const ExportAdapter& at(std::string_view id) const;

private:
    std::map<std::string, ExportAdapter, std::less<>> adapters_;
};

// Native adapter: one `{"sender", "timestamp", "text"}` object per line.
ParseResult parse_jsonl_export(std::istream& in);
// `timestamp<TAB>sender<TAB>text` per line.
ParseResult parse_tsv_export(std::istream& in);

// Throws Error(UnknownFormat) when `format` is not registered.
ParseResult parse_export(std::istream& in, std::string_view format,
                         const AdapterRegistry& registry = AdapterRegistry{});

// ---------------------------------------------------------------------------
// Segmentation

// Starts a new conversation exactly when the gap between adjacent messages
// strictly exceeds `gap`. Ids are `<id_prefix>-NNNNNN` in stream order.
// Throws Error(UnsortedInput) if timestamps decrease.
std::vector<Conversation> segment_conversations(std::span<const Message> messages,
                                                std::string_view owner,
                                                Seconds gap = kDefaultGap,
                                                std::string_view id_prefix = "conv");

// ---------------------------------------------------------------------------
// Quality filtering

struct QualityPolicy {
    std::size_t max_message_chars = 2000;
    std::size_t max_consecutive_dupes = 2;
    double min_owner_share = 0.1;
    std::size_t min_messages_for_share = 10;  // share rule applies at or above this size
    Seconds gap = kDefaultGap;

    void validate() const;
};

struct QualityReport {
    std::size_t excessive_length = 0;  // messages dropped
    std::size_t repetition = 0;        // messages dropped by dupe collapsing
    std::size_t imbalance = 0;         // conversations dropped
    std::size_t emptied = 0;           // conversations left with no messages
    std::size_t splits = 0;            // extra conversations created by re-segmentation

    std::size_t total() const { return excessive_length + repetition + imbalance + emptied; }
};

struct FilterResult {
    std::vector<Conversation> conversations;
    QualityReport report;
};

FilterResult filter_quality(const std::vector<Conversation>& conversations,
                            const QualityPolicy& policy = {});

// ---------------------------------------------------------------------------
// Consent

enum class ConsentMode { DropMessage, DropConversation };

class ConsentLedger {
public:
    ConsentLedger(std::string owner, std::set<std::string> allowed,
                  ConsentMode mode = ConsentMode::DropMessage);

    const std::string& owner() const { return owner_; }
    const std::set<std::string>& allowed() const { return allowed_; }
    ConsentMode mode() const { return mode_; }
    bool allows(std::string_view sender) const;

private:
    std::string owner_;
    std::set<std::string> allowed_;
    ConsentMode mode_;
};

std::vector<Conversation> redact_nonconsenting(const std::vector<Conversation>& conversations,
                                               const ConsentLedger& ledger,
                                               Seconds gap = kDefaultGap);

// Re-applies the gap rule inside one conversation. The first piece keeps the
// original id, later pieces get ".2", ".3", ...
std::vector<Conversation> resegment(const Conversation& conversation, Seconds gap);

// ---------------------------------------------------------------------------
// Documents

nlohmann::json to_json(const Message& m);
Message message_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Conversation& c);
Conversation conversation_from_json(const nlohmann::json& j);

void write_conversations(std::ostream& out, const std::vector<Conversation>& conversations);
std::vector<Conversation> read_conversations(std::istream& in);

QualityPolicy quality_policy_from_json(const nlohmann::json& j);
ConsentLedger consent_ledger_from_json(const nlohmann::json& j);

std::string_view trim(std::string_view s);

}  // namespace doppel
