#include "doppel/ingest.hpp"

#include <algorithm>
#include <cstdio>
#include <istream>
#include <ostream>

#include <nlohmann/json.hpp>

#include "doppel/error.hpp"

namespace doppel {

using nlohmann::json;

std::string_view trim(std::string_view s) {
    constexpr std::string_view ws = " \t\r\n\f\v";
    const auto first = s.find_first_not_of(ws);
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(ws);
    return s.substr(first, last - first + 1);
}

namespace {

void sort_by_time(std::vector<Message>& messages) {
    std::stable_sort(messages.begin(), messages.end(),
                     [](const Message& a, const Message& b) { return a.timestamp < b.timestamp; });
}

template <typename LineParser>
ParseResult parse_lines(std::istream& in, LineParser&& parse_line) {
    ParseResult result;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        if (auto m = parse_line(line)) {
            result.messages.push_back(std::move(*m));
        } else {
            ++result.malformed;
            result.malformed_lines.push_back(lineno);
        }
    }
    sort_by_time(result.messages);
    return result;
}

std::optional<Message> make_message(std::string_view sender, std::string_view timestamp,
                                    std::string_view text) {
    if (trim(sender).empty() || trim(text).empty()) return std::nullopt;
    auto ts = parse_rfc3339(trim(timestamp));
    if (!ts) return std::nullopt;
    return Message{std::string(trim(sender)), *ts, std::string(text)};
}

std::string conversation_id(std::string_view prefix, std::size_t ordinal) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%06zu", ordinal);
    return std::string(prefix) + "-" + buf;
}

}  // namespace

ParseResult parse_jsonl_export(std::istream& in) {
    return parse_lines(in, [](const std::string& line) -> std::optional<Message> {
        const json j = json::parse(line, nullptr, /*allow_exceptions=*/false);
        if (!j.is_object()) return std::nullopt;
        const auto sender = j.find("sender");
        const auto ts = j.find("timestamp");
        const auto text = j.find("text");
        if (sender == j.end() || ts == j.end() || text == j.end()) return std::nullopt;
        if (!sender->is_string() || !ts->is_string() || !text->is_string()) return std::nullopt;
        return make_message(sender->get_ref<const std::string&>(),
                            ts->get_ref<const std::string&>(),
                            text->get_ref<const std::string&>());
    });
}

ParseResult parse_tsv_export(std::istream& in) {
    return parse_lines(in, [](const std::string& line) -> std::optional<Message> {
        const auto tab1 = line.find('\t');
        if (tab1 == std::string::npos) return std::nullopt;
        const auto tab2 = line.find('\t', tab1 + 1);
        if (tab2 == std::string::npos) return std::nullopt;
        std::string_view view = line;
        return make_message(view.substr(tab1 + 1, tab2 - tab1 - 1), view.substr(0, tab1),
                            view.substr(tab2 + 1));
    });
}

AdapterRegistry::AdapterRegistry() {
    add("jsonl", parse_jsonl_export);
    add("tsv", parse_tsv_export);
}

void AdapterRegistry::add(std::string id, ExportAdapter adapter) {
    adapters_[std::move(id)] = std::move(adapter);
}

bool AdapterRegistry::contains(std::string_view id) const { return adapters_.find(id) != adapters_.end(); }

std::vector<std::string> AdapterRegistry::ids() const {
    std::vector<std::string> out;
    for (const auto& [id, _] : adapters_) out.push_back(id);
    return out;
}

const ExportAdapter& AdapterRegistry::at(std::string_view id) const {
    const auto it = adapters_.find(id);
    if (it == adapters_.end())
        throw Error(ErrorCode::UnknownFormat, "unknown export format '" + std::string(id) + "'");
    return it->second;
}

ParseResult parse_export(std::istream& in, std::string_view format, const AdapterRegistry& registry) {
    return registry.at(format)(in);
}

std::vector<Conversation> segment_conversations(std::span<const Message> messages,
                                                std::string_view owner, Seconds gap,
                                                std::string_view id_prefix) {
    std::vector<Conversation> out;
    for (std::size_t i = 0; i < messages.size(); ++i) {
        if (i > 0 && messages[i].timestamp < messages[i - 1].timestamp)
            throw Error(ErrorCode::UnsortedInput,
                        "message " + std::to_string(i) + " precedes its predecessor");
        if (i == 0 || messages[i].timestamp - messages[i - 1].timestamp > gap) {
            out.push_back(Conversation{conversation_id(id_prefix, out.size() + 1),
                                       std::string(owner), {}});
        }
        out.back().messages.push_back(messages[i]);
    }
    return out;
}

std::vector<Conversation> resegment(const Conversation& conversation, Seconds gap) {
    std::vector<Conversation> pieces;
    for (std::size_t i = 0; i < conversation.messages.size(); ++i) {
        const auto& m = conversation.messages[i];
        if (i == 0 || m.timestamp - conversation.messages[i - 1].timestamp > gap) {
            std::string id = pieces.empty()
                                 ? conversation.id
                                 : conversation.id + "." + std::to_string(pieces.size() + 1);
            pieces.push_back(Conversation{std::move(id), conversation.owner, {}});
        }
        pieces.back().messages.push_back(m);
    }
    return pieces;
}

void QualityPolicy::validate() const {
    if (max_message_chars == 0 || max_consecutive_dupes == 0 || min_messages_for_share == 0 ||
        !(min_owner_share > 0.0) || min_owner_share > 1.0 || gap <= Seconds{0})
        throw Error(ErrorCode::InvalidArgument, "quality policy thresholds must be positive");
}

FilterResult filter_quality(const std::vector<Conversation>& conversations,
                            const QualityPolicy& policy) {
    policy.validate();
    FilterResult result;
    auto& report = result.report;

    for (const auto& conv : conversations) {
        Conversation kept{conv.id, conv.owner, {}};
        std::size_t run = 0;
        for (const auto& m : conv.messages) {
            if (m.text.size() > policy.max_message_chars) {
                ++report.excessive_length;
                continue;
            }
            const bool dupe = !kept.messages.empty() && kept.messages.back().sender == m.sender &&
                              kept.messages.back().text == m.text;
            run = dupe ? run + 1 : 1;
            if (run > policy.max_consecutive_dupes) {
                ++report.repetition;
                continue;
            }
            kept.messages.push_back(m);
        }
        if (kept.messages.empty()) {
            ++report.emptied;
            continue;
        }

        auto pieces = resegment(kept, policy.gap);
        report.splits += pieces.size() - 1;
        for (auto& piece : pieces) {
            const auto n = piece.messages.size();
            if (n >= policy.min_messages_for_share) {
                const auto owned = std::count_if(
                    piece.messages.begin(), piece.messages.end(),
                    [&](const Message& m) { return m.sender == piece.owner; });
                if (static_cast<double>(owned) / static_cast<double>(n) < policy.min_owner_share) {
                    ++report.imbalance;
                    continue;
                }
            }
            result.conversations.push_back(std::move(piece));
        }
    }
    return result;
}

ConsentLedger::ConsentLedger(std::string owner, std::set<std::string> allowed, ConsentMode mode)
    : owner_(std::move(owner)), allowed_(std::move(allowed)), mode_(mode) {
    if (owner_.empty()) throw Error(ErrorCode::InvalidArgument, "consent ledger needs an owner");
    allowed_.insert(owner_);
}

bool ConsentLedger::allows(std::string_view sender) const {
    return allowed_.find(std::string(sender)) != allowed_.end();
}

std::vector<Conversation> redact_nonconsenting(const std::vector<Conversation>& conversations,
                                               const ConsentLedger& ledger, Seconds gap) {
    std::vector<Conversation> out;
    for (const auto& conv : conversations) {
        const bool clean = std::all_of(conv.messages.begin(), conv.messages.end(),
                                       [&](const Message& m) { return ledger.allows(m.sender); });
        if (clean) {
            out.push_back(conv);
            continue;
        }
        if (ledger.mode() == ConsentMode::DropConversation) continue;

        Conversation kept{conv.id, conv.owner, {}};
        std::copy_if(conv.messages.begin(), conv.messages.end(), std::back_inserter(kept.messages),
                     [&](const Message& m) { return ledger.allows(m.sender); });
        if (kept.messages.empty()) continue;
        for (auto& piece : resegment(kept, gap)) out.push_back(std::move(piece));
    }
    return out;
}

json to_json(const Message& m) {
    return json{{"sender", m.sender}, {"timestamp", format_rfc3339(m.timestamp)}, {"text", m.text}};
}

Message message_from_json(const json& j) {
    auto ts = parse_rfc3339(j.at("timestamp").get<std::string>());
    if (!ts) throw Error(ErrorCode::InvalidArgument, "bad timestamp in message document");
    return Message{j.at("sender").get<std::string>(), *ts, j.at("text").get<std::string>()};
}

json to_json(const Conversation& c) {
    json messages = json::array();
    for (const auto& m : c.messages) messages.push_back(to_json(m));
    return json{{"id", c.id}, {"owner", c.owner}, {"messages", std::move(messages)}};
}

Conversation conversation_from_json(const json& j) {
    Conversation c{j.at("id").get<std::string>(), j.at("owner").get<std::string>(), {}};
    for (const auto& m : j.at("messages")) c.messages.push_back(message_from_json(m));
    if (c.messages.empty())
        throw Error(ErrorCode::InvalidArgument, "conversation " + c.id + " has no messages");
    return c;
}

void write_conversations(std::ostream& out, const std::vector<Conversation>& conversations) {
    for (const auto& c : conversations) out << to_json(c).dump() << '\n';
}

std::vector<Conversation> read_conversations(std::istream& in) {
    std::vector<Conversation> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        try {
            out.push_back(conversation_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw Error(ErrorCode::InvalidArgument,
                        "conversation line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

QualityPolicy quality_policy_from_json(const json& j) {
    QualityPolicy p;
    p.max_message_chars = j.value("max_message_chars", p.max_message_chars);
    p.max_consecutive_dupes = j.value("max_consecutive_dupes", p.max_consecutive_dupes);
    p.min_owner_share = j.value("min_owner_share", p.min_owner_share);
    p.min_messages_for_share = j.value("min_messages_for_share", p.min_messages_for_share);
    if (j.contains("gap_hours"))
        p.gap = Seconds{static_cast<std::int64_t>(j.at("gap_hours").get<double>() * 3600.0)};
    p.validate();
    return p;
}

ConsentLedger consent_ledger_from_json(const json& j) {
    const auto mode_name = j.value("mode", std::string("drop-message"));
    ConsentMode mode;
    if (mode_name == "drop-message") {
        mode = ConsentMode::DropMessage;
    } else if (mode_name == "drop-conversation") {
        mode = ConsentMode::DropConversation;
    } else {
        throw Error(ErrorCode::InvalidArgument, "unknown consent mode '" + mode_name + "'");
    }
    return ConsentLedger(j.at("owner").get<std::string>(),
                         j.value("allowed", std::set<std::string>{}), mode);
}

}  // namespace doppel
