#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "doppel/persona.hpp"

namespace doppel {

// ---------------------------------------------------------------------------
// Prompt pool

enum class PromptCategory { Stylistic, Contextual };

std::string_view to_string(PromptCategory category);
PromptCategory prompt_category_from_string(std::string_view name);

struct PromptCard {
    std::string id;
    PromptCategory category = PromptCategory::Stylistic;
    std::string topic;
    std::string prompt;

    bool operator==(const PromptCard&) const = default;
};

std::vector<PromptCard> prompt_pool_from_json(const nlohmann::json& j);
std::vector<PromptCard> load_prompt_pool(const std::filesystem::path& path);
nlohmann::ordered_json to_json(const PromptCard& card);

// Per-participant seeded draw without replacement. Categories alternate while
// both still have cards. Throws Error(PoolExhausted) once every card was drawn.
class PromptDeck {
public:
    PromptDeck(std::span<const PromptCard> pool, std::uint64_t seed);

    const PromptCard& draw();
    std::size_t remaining() const { return stylistic_.size() + contextual_.size(); }

private:
    std::vector<PromptCard> pool_;
    std::vector<std::size_t> stylistic_;  // shuffled; drawn from the back
    std::vector<std::size_t> contextual_;
    PromptCategory next_;
};

// ---------------------------------------------------------------------------
// Roster and balancing

enum class InterlocutorKind { AI, Human };

std::string_view to_string(InterlocutorKind kind);

struct RosterEntry {
    std::string id;
    InterlocutorKind kind = InterlocutorKind::AI;
    std::filesystem::path persona;  // AI entries: persona profile document

    bool operator==(const RosterEntry&) const = default;
};

std::vector<RosterEntry> roster_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
std::vector<RosterEntry> load_roster(const std::filesystem::path& path);

// Cyclic Latin square: the participant enrolled `enrollment`-th (0-based)
// meets roster[(round + enrollment) mod |roster|] in 0-based `round`.
std::size_t balanced_slot(std::size_t enrollment, std::size_t round, std::size_t roster_size);

template <typename T>
const T& next_config(std::size_t enrollment, std::size_t round, std::span<const T> roster) {
    return roster[balanced_slot(enrollment, round, roster.size())];
}

// ---------------------------------------------------------------------------
// Participants and verdicts

struct ParticipantProfile {
    std::string id;
    std::string initials;
    std::string interviewer;
    std::optional<int> age;
    std::optional<int> closeness;       // 1-7
    std::optional<int> text_frequency;  // 1-7
    int ai_familiarity = 0;             // 1-7
    std::optional<bool> played_before;
    std::size_t enrollment = 0;

    bool operator==(const ParticipantProfile&) const = default;
};

// Validates the questionnaire payload (initials, interviewer and AI
// familiarity required). Throws Error(InvalidQuestionnaire).
ParticipantProfile questionnaire_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const ParticipantProfile& p);
ParticipantProfile participant_from_json(const nlohmann::json& j);

inline constexpr std::string_view kReasonContextualKnowledge = "contextual-knowledge";
inline constexpr std::string_view kReasonStylisticConversation = "stylistic-conversation";
inline constexpr std::string_view kReasonStylisticFlow = "stylistic-flow";
inline constexpr std::array<std::string_view, 3> kReasonCodes{
    kReasonContextualKnowledge, kReasonStylisticConversation, kReasonStylisticFlow};

struct Verdict {
    int rating = 0;            // 1-7 without 4
    bool guess_human = false;  // rating >= 5
    std::vector<std::string> reasons;
    std::string free_text;

    bool operator==(const Verdict&) const = default;
};

// Throws Error(InvalidRating) for 4 or out-of-range ratings and
// Error(InvalidReason) for unknown reason codes.
Verdict make_verdict(int rating, std::vector<std::string> reasons, std::string free_text);

// ---------------------------------------------------------------------------
// Sessions

enum class SessionState { Live, AwaitingVerdict, Revealed, Aborted };
enum class Party { Participant, Interlocutor };

std::string_view to_string(SessionState state);
std::string_view to_string(Party party);

struct TranscriptEntry {
    Party sender;
    std::string text;
    std::int64_t t_ms;  // since session start
};

struct UndeliveredMessage {
    std::string text;
    std::int64_t due_ms;
};

struct SessionRecord {
    std::string id;
    std::string participant;
    RosterEntry interlocutor;
    PromptCard prompt;
    std::size_t round = 0;
    std::int64_t started_at_ms = 0;  // server clock, ms since epoch
    std::int64_t deadline_ms = 0;    // relative to start
    SessionState state = SessionState::Live;
    std::vector<TranscriptEntry> transcript;
    std::vector<UndeliveredMessage> undelivered;
    std::optional<Verdict> verdict;
    bool excluded = false;
    std::string exclusion_reason;
};

nlohmann::ordered_json to_json(const SessionRecord& record);
SessionRecord session_record_from_json(const nlohmann::json& j);

struct SessionHandle {
    std::string session_id;
    std::string topic;
    std::string prompt;
};

struct EventMessage {
    std::size_t index;
    bool from_viewer;
    std::string text;
    std::int64_t t_ms;
};

// What a party may see of a session. Carries no interlocutor identity.
struct SessionEvents {
    std::vector<EventMessage> messages;
    std::size_t cursor = 0;
    double remaining_seconds = 0.0;
    SessionState phase = SessionState::Live;
    bool your_turn = false;
};

struct RevealPayload {
    std::string session_id;
    InterlocutorKind interlocutor;
    std::string config_id;
    int rating;
    bool guess_human;
    bool correct;
};

nlohmann::ordered_json to_json(const SessionEvents& events);
nlohmann::ordered_json to_json(const RevealPayload& reveal);

// ---------------------------------------------------------------------------
// Clock

class Clock {
public:
    virtual ~Clock() = default;
    virtual std::int64_t now_ms() const = 0;
};

class SystemClock final : public Clock {
public:
    std::int64_t now_ms() const override;
};

class ManualClock final : public Clock {
public:
    explicit ManualClock(std::int64_t start_ms = 0) : now_(start_ms) {}
    std::int64_t now_ms() const override { return now_.load(); }
    void set(std::int64_t ms) { now_.store(ms); }
    void advance(std::int64_t ms) { now_.fetch_add(ms); }

private:
    std::atomic<std::int64_t> now_;
};

// ---------------------------------------------------------------------------
// Arena

struct ArenaConfig {
    std::int64_t session_ms = 180'000;
    std::int64_t idle_yield_ms = 20'000;
    std::uint64_t seed = 0;
    std::filesystem::path store_dir;  // empty: keep records in memory only
};

// Builds the impersonator that serves one AI session.
using InterlocutorFactory = std::function<std::unique_ptr<Impersonator>(const RosterEntry&)>;

// Loads persona profiles, gateways and memory stores from roster entries,
// sharing stores and profiles across sessions.
InterlocutorFactory file_interlocutor_factory();

class Arena {
public:
    Arena(ArenaConfig config, std::vector<RosterEntry> roster, std::vector<PromptCard> pool,
          std::shared_ptr<const Clock> clock, InterlocutorFactory factory);
    ~Arena();

    Arena(const Arena&) = delete;
    Arena& operator=(const Arena&) = delete;

    struct Registration {
        std::string participant_id;
        std::string token;
    };
    Registration register_participant(ParticipantProfile profile);
    bool check_participant_token(std::string_view participant_id, std::string_view token) const;
    bool check_session_token(std::string_view session_id, std::string_view token) const;

    SessionHandle create_session(std::string_view participant_id);

    // Throws Error(SessionExpired), Error(NotYourTurn), Error(UnknownSession).
    void post_message(std::string_view session_id, Party sender, std::string_view text);
    void end_turn(std::string_view session_id, Party party);

    SessionEvents events(std::string_view session_id, Party viewer, std::size_t since);
    // Long-poll: blocks until new messages, a phase or turn change, or timeout.
    SessionEvents wait_events(std::string_view session_id, Party viewer, std::size_t since,
                              std::chrono::milliseconds timeout);

    RevealPayload submit_verdict(std::string_view session_id, int rating, std::vector<std::string> reasons,
                                 std::string free_text);

    // Human-confederate relay.
    std::vector<SessionHandle> open_relay_sessions() const;
    std::string confederate_join(std::string_view session_id);
    bool check_confederate_token(std::string_view session_id, std::string_view token) const;
    void confederate_leave(std::string_view session_id);

    // Delivers due messages, applies idle turn yields and expires sessions.
    void tick();

    SessionRecord record(std::string_view session_id) const;
    std::vector<SessionRecord> records() const;
    std::optional<ParticipantProfile> participant(std::string_view id) const;
    const std::vector<RosterEntry>& roster() const { return roster_; }

    std::filesystem::path trajectory_path() const;
    std::filesystem::path participants_path() const;

private:
    struct Session;
    struct ParticipantState;

    std::shared_ptr<Session> session(std::string_view id) const;
    void pump(Session& s, std::int64_t now);
    void yield_turn(Session& s, Party party, std::int64_t now);
    void abort(Session& s, std::string reason);
    void finalize(Session& s);
    void append_line(const std::filesystem::path& path, const std::string& line);
    std::string token_for(std::string_view kind, std::string_view id) const;

    ArenaConfig config_;
    std::vector<RosterEntry> roster_;
    std::vector<PromptCard> pool_;
    std::shared_ptr<const Clock> clock_;
    InterlocutorFactory factory_;

    mutable std::mutex mu_;  // guards the maps and counters below
    std::map<std::string, std::unique_ptr<ParticipantState>, std::less<>> participants_;
    std::map<std::string, std::shared_ptr<Session>, std::less<>> sessions_;
    std::size_t next_participant_ = 0;
    std::size_t next_session_ = 0;

    std::mutex file_mu_;
};

}  // namespace doppel
