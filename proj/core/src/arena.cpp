#include "doppel/arena.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <random>

#include "doppel/error.hpp"

namespace doppel {

using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Prompt pool

std::string_view to_string(PromptCategory category) {
    return category == PromptCategory::Stylistic ? "stylistic" : "contextual";
}

PromptCategory prompt_category_from_string(std::string_view name) {
    if (name == "stylistic") return PromptCategory::Stylistic;
    if (name == "contextual") return PromptCategory::Contextual;
    throw Error(ErrorCode::InvalidArgument, "unknown prompt category '" + std::string(name) + "'");
}

std::vector<PromptCard> prompt_pool_from_json(const json& j) {
    const json& cards = j.is_object() ? j.at("prompts") : j;
    std::vector<PromptCard> pool;
    for (const auto& c : cards) {
        pool.push_back(PromptCard{c.at("id").get<std::string>(),
                                  prompt_category_from_string(c.at("category").get<std::string>()),
                                  c.at("topic").get<std::string>(), c.at("prompt").get<std::string>()});
    }
    return pool;
}

std::vector<PromptCard> load_prompt_pool(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoError, "cannot open prompt pool " + path.string());
    return prompt_pool_from_json(json::parse(in));
}

ordered_json to_json(const PromptCard& card) {
    ordered_json j;
    j["id"] = card.id;
    j["category"] = to_string(card.category);
    j["topic"] = card.topic;
    j["prompt"] = card.prompt;
    return j;
}

namespace {

// Fisher-Yates driven directly by mt19937_64 so the order is portable.
void shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
}

}  // namespace

PromptDeck::PromptDeck(std::span<const PromptCard> pool, std::uint64_t seed)
    : pool_(pool.begin(), pool.end()) {
    if (pool_.empty()) throw Error(ErrorCode::InvalidArgument, "prompt pool is empty");
    for (std::size_t i = 0; i < pool_.size(); ++i)
        (pool_[i].category == PromptCategory::Stylistic ? stylistic_ : contextual_).push_back(i);
    std::mt19937_64 rng(seed);
    shuffle(stylistic_, rng);
    shuffle(contextual_, rng);
    next_ = (rng() & 1) ? PromptCategory::Contextual : PromptCategory::Stylistic;
}

const PromptCard& PromptDeck::draw() {
    auto* preferred = next_ == PromptCategory::Stylistic ? &stylistic_ : &contextual_;
    auto* other = next_ == PromptCategory::Stylistic ? &contextual_ : &stylistic_;
    if (preferred->empty()) std::swap(preferred, other);
    if (preferred->empty()) throw Error(ErrorCode::PoolExhausted, "every prompt card has been drawn");
    const auto index = preferred->back();
    preferred->pop_back();
    const auto& card = pool_[index];
    next_ = card.category == PromptCategory::Stylistic ? PromptCategory::Contextual : PromptCategory::Stylistic;
    return card;
}

// ---------------------------------------------------------------------------
// Roster

std::string_view to_string(InterlocutorKind kind) { return kind == InterlocutorKind::AI ? "ai" : "human"; }

std::vector<RosterEntry> roster_from_json(const json& j, const std::filesystem::path& base_dir) {
    const json& entries = j.is_object() ? j.at("roster") : j;
    std::vector<RosterEntry> roster;
    for (const auto& e : entries) {
        RosterEntry r;
        r.id = e.at("id").get<std::string>();
        const auto kind = e.value("kind", std::string("ai"));
        if (kind == "ai") {
            r.kind = InterlocutorKind::AI;
            std::filesystem::path persona = e.at("persona").get<std::string>();
            r.persona = persona.is_relative() && !base_dir.empty() ? base_dir / persona : persona;
        } else if (kind == "human") {
            r.kind = InterlocutorKind::Human;
        } else {
            throw Error(ErrorCode::InvalidArgument, "unknown interlocutor kind '" + kind + "'");
        }
        roster.push_back(std::move(r));
    }
    if (roster.empty()) throw Error(ErrorCode::InvalidArgument, "roster is empty");
    return roster;
}

std::vector<RosterEntry> load_roster(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoError, "cannot open roster " + path.string());
    return roster_from_json(json::parse(in), path.parent_path());
}

std::size_t balanced_slot(std::size_t enrollment, std::size_t round, std::size_t roster_size) {
    if (roster_size == 0) throw Error(ErrorCode::InvalidArgument, "roster is empty");
    return (round + enrollment % roster_size) % roster_size;
}

// ---------------------------------------------------------------------------
// Participants and verdicts

namespace {

std::optional<int> scale_field(const json& j, const char* key, bool required) {
    if (!j.contains(key) || j.at(key).is_null()) {
        if (required) throw Error(ErrorCode::InvalidQuestionnaire, std::string(key) + " is required");
        return std::nullopt;
    }
    const auto& v = j.at(key);
    if (!v.is_number_integer()) throw Error(ErrorCode::InvalidQuestionnaire, std::string(key) + " must be an integer");
    const int x = v.get<int>();
    if (x < 1 || x > 7) throw Error(ErrorCode::InvalidQuestionnaire, std::string(key) + " must lie in 1-7");
    return x;
}

std::string required_text(const json& j, const char* key) {
    if (!j.contains(key) || !j.at(key).is_string() || trim(j.at(key).get_ref<const std::string&>()).empty())
        throw Error(ErrorCode::InvalidQuestionnaire, std::string(key) + " is required");
    return std::string(trim(j.at(key).get_ref<const std::string&>()));
}

}  // namespace

ParticipantProfile questionnaire_from_json(const json& j) {
    if (!j.is_object()) throw Error(ErrorCode::InvalidQuestionnaire, "questionnaire must be an object");
    ParticipantProfile p;
    p.initials = required_text(j, "initials");
    p.interviewer = required_text(j, "interviewer");
    if (j.contains("age") && !j.at("age").is_null()) {
        if (!j.at("age").is_number_integer() || j.at("age").get<int>() < 0)
            throw Error(ErrorCode::InvalidQuestionnaire, "age must be a non-negative integer");
        p.age = j.at("age").get<int>();
    }
    p.closeness = scale_field(j, "closeness", false);
    p.text_frequency = scale_field(j, "text_frequency", false);
    p.ai_familiarity = *scale_field(j, "ai_familiarity", true);
    if (j.contains("played_before") && !j.at("played_before").is_null()) {
        if (!j.at("played_before").is_boolean())
            throw Error(ErrorCode::InvalidQuestionnaire, "played_before must be a boolean");
        p.played_before = j.at("played_before").get<bool>();
    }
    return p;
}

ordered_json to_json(const ParticipantProfile& p) {
    ordered_json j;
    j["id"] = p.id;
    j["enrollment"] = p.enrollment;
    j["initials"] = p.initials;
    j["interviewer"] = p.interviewer;
    j["age"] = p.age ? ordered_json(*p.age) : ordered_json(nullptr);
    j["closeness"] = p.closeness ? ordered_json(*p.closeness) : ordered_json(nullptr);
    j["text_frequency"] = p.text_frequency ? ordered_json(*p.text_frequency) : ordered_json(nullptr);
    j["ai_familiarity"] = p.ai_familiarity;
    j["played_before"] = p.played_before ? ordered_json(*p.played_before) : ordered_json(nullptr);
    return j;
}

ParticipantProfile participant_from_json(const json& j) {
    auto p = questionnaire_from_json(j);
    p.id = j.at("id").get<std::string>();
    p.enrollment = j.value("enrollment", std::size_t{0});
    return p;
}

Verdict make_verdict(int rating, std::vector<std::string> reasons, std::string free_text) {
    if (rating < 1 || rating > 7 || rating == 4)
        throw Error(ErrorCode::InvalidRating, "rating must be 1-3 or 5-7, got " + std::to_string(rating));
    for (const auto& r : reasons)
        if (std::find(kReasonCodes.begin(), kReasonCodes.end(), r) == kReasonCodes.end())
            throw Error(ErrorCode::InvalidReason, "unknown reason code '" + r + "'");
    std::sort(reasons.begin(), reasons.end());
    reasons.erase(std::unique(reasons.begin(), reasons.end()), reasons.end());
    return Verdict{rating, rating >= 5, std::move(reasons), std::move(free_text)};
}

// ---------------------------------------------------------------------------
// Session documents

std::string_view to_string(SessionState state) {
    switch (state) {
        case SessionState::Live: return "live";
        case SessionState::AwaitingVerdict: return "awaiting-verdict";
        case SessionState::Revealed: return "revealed";
        case SessionState::Aborted: return "aborted";
    }
    return "?";
}

std::string_view to_string(Party party) { return party == Party::Participant ? "participant" : "interlocutor"; }

namespace {

SessionState state_from_string(std::string_view s) {
    for (auto st : {SessionState::Live, SessionState::AwaitingVerdict, SessionState::Revealed, SessionState::Aborted})
        if (to_string(st) == s) return st;
    throw Error(ErrorCode::StoreCorrupt, "unknown session state '" + std::string(s) + "'");
}

}  // namespace

ordered_json to_json(const SessionRecord& r) {
    ordered_json j;
    j["session"] = r.id;
    j["participant"] = r.participant;
    ordered_json who;
    who["config"] = r.interlocutor.id;
    who["kind"] = to_string(r.interlocutor.kind);
    j["interlocutor"] = std::move(who);
    j["prompt"] = to_json(r.prompt);
    j["round"] = r.round;
    j["started_at_ms"] = r.started_at_ms;
    j["deadline_ms"] = r.deadline_ms;
    j["state"] = to_string(r.state);
    ordered_json transcript = ordered_json::array();
    for (const auto& t : r.transcript) {
        ordered_json e;
        e["sender"] = to_string(t.sender);
        e["text"] = t.text;
        e["t_ms"] = t.t_ms;
        transcript.push_back(std::move(e));
    }
    j["transcript"] = std::move(transcript);
    ordered_json undelivered = ordered_json::array();
    for (const auto& u : r.undelivered) {
        ordered_json e;
        e["text"] = u.text;
        e["due_ms"] = u.due_ms;
        undelivered.push_back(std::move(e));
    }
    j["undelivered"] = std::move(undelivered);
    if (r.verdict) {
        ordered_json v;
        v["rating"] = r.verdict->rating;
        v["guess"] = r.verdict->guess_human ? "human" : "ai";
        v["reasons"] = r.verdict->reasons;
        v["free_text"] = r.verdict->free_text;
        j["verdict"] = std::move(v);
    } else {
        j["verdict"] = nullptr;
    }
    j["excluded"] = r.excluded;
    j["exclusion_reason"] = r.exclusion_reason.empty() ? ordered_json(nullptr) : ordered_json(r.exclusion_reason);
    return j;
}

SessionRecord session_record_from_json(const json& j) {
    try {
        SessionRecord r;
        r.id = j.at("session").get<std::string>();
        r.participant = j.at("participant").get<std::string>();
        const auto& who = j.at("interlocutor");
        r.interlocutor.id = who.at("config").get<std::string>();
        const auto kind = who.at("kind").get<std::string>();
        if (kind != "ai" && kind != "human") throw Error(ErrorCode::StoreCorrupt, "bad interlocutor kind " + kind);
        r.interlocutor.kind = kind == "ai" ? InterlocutorKind::AI : InterlocutorKind::Human;
        const auto& p = j.at("prompt");
        r.prompt = PromptCard{p.at("id").get<std::string>(),
                              prompt_category_from_string(p.at("category").get<std::string>()),
                              p.at("topic").get<std::string>(), p.at("prompt").get<std::string>()};
        r.round = j.value("round", std::size_t{0});
        r.started_at_ms = j.value("started_at_ms", std::int64_t{0});
        r.deadline_ms = j.value("deadline_ms", std::int64_t{180'000});
        r.state = state_from_string(j.value("state", std::string("revealed")));
        for (const auto& t : j.value("transcript", json::array())) {
            const auto sender = t.at("sender").get<std::string>();
            r.transcript.push_back({sender == "participant" ? Party::Participant : Party::Interlocutor,
                                    t.at("text").get<std::string>(), t.at("t_ms").get<std::int64_t>()});
        }
        for (const auto& u : j.value("undelivered", json::array()))
            r.undelivered.push_back({u.at("text").get<std::string>(), u.at("due_ms").get<std::int64_t>()});
        if (j.contains("verdict") && !j.at("verdict").is_null()) {
            const auto& v = j.at("verdict");
            r.verdict = make_verdict(v.at("rating").get<int>(), v.value("reasons", std::vector<std::string>{}),
                                     v.value("free_text", std::string{}));
            if (v.contains("guess") && (v.at("guess") == "human") != r.verdict->guess_human)
                throw Error(ErrorCode::StoreCorrupt, "verdict guess disagrees with its rating");
        }
        r.excluded = j.at("excluded").get<bool>();
        if (j.contains("exclusion_reason") && j.at("exclusion_reason").is_string())
            r.exclusion_reason = j.at("exclusion_reason").get<std::string>();
        return r;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::StoreCorrupt, std::string("malformed session record: ") + e.what());
    } catch (const Error& e) {
        if (e.code() == ErrorCode::StoreCorrupt) throw;
        throw Error(ErrorCode::StoreCorrupt, std::string("invalid session record: ") + e.what());
    }
}

ordered_json to_json(const SessionEvents& events) {
    ordered_json j;
    ordered_json messages = ordered_json::array();
    for (const auto& m : events.messages) {
        ordered_json e;
        e["index"] = m.index;
        e["from"] = m.from_viewer ? "you" : "partner";
        e["text"] = m.text;
        e["t_ms"] = m.t_ms;
        messages.push_back(std::move(e));
    }
    j["messages"] = std::move(messages);
    j["cursor"] = events.cursor;
    j["remaining_seconds"] = events.remaining_seconds;
    j["phase"] = to_string(events.phase);
    j["your_turn"] = events.your_turn;
    return j;
}

ordered_json to_json(const RevealPayload& reveal) {
    ordered_json j;
    j["session_id"] = reveal.session_id;
    j["interlocutor"] = to_string(reveal.interlocutor);
    j["config_id"] = reveal.config_id;
    j["rating"] = reveal.rating;
    j["guess"] = reveal.guess_human ? "human" : "ai";
    j["correct"] = reveal.correct;
    return j;
}

std::int64_t SystemClock::now_ms() const {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
}

// ---------------------------------------------------------------------------
// Interlocutor factory

InterlocutorFactory file_interlocutor_factory() {
    struct Cache {
        std::mutex mu;
        std::map<std::filesystem::path, PersonaProfile> profiles;
        std::map<std::filesystem::path, std::shared_ptr<const MemoryStore>> stores;
    };
    auto cache = std::make_shared<Cache>();
    return [cache](const RosterEntry& entry) -> std::unique_ptr<Impersonator> {
        PersonaProfile profile;
        std::shared_ptr<const MemoryStore> store;
        {
            std::lock_guard lock(cache->mu);
            auto it = cache->profiles.find(entry.persona);
            if (it == cache->profiles.end()) {
                std::ifstream in(entry.persona);
                if (!in) throw Error(ErrorCode::InvalidProfile, "cannot open persona " + entry.persona.string());
                it = cache->profiles
                         .emplace(entry.persona, persona_from_json(json::parse(in), entry.persona.parent_path()))
                         .first;
            }
            profile = it->second;
            if (profile.memory_mode != MemoryMode::None) {
                auto& slot = cache->stores[profile.memory_store];
                if (!slot) slot = std::make_shared<const MemoryStore>(MemoryStore::load(profile.memory_store));
                store = slot;
            }
        }
        std::shared_ptr<Gateway> gateway = make_gateway(profile.gateway);
        return std::make_unique<Impersonator>(std::move(profile), std::move(gateway), std::move(store));
    };
}

// ---------------------------------------------------------------------------
// Arena

struct Arena::ParticipantState {
    ParticipantProfile profile;
    std::string token;
    std::size_t rounds = 0;
    PromptDeck deck;
    std::shared_ptr<Session> active;
};

struct Arena::Session {
    struct Pending {
        std::string text;
        std::int64_t due_ms;
    };

    std::mutex mu;
    std::condition_variable cv;
    SessionRecord rec;
    std::string participant_token;
    std::string participant_name;
    std::unique_ptr<Impersonator> ai;
    Party turn = Party::Participant;
    bool posted_this_turn = false;
    std::int64_t last_post_ms = 0;
    std::deque<Pending> pending;
    std::size_t ai_turns = 0;
    std::string confederate_token;
    std::uint64_t version = 0;
    bool finalized = false;
};

Arena::Arena(ArenaConfig config, std::vector<RosterEntry> roster, std::vector<PromptCard> pool,
             std::shared_ptr<const Clock> clock, InterlocutorFactory factory)
    : config_(std::move(config)),
      roster_(std::move(roster)),
      pool_(std::move(pool)),
      clock_(std::move(clock)),
      factory_(std::move(factory)) {
    if (roster_.empty()) throw Error(ErrorCode::InvalidArgument, "roster is empty");
    if (pool_.empty()) throw Error(ErrorCode::InvalidArgument, "prompt pool is empty");
    if (!clock_) clock_ = std::make_shared<SystemClock>();
    if (!config_.store_dir.empty()) std::filesystem::create_directories(config_.store_dir);
}

Arena::~Arena() = default;

std::filesystem::path Arena::trajectory_path() const { return config_.store_dir / "trajectories.jsonl"; }
std::filesystem::path Arena::participants_path() const { return config_.store_dir / "participants.jsonl"; }

std::string Arena::token_for(std::string_view kind, std::string_view id) const {
    std::uint64_t h = fnv1a64(kind, config_.seed ^ 0x9e3779b97f4a7c15ULL);
    h = fnv1a64(id, h);
    return hex64(h) + hex64(fnv1a64(id, h ^ config_.seed));
}

void Arena::append_line(const std::filesystem::path& path, const std::string& line) {
    if (config_.store_dir.empty()) return;
    std::lock_guard lock(file_mu_);
    std::ofstream out(path, std::ios::app | std::ios::binary);
    if (!out) throw Error(ErrorCode::IoError, "cannot append to " + path.string());
    out << line << '\n';
}

Arena::Registration Arena::register_participant(ParticipantProfile profile) {
    std::lock_guard lock(mu_);
    char buf[16];
    std::snprintf(buf, sizeof buf, "p-%04zu", next_participant_ + 1);
    profile.id = buf;
    profile.enrollment = next_participant_++;
    auto state = std::make_unique<ParticipantState>(ParticipantState{
        profile, token_for("participant", profile.id), 0, PromptDeck(pool_, config_.seed ^ fnv1a64(profile.id)),
        nullptr});
    const auto token = state->token;
    participants_.emplace(profile.id, std::move(state));
    append_line(participants_path(), to_json(profile).dump());
    return {profile.id, token};
}

bool Arena::check_participant_token(std::string_view participant_id, std::string_view token) const {
    std::lock_guard lock(mu_);
    const auto it = participants_.find(participant_id);
    return it != participants_.end() && it->second->token == token;
}

bool Arena::check_session_token(std::string_view session_id, std::string_view token) const {
    const auto s = session(session_id);
    return s->participant_token == token;
}

std::optional<ParticipantProfile> Arena::participant(std::string_view id) const {
    std::lock_guard lock(mu_);
    const auto it = participants_.find(id);
    if (it == participants_.end()) return std::nullopt;
    return it->second->profile;
}

std::shared_ptr<Arena::Session> Arena::session(std::string_view id) const {
    std::lock_guard lock(mu_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) throw Error(ErrorCode::UnknownSession, "unknown session " + std::string(id));
    return it->second;
}

SessionHandle Arena::create_session(std::string_view participant_id) {
    std::lock_guard lock(mu_);
    const auto pit = participants_.find(participant_id);
    if (pit == participants_.end())
        throw Error(ErrorCode::UnknownParticipant, "unknown participant " + std::string(participant_id));
    auto& part = *pit->second;
    if (part.active) {
        std::lock_guard slock(part.active->mu);
        pump(*part.active, clock_->now_ms());
        const auto st = part.active->rec.state;
        if (st == SessionState::Live || st == SessionState::AwaitingVerdict)
            throw Error(ErrorCode::InvalidArgument, "participant " + part.profile.id + " has an unfinished session");
    }

    const std::size_t round = part.rounds;
    const auto& entry = next_config(part.profile.enrollment, round, std::span<const RosterEntry>(roster_));
    const PromptCard card = part.deck.draw();

    auto s = std::make_shared<Session>();
    if (entry.kind == InterlocutorKind::AI) {
        if (!factory_) throw Error(ErrorCode::InvalidArgument, "no interlocutor factory for AI sessions");
        s->ai = factory_(entry);
    }
    char buf[16];
    std::snprintf(buf, sizeof buf, "s-%06zu", next_session_ + 1);
    ++next_session_;
    ++part.rounds;

    s->rec.id = buf;
    s->rec.participant = part.profile.id;
    s->rec.interlocutor = entry;
    s->rec.prompt = card;
    s->rec.round = round;
    s->rec.started_at_ms = clock_->now_ms();
    s->rec.deadline_ms = config_.session_ms;
    s->participant_token = part.token;
    s->participant_name = part.profile.initials;
    sessions_.emplace(s->rec.id, s);
    part.active = s;
    return {s->rec.id, card.topic, card.prompt};
}

void Arena::pump(Session& s, std::int64_t now) {
    if (s.rec.state != SessionState::Live) return;
    const std::int64_t rel = now - s.rec.started_at_ms;
    bool changed = false;

    const auto deliver_due = [&] {
        while (!s.pending.empty() && s.pending.front().due_ms <= rel) {
            s.rec.transcript.push_back({Party::Interlocutor, s.pending.front().text, s.pending.front().due_ms});
            s.pending.pop_front();
            changed = true;
            if (s.pending.empty()) {
                s.turn = Party::Participant;
                s.posted_this_turn = false;
            }
        }
    };
    deliver_due();

    // Idle fallback: a party that posted and then went quiet yields the turn.
    const bool human_holder = s.turn == Party::Participant || !s.ai;
    if (human_holder && s.posted_this_turn && s.pending.empty()) {
        const std::int64_t yield_at = s.last_post_ms + config_.idle_yield_ms;
        if (yield_at <= rel && yield_at <= s.rec.deadline_ms) {
            yield_turn(s, s.turn, yield_at);
            changed = true;
            deliver_due();
        }
    }

    if (s.rec.state == SessionState::Live && rel > s.rec.deadline_ms) {
        for (auto& p : s.pending) s.rec.undelivered.push_back({std::move(p.text), p.due_ms});
        s.pending.clear();
        s.rec.state = SessionState::AwaitingVerdict;
        changed = true;
    }
    if (changed) {
        ++s.version;
        s.cv.notify_all();
    }
}

void Arena::yield_turn(Session& s, Party party, std::int64_t at) {
    s.posted_this_turn = false;
    if (party == Party::Interlocutor) {
        s.turn = Party::Participant;
        return;
    }
    s.turn = Party::Interlocutor;
    if (!s.ai) return;  // confederate's turn

    const auto& owner = s.ai->profile().owner_id;
    std::vector<Message> history;
    for (const auto& t : s.rec.transcript) {
        history.push_back(Message{t.sender == Party::Participant ? s.participant_name : owner,
                                  from_unix((s.rec.started_at_ms + t.t_ms) / 1000), t.text});
    }
    const std::uint64_t seed =
        config_.seed ^ fnv1a64(s.rec.id) ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(s.ai_turns + 1));
    ++s.ai_turns;

    ReplyPlan plan;
    try {
        plan = s.ai->reply(from_unix((s.rec.started_at_ms + at) / 1000), s.rec.prompt.prompt, history, seed);
    } catch (const Error& e) {
        if (e.code() == ErrorCode::EmptyReply) {
            s.turn = Party::Participant;
            return;
        }
        abort(s, std::string("interlocutor-error: ") + std::string(to_string(e.code())));
        return;
    }

    double cumulative = 0.0;
    for (std::size_t i = 0; i < plan.messages.size(); ++i) {
        cumulative += plan.delays[i];
        const std::int64_t due = at + std::llround(cumulative * 1000.0);
        if (due > s.rec.deadline_ms) {
            s.rec.undelivered.push_back({std::move(plan.messages[i]), due});
        } else {
            s.pending.push_back({std::move(plan.messages[i]), due});
        }
    }
    if (s.pending.empty()) s.turn = Party::Participant;
}

void Arena::abort(Session& s, std::string reason) {
    for (auto& p : s.pending) s.rec.undelivered.push_back({std::move(p.text), p.due_ms});
    s.pending.clear();
    s.rec.state = SessionState::Aborted;
    s.rec.excluded = true;
    s.rec.exclusion_reason = std::move(reason);
    ++s.version;
    s.cv.notify_all();
    finalize(s);
}

void Arena::finalize(Session& s) {
    if (s.finalized) return;
    s.finalized = true;
    append_line(trajectory_path(), to_json(s.rec).dump());
}

void Arena::post_message(std::string_view session_id, Party sender, std::string_view text) {
    auto sp = session(session_id);
    auto& s = *sp;
    std::lock_guard lock(s.mu);
    const auto now = clock_->now_ms();
    pump(s, now);
    if (s.rec.state == SessionState::Aborted && s.rec.exclusion_reason == "confederate-disconnected")
        throw Error(ErrorCode::ConfederateDisconnected, "the confederate left session " + s.rec.id);
    if (s.rec.state != SessionState::Live)
        throw Error(ErrorCode::SessionExpired, "session " + s.rec.id + " is no longer live");
    if (sender == Party::Interlocutor && s.ai)
        throw Error(ErrorCode::InvalidArgument, "AI sessions do not accept relayed messages");
    if (s.turn != sender) throw Error(ErrorCode::NotYourTurn, "it is not the " + std::string(to_string(sender)) + "'s turn");
    const auto body = trim(text);
    if (body.empty()) throw Error(ErrorCode::InvalidArgument, "message text is empty");

    const std::int64_t rel = now - s.rec.started_at_ms;
    s.rec.transcript.push_back({sender, std::string(body), rel});
    s.posted_this_turn = true;
    s.last_post_ms = rel;
    ++s.version;
    s.cv.notify_all();
}

void Arena::end_turn(std::string_view session_id, Party party) {
    auto sp = session(session_id);
    auto& s = *sp;
    std::lock_guard lock(s.mu);
    const auto now = clock_->now_ms();
    pump(s, now);
    if (s.rec.state != SessionState::Live)
        throw Error(ErrorCode::SessionExpired, "session " + s.rec.id + " is no longer live");
    if (party == Party::Interlocutor && s.ai)
        throw Error(ErrorCode::InvalidArgument, "AI sessions yield automatically");
    if (s.turn != party) throw Error(ErrorCode::NotYourTurn, "it is not the " + std::string(to_string(party)) + "'s turn");
    yield_turn(s, party, now - s.rec.started_at_ms);
    ++s.version;
    pump(s, now);
    s.cv.notify_all();
}

SessionEvents Arena::events(std::string_view session_id, Party viewer, std::size_t since) {
    return wait_events(session_id, viewer, since, std::chrono::milliseconds{0});
}

SessionEvents Arena::wait_events(std::string_view session_id, Party viewer, std::size_t since,
                                 std::chrono::milliseconds timeout) {
    auto sp = session(session_id);
    auto& s = *sp;
    std::unique_lock lock(s.mu);
    pump(s, clock_->now_ms());
    const auto start_version = s.version;
    const auto give_up = std::chrono::steady_clock::now() + timeout;
    while (s.rec.transcript.size() <= since && s.rec.state == SessionState::Live && s.version == start_version &&
           std::chrono::steady_clock::now() < give_up) {
        s.cv.wait_until(lock, std::min(give_up, std::chrono::steady_clock::now() + std::chrono::milliseconds{100}));
        pump(s, clock_->now_ms());
    }

    SessionEvents ev;
    for (std::size_t i = since; i < s.rec.transcript.size(); ++i) {
        const auto& t = s.rec.transcript[i];
        ev.messages.push_back({i, t.sender == viewer, t.text, t.t_ms});
    }
    ev.cursor = s.rec.transcript.size();
    const auto rel = clock_->now_ms() - s.rec.started_at_ms;
    ev.remaining_seconds = s.rec.state == SessionState::Live
                               ? static_cast<double>(std::max<std::int64_t>(0, s.rec.deadline_ms - rel)) / 1000.0
                               : 0.0;
    ev.phase = s.rec.state;
    ev.your_turn = s.rec.state == SessionState::Live && s.turn == viewer && s.pending.empty();
    return ev;
}

RevealPayload Arena::submit_verdict(std::string_view session_id, int rating, std::vector<std::string> reasons,
                                    std::string free_text) {
    auto sp = session(session_id);
    auto& s = *sp;
    std::lock_guard lock(s.mu);
    pump(s, clock_->now_ms());
    switch (s.rec.state) {
        case SessionState::Revealed:
            throw Error(ErrorCode::AlreadyRevealed, "session " + s.rec.id + " was already revealed");
        case SessionState::Live:
            throw Error(ErrorCode::NotAwaitingVerdict, "session " + s.rec.id + " is still live");
        case SessionState::Aborted:
            throw Error(ErrorCode::NotAwaitingVerdict, "session " + s.rec.id + " was aborted");
        case SessionState::AwaitingVerdict:
            break;
    }
    s.rec.verdict = make_verdict(rating, std::move(reasons), std::move(free_text));
    s.rec.state = SessionState::Revealed;
    ++s.version;
    s.cv.notify_all();
    finalize(s);

    const bool human = s.rec.interlocutor.kind == InterlocutorKind::Human;
    return RevealPayload{s.rec.id, s.rec.interlocutor.kind, s.rec.interlocutor.id, s.rec.verdict->rating,
                         s.rec.verdict->guess_human, s.rec.verdict->guess_human == human};
}

std::vector<SessionHandle> Arena::open_relay_sessions() const {
    std::vector<std::shared_ptr<Session>> all;
    {
        std::lock_guard lock(mu_);
        for (const auto& [_, s] : sessions_) all.push_back(s);
    }
    std::vector<SessionHandle> out;
    for (const auto& s : all) {
        std::lock_guard lock(s->mu);
        if (!s->ai && s->rec.state == SessionState::Live && s->confederate_token.empty())
            out.push_back({s->rec.id, s->rec.prompt.topic, s->rec.prompt.prompt});
    }
    return out;
}

std::string Arena::confederate_join(std::string_view session_id) {
    auto sp = session(session_id);
    auto& s = *sp;
    std::lock_guard lock(s.mu);
    if (s.ai) throw Error(ErrorCode::InvalidArgument, "session " + s.rec.id + " is not a relay session");
    if (s.rec.state != SessionState::Live) throw Error(ErrorCode::SessionExpired, "session " + s.rec.id + " is over");
    if (!s.confederate_token.empty())
        throw Error(ErrorCode::InvalidArgument, "session " + s.rec.id + " already has a confederate");
    s.confederate_token = token_for("confederate", s.rec.id);
    return s.confederate_token;
}

bool Arena::check_confederate_token(std::string_view session_id, std::string_view token) const {
    const auto s = session(session_id);
    std::lock_guard lock(s->mu);
    return !s->confederate_token.empty() && s->confederate_token == token;
}

void Arena::confederate_leave(std::string_view session_id) {
    auto sp = session(session_id);
    auto& s = *sp;
    std::lock_guard lock(s.mu);
    pump(s, clock_->now_ms());
    if (s.rec.state == SessionState::Live) abort(s, "confederate-disconnected");
}

void Arena::tick() {
    std::vector<std::shared_ptr<Session>> live;
    {
        std::lock_guard lock(mu_);
        for (const auto& [_, s] : sessions_) live.push_back(s);
    }
    const auto now = clock_->now_ms();
    for (const auto& s : live) {
        std::lock_guard lock(s->mu);
        pump(*s, now);
    }
}

SessionRecord Arena::record(std::string_view session_id) const {
    const auto s = session(session_id);
    std::lock_guard lock(s->mu);
    return s->rec;
}

std::vector<SessionRecord> Arena::records() const {
    std::vector<std::shared_ptr<Session>> all;
    {
        std::lock_guard lock(mu_);
        for (const auto& [_, s] : sessions_) all.push_back(s);
    }
    std::vector<SessionRecord> out;
    for (const auto& s : all) {
        std::lock_guard lock(s->mu);
        out.push_back(s->rec);
    }
    return out;
}

}  // namespace doppel
