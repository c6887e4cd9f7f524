#include "doppel/persona.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "doppel/dataset.hpp"
#include "doppel/error.hpp"

namespace doppel {

using nlohmann::json;

std::string_view to_string(MemoryMode mode) {
    switch (mode) {
        case MemoryMode::None: return "none";
        case MemoryMode::BM: return "BM";
        case MemoryMode::MM: return "MM";
    }
    return "?";
}

MemoryMode memory_mode_from_string(std::string_view name) {
    if (name == "none") return MemoryMode::None;
    if (name == "BM") return MemoryMode::BM;
    if (name == "MM") return MemoryMode::MM;
    throw Error(ErrorCode::InvalidProfile, "unknown memory mode '" + std::string(name) + "'");
}

void PersonaProfile::validate() const {
    if (name.empty()) throw Error(ErrorCode::InvalidProfile, "persona needs a name");
    if (owner_id.empty()) throw Error(ErrorCode::InvalidProfile, "persona needs an owner id");
    if (!(wpm > 0.0) || !std::isfinite(wpm)) throw Error(ErrorCode::InvalidProfile, "wpm must be positive");
    if (!(temperature >= 0.0 && temperature <= 2.0))
        throw Error(ErrorCode::InvalidProfile, "temperature must lie in [0, 2]");
    if (icl_enabled() && (icl_messages.size() < kMinIclMessages || icl_messages.size() > kMaxIclMessages))
        throw Error(ErrorCode::InvalidProfile, "example conversation must hold 15 to 38 messages, has " +
                                                   std::to_string(icl_messages.size()));
}

PersonaProfile persona_from_json(const json& j, const std::filesystem::path& base_dir) {
    const auto resolve = [&](const std::string& p) {
        std::filesystem::path path = p;
        return path.is_relative() && !base_dir.empty() ? base_dir / path : path;
    };
    try {
        PersonaProfile p;
        p.name = j.at("name").get<std::string>();
        p.owner_id = j.value("owner_id", p.name);
        p.wpm = j.value("wpm", p.wpm);
        p.temperature = j.value("temperature", p.temperature);
        p.memory_mode = memory_mode_from_string(j.value("memory_mode", std::string("none")));
        if (j.contains("icl")) {
            for (const auto& m : j.at("icl")) p.icl_messages.push_back(message_from_json(m));
        } else if (j.contains("icl_file")) {
            const auto path = resolve(j.at("icl_file").get<std::string>());
            std::ifstream in(path);
            if (!in) throw Error(ErrorCode::InvalidProfile, "cannot open " + path.string());
            p.icl_messages = parse_jsonl_export(in).messages;
        }
        if (j.contains("gateway")) p.gateway = gateway_config_from_json(j.at("gateway"), base_dir);
        if (j.contains("memory_store")) p.memory_store = resolve(j.at("memory_store").get<std::string>());
        p.validate();
        return p;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidProfile, std::string("malformed persona profile: ") + e.what());
    }
}

AssembledPrompt assemble_prompt(const PersonaProfile& profile, Timestamp today, std::string_view topic,
                                std::span<const Message> history, const RetrievalResult* retrieval) {
    const std::string& name = profile.name;
    AssembledPrompt out;
    auto& s = out.system;
    s += "Today's date is " + format_date(today) + ". You are a human being named " + name +
         ". You are not an AI.";
    s += " Respond as yourself. You will first be given the topic of conversation, then any existing "
         "conversation history if there is any. Be sure to reply in the style of " +
         name + ". Use the '" + std::string(kMessageDelimiter) +
         "' token to send multiple messages at once if you wish.";

    if (profile.icl_enabled()) {
        s += "\n\nHere is an example conversation between " + name +
             " and another individual. This conversation is not relevant to the current conversation. "
             "Use this conversation to help aid you to emulate stylistically on how to communicate in "
             "your conversations. 'Me' is the user that you are imitating.\n\n";
        s += "[BEGIN EXAMPLE CONVERSATION]\n";
        s += render_transcript(profile.icl_messages, profile.owner_id);
        s += "\n[END EXAMPLE CONVERSATION]";
    }

    if (retrieval && !retrieval->memories.empty()) {
        std::vector<const RetrievedMemory*> sorted;
        for (const auto& m : retrieval->memories) sorted.push_back(&m);
        std::stable_sort(sorted.begin(), sorted.end(), [](const RetrievedMemory* a, const RetrievedMemory* b) {
            if (a->date_start != b->date_start) return a->date_start < b->date_start;
            return a->id < b->id;
        });
        s += "\n\nHere are some of your relevant memories + facts about yourself that may help you respond "
             "authentically. Pay careful attention to the date of the memories, as events have occurred in "
             "the past, and you should make reference to them in the appropriate time manner.\n\n";
        s += "[BEGIN MEMORIES]\n";
        for (const auto* m : sorted) s += m->line() + "\n";
        if (retrieval->summary) s += "[context summary] " + *retrieval->summary + "\n";
        s += "[END MEMORIES]";
    }
    s += "\n\nNow you may begin the conversation.";

    auto& c = out.conversation;
    c += "Topic: ";
    c += topic;
    c += "\n\nConversation history:\n";
    c += history.empty() ? std::string("(no messages yet)") : render_transcript(history, profile.owner_id);
    return out;
}

std::vector<std::string> split_messages(std::string_view completion) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = completion.find(kMessageDelimiter, start);
        const auto part = trim(completion.substr(start, pos == std::string_view::npos ? pos : pos - start));
        if (!part.empty()) out.emplace_back(part);
        if (pos == std::string_view::npos) break;
        start = pos + kMessageDelimiter.size();
    }
    if (out.empty()) throw Error(ErrorCode::EmptyReply, "completion contains no message text");
    return out;
}

std::size_t word_count(std::string_view text) {
    std::size_t count = 0;
    bool in_word = false;
    for (const unsigned char c : text) {
        const bool space = std::isspace(c) != 0;
        if (!space && !in_word) ++count;
        in_word = !space;
    }
    return count;
}

namespace {

// mt19937_64 output is fully specified; mapping it to [0, 1) by hand keeps
// delays identical across standard library implementations.
double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * unit(rng); }

}  // namespace

std::vector<double> schedule_delays(std::span<const std::string> messages, double wpm, std::uint64_t seed,
                                    const DelayModel& model) {
    if (!(wpm > 0.0)) throw Error(ErrorCode::InvalidArgument, "wpm must be positive");
    std::mt19937_64 rng(seed);
    std::vector<double> delays;
    delays.reserve(messages.size());
    for (std::size_t i = 0; i < messages.size(); ++i) {
        const double think = i == 0 ? uniform(rng, model.think_min, model.think_max) : 0.0;
        const double jitter = uniform(rng, model.jitter_min, model.jitter_max);
        const double typing = static_cast<double>(word_count(messages[i])) / wpm * 60.0 * jitter;
        delays.push_back(std::max(model.floor, think + typing));
    }
    return delays;
}

ReplyPlan generate_reply(const PersonaProfile& profile, Timestamp today, std::string_view topic,
                         std::span<const Message> history, const RetrievalFn& retrieval, Gateway& gw,
                         std::uint64_t seed, int max_retries, const DelayModel& delays) {
    ReplyPlan plan;
    if (profile.memory_mode != MemoryMode::None && retrieval) plan.retrieval = retrieval(history);

    const auto prompt = assemble_prompt(profile, today, topic, history,
                                        plan.retrieval ? &*plan.retrieval : nullptr);
    plan.request = ChatRequest{profile.gateway.chat.model,
                               {{"system", prompt.system}, {"user", prompt.conversation}},
                               profile.temperature};
    std::string completion;
    for (int attempt = 0;; ++attempt) {
        try {
            completion = gw.complete(plan.request);
            break;
        } catch (const Error& e) {
            if (!e.retryable() || attempt >= max_retries) throw;
        }
    }
    plan.messages = split_messages(completion);
    plan.delays = schedule_delays(plan.messages, profile.wpm, seed, delays);
    return plan;
}

Impersonator::Impersonator(PersonaProfile profile, std::shared_ptr<Gateway> gateway,
                           std::shared_ptr<const MemoryStore> store, RetrievalOptions retrieval)
    : profile_(std::move(profile)),
      gateway_(std::move(gateway)),
      store_(std::move(store)),
      retrieval_(std::move(retrieval)) {
    profile_.validate();
    if (profile_.memory_mode != MemoryMode::None && !store_)
        throw Error(ErrorCode::InvalidProfile, "memory mode " + std::string(to_string(profile_.memory_mode)) +
                                                   " needs a memory store");
    if (retrieval_.owner.empty()) retrieval_.owner = profile_.owner_id;
}

ReplyPlan Impersonator::reply(Timestamp today, std::string_view topic, std::span<const Message> history,
                              std::uint64_t seed) {
    const std::size_t turn = turn_++;
    RetrievalFn retrieval;
    if (profile_.memory_mode == MemoryMode::BM) {
        retrieval = [&](std::span<const Message> h) -> std::optional<RetrievalResult> {
            return retrieve_bm(h, *store_, *gateway_, retrieval_);
        };
    } else if (profile_.memory_mode == MemoryMode::MM) {
        retrieval = [&, turn](std::span<const Message> h) -> std::optional<RetrievalResult> {
            return retrieve_mm(h, *store_, *gateway_, cache_, retrieval_, turn);
        };
    }
    return generate_reply(profile_, today, topic, history, retrieval, *gateway_, seed);
}

}  // namespace doppel
