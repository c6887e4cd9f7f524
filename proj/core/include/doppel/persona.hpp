#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "doppel/gateway.hpp"
#include "doppel/ingest.hpp"
#include "doppel/memory.hpp"
#include "doppel/retrieval.hpp"

namespace doppel {

enum class MemoryMode { None, BM, MM };

std::string_view to_string(MemoryMode mode);
MemoryMode memory_mode_from_string(std::string_view name);

inline constexpr std::size_t kMinIclMessages = 15;
inline constexpr std::size_t kMaxIclMessages = 38;

struct PersonaProfile {
    std::string name;      // display name used in the prompt
    std::string owner_id;  // sender id of the impersonated person in message histories
    double wpm = 40.0;
    std::vector<Message> icl_messages;  // empty disables the example-conversation block
    MemoryMode memory_mode = MemoryMode::None;
    GatewayConfig gateway;
    double temperature = 0.8;
    std::filesystem::path memory_store;  // required for BM and MM

    bool icl_enabled() const { return !icl_messages.empty(); }
    // Throws Error(InvalidProfile).
    void validate() const;
};

PersonaProfile persona_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});

struct AssembledPrompt {
    std::string system;        // identity, instructions, example conversation, memories
    std::string conversation;  // topic and history

    std::string text() const { return system + "\n\n" + conversation; }
};

AssembledPrompt assemble_prompt(const PersonaProfile& profile, Timestamp today, std::string_view topic,
                                std::span<const Message> history, const RetrievalResult* retrieval);

// Splits on the literal <|msg|> delimiter, trimming and dropping empty parts.
// Throws Error(EmptyReply) when nothing remains.
std::vector<std::string> split_messages(std::string_view completion);

std::size_t word_count(std::string_view text);

struct DelayModel {
    double floor = 0.5;
    double think_min = 1.0;  // first message of a turn only
    double think_max = 4.0;
    double jitter_min = 0.75;
    double jitter_max = 1.25;
};

// delay_i = max(floor, think_i + words_i / wpm * 60 * jitter_i), seconds.
std::vector<double> schedule_delays(std::span<const std::string> messages, double wpm, std::uint64_t seed,
                                    const DelayModel& model = {});

struct ReplyPlan {
    std::vector<std::string> messages;
    std::vector<double> delays;  // seconds, one per message
    std::optional<RetrievalResult> retrieval;
    ChatRequest request;
};

using RetrievalFn = std::function<std::optional<RetrievalResult>(std::span<const Message>)>;

// Retrieval (if any), prompt assembly, one chat call at profile.temperature
// (retried up to max_retries on gateway errors), split, delays.
ReplyPlan generate_reply(const PersonaProfile& profile, Timestamp today, std::string_view topic,
                         std::span<const Message> history, const RetrievalFn& retrieval, Gateway& gw,
                         std::uint64_t seed, int max_retries = 2, const DelayModel& delays = {});

// Per-session impersonator: owns the session's retrieval cache and wires the
// profile's memory mode to BM or MM retrieval against a shared store.
class Impersonator {
public:
    Impersonator(PersonaProfile profile, std::shared_ptr<Gateway> gateway,
                 std::shared_ptr<const MemoryStore> store = nullptr, RetrievalOptions retrieval = {});

    ReplyPlan reply(Timestamp today, std::string_view topic, std::span<const Message> history,
                    std::uint64_t seed);

    const PersonaProfile& profile() const { return profile_; }
    const RetrievalCache& cache() const { return cache_; }

private:
    PersonaProfile profile_;
    std::shared_ptr<Gateway> gateway_;
    std::shared_ptr<const MemoryStore> store_;
    RetrievalOptions retrieval_;
    RetrievalCache cache_;
    std::size_t turn_ = 0;
};

}  // namespace doppel
