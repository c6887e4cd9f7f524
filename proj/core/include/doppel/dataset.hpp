#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "doppel/ingest.hpp"

namespace doppel {

// Literal delimiter separating several chat messages inside one completion.
inline constexpr std::string_view kMessageDelimiter = "<|msg|>";

// The impersonated participant is always rendered under this name.
inline constexpr std::string_view kOwnerAlias = "Me";

// `YYYY-MM-DD HH:MM:SS <sender>: <text>`, owner rendered as "Me".
std::string render_message(const Message& m, std::string_view owner);
std::string render_transcript(std::span<const Message> messages, std::string_view owner);

struct TrainingExample {
    std::string context;  // rendered prior messages, one per line
    std::string target;   // owner run joined with <|msg|>
    Timestamp ts;         // first target message

    bool operator==(const TrainingExample&) const = default;
};

// One example per maximal run of consecutive owner messages preceded by at
// least one non-owner message. Runs that open a conversation are skipped.
std::vector<TrainingExample> build_examples(const std::vector<Conversation>& conversations,
                                            std::string_view owner);

enum class TierName { B500, B4K, BFull };

struct DatasetTier {
    TierName name;
    std::optional<std::size_t> cap;
    int epochs;

    std::string_view label() const;
};

// Registered tiers: B500 (cap 500, 5 epochs), B4K (cap 4,000, 4 epochs),
// BFull (uncapped, 3 epochs). Throws Error(UnknownTier).
DatasetTier tier_by_name(std::string_view name);
DatasetTier tier(TierName name);

// Keeps the `cap` most recent examples; output is sorted by ts ascending.
std::vector<TrainingExample> cap_dataset(std::vector<TrainingExample> examples,
                                         const DatasetTier& tier);

// LoRA fine-tune document for an external training platform.
nlohmann::ordered_json emit_finetune_config(const DatasetTier& tier);
nlohmann::ordered_json emit_finetune_config(std::string_view tier_name);

nlohmann::ordered_json to_json(const TrainingExample& e);
void write_examples(std::ostream& out, std::span<const TrainingExample> examples);

}  // namespace doppel
