#include "doppel/dataset.hpp"

#include <algorithm>
#include <ostream>

#include "doppel/error.hpp"

namespace doppel {

std::string render_message(const Message& m, std::string_view owner) {
    std::string out = format_datetime(m.timestamp);
    out += ' ';
    out += m.sender == owner ? kOwnerAlias : std::string_view(m.sender);
    out += ": ";
    out += m.text;
    return out;
}

std::string render_transcript(std::span<const Message> messages, std::string_view owner) {
    std::string out;
    for (const auto& m : messages) {
        if (!out.empty()) out += '\n';
        out += render_message(m, owner);
    }
    return out;
}

std::vector<TrainingExample> build_examples(const std::vector<Conversation>& conversations,
                                            std::string_view owner) {
    std::vector<TrainingExample> out;
    for (const auto& conv : conversations) {
        const auto& msgs = conv.messages;
        bool seen_other = false;
        std::size_t i = 0;
        while (i < msgs.size()) {
            if (msgs[i].sender != owner) {
                seen_other = true;
                ++i;
                continue;
            }
            std::size_t j = i;
            while (j < msgs.size() && msgs[j].sender == owner) ++j;
            if (seen_other) {
                TrainingExample ex;
                ex.context = render_transcript(std::span(msgs).first(i), owner);
                for (std::size_t k = i; k < j; ++k) {
                    if (k > i) ex.target += kMessageDelimiter;
                    ex.target += msgs[k].text;
                }
                ex.ts = msgs[i].timestamp;
                out.push_back(std::move(ex));
            }
            i = j;
        }
    }
    return out;
}

std::string_view DatasetTier::label() const {
    switch (name) {
        case TierName::B500: return "B500";
        case TierName::B4K: return "B4K";
        case TierName::BFull: return "BFull";
    }
    return "?";
}

DatasetTier tier(TierName name) {
    switch (name) {
        case TierName::B500: return {name, 500, 5};
        case TierName::B4K: return {name, 4000, 4};
        case TierName::BFull: return {name, std::nullopt, 3};
    }
    throw Error(ErrorCode::UnknownTier, "unregistered tier");
}

DatasetTier tier_by_name(std::string_view name) {
    if (name == "B500") return tier(TierName::B500);
    if (name == "B4K") return tier(TierName::B4K);
    if (name == "BFull") return tier(TierName::BFull);
    throw Error(ErrorCode::UnknownTier, "unknown dataset tier '" + std::string(name) + "'");
}

std::vector<TrainingExample> cap_dataset(std::vector<TrainingExample> examples,
                                         const DatasetTier& tier) {
    std::stable_sort(examples.begin(), examples.end(),
                     [](const auto& a, const auto& b) { return a.ts < b.ts; });
    if (tier.cap && examples.size() > *tier.cap)
        examples.erase(examples.begin(),
                       examples.begin() + static_cast<std::ptrdiff_t>(examples.size() - *tier.cap));
    return examples;
}

nlohmann::ordered_json emit_finetune_config(const DatasetTier& tier) {
    nlohmann::ordered_json doc;
    doc["tier"] = tier.label();
    doc["base_model"] = "Llama-3.1-8b-Instruct";
    doc["method"] = "lora";
    doc["learning_rate"] = 1e-4;
    doc["batch_size"] = 8;
    doc["epochs"] = tier.epochs;
    doc["optimizer"] = "AdamW";
    doc["weight_decay"] = 0.01;
    doc["lr_schedule"] = "linear-with-warmup";
    doc["precision"] = "bf16";
    doc["lora_rank"] = 8;
    doc["lora_alpha"] = 16;
    doc["lora_dropout"] = 0.05;
    if (tier.cap) {
        doc["max_examples"] = *tier.cap;
    } else {
        doc["max_examples"] = nullptr;
    }
    return doc;
}

nlohmann::ordered_json emit_finetune_config(std::string_view tier_name) {
    return emit_finetune_config(tier_by_name(tier_name));
}

nlohmann::ordered_json to_json(const TrainingExample& e) {
    nlohmann::ordered_json j;
    j["input"] = e.context;
    j["output"] = e.target;
    j["ts"] = format_rfc3339(e.ts);
    return j;
}

void write_examples(std::ostream& out, std::span<const TrainingExample> examples) {
    for (const auto& e : examples) out << to_json(e).dump() << '\n';
}

}  // namespace doppel
