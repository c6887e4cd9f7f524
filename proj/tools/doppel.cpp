#include <csignal>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "doppel/analysis.hpp"
#include "doppel/arena.hpp"
#include "doppel/arena_http.hpp"
#include "doppel/dataset.hpp"
#include "doppel/error.hpp"
#include "doppel/gateway.hpp"
#include "doppel/ingest.hpp"
#include "doppel/memory.hpp"

namespace {

using namespace doppel;

nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
    return nlohmann::json::parse(in);
}

std::vector<Conversation> read_conversation_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
    return read_conversations(in);
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
    return out;
}

struct IngestArgs {
    std::string input, format = "jsonl", policy, consent, out, owner;
    std::optional<double> gap_hours;
};

int run_ingest(const IngestArgs& a) {
    std::ifstream in(a.input);
    if (!in) throw Error(ErrorCode::IoError, "cannot open " + a.input);
    const auto parsed = parse_export(in, a.format);

    QualityPolicy policy;
    if (!a.policy.empty()) policy = quality_policy_from_json(read_json(a.policy));
    if (a.gap_hours) policy.gap = Seconds{static_cast<std::int64_t>(*a.gap_hours * 3600.0)};
    policy.validate();

    std::optional<ConsentLedger> ledger;
    if (!a.consent.empty()) ledger = consent_ledger_from_json(read_json(a.consent));
    std::string owner = a.owner;
    if (owner.empty() && ledger) owner = ledger->owner();
    if (owner.empty()) throw Error(ErrorCode::InvalidArgument, "--owner is required without a consent ledger");

    auto conversations = segment_conversations(parsed.messages, owner, policy.gap);
    const auto segmented = conversations.size();
    if (ledger) conversations = redact_nonconsenting(conversations, *ledger, policy.gap);
    auto filtered = filter_quality(conversations, policy);

    auto out = open_out(a.out);
    write_conversations(out, filtered.conversations);

    const auto& r = filtered.report;
    std::cerr << "messages: " << parsed.messages.size() << " (malformed " << parsed.malformed << ")\n"
              << "conversations: " << segmented << " segmented, " << filtered.conversations.size() << " kept\n"
              << "dropped: " << r.excessive_length << " long, " << r.repetition << " repeated, " << r.imbalance
              << " imbalanced, " << r.emptied << " emptied; " << r.splits << " splits\n";
    return 0;
}

struct DatasetArgs {
    std::string in, owner, tier = "B4K", out, emit_config;
    std::optional<std::size_t> cap;
};

int run_dataset(const DatasetArgs& a) {
    auto tier = tier_by_name(a.tier);
    if (a.cap) tier.cap = *a.cap;
    const auto examples = cap_dataset(build_examples(read_conversation_file(a.in), a.owner), tier);
    auto out = open_out(a.out);
    write_examples(out, examples);
    if (!a.emit_config.empty()) {
        auto config = emit_finetune_config(tier);
        auto cfg = open_out(a.emit_config);
        cfg << config.dump(2) << '\n';
    }
    std::cerr << "examples: " << examples.size() << " (" << tier.label() << ")\n";
    return 0;
}

struct MemoryArgs {
    std::string conversations, out, gateway, owner_name = "the user", checkpoint;
    std::size_t batch = 50;
    bool no_checkpoint = false;
};

int run_memory(const MemoryArgs& a) {
    const auto config = gateway_config_from_json(read_json(a.gateway), std::filesystem::path(a.gateway).parent_path());
    auto gw = make_gateway(config);
    BuildOptions options;
    options.owner_name = a.owner_name;
    options.batch_size = a.batch;
    options.model = config.chat.model;
    if (!a.no_checkpoint) options.checkpoint = a.checkpoint.empty() ? a.out + ".checkpoint" : a.checkpoint;
    auto result = build_store(read_conversation_file(a.conversations), *gw, options);
    result.store.save(a.out);
    if (options.checkpoint) std::filesystem::remove(*options.checkpoint);

    const auto problems = validate_store(result.store);
    for (const auto& p : problems) std::cerr << "invariant: " << p << '\n';
    const auto& r = result.report;
    std::cerr << "nodes: " << result.store.tier(kFirstOrder).size() << '/' << result.store.tier(kSecondOrder).size()
              << '/' << result.store.tier(kTopOrder).size() << "; skipped " << r.skipped_conversations.size()
              << ", retries " << r.retries << ", dropped refs " << r.dropped_refs << '\n';
    return problems.empty() ? 0 : 1;
}

struct ServeArgs {
    std::string roster, prompts, store, host = "0.0.0.0";
    int port = 8080;
    std::uint64_t seed = 0;
    double session_seconds = 180.0;
};

ArenaServer* g_server = nullptr;

int run_serve(const ServeArgs& a) {
    ArenaConfig config;
    config.seed = a.seed;
    config.store_dir = a.store;
    config.session_ms = static_cast<std::int64_t>(a.session_seconds * 1000.0);
    Arena arena(config, load_roster(a.roster), load_prompt_pool(a.prompts), std::make_shared<SystemClock>(),
                file_interlocutor_factory());
    ArenaServer server(arena);
    g_server = &server;
    std::signal(SIGINT, [](int) {
        if (g_server) g_server->stop();
    });
    std::signal(SIGTERM, [](int) {
        if (g_server) g_server->stop();
    });
    std::cerr << "arena listening on " << a.host << ':' << a.port << '\n';
    server.serve(a.host, a.port);
    g_server = nullptr;
    return 0;
}

struct AnalyzeArgs {
    std::string store, csv;
    std::size_t iterations = 10'000;
    std::uint64_t seed = 0;
};

int run_analyze(const AnalyzeArgs& a) {
    const auto report = build_report(load_trajectory_store(a.store), {a.iterations, a.seed});
    write_report(std::cout, report);
    if (!a.csv.empty()) {
        auto out = open_out(a.csv);
        write_csv(out, report);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Build impersonation datasets and memories, run blind chat sessions, analyse verdicts."};
    app.require_subcommand(1);
    std::function<int()> action;

    IngestArgs ingest;
    auto* ingest_cmd = app.add_subcommand("ingest", "Parse a message export into filtered conversations");
    ingest_cmd->add_option("--input", ingest.input, "Export file")->required();
    ingest_cmd->add_option("--format", ingest.format, "Export format id (jsonl, tsv)")->capture_default_str();
    ingest_cmd->add_option("--gap-hours", ingest.gap_hours, "Silence that starts a new conversation (default 6)")
        ->check(CLI::PositiveNumber);
    ingest_cmd->add_option("--policy", ingest.policy, "Quality policy JSON");
    ingest_cmd->add_option("--consent", ingest.consent, "Consent ledger JSON");
    ingest_cmd->add_option("--owner", ingest.owner, "Sender id of the impersonated person");
    ingest_cmd->add_option("--out", ingest.out, "Conversations JSONL output")->required();
    ingest_cmd->callback([&] { action = [&] { return run_ingest(ingest); }; });

    DatasetArgs dataset;
    auto* dataset_cmd = app.add_subcommand("dataset", "Fine-tuning datasets");
    dataset_cmd->require_subcommand(1);
    auto* dataset_build = dataset_cmd->add_subcommand("build", "Build a capped training set");
    dataset_build->add_option("--in", dataset.in, "Conversations JSONL")->required();
    dataset_build->add_option("--owner", dataset.owner, "Sender id of the impersonated person")->required();
    dataset_build->add_option("--tier", dataset.tier, "B500, B4K or BFull")->capture_default_str();
    dataset_build->add_option("--out", dataset.out, "Examples JSONL output")->required();
    dataset_build->add_option("--emit-config", dataset.emit_config, "Write the fine-tune config JSON here");
    dataset_build->add_option("--cap", dataset.cap, "Override the tier's example cap");
    dataset_build->callback([&] { action = [&] { return run_dataset(dataset); }; });

    MemoryArgs memory;
    auto* memory_cmd = app.add_subcommand("memory", "Hierarchical memory stores");
    memory_cmd->require_subcommand(1);
    auto* memory_build = memory_cmd->add_subcommand("build", "Build a memory store from conversations");
    memory_build->add_option("--conversations", memory.conversations, "Conversations JSONL")->required();
    memory_build->add_option("--out", memory.out, "Store JSON output")->required();
    memory_build->add_option("--gateway", memory.gateway, "Gateway config JSON")->required();
    memory_build->add_option("--batch", memory.batch, "Conversations per checkpoint")->capture_default_str();
    memory_build->add_option("--owner-name", memory.owner_name, "How memories refer to the owner")
        ->capture_default_str();
    memory_build->add_option("--checkpoint", memory.checkpoint, "Checkpoint path (default <out>.checkpoint)");
    memory_build->add_flag("--no-checkpoint", memory.no_checkpoint, "Disable checkpointing");
    memory_build->callback([&] { action = [&] { return run_memory(memory); }; });

    ServeArgs serve;
    auto* arena_cmd = app.add_subcommand("arena", "Blind evaluation sessions");
    arena_cmd->require_subcommand(1);
    auto* arena_serve = arena_cmd->add_subcommand("serve", "Run the session server");
    arena_serve->add_option("--roster", serve.roster, "Roster JSON")->required();
    arena_serve->add_option("--prompts", serve.prompts, "Prompt pool JSON")->required();
    arena_serve->add_option("--store", serve.store, "Trajectory store directory")->required();
    arena_serve->add_option("--port", serve.port, "Listen port")->capture_default_str();
    arena_serve->add_option("--host", serve.host, "Listen address")->capture_default_str();
    arena_serve->add_option("--seed", serve.seed, "Seed for prompt draws and reply timing")->capture_default_str();
    arena_serve->add_option("--session-seconds", serve.session_seconds, "Session length")->capture_default_str();
    arena_serve->callback([&] { action = [&] { return run_serve(serve); }; });

    AnalyzeArgs analyze;
    auto* analyze_cmd = app.add_subcommand("analyze", "Verdict statistics");
    analyze_cmd->require_subcommand(1);
    auto* analyze_report = analyze_cmd->add_subcommand("report", "Print the metrics table");
    analyze_report->add_option("--store", analyze.store, "Trajectory store directory")->required();
    analyze_report->add_option("--csv", analyze.csv, "Also write the table as CSV");
    analyze_report->add_option("--iterations", analyze.iterations, "Monte Carlo permutations")
        ->capture_default_str();
    analyze_report->add_option("--seed", analyze.seed, "Permutation seed")->capture_default_str();
    analyze_report->callback([&] { action = [&] { return run_analyze(analyze); }; });

    CLI11_PARSE(app, argc, argv);
    try {
        return action ? action() : 0;
    } catch (const Error& e) {
        std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << '\n';
        return e.code() == ErrorCode::StoreCorrupt ? 3 : 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
