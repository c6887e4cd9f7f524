#include "doppel/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>

#include <nlohmann/json.hpp>

#include "doppel/error.hpp"

namespace doppel {

Estimate pass_rate(std::size_t human_guesses, std::size_t n) {
    if (n == 0) throw Error(ErrorCode::EmptyInput, "pass rate needs at least one verdict");
    if (human_guesses > n) throw Error(ErrorCode::InvalidArgument, "more human guesses than verdicts");
    const double p = static_cast<double>(human_guesses) / static_cast<double>(n);
    return {100.0 * p, 100.0 * std::sqrt(p * (1.0 - p) / static_cast<double>(n))};
}

Estimate pass_rate(std::span<const Verdict> verdicts) {
    const auto k = static_cast<std::size_t>(
        std::count_if(verdicts.begin(), verdicts.end(), [](const Verdict& v) { return v.guess_human; }));
    return pass_rate(k, verdicts.size());
}

Estimate humanness_stats(std::span<const int> ratings) {
    if (ratings.empty()) throw Error(ErrorCode::EmptyInput, "humanness needs at least one rating");
    const double n = static_cast<double>(ratings.size());
    double mean = 0.0;
    for (const int r : ratings) mean += r;
    mean /= n;
    if (ratings.size() == 1) return {mean, std::nullopt};
    double ss = 0.0;
    for (const int r : ratings) ss += (r - mean) * (r - mean);
    return {mean, std::sqrt(ss / (n - 1.0)) / std::sqrt(n)};
}

std::vector<double> average_ranks(std::span<const double> values) {
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(values.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
        const double rank = (static_cast<double>(i + j) / 2.0) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
        i = j + 1;
    }
    return ranks;
}

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw Error(ErrorCode::LengthMismatch, "pearson inputs differ in length");
    if (x.size() < 2) throw Error(ErrorCode::EmptyInput, "pearson needs at least two pairs");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return std::nullopt;
    return sxy / std::sqrt(sxx * syy);
}

std::optional<double> spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw Error(ErrorCode::LengthMismatch, "spearman inputs differ in length");
    if (x.size() < 2) throw Error(ErrorCode::EmptyInput, "spearman needs at least two pairs");
    const auto rx = average_ranks(x);
    const auto ry = average_ranks(y);
    const auto distinct = [](std::vector<double> r) {
        std::sort(r.begin(), r.end());
        return std::adjacent_find(r.begin(), r.end()) == r.end();
    };
    if (distinct(rx) && distinct(ry)) {
        const double n = static_cast<double>(x.size());
        double d2 = 0.0;
        for (std::size_t i = 0; i < rx.size(); ++i) d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
        return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
    }
    return pearson(rx, ry);
}

namespace {

void require_groups(std::span<const int> a, std::span<const int> b) {
    if (a.empty() || b.empty()) throw Error(ErrorCode::EmptyInput, "permutation test needs two non-empty groups");
}

// |mean(a) - mean(b)| scaled by |a|*|b| so comparisons stay in integers.
std::int64_t scaled_gap(std::int64_t sum_a, std::int64_t total, std::int64_t na, std::int64_t nb) {
    const std::int64_t sum_b = total - sum_a;
    return std::llabs(sum_a * nb - sum_b * na);
}

// Calls visit(sum of the chosen |a| values) for every |a|-subset of pooled.
template <typename Visit>
void for_each_split(const std::vector<int>& pooled, std::size_t na, Visit&& visit) {
    std::vector<std::size_t> idx(na);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::size_t n = pooled.size();
    while (true) {
        std::int64_t s = 0;
        for (const auto i : idx) s += pooled[i];
        visit(s);
        std::size_t k = na;
        while (k > 0 && idx[k - 1] == n - na + (k - 1)) --k;
        if (k == 0) return;
        ++idx[k - 1];
        for (std::size_t j = k; j < na; ++j) idx[j] = idx[j - 1] + 1;
    }
}

}  // namespace

std::map<double, double> permutation_distribution(std::span<const int> a, std::span<const int> b) {
    require_groups(a, b);
    if (a.size() + b.size() > kExhaustiveLimit)
        throw Error(ErrorCode::InvalidArgument, "exhaustive enumeration is limited to 12 observations");
    std::vector<int> pooled(a.begin(), a.end());
    pooled.insert(pooled.end(), b.begin(), b.end());
    const auto total = std::accumulate(pooled.begin(), pooled.end(), std::int64_t{0});
    const auto na = static_cast<std::int64_t>(a.size());
    const auto nb = static_cast<std::int64_t>(b.size());
    std::map<std::int64_t, std::size_t> counts;
    std::size_t splits = 0;
    for_each_split(pooled, a.size(), [&](std::int64_t s) {
        ++counts[scaled_gap(s, total, na, nb)];
        ++splits;
    });
    std::map<double, double> out;
    for (const auto& [gap, c] : counts)
        out[static_cast<double>(gap) / static_cast<double>(na * nb)] =
            static_cast<double>(c) / static_cast<double>(splits);
    return out;
}

double permutation_test(std::span<const int> a, std::span<const int> b, std::size_t iterations, std::uint64_t seed) {
    require_groups(a, b);
    std::vector<int> pooled(a.begin(), a.end());
    pooled.insert(pooled.end(), b.begin(), b.end());
    const auto total = std::accumulate(pooled.begin(), pooled.end(), std::int64_t{0});
    const auto na = static_cast<std::int64_t>(a.size());
    const auto nb = static_cast<std::int64_t>(b.size());
    const auto observed = scaled_gap(std::accumulate(a.begin(), a.end(), std::int64_t{0}), total, na, nb);

    if (pooled.size() <= kExhaustiveLimit) {
        std::size_t hits = 0, splits = 0;
        for_each_split(pooled, a.size(), [&](std::int64_t s) {
            if (scaled_gap(s, total, na, nb) >= observed) ++hits;
            ++splits;
        });
        return static_cast<double>(hits) / static_cast<double>(splits);
    }

    std::mt19937_64 rng(seed);
    std::size_t hits = 0;
    for (std::size_t it = 0; it < iterations; ++it) {
        // Partial Fisher-Yates: only the first |a| slots matter.
        for (std::size_t i = 0; i < a.size(); ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng() % (pooled.size() - i));
            std::swap(pooled[i], pooled[j]);
        }
        const auto s = std::accumulate(pooled.begin(), pooled.begin() + na, std::int64_t{0});
        if (scaled_gap(s, total, na, nb) >= observed) ++hits;
    }
    return static_cast<double>(hits + 1) / static_cast<double>(iterations + 1);
}

TrajectoryStore load_trajectory_store(const std::filesystem::path& dir) {
    TrajectoryStore store;
    const auto read_lines = [](const std::filesystem::path& path, auto&& each) {
        std::ifstream in(path);
        if (!in) throw Error(ErrorCode::StoreCorrupt, "cannot read " + path.string());
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (trim(line).empty()) continue;
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                throw Error(ErrorCode::StoreCorrupt,
                            path.filename().string() + ":" + std::to_string(lineno) + ": " + e.what());
            }
            each(j);
        }
    };
    const auto trajectories = dir / "trajectories.jsonl";
    if (!std::filesystem::exists(trajectories))
        throw Error(ErrorCode::StoreCorrupt, "no trajectories.jsonl in " + dir.string());
    read_lines(trajectories, [&](const nlohmann::json& j) { store.sessions.push_back(session_record_from_json(j)); });

    const auto participants = dir / "participants.jsonl";
    if (std::filesystem::exists(participants)) {
        read_lines(participants, [&](const nlohmann::json& j) {
            try {
                store.participants.push_back(participant_from_json(j));
            } catch (const std::exception& e) {
                throw Error(ErrorCode::StoreCorrupt, std::string("invalid participant record: ") + e.what());
            }
        });
    }
    return store;
}

namespace {

struct Group {
    std::vector<Verdict> verdicts;
    std::vector<int> ratings;
    std::vector<int> stylistic;
    std::vector<int> contextual;
};

std::string row_key(const SessionRecord& r) {
    return r.interlocutor.kind == InterlocutorKind::Human ? std::string(kHumanRow) : r.interlocutor.id;
}

}  // namespace

Report build_report(const TrajectoryStore& store, const ReportOptions& options) {
    Report report;
    std::vector<std::string> order;
    std::map<std::string, Group> groups;
    for (const auto& r : store.sessions) {
        if (r.excluded || r.state == SessionState::Aborted) {
            ++report.excluded;
            continue;
        }
        if (!r.verdict) continue;
        const auto key = row_key(r);
        if (!groups.contains(key) && key != kHumanRow) order.push_back(key);
        auto& g = groups[key];
        g.verdicts.push_back(*r.verdict);
        g.ratings.push_back(r.verdict->rating);
        (r.prompt.category == PromptCategory::Stylistic ? g.stylistic : g.contextual).push_back(r.verdict->rating);
        auto& counts = report.reasons[key];
        for (const auto& reason : r.verdict->reasons)
            ++(r.verdict->guess_human ? counts.positive : counts.negative)[reason];
    }
    if (groups.contains(kHumanRow)) order.emplace_back(kHumanRow);

    const Group* human = groups.contains(kHumanRow) ? &groups.at(kHumanRow) : nullptr;
    for (const auto& key : order) {
        const auto& g = groups.at(key);
        MetricsRow row;
        row.config = key;
        row.n = g.verdicts.size();
        row.pass_rate = pass_rate(g.verdicts);
        row.humanness = humanness_stats(g.ratings);
        if (!g.stylistic.empty()) row.stylistic = humanness_stats(g.stylistic);
        if (!g.contextual.empty()) row.contextual = humanness_stats(g.contextual);
        if (human && key != kHumanRow)
            row.p_value = permutation_test(g.ratings, human->ratings, options.iterations, options.seed);
        report.rows.push_back(std::move(row));
    }

    // Per-participant outcomes against questionnaire answers.
    struct Outcome {
        std::size_t sessions = 0, correct = 0;
        std::vector<int> ai_ratings;
    };
    std::map<std::string, Outcome> outcomes;
    for (const auto& r : store.sessions) {
        if (r.excluded || r.state == SessionState::Aborted || !r.verdict) continue;
        auto& o = outcomes[r.participant];
        const bool human_partner = r.interlocutor.kind == InterlocutorKind::Human;
        ++o.sessions;
        if (r.verdict->guess_human == human_partner) ++o.correct;
        if (!human_partner) o.ai_ratings.push_back(r.verdict->rating);
    }
    using Getter = std::optional<double> (*)(const ParticipantProfile&);
    const std::vector<std::pair<std::string, Getter>> variables{
        {"age", [](const ParticipantProfile& p) { return p.age ? std::optional<double>(*p.age) : std::nullopt; }},
        {"closeness",
         [](const ParticipantProfile& p) { return p.closeness ? std::optional<double>(*p.closeness) : std::nullopt; }},
        {"text_frequency",
         [](const ParticipantProfile& p) {
             return p.text_frequency ? std::optional<double>(*p.text_frequency) : std::nullopt;
         }},
        {"ai_familiarity", [](const ParticipantProfile& p) { return std::optional<double>(p.ai_familiarity); }},
        {"played_before",
         [](const ParticipantProfile& p) {
             return p.played_before ? std::optional<double>(*p.played_before ? 1.0 : 0.0) : std::nullopt;
         }},
    };
    for (const auto& [name, get] : variables) {
        for (const std::string outcome : {"accuracy", "ai_humanness"}) {
            std::vector<double> xs, ys;
            for (const auto& p : store.participants) {
                const auto it = outcomes.find(p.id);
                const auto x = get(p);
                if (it == outcomes.end() || !x) continue;
                const auto& o = it->second;
                if (outcome == "accuracy") {
                    xs.push_back(*x);
                    ys.push_back(static_cast<double>(o.correct) / static_cast<double>(o.sessions));
                } else if (!o.ai_ratings.empty()) {
                    xs.push_back(*x);
                    ys.push_back(humanness_stats(o.ai_ratings).value);
                }
            }
            Correlation c{name, outcome, xs.size(), std::nullopt};
            if (xs.size() >= 2) c.rho = spearman(xs, ys);
            report.correlations.push_back(std::move(c));
        }
    }
    return report;
}

std::string format_optional(const std::optional<double>& v, int precision) {
    if (!v) return "—";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", precision, *v == 0.0 ? 0.0 : *v);
    return buf;
}

std::string format_estimate(const Estimate& e) {
    return format_optional(e.value) + " ±" + format_optional(e.se);
}

namespace {

// Column widths count code points so "±" and "—" align.
std::size_t display_width(std::string_view s) {
    std::size_t cps = 0;
    for (const unsigned char c : s)
        if ((c & 0xC0) != 0x80) ++cps;
    return cps;
}

std::string pad(std::string s, std::size_t width) {
    const auto w = display_width(s);
    if (w < width) s.append(width - w, ' ');
    return s;
}

std::string csv_field(std::string s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (const char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + '"';
}

std::string csv_number(const std::optional<double>& v) { return v ? format_optional(v, 4) : std::string(); }

}  // namespace

void write_report(std::ostream& out, const Report& report) {
    const std::vector<std::string> header{"Config", "n", "Pass Rate (%)", "Humanness", "Styl.", "Cont.", "p-value"};
    std::vector<std::vector<std::string>> table{header};
    for (const auto& r : report.rows) {
        table.push_back({r.config, std::to_string(r.n), format_estimate(r.pass_rate), format_estimate(r.humanness),
                         r.stylistic ? format_estimate(*r.stylistic) : "—",
                         r.contextual ? format_estimate(*r.contextual) : "—", format_optional(r.p_value, 3)});
    }
    std::vector<std::size_t> widths(header.size(), 0);
    for (const auto& row : table)
        for (std::size_t i = 0; i < row.size(); ++i) widths[i] = std::max(widths[i], display_width(row[i]));
    for (const auto& row : table) {
        std::string line;
        for (std::size_t i = 0; i < row.size(); ++i) line += pad(row[i], widths[i] + 2);
        while (!line.empty() && line.back() == ' ') line.pop_back();
        out << line << '\n';
    }
    if (report.excluded) out << "\nexcluded sessions: " << report.excluded << '\n';

    out << "\nReasons (guessed human / guessed AI)\n";
    for (const auto& r : report.rows) {
        const auto it = report.reasons.find(r.config);
        out << "  " << r.config << ':';
        for (const auto code : kReasonCodes) {
            const std::string key(code);
            std::size_t pos = 0, neg = 0;
            if (it != report.reasons.end()) {
                if (auto p = it->second.positive.find(key); p != it->second.positive.end()) pos = p->second;
                if (auto n = it->second.negative.find(key); n != it->second.negative.end()) neg = n->second;
            }
            out << ' ' << key << ' ' << pos << '/' << neg;
        }
        out << '\n';
    }

    if (!report.correlations.empty()) {
        out << "\nSpearman correlations\n";
        for (const auto& c : report.correlations)
            out << "  " << c.variable << " ~ " << c.outcome << ": rho=" << format_optional(c.rho, 3) << " (n=" << c.n
                << ")\n";
    }
}

void write_csv(std::ostream& out, const Report& report) {
    out << "config,n,pass_rate,pass_rate_se,humanness,humanness_se,stylistic,stylistic_se,contextual,contextual_se,"
           "p_value\n";
    for (const auto& r : report.rows) {
        out << csv_field(r.config) << ',' << r.n << ',' << csv_number(r.pass_rate.value) << ','
            << csv_number(r.pass_rate.se) << ',' << csv_number(r.humanness.value) << ',' << csv_number(r.humanness.se)
            << ',' << (r.stylistic ? csv_number(r.stylistic->value) : "") << ','
            << (r.stylistic ? csv_number(r.stylistic->se) : "") << ','
            << (r.contextual ? csv_number(r.contextual->value) : "") << ','
            << (r.contextual ? csv_number(r.contextual->se) : "") << ',' << csv_number(r.p_value) << '\n';
    }
}

}  // namespace doppel
