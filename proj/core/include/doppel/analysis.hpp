#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "doppel/arena.hpp"

namespace doppel {

// A statistic with its standard error. An absent se means the error is
// undefined (a single observation).
struct Estimate {
    double value = 0.0;
    std::optional<double> se;
};

// 100 * k / n with binomial SE. Throws Error(EmptyInput) when n is 0.
Estimate pass_rate(std::size_t human_guesses, std::size_t n);
Estimate pass_rate(std::span<const Verdict> verdicts);

// Mean rating with SE = sample SD (n - 1) / sqrt(n). Throws Error(EmptyInput).
Estimate humanness_stats(std::span<const int> ratings);

// Average ranks (1-based), ties share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> values);

std::optional<double> pearson(std::span<const double> x, std::span<const double> y);

// Rank correlation with average-rank ties. nullopt when either side has zero
// variance. Throws Error(LengthMismatch) or Error(EmptyInput) for n < 2.
std::optional<double> spearman(std::span<const double> x, std::span<const double> y);

inline constexpr std::size_t kExhaustiveLimit = 12;

// Two-sided p-value for |mean(a) - mean(b)| under label permutation.
// Exhaustive over all C(n, |a|) splits when n <= 12, else Monte Carlo with
// p = (hits + 1) / (iterations + 1). Throws Error(EmptyInput).
double permutation_test(std::span<const int> a, std::span<const int> b, std::size_t iterations = 10'000,
                        std::uint64_t seed = 0);

// Exhaustive null distribution: each distinct |mean difference| with its
// probability. Throws Error(InvalidArgument) above kExhaustiveLimit.
std::map<double, double> permutation_distribution(std::span<const int> a, std::span<const int> b);

struct TrajectoryStore {
    std::vector<SessionRecord> sessions;
    std::vector<ParticipantProfile> participants;
};

// Reads trajectories.jsonl (required) and participants.jsonl (optional) from
// a store directory. Throws Error(StoreCorrupt).
TrajectoryStore load_trajectory_store(const std::filesystem::path& dir);

inline constexpr const char* kHumanRow = "Human";

struct MetricsRow {
    std::string config;
    std::size_t n = 0;
    Estimate pass_rate;
    Estimate humanness;
    std::optional<Estimate> stylistic;
    std::optional<Estimate> contextual;
    std::optional<double> p_value;  // humanness vs the Human row
};

struct ReasonCounts {
    std::map<std::string, std::size_t> positive;  // guessed human
    std::map<std::string, std::size_t> negative;  // guessed AI
};

struct Correlation {
    std::string variable;
    std::string outcome;
    std::size_t n = 0;
    std::optional<double> rho;
};

struct Report {
    std::vector<MetricsRow> rows;  // configs in first-seen order, Human last
    std::map<std::string, ReasonCounts> reasons;
    std::vector<Correlation> correlations;
    std::size_t excluded = 0;
};

struct ReportOptions {
    std::size_t iterations = 10'000;
    std::uint64_t seed = 0;
};

Report build_report(const TrajectoryStore& store, const ReportOptions& options = {});

// "44.44 ±4.78"; undefined parts render as "—".
std::string format_estimate(const Estimate& e);
std::string format_optional(const std::optional<double>& v, int precision = 2);

void write_report(std::ostream& out, const Report& report);
void write_csv(std::ostream& out, const Report& report);

}  // namespace doppel
