#include <random>

#include <benchmark/benchmark.h>

#include "doppel/analysis.hpp"
#include "support/fixtures.hpp"

namespace {

using namespace doppel;

void BM_SearchTier(benchmark::State& state) {
    std::mt19937_64 rng(1);
    const auto store = testing::random_store(rng, static_cast<std::size_t>(state.range(0)), 64);
    Embedding q(64);
    std::normal_distribution<float> g;
    for (auto& x : q) x = g(rng);
    for (auto _ : state) benchmark::DoNotOptimize(store.search_tier(kFirstOrder, q, kMaxMemories));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_SearchTier)->Arg(500)->Arg(5'000)->Arg(50'000);

void BM_Segment(benchmark::State& state) {
    std::mt19937_64 rng(2);
    const auto stream = testing::random_stream(rng, static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(segment_conversations(stream, "me"));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Segment)->Arg(1'000)->Arg(100'000);

void BM_BuildExamples(benchmark::State& state) {
    std::mt19937_64 rng(3);
    std::vector<Conversation> convs;
    for (int i = 0; i < state.range(0); ++i)
        convs.push_back(testing::random_conversation(rng, "c" + std::to_string(i), i * 86'400, 40));
    for (auto _ : state) benchmark::DoNotOptimize(build_examples(convs, "me"));
}
BENCHMARK(BM_BuildExamples)->Arg(1'000);

void BM_Spearman(benchmark::State& state) {
    std::mt19937_64 rng(4);
    std::vector<double> x, y;
    for (int i = 0; i < state.range(0); ++i) {
        x.push_back(static_cast<double>(rng() % 7));
        y.push_back(static_cast<double>(rng() % 100));
    }
    for (auto _ : state) benchmark::DoNotOptimize(spearman(x, y));
}
BENCHMARK(BM_Spearman)->Arg(100)->Arg(10'000);

void BM_PermutationExhaustive(benchmark::State& state) {
    const std::vector<int> a{1, 2, 3, 5, 6, 7}, b{2, 2, 3, 5, 6, 7};
    for (auto _ : state) benchmark::DoNotOptimize(permutation_test(a, b));
}
BENCHMARK(BM_PermutationExhaustive);

void BM_PermutationMonteCarlo(benchmark::State& state) {
    std::mt19937_64 rng(5);
    std::vector<int> a, b;
    for (int i = 0; i < 108; ++i) a.push_back(1 + static_cast<int>(rng() % 7));
    for (int i = 0; i < 285; ++i) b.push_back(1 + static_cast<int>(rng() % 7));
    for (auto _ : state) benchmark::DoNotOptimize(permutation_test(a, b, 10'000, 1));
}
BENCHMARK(BM_PermutationMonteCarlo)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
