// SPDX-License-Identifier: Apache-2.0
//
// Serial reference against the OpenMP kernels, plus one end-to-end forward
// pass and trace collection on the desk preset.
#include <benchmark/benchmark.h>

#include <vector>

#include "stmoe/analysis.hpp"
#include "stmoe/kernels.hpp"
#include "stmoe/model.hpp"

namespace k = stmoe::kernels;

namespace {

std::vector<float> random_f(std::size_t n, std::uint64_t seed) {
  stmoe::Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

std::vector<double> random_d(std::size_t n, std::uint64_t seed) {
  stmoe::Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

template <bool Parallel>
void BM_matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0)), d = static_cast<std::size_t>(state.range(1));
  const auto x = random_f(n * d, 1), w = random_f(d * d, 2);
  std::vector<float> y(n * d);
  for (auto _ : state) {
    if constexpr (Parallel) k::parallel::matmul<float>(x, w, y, n, d, d);
    else k::serial::matmul<float>(x, w, y, n, d, d);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * d * d));
}

template <bool Parallel>
void BM_matmul_at_acc(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0)), d = static_cast<std::size_t>(state.range(1));
  const auto x = random_f(n * d, 3), dy = random_f(n * d, 4);
  std::vector<float> g(d * d);
  for (auto _ : state) {
    if constexpr (Parallel) k::parallel::matmul_at_acc<float>(x, dy, g, n, d, d);
    else k::serial::matmul_at_acc<float>(x, dy, g, n, d, d);
    benchmark::DoNotOptimize(g.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * d * d));
}

template <bool Parallel>
void BM_cosine_distance(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t dim = 16;
  const auto p = random_d(n * dim, 5);
  std::vector<double> out(n * n);
  for (auto _ : state) {
    if constexpr (Parallel) k::parallel::cosine_distance_matrix(p, n, dim, out);
    else k::serial::cosine_distance_matrix(p, n, dim, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n));
}

template <bool Parallel>
void BM_silhouette(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto p = random_d(n * 16, 6);
  std::vector<double> dist(n * n), out(n);
  k::serial::cosine_distance_matrix(p, n, 16, dist);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % 3);
  for (auto _ : state) {
    if constexpr (Parallel) k::parallel::silhouette_samples(dist, n, labels, 3, {}, out);
    else k::serial::silhouette_samples(dist, n, labels, 3, {}, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n));
}

void BM_forward_desk(benchmark::State& state) {
  const stmoe::Model m(stmoe::ModelConfig::desk(1024), 7);
  std::vector<int> tokens(64);
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<int>((i * 37) % 1024);
  for (auto _ : state) benchmark::DoNotOptimize(m.forward(tokens, {}, stmoe::TraceLevel::Routing).logits.data());
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * tokens.size()));
}

void BM_collect_traces_desk(benchmark::State& state) {
  const stmoe::Model m(stmoe::ModelConfig::desk(1024), 7);
  std::vector<std::vector<int>> seqs(32, std::vector<int>(64));
  for (std::size_t s = 0; s < seqs.size(); ++s)
    for (std::size_t i = 0; i < 64; ++i) seqs[s][i] = static_cast<int>((s * 131 + i * 37) % 1024);
  for (auto _ : state) benchmark::DoNotOptimize(stmoe::collect_traces(m, seqs).n_tokens);
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 32 * 64));
}

}  // namespace

BENCHMARK(BM_matmul<false>)->Name("matmul/serial")->Args({512, 128})->Args({2048, 256});
BENCHMARK(BM_matmul<true>)->Name("matmul/parallel")->Args({512, 128})->Args({2048, 256})->UseRealTime();
BENCHMARK(BM_matmul_at_acc<false>)->Name("matmul_at_acc/serial")->Args({512, 128})->Args({2048, 256});
BENCHMARK(BM_matmul_at_acc<true>)->Name("matmul_at_acc/parallel")->Args({512, 128})->Args({2048, 256})->UseRealTime();
BENCHMARK(BM_cosine_distance<false>)->Name("cosine_distance/serial")->Arg(500)->Arg(1500);
BENCHMARK(BM_cosine_distance<true>)->Name("cosine_distance/parallel")->Arg(500)->Arg(1500)->UseRealTime();
BENCHMARK(BM_silhouette<false>)->Name("silhouette/serial")->Arg(500)->Arg(1500);
BENCHMARK(BM_silhouette<true>)->Name("silhouette/parallel")->Arg(500)->Arg(1500)->UseRealTime();
BENCHMARK(BM_forward_desk)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_collect_traces_desk)->Unit(benchmark::kMillisecond)->UseRealTime();

BENCHMARK_MAIN();
