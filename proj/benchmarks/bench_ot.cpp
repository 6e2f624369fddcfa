#include <benchmark/benchmark.h>

#include "fsqs/ot.hpp"
#include "fsqs/rng.hpp"

namespace {

fsqs::Matrix random_points(fsqs::Rng& rng, int n, int d) {
  fsqs::Matrix m(n, d);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < d; ++c) m(r, c) = rng.gaussian();
  }
  return m;
}

void BM_CostMatrix(benchmark::State& state) {
  fsqs::Rng rng(1);
  const auto n = static_cast<int>(state.range(0));
  const fsqs::Matrix s = random_points(rng, n, 16);
  const fsqs::Matrix q = random_points(rng, 4 * n, 16);
  for (auto _ : state) {
    benchmark::DoNotOptimize(fsqs::cost_matrix(s, q));
  }
}
BENCHMARK(BM_CostMatrix)->Arg(5)->Arg(25)->Arg(100);

void BM_Sinkhorn(benchmark::State& state) {
  fsqs::Rng rng(2);
  const auto n = static_cast<int>(state.range(0));
  const double eps = state.range(1) == 0 ? 0.05 : 1e-3;
  const fsqs::Matrix c = fsqs::cost_matrix(random_points(rng, n, 16), random_points(rng, 4 * n, 16));
  const fsqs::MarginalWeights w = fsqs::uniform_marginals(n, 4 * n);
  const fsqs::SinkhornConfig cfg{eps, 1000, 1e-9};  // default iteration budget
  for (auto _ : state) {
    benchmark::DoNotOptimize(fsqs::sinkhorn(c, w, cfg));
  }
}
BENCHMARK(BM_Sinkhorn)->Args({5, 0})->Args({25, 0})->Args({5, 1})->Args({25, 1});

void BM_TransportPipeline(benchmark::State& state) {
  // cost -> sinkhorn -> normalize -> barycentric map, episode-sized.
  fsqs::Rng rng(3);
  const fsqs::Matrix s = random_points(rng, 5, 16);
  const fsqs::Matrix q = random_points(rng, 40, 16);
  const fsqs::MarginalWeights w = fsqs::uniform_marginals(5, 40);
  for (auto _ : state) {
    const fsqs::Matrix c = fsqs::cost_matrix(s, q);
    const fsqs::TransportPlan plan = fsqs::sinkhorn(c, w, {});
    benchmark::DoNotOptimize(fsqs::barycentric_map(fsqs::row_normalize(plan), q));
  }
}
BENCHMARK(BM_TransportPipeline);

}  // namespace

BENCHMARK_MAIN();
