#include <benchmark/benchmark.h>

#include "fsqs/backbone.hpp"
#include "fsqs/learners.hpp"
#include "fsqs/rng.hpp"

namespace {

fsqs::Matrix random_batch(fsqs::Rng& rng, int n, int d) {
  fsqs::Matrix m(n, d);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < d; ++c) m(r, c) = rng.gaussian();
  }
  return m;
}

void BM_ForwardBackward(benchmark::State& state) {
  const auto batch_size = static_cast<int>(state.range(0));
  fsqs::BackboneConfig cfg;
  cfg.layer_sizes = {8, 64, 64, 16};
  fsqs::BackboneParams params = fsqs::init_backbone(cfg, 1);
  fsqs::Rng rng(2);
  const fsqs::Matrix batch = random_batch(rng, batch_size, 8);
  const fsqs::Matrix probe = random_batch(rng, batch_size, 16);
  for (auto _ : state) {
    fsqs::ForwardResult fr = fsqs::forward(params, batch, fsqs::BnMode::Transductive, true);
    benchmark::DoNotOptimize(fsqs::backward(params, fr.cache, probe));
  }
}
BENCHMARK(BM_ForwardBackward)->Arg(16)->Arg(45)->Arg(128);

void BM_EpisodePosterior(benchmark::State& state) {
  // Full transported-prototypes head on a 5-way 1-shot, 8-query episode.
  fsqs::Rng rng(3);
  const fsqs::Matrix support = random_batch(rng, 5, 16);
  const fsqs::Matrix queries = random_batch(rng, 40, 16);
  const std::vector<int> labels = {0, 1, 2, 3, 4};
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        fsqs::transported_prototypes_posterior(support, labels, 5, queries, {}));
  }
}
BENCHMARK(BM_EpisodePosterior);

}  // namespace

BENCHMARK_MAIN();
