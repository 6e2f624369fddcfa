#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace fsqs {

/// Deterministic RNG built on the standardized mt19937_64 sequence, with
/// hand-rolled real/normal draws. std::uniform_real_distribution and
/// std::normal_distribution are implementation-defined, which would break
/// byte-identical dataset regeneration across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (stateless: two fresh uniforms per draw).
  double gaussian() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  /// Uniform integer in [0, n), unbiased via rejection.
  std::uint64_t uniform_int(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = gen_();
    while (x >= limit) x = gen_();
    return x % n;
  }

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[uniform_int(i)]);
    }
  }

  /// k distinct values from [0, n) in draw order.
  std::vector<int> sample_without_replacement(int n, int k) {
    std::vector<int> pool(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
    shuffle(pool);
    pool.resize(static_cast<std::size_t>(k));
    return pool;
  }

 private:
  std::mt19937_64 gen_;
};

/// splitmix64 mix of a base seed and a stream index; used to derive
/// independent per-episode / per-domain generators from one run seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace fsqs
