#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>

namespace longidiff {

/// splitmix64 finalizer. Used to derive decorrelated child seeds so that
/// consumers of nearby stream ids do not see correlated sequences.
inline uint64_t mix_seed(uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
  return mix_seed(base ^ mix_seed(stream));
}

/// Deterministic random source. The engine is std::mt19937_64, whose raw
/// output sequence is pinned by the standard; the distribution transforms
/// below are hand-rolled because std::uniform_real_distribution and
/// std::normal_distribution are implementation-defined and would break
/// cross-platform reproducibility of generated data and weight init.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed), seed_(seed) {}

  uint64_t next_u64() { return eng_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi], both ends inclusive. Rejection sampled,
  /// so the result is exactly unbiased.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (lo > hi) throw std::invalid_argument("Rng::uniform_int: lo > hi");
    uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
    if (range == 0) return static_cast<int64_t>(next_u64());  // full 64-bit span
    uint64_t limit = UINT64_MAX - UINT64_MAX % range;
    uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return lo + static_cast<int64_t>(v % range);
  }

  /// Standard normal via Box-Muller. The spare value is cached, so draws
  /// come in deterministic pairs.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Child generator with an independent stream. Derivation depends only on
  /// (seed, stream), not on how much of this generator was consumed.
  Rng derive(uint64_t stream) const { return Rng(derive_seed(seed_, stream)); }

  uint64_t seed() const { return seed_; }

 private:
  std::mt19937_64 eng_;
  uint64_t seed_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace longidiff
