#pragma once
// Counter-based deterministic RNG. Every random draw in the library is keyed
// by (seed, stream purpose, counter), so independent streams never interact:
// skipping one stream (e.g. perturbation noise when alpha == 0) leaves all
// other draws unchanged, and any draw can be reproduced in isolation.
#include <cmath>
#include <cstdint>
#include <numbers>

namespace sitar::rng {

// Stream purposes used across the library. Values are part of the on-disk /
// reproducibility contract: changing them changes every derived artifact.
enum class Purpose : std::uint64_t {
  kParamInit = 1,
  kShuffle = 2,
  kReparam = 3,
  kPerturb = 4,
  kDatasetProto = 5,
  kDatasetJitter = 6,
  kDatasetLabelFlip = 7,
  kDatasetColorFlip = 8,
  kMonteCarlo = 9,
  kEval = 10,
};

// SplitMix64 finalizer: a well-studied 64-bit mixing function.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t key(std::uint64_t seed, Purpose purpose, std::uint64_t idx) {
  return mix64(mix64(mix64(seed) ^ static_cast<std::uint64_t>(purpose)) ^ idx);
}

// Stateful stream over a fixed key; draws are mix64(key_state ++counter).
class Stream {
 public:
  Stream(std::uint64_t seed, Purpose purpose, std::uint64_t idx)
      : key_(key(seed, purpose, idx)) {}

  std::uint64_t next_u64() { return mix64(key_ + 0x632be59bd9b4e019ULL * ++counter_); }

  // Uniform in [0, 1).
  double next_uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_uniform(); }

  // Standard normal via Box-Muller (portable, unlike std::normal_distribution).
  double next_gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = next_uniform();
    const double u2 = next_uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  // Integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace sitar::rng
