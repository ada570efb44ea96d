#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace remem {

/// Counter-based SplitMix64. Draw i of stream `seed` is
///   mix(seed + (i + 1) * 0x9E3779B97F4A7C15)
/// where mix is the SplitMix64 finalizer, so any draw can be computed
/// directly from (seed, i) in any language.
inline std::uint64_t splitmix64_mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t counter_draw(std::uint64_t seed, std::uint64_t index) {
  return splitmix64_mix(seed + (index + 1) * 0x9E3779B97F4A7C15ULL);
}

/// Uniform double in [0, 1) from the top 53 bits of a draw.
inline double counter_uniform(std::uint64_t seed, std::uint64_t index) {
  return static_cast<double>(counter_draw(seed, index) >> 11) * 0x1.0p-53;
}

/// Standard normal number `index` of stream `seed` via Box-Muller on the
/// uniform pair (2*index, 2*index + 1), cosine branch only.
inline double counter_normal(std::uint64_t seed, std::uint64_t index) {
  const double u1 = 1.0 - counter_uniform(seed, 2 * index);  // (0, 1]
  const double u2 = counter_uniform(seed, 2 * index + 1);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Sequential convenience wrapper over the counter functions.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed) : seed_(seed) {}
  std::uint64_t next_u64() { return counter_draw(seed_, counter_++); }
  double uniform() { return counter_uniform(seed_, counter_++); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal() { return counter_normal(seed_, counter_++); }
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

/// Derives an independent stream seed from a parent seed and a tag.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  return splitmix64_mix(seed ^ splitmix64_mix(tag + 0x632BE59BD9B4E019ULL));
}

}  // namespace remem
