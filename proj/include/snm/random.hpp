#pragma once

#include <cstdint>
#include <initializer_list>
#include <limits>

namespace snm {

/// Small, cheaply seeded 64-bit generator (splitmix64). Satisfies
/// UniformRandomBitGenerator, so it plugs into <random> distributions.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

/// Mixes a base seed with any number of coordinates into an independent
/// sub-seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) {
  SplitMix64 mix(base);
  std::uint64_t h = mix();
  for (std::uint64_t p : parts) {
    SplitMix64 step(h ^ (p + 0x632be59bd9b4e019ULL));
    h = step();
  }
  return h;
}

// Fixed per-stage offsets applied to the single run seed.
namespace seed_offset {
inline constexpr std::uint64_t kSplit = 0;
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kTrain = 2;
inline constexpr std::uint64_t kValidation = 3;
inline constexpr std::uint64_t kEvaluation = 4;
}  // namespace seed_offset

}  // namespace snm
