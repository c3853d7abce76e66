#pragma once

// Portable random streams.
//
// Every stochastic step draws from a NormalStream keyed by a 64-bit seed that
// is derived from (master seed, stage tag, iteration, index...). The recipe is
// fixed so that an out-of-process prior can reproduce the same draws:
//
//   state_0  = seed
//   state_i  = state_{i-1} + 0x9E3779B97F4A7C15          (splitmix64)
//   u64_i    = mix64(state_i)
//   uniform  = (u64 >> 11) * 2^-53                        in [0, 1)
//   normal pair from (u1, u2): r = sqrt(-2 ln(1 - u1)), (r cos 2πu2, r sin 2πu2)
//
// derive_seed folds each key k into h as h = mix64(h ^ (k + C + (h << 6) + (h >> 2))).

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <span>

namespace psi3d {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> keys) noexcept {
  std::uint64_t h = mix64(master + kGolden);
  for (std::uint64_t k : keys) h = mix64(h ^ (k + kGolden + (h << 6) + (h >> 2)));
  return h;
}

/// Stage tags used as the first key of derive_seed.
enum class StreamTag : std::uint64_t {
  degrade = 1,
  likelihood = 2,
  prior = 3,
  tv = 4,
  cover = 5,
  phantom = 6,
  subsample = 7,
};

inline std::uint64_t derive_seed(std::uint64_t master, StreamTag tag, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = derive_seed(master, {static_cast<std::uint64_t>(tag)});
  for (std::uint64_t k : keys) h = mix64(h ^ (k + kGolden + (h << 6) + (h >> 2)));
  return h;
}

/// splitmix64 uniform bit generator; satisfies UniformRandomBitGenerator.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit constexpr SplitMix64(std::uint64_t seed = 0) noexcept : state_(seed) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return ~result_type{0}; }

  constexpr result_type operator()() noexcept {
    state_ += kGolden;
    return mix64(state_);
  }

  double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

 private:
  std::uint64_t state_;
};

/// Stream of scaled standard normal draws. A scale of 0 turns the stream into a
/// zero source (the "variance forced to 0" hook); a scale of -1 produces the
/// antithetic stream of the same seed.
class NormalStream {
 public:
  explicit NormalStream(std::uint64_t seed, double scale = 1.0) noexcept
      : seed_(seed), scale_(scale), bits_(seed) {}

  static NormalStream silent(std::uint64_t seed = 0) noexcept { return NormalStream(seed, 0.0); }

  std::uint64_t seed() const noexcept { return seed_; }
  double scale() const noexcept { return scale_; }

  double next() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return scale_ * spare_;
    }
    const double u1 = bits_.uniform();
    const double u2 = bits_.uniform();
    const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return scale_ * (r * std::cos(theta));
  }

  void fill(std::span<double> out) noexcept {
    for (double& v : out) v = next();
  }

  double uniform() noexcept { return bits_.uniform(); }

 private:
  std::uint64_t seed_;
  double scale_;
  SplitMix64 bits_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace psi3d
