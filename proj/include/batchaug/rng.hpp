#pragma once

// Counter-based splittable generator. Output i of a stream with seed s is
// mix64(s + i * golden), i.e. SplitMix64 addressed by counter, so any
// (seed, counter) pair is reproducible in isolation.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

#include "batchaug/errors.hpp"

namespace batchaug {

inline constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class RngStream {
 public:
  static constexpr std::string_view algorithm_id = "splitmix64-counter-v1";
  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

  constexpr RngStream() = default;
  constexpr explicit RngStream(std::uint64_t seed, std::uint64_t counter = 0) noexcept
      : seed_(seed), counter_(counter) {}

  [[nodiscard]] constexpr std::uint64_t seed() const noexcept { return seed_; }
  [[nodiscard]] constexpr std::uint64_t counter() const noexcept { return counter_; }

  constexpr std::uint64_t next_u64() noexcept {
    ++counter_;
    return mix64(seed_ + counter_ * kGolden);
  }

  /// Child stream keyed by (seed, counter, label). Does not advance the parent.
  [[nodiscard]] constexpr RngStream split(std::uint64_t label) const noexcept {
    std::uint64_t h = mix64(seed_ ^ 0x6a09e667f3bcc909ULL);
    h = mix64(h + counter_ * kGolden);
    h = mix64(h ^ (label * 0xd1342543de82ef95ULL + 0x3c6ef372fe94f82bULL));
    return RngStream(h);
  }
  [[nodiscard]] constexpr RngStream split(std::string_view label) const noexcept {
    return split(fnv1a64(label));
  }
  [[nodiscard]] constexpr RngStream split(std::string_view label, std::uint64_t index) const noexcept {
    return split(label).split(index);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) {
    detail::require(lo < hi, "uniform: lo must be < hi");
    double v = lo + (hi - lo) * uniform();
    return v < hi ? v : std::nextafter(hi, lo);
  }

  /// Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    detail::require(n > 0, "below: n must be positive");
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  double normal() noexcept {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  friend constexpr bool operator==(const RngStream&, const RngStream&) = default;

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace batchaug
