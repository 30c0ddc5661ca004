#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>

namespace abstractnet {

/// SplitMix64 finalizer. Bijective on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Hashes a seed together with an ordered key path into a new seed.
/// The result depends only on (seed, keys), never on generator state, so
/// children derived from the same parent are independent of derivation order.
std::uint64_t derive_seed(std::uint64_t seed, std::span<const std::uint64_t> keys) noexcept;

inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) noexcept {
  return derive_seed(seed, std::span<const std::uint64_t>(keys.begin(), keys.size()));
}

/// Counter-based SplitMix64 generator.
///
/// Output k (0-based) is mix64(seed + (k + 1) * golden_gamma); the state is a
/// single counter, so sequences are identical on every platform. Floating
/// point draws use the top 53 bits: u = (x >> 11) * 2^-53 in [0, 1).
class SeededRng {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  explicit SeededRng(std::uint64_t seed) noexcept : seed_(seed), state_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() noexcept {
    state_ += kGamma;
    return mix64(state_);
  }

  /// Uniform on [0, 1).
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform on [lo, hi). Requires lo < hi.
  double uniform(double lo, double hi);

  /// Uniform integer on [lo, hi] (inclusive). Requires lo <= hi.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  /// Child generator seeded by derive_seed(seed(), keys).
  SeededRng split(std::initializer_list<std::uint64_t> keys) const noexcept {
    return SeededRng(derive_seed(seed_, keys));
  }

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
};

}  // namespace abstractnet
