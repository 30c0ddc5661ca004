#include "abstractnet/rng.hpp"

#include <cmath>
#include <limits>

#include "abstractnet/error.hpp"

namespace abstractnet {

std::uint64_t derive_seed(std::uint64_t seed, std::span<const std::uint64_t> keys) noexcept {
  std::uint64_t h = mix64(seed ^ 0x6A09E667F3BCC909ULL);
  for (std::uint64_t key : keys) {
    h = mix64(h + SeededRng::kGamma + mix64(key ^ 0xBB67AE8584CAA73BULL));
  }
  return h;
}

double SeededRng::uniform(double lo, double hi) {
  if (!(lo < hi)) {
    throw RangeError("uniform: require lo < hi");
  }
  const double v = lo + (hi - lo) * uniform();
  // lo + (hi - lo) * u can round up to hi when the interval is tiny.
  return v < hi ? v : std::nextafter(hi, lo);
}

std::int64_t SeededRng::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (lo > hi) {
    throw RangeError("uniform_int: require lo <= hi");
  }
  const std::uint64_t span = static_cast<std::uint64_t>(hi) - static_cast<std::uint64_t>(lo) + 1;
  if (span == 0) {
    return static_cast<std::int64_t>(next_u64());
  }
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % span;
  std::uint64_t x = next_u64();
  while (x >= limit) {
    x = next_u64();
  }
  return lo + static_cast<std::int64_t>(x % span);
}

}  // namespace abstractnet
