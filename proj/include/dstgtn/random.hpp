#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace dstgtn {

/// 64-bit linear congruential generator (Knuth's MMIX constants, modulus 2^64).
///
///   state' = 6364136223846793005 * state + 1442695040888963407  (mod 2^64)
///
/// Every draw used for initialisation, shuffling and synthetic data goes through the
/// helpers below, which only read the high bits, so results are identical on every
/// platform. `std::uniform_*_distribution` is avoided because its algorithm is
/// implementation-defined.
class Lcg64 {
 public:
  using Engine = std::linear_congruential_engine<std::uint64_t, 6364136223846793005ULL,
                                                 1442695040888963407ULL, 0ULL>;

  explicit Lcg64(std::uint64_t seed) : engine_(seed ^ 0x9E3779B97F4A7C15ULL) { engine_.discard(4); }

  std::uint64_t next() { return engine_(); }

  /// Uniform double in [0, 1) from the top 53 bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, bound) from the high 32 bits (multiply-shift reduction).
  std::size_t below(std::size_t bound) {
    const std::uint64_t hi = next() >> 32;
    return static_cast<std::size_t>((hi * static_cast<std::uint64_t>(bound)) >> 32);
  }

  /// Standard normal via Box-Muller (one value per call).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  /// Fisher-Yates shuffle, highest index first.
  template <class V>
  void shuffle(std::vector<V>& items) {
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[below(i)]);
  }

 private:
  Engine engine_;
};

}  // namespace dstgtn
