#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace lara {

/// Deterministic random source. All randomness in the project flows through
/// this class so that a 64-bit seed fully determines datasets, parameter
/// initialization and batch order. Gaussian samples use Box-Muller on top of
/// mt19937_64 rather than std::normal_distribution, whose output is not
/// pinned down by the standard.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Integer uniform in [lo, hi] inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(gen_() % span);
  }

  /// Standard normal via Box-Muller, one cached sample.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

  /// Normal truncated to +-limit standard deviations (resampling).
  double truncated_normal(double limit = 2.0) {
    double z = normal();
    while (std::abs(z) > limit) z = normal();
    return z;
  }

 private:
  std::mt19937_64 gen_;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace lara
