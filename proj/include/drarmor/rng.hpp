#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace drarmor {

// splitmix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) noexcept {
  return mix64(mix64(mix64(a) ^ b) ^ c);
}

/// Seeded generator with platform-independent output.
///
/// The standard distributions are implementation-defined, so uniform, normal
/// and Laplace draws are derived here from raw mt19937_64 words. The same seed
/// gives the same stream with any conforming standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Modulo bias is negligible for the small n used here.
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Laplace(0, scale) by inverse CDF.
  double laplace(double scale) {
    double u = uniform() - 0.5;
    while (u == -0.5) u = uniform() - 0.5;
    const double sign = u < 0.0 ? -1.0 : 1.0;
    return -scale * sign * std::log1p(-2.0 * std::abs(u));
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace drarmor
