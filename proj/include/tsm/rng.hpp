#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace tsm {

// Seeded generator with portable distributions: the library's own
// normal/gamma sampling keeps streams identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Seed for a named sub-stream, so that consumers of one stream never
  // shift another.
  static std::uint64_t derive(std::uint64_t seed, std::string_view stream) {
    std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
    for (unsigned char c : stream) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    return splitmix(seed ^ splitmix(h));
  }
  static Rng stream(std::uint64_t seed, std::string_view name) { return Rng(derive(seed, name)); }

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next() % n; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double th = 6.283185307179586476925 * u2;
    spare_ = r * std::sin(th);
    has_spare_ = true;
    return r * std::cos(th);
  }

  // Standard normal resampled until within +-2, then rescaled so the
  // truncated distribution has standard deviation `stddev` (support is
  // +-2.27 stddev).
  double truncated_normal(double stddev) {
    constexpr double kTruncatedStd = 0.87962566103423978;  // std of N(0,1) cut at +-2
    for (;;) {
      const double z = normal();
      if (std::abs(z) <= 2.0) return z * (stddev / kTruncatedStd);
    }
  }

  // Gamma(shape, 1) by Marsaglia-Tsang.
  double gamma(double shape) {
    if (shape < 1.0) {
      const double u = uniform();
      return gamma(shape + 1.0) * std::pow(u > 0 ? u : 0x1.0p-53, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = 0.0, v = 0.0;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

 private:
  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace tsm
