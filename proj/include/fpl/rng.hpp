#pragma once

#include <cmath>
#include <cstdint>

namespace fpl {

// Counter-based generator: every output is a pure function of
// (seed, stream, counter), so per-sample streams stay reproducible no
// matter how work is scheduled across threads.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream)
      : seed_(seed), stream_(stream) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

  // Derive an independent child stream, e.g. one per sample index.
  RngStream substream(std::uint64_t id) const {
    return RngStream(seed_, mix(stream_ ^ 0x94d049bb133111ebULL, id));
  }

  std::uint64_t next_u64() { return mix(mix(seed_, stream_), counter_++); }

  // Uniform in [0, 1).
  float next_float() {
    return static_cast<float>(next_u64() >> 40) * (1.0f / 16777216.0f);
  }
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
  }

  float uniform(float lo, float hi) { return lo + (hi - lo) * next_float(); }

  // Unbiased-enough for desk-scale n (n << 2^64).
  std::uint64_t next_below(std::uint64_t n) { return n ? next_u64() % n : 0; }

  bool bernoulli(float p) { return next_float() < p; }

  float normal() {
    // Box-Muller; consumes two draws per pair, caches the second.
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = next_double();
    } while (u1 <= 1e-300);
    u2 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586 * u2;
    spare_ = static_cast<float>(r * std::sin(a));
    have_spare_ = true;
    return static_cast<float>(r * std::cos(a));
  }

  // Marsaglia-Tsang for shape >= 1; boosted for shape < 1.
  double gamma(double shape) {
    if (shape < 1.0) {
      double u;
      do {
        u = next_double();
      } while (u <= 0.0);
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    double d = shape - 1.0 / 3.0;
    double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      double u = next_double();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v)))
        return d * v;
    }
  }

  double beta(double a, double b) {
    double x = gamma(a);
    double y = gamma(b);
    return x / (x + y);
  }

 private:
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    // splitmix64 finalizer over a golden-ratio combine.
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
  float spare_ = 0.0f;
  bool have_spare_ = false;
};

}  // namespace fpl
