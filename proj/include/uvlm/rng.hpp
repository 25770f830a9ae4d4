#pragma once

#include <cmath>
#include <cstdint>

namespace uvlm {

// Counter-based 64-bit generator. Value i under key k is
// mix64(k ^ (GAMMA * (i + 1))), where mix64 is the splitmix64 finalizer
// and GAMMA is the golden-ratio increment. Every draw is a pure function
// of (key, counter), so streams can be forked with `stream()` and replayed
// exactly on any platform. All distributions below use explicit arithmetic
// only; std::random engines and distributions are never used.
class Rng {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;

  explicit Rng(std::uint64_t key) : key_(mix64(key ^ 0xA0761D6478BD642Full)) {}

  // Independent substream: deterministic function of (key, label).
  Rng stream(std::uint64_t label) const {
    Rng r(0);
    r.key_ = mix64(key_ ^ mix64(label ^ kGamma));
    return r;
  }

  static std::uint64_t mix64(std::uint64_t x) {
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ull;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBull;
    x ^= x >> 31;
    return x;
  }

  std::uint64_t at(std::uint64_t i) const { return mix64(key_ ^ (kGamma * (i + 1))); }

  std::uint64_t next() { return at(counter_++); }

  // Uniform in [0,1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased-enough integer in [0, n) via 128-bit multiply-shift.
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  // Integer in [lo, hi) — half-open.
  std::int64_t range(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo)));
  }

  // Box-Muller; consumes exactly two counter draws per call.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace uvlm
