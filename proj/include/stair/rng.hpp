#pragma once

#include <cmath>
#include <cstdint>
#include <string>

namespace stair {

// Counter-based deterministic generator. Every stochastic site in the
// project draws from a named substream of one root seed, so runs are
// reproducible bit-for-bit across platforms (no std::*_distribution, whose
// output is implementation-defined).
//
// A stream is keyed by (seed, name); values come from splitmix64 applied to
// an incrementing counter.
class Rng {
 public:
  Rng(uint64_t seed, const std::string& stream)
      : key_(mix(mix(seed ^ 0x9e3779b97f4a7c15ull) ^ fnv1a(stream))), counter_(0) {}

  uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  uint64_t uniform_int(uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller (one value per call, deterministic).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double uniform_range(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  static uint64_t fnv1a(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    return h;
  }

 private:
  static uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t key_;
  uint64_t counter_;
};

}  // namespace stair
