#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "roboscape/common.hpp"

namespace rs {

// xoshiro256** seeded through splitmix64. Self-contained so that streams are
// bit-identical across platforms and standard library versions.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& w : s_) w = splitmix64(x);
  }

  // Independent substream, e.g. rng.fork("batch", step).
  Rng fork(std::string_view tag, uint64_t n = 0) const {
    uint64_t h = fnv1a(tag);
    h = fnv1a(&n, sizeof(n), h);
    uint64_t mix = s_[0] ^ (s_[2] + 0x9e3779b97f4a7c15ull);
    h = fnv1a(&mix, sizeof(mix), h);
    return Rng(h);
  }

  uint64_t next() {
    const uint64_t r = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return r;
  }

  // Uniform in [0,1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller without a cached spare: deterministic call-for-call.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  // Unbiased integer in [0, n).
  uint64_t below(uint64_t n) {
    RS_CHECK(n > 0, "Rng::below: n must be positive");
    const uint64_t lim = UINT64_MAX - UINT64_MAX % n;
    uint64_t v = next();
    while (v >= lim) v = next();
    return v % n;
  }

  int index(int n) { return static_cast<int>(below(static_cast<uint64_t>(n))); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // Permutation of 0..n-1 with no fixed point (rejection sampling; n >= 2).
  std::vector<int> derangement(int n) {
    RS_CHECK(n >= 2, "derangement undefined for n < 2");
    std::vector<int> p(n);
    while (true) {
      for (int i = 0; i < n; ++i) p[i] = i;
      shuffle(p);
      bool ok = true;
      for (int i = 0; i < n; ++i) {
        if (p[i] == i) {
          ok = false;
          break;
        }
      }
      if (ok) return p;
    }
  }

 private:
  static uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t s_[4];
};

}  // namespace rs
