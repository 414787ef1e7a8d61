#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "tokedit/common.hpp"

namespace tokedit {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Named substream derivation: all randomness in the project flows from a root
// seed through (name, index) pairs, so adding or reordering consumers in one
// module does not shift the streams of another.
inline uint64_t derive_seed(uint64_t root, const std::string& stream, uint64_t index = 0) {
  uint64_t h = fnv1a(stream, 0xcbf29ce484222325ull ^ splitmix64(root));
  return splitmix64(h ^ (0x9e3779b97f4a7c15ull * (index + 1)));
}

// mt19937_64 with hand-rolled distributions. The engine is pinned by the
// standard; std::uniform_*_distribution is not, and dataset bytes must be
// reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, n) without modulo bias.
  uint64_t uniform_u64(uint64_t n) {
    TOKEDIT_CHECK(n > 0, Error, "uniform_u64: n must be positive");
    uint64_t threshold = (0 - n) % n;
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  int uniform_int(int lo, int hi_inclusive) {
    TOKEDIT_CHECK(lo <= hi_inclusive, Error, "uniform_int: empty range");
    return lo + static_cast<int>(uniform_u64(static_cast<uint64_t>(hi_inclusive - lo) + 1));
  }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  float uniform_f(float lo, float hi) { return static_cast<float>(uniform(lo, hi)); }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; second sample cached.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = 0.0;
    while (u1 == 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

  float normal_f(float mean, float stddev) { return mean + stddev * static_cast<float>(normal()); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; i--) {
      size_t j = uniform_u64(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

inline Rng substream(uint64_t root, const std::string& name, uint64_t index = 0) {
  return Rng(derive_seed(root, name, index));
}

}  // namespace tokedit
