#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace mswt {

// Deterministic random source. The raw engine is std::mt19937_64 (its output
// sequence is pinned by the standard), and all mappings to doubles are done
// here by hand because the std::*_distribution adapters are allowed to differ
// between library implementations.
struct Rng {
  std::mt19937_64 eng;

  explicit Rng(uint64_t seed) : eng(seed) {}

  // [0,1) with 53 uniform bits.
  double u01() { return (double)(eng() >> 11) * 0x1.0p-53; }

  double uniform(double a, double b) { return a + (b - a) * u01(); }

  // [0,n)
  int uniform_int(int n) {
    int i = (int)(u01() * n);
    return i < n ? i : n - 1;
  }

  // Standard normal via Box-Muller. Both uniforms are drawn every call (no
  // cached second value), so the engine position after k calls never depends
  // on call-site history.
  double gauss() {
    double u1 = u01();
    while (u1 == 0.0) u1 = u01();
    double u2 = u01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }
};

// splitmix64 finalizer; good avalanche, used to derive independent seed
// streams from structured keys like (seed, split, video, frame).
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t stream_seed(std::initializer_list<uint64_t> parts) {
  uint64_t h = 0x6a09e667f3bcc908ull;
  for (uint64_t p : parts) h = mix64(h ^ p);
  return h;
}

}  // namespace mswt
