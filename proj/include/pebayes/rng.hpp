#pragma once

// Random number plumbing.  Everything downstream draws through one engine
// type so that runs are reproducible bit-for-bit on a given platform, and
// seed streams are derived, never reused, so that replications and methods
// stay independent when run in any order.

#include <cstdint>
#include <random>

namespace pebayes {

using Rng = std::mt19937_64;

// splitmix64 finalizer; good avalanche, cheap, and stable across platforms.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seed for sub-stream `stream` of the generator family rooted at `base`.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return splitmix64(splitmix64(base) ^ splitmix64(~stream));
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline double normal01(Rng& rng) {
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

// Gamma(shape, rate) draw; note std::gamma_distribution is parameterized by
// scale, hence the reciprocal.
inline double gamma_draw(Rng& rng, double shape, double rate) {
  return std::gamma_distribution<double>(shape, 1.0 / rate)(rng);
}

inline double beta_draw(Rng& rng, double a, double b) {
  const double x = gamma_draw(rng, a, 1.0);
  const double y = gamma_draw(rng, b, 1.0);
  return x / (x + y);
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace pebayes
