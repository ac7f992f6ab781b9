#pragma once

// Seeded RNG streams. Every stochastic stage derives an independent stream
// from (seed, stream index) so that parallel execution order never changes
// results. Distribution sampling is implemented here (rather than with
// std::*_distribution) because the standard does not pin those algorithms
// and byte-identical reruns are part of the contract.

#include <cstdint>
#include <cmath>
#include <numbers>
#include <random>

namespace kneesight {

// SplitMix64 finalizer; good avalanche, used to scramble (seed, stream) pairs.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent engine seed for stream `stream` of a run seeded with `seed`.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x51ed2701a3c5e491ULL));
}

// Deterministic double-precision sampler over a mt19937_64 engine.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Standard normal via Box-Muller (two uniforms per draw, no cached state).
  double normal() {
    double u1 = 1.0 - uniform01();  // (0, 1]: keeps the log finite
    double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  // Uniform index in [0, n); 128-bit multiply avoids modulo bias.
  std::size_t index(std::size_t n) {
    return static_cast<std::size_t>(
        (static_cast<unsigned __int128>(engine_()) * n) >> 64);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace kneesight
