#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "rarl/errors.hpp"

namespace rarl {

// All stochastic components draw through the helpers below instead of
// <random> distribution objects, whose output is implementation-defined.
// The transforms here are fixed, so a given seed yields the same stream
// on every platform.
using Rng = std::mt19937_64;

// splitmix64 finalizer; also the documented hash for deriving per-batch
// and per-group seeds from a run seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return mix_seed(mix_seed(seed, a), b);
}

// Uniform in [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform_real(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

// Standard normal via Box-Muller; draws two uniforms per call.
inline double normal01(Rng& rng) {
  double u1 = uniform01(rng);
  double u2 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

// Index into a normalized probability vector.
inline std::size_t sample_categorical(Rng& rng, const std::vector<double>& probs) {
  const double u = uniform01(rng);
  double cum = 0.0;
  for (std::size_t i = 0; i + 1 < probs.size(); ++i) {
    cum += probs[i];
    if (u < cum) return i;
  }
  return probs.empty() ? 0 : probs.size() - 1;
}

}  // namespace rarl
