#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace equant {

// All randomness goes through these helpers instead of <random>
// distributions, whose output is implementation-defined. mt19937_64 itself
// is fully specified, so runs reproduce bit-for-bit across toolchains.

using Rng = std::mt19937_64;

// Uniform in [0, 1) with 53 bits.
inline double canonical(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * canonical(rng);
}

// Standard normal via Box-Muller. Draws two canonicals per call.
inline double normal(Rng& rng) {
  double u1 = canonical(rng);
  double u2 = canonical(rng);
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

// Uniform index in [0, n). Modulo bias is irrelevant at our sizes.
inline std::size_t rand_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(rng() % n);
}

// Deterministic Fisher-Yates; std::shuffle is implementation-defined.
template <typename Vec>
void shuffle(Rng& rng, Vec& v) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[rand_index(rng, i)]);
  }
}

// Stream-splitting: derive an independent seed from (base seed, stream id).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace equant
