#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>

namespace tokval {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a path of keys.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = splitmix64(base);
  for (std::uint64_t k : keys) h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
  return h;
}

/// Uniform double in [0, 1) built from the top 53 bits; identical on every platform.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Inverse-CDF draw from an (unnormalised is fine) categorical distribution.
inline std::size_t sample_categorical(std::span<const double> probs, Rng& rng) {
  double total = 0.0;
  for (double p : probs) total += p;
  const double u = uniform01(rng) * total;
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    acc += probs[i];
    last_positive = i;
    if (u < acc) return i;
  }
  return last_positive;
}

/// Standard normal via Box-Muller on uniform01, so streams do not depend on
/// the standard library's distribution implementation.
inline double standard_normal(Rng& rng) {
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

}  // namespace tokval
