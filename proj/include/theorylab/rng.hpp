#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace theorylab {

using rng_t = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent stream for (base seed, index). Used for per-run and per-purpose
/// streams so results never depend on scheduling order.
inline rng_t derive_stream(std::uint64_t base, std::uint64_t index) {
  return rng_t(splitmix64(splitmix64(base) ^ splitmix64(index + 0x632be59bd9b4e019ULL)));
}

/// Uniform on [0, 1) with 53 random bits.
inline double uniform01(rng_t& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Index drawn from unnormalized nonnegative weights.
inline std::size_t sample_categorical(std::span<const double> weights, rng_t& rng) {
  double total = 0.0;
  for (double w : weights) total += w;
  const double u = uniform01(rng) * total;
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    acc += weights[i];
    last_positive = i;
    if (u < acc) return i;
  }
  return last_positive;
}

}  // namespace theorylab
