#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace crdiff {

/// splitmix64 finaliser; used to derive independent named seeds from one root seed.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) { return mix_seed(mix_seed(a, b), c); }

using Rng = std::mt19937_64;

template <typename T = float>
std::vector<T> normal_vector(Rng& rng, std::size_t n) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(nd(rng));
  return v;
}

}  // namespace crdiff
