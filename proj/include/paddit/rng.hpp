#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace paddit {

// splitmix64 finalizer; used both as a seed scrambler and to combine
// seed components into independent per-chain streams.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ splitmix64(b + 0x632be59bd9b4e019ULL));
}

template <typename... Rest>
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, Rest... rest) {
  return mix_seed(mix_seed(a, b), static_cast<std::uint64_t>(rest)...);
}

// Deterministic RNG stream. The uniform and normal transforms are spelled
// out here (rather than using std::*_distribution) so that a given seed
// produces the same stream on every standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform in (0, 1]; safe as a log() argument.
  double uniform01_open() { return 1.0 - uniform01(); }

  // Standard normal via Box-Muller. The sine-branch twin is discarded to
  // keep the stream stateless.
  double normal() {
    const double u1 = uniform01_open();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace paddit
