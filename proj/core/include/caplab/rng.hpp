#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace caplab {

// Deterministic, platform-independent RNG. Every random draw in the library
// flows from one global seed through named sub-streams so that interrupted
// runs can be resumed bit-for-bit: stream state is derived, never carried.
struct SplitMix64 {
  std::uint64_t state = 0;

  explicit SplitMix64(std::uint64_t seed) : state(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n = 0 returns 0.
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next() % n; }

  // One Box-Muller gaussian draw; consumes exactly two uniforms.
  double gaussian() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }
};

namespace detail {
inline std::uint64_t mix_round(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}
}  // namespace detail

// Derive the seed of a named sub-stream. Labels keep data/init/rollout
// streams statistically independent; the integer slots index step/sample.
inline std::uint64_t substream(std::uint64_t seed, std::string_view label,
                               std::uint64_t a = 0, std::uint64_t b = 0,
                               std::uint64_t c = 0) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a over the label
  for (char ch : label) {
    h ^= static_cast<unsigned char>(ch);
    h *= 1099511628211ull;
  }
  h = detail::mix_round(h ^ seed);
  h = detail::mix_round(h ^ (a + 0x9E3779B97F4A7C15ull));
  h = detail::mix_round(h ^ (b + 0xC2B2AE3D27D4EB4Full));
  h = detail::mix_round(h ^ (c + 0x165667B19E3779F9ull));
  return h;
}

}  // namespace caplab
