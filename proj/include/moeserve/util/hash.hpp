#pragma once

#include <cstdint>
#include <string_view>

namespace moeserve {

// FNV-1a 64-bit over raw bytes.
inline uint64_t fnv1a64(std::string_view data) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// SplitMix64 PRNG. Deterministic stream for a given seed.
class SplitMix64 {
 public:
  explicit SplitMix64(uint64_t seed) : state_(seed) {}

  uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 24 bits of resolution.
  double next_unit() { return static_cast<double>(next() >> 40) / 16777216.0; }

  // Uniform integer in [0, n).
  uint64_t next_below(uint64_t n) { return next() % n; }

 private:
  uint64_t state_;
};

}  // namespace moeserve
