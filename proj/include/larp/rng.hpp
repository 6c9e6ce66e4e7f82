#pragma once

// Seed derivation. Every randomized sequence/batch derives its own generator
// from (master seed, index) so work can be split or re-run in any order and
// still produce identical streams.

#include <cstdint>
#include <random>

namespace larp {

// splitmix64; good avalanche behavior, so consecutive indices give
// uncorrelated seeds.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t master, uint64_t a, uint64_t b = 0) {
  return splitmix64(splitmix64(master ^ 0x5851f42d4c957f2dull ^ a) + b);
}

inline std::mt19937_64 make_rng(uint64_t master, uint64_t a, uint64_t b = 0) {
  return std::mt19937_64(derive_seed(master, a, b));
}

}  // namespace larp
