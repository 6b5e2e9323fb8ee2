#ifndef POSEKIT_RNG_HPP
#define POSEKIT_RNG_HPP

#include <cstdint>
#include <random>

namespace posekit {

using Rng = std::mt19937_64;

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Derives an independent stream from (seed, stream id). Used wherever work is
// fanned out per-sample so that parallel generation stays reproducible.
inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream + 0x632be59bd9b4e019ull));
}

inline Rng make_rng(uint64_t seed, uint64_t stream = 0) {
  return Rng(derive_seed(seed, stream));
}

}  // namespace posekit

#endif
