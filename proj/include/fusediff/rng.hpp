#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fusediff {

using Rng = std::mt19937_64;

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline Rng make_rng(uint64_t seed) { return Rng(splitmix64(seed)); }

// Deterministic substream derivation: hash-chain the seed with a path of ids.
// Used so chains / steps / records get independent, reproducible streams.
inline Rng derive_rng(uint64_t seed, std::initializer_list<uint64_t> path) {
    uint64_t s = splitmix64(seed);
    for (uint64_t p : path) s = splitmix64(s ^ (p + 0x9e3779b97f4a7c15ull));
    return Rng(s);
}

inline double uniform01(Rng& rng) {
    // 53-bit mantissa draw in [0,1)
    return double(rng() >> 11) * 0x1.0p-53;
}

// Sample an index from an unnormalized non-negative weight vector.
// Tiny negative entries (endpoint rounding) are treated as zero.
int sample_weights(const double* w, int n, Rng& rng);

} // namespace fusediff
