#pragma once

#include <cstdint>
#include <random>

namespace rpnet {

using Rng = std::mt19937_64;

// splitmix64 finalizer; derives independent stream seeds from (base, lane)
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t lane) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (lane + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Canonical [0,1) from the top 53 bits. std::uniform_real_distribution is
// implementation-defined, so we roll our own for reproducible streams.
inline double uniform01(Rng& rng) {
    return double(rng() >> 11) * 0x1.0p-53;
}

inline double uniform_in(Rng& rng, double lo, double hi) {
    return lo + (hi - lo) * uniform01(rng);
}

// Unbiased integer in [0, n).
inline int uniform_int(Rng& rng, int n) {
    const std::uint64_t span = std::uint64_t(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t v;
    do {
        v = rng();
    } while (v >= limit);
    return int(v % span);
}

inline bool bernoulli(Rng& rng, double p) {
    return uniform01(rng) < p;
}

}  // namespace rpnet
