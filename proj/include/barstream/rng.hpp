#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace barstream {

// All randomness flows through std::mt19937_64 instances seeded from a master
// seed plus a purpose tag, so every stage of a run is reproducible on its own.
using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Derives an independent stream seed from a base seed and a few indices
// (stage number, prompt index, sample index, ...).
inline std::uint64_t mix_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) {
    std::uint64_t s = splitmix64(base);
    for (std::uint64_t p : parts) s = splitmix64(s ^ p);
    return s;
}

inline int rand_index(Rng& rng, int n) {
    return static_cast<int>(std::uniform_int_distribution<int>(0, n - 1)(rng));
}

inline double rand_unit(Rng& rng) {
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline double rand_normal(Rng& rng, double mean, double stddev) {
    return std::normal_distribution<double>(mean, stddev)(rng);
}

} // namespace barstream
