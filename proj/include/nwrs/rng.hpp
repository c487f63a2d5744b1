#pragma once

#include <cstdint>
#include <random>

namespace nwrs {

/// Stream tags keep independent consumers of one user seed from sharing draws.
enum class stream : std::uint64_t {
    init = 0x1001,
    data = 0x2002,
    shuffle = 0x3003,
    permutation = 0x4004,
    noise = 0x5005,
    projection = 0x6006,
    bits = 0x7007,
    monte_carlo = 0x8008,
    inputs = 0x9009,
};

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Engine for (seed, stream, counter). Counter-based so e.g. epoch k of a
/// training run draws the same shuffle no matter what ran before it.
inline std::mt19937_64 make_engine(std::uint64_t seed, stream s, std::uint64_t counter = 0) {
    const std::uint64_t key =
        splitmix64(splitmix64(seed ^ static_cast<std::uint64_t>(s)) + splitmix64(counter));
    std::seed_seq seq{static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32),
                      static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(counter)};
    return std::mt19937_64(seq);
}

}  // namespace nwrs
