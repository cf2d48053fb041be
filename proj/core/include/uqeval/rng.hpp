#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <vector>

namespace uqeval {

// SplitMix64 mixing step. Used to derive independent stream seeds so that
// parallel and serial runs draw identical numbers per work item.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Seed for the index-th substream of a run seed.
inline std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t index) {
    return splitmix64(splitmix64(seed) ^ splitmix64(index + 0x51ed2701289fe123ULL));
}

// Unbiased draw in [0, n) by rejection. std::uniform_int_distribution is
// implementation-defined, so results would not be reproducible across
// standard libraries.
inline std::uint64_t bounded_uint(std::mt19937_64& gen, std::uint64_t n) {
    const std::uint64_t rem =
        (std::numeric_limits<std::uint64_t>::max() % n + 1) % n;  // 2^64 mod n
    std::uint64_t x = gen();
    if (rem != 0) {
        const std::uint64_t last_accepted = std::numeric_limits<std::uint64_t>::max() - rem;
        while (x > last_accepted) x = gen();
    }
    return x % n;
}

// Uniform double in [0, 1) with 53 random bits.
inline double uniform_double(std::mt19937_64& gen) {
    return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

// Fisher-Yates with explicit bounded draws; byte-identical across platforms.
template <typename T>
void deterministic_shuffle(std::vector<T>& v, std::mt19937_64& gen) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(bounded_uint(gen, i));
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace uqeval
