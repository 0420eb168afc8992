#pragma once

#include <boost/random/mersenne_twister.hpp>

#include <cstdint>

namespace gbm {

using Rng = boost::random::mt19937_64;

// Named sub-streams so each component's draws are reproducible on their own.
enum class Stream : std::uint64_t {
    Init = 1,
    Covariates = 2,
    Parameters = 3,
    Outcomes = 4,
    Test = 5,
};

// SplitMix64 finalizer; used to derive well-separated seeds.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Generator for (seed, stream, replicate). Distinct triples give independent-looking streams.
inline Rng make_rng(std::uint64_t seed, Stream stream, std::uint64_t replicate = 0) {
    const std::uint64_t s =
        mix64(mix64(mix64(seed) ^ static_cast<std::uint64_t>(stream)) ^ (replicate * 0xd1b54a32d192ed03ULL));
    return Rng(s);
}

}  // namespace gbm
