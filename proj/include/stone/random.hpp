#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace stone {

using RandomSource = std::mt19937_64;

/// Uniform integer in [lo, hi]. Portable across standard libraries, unlike
/// std::uniform_int_distribution.
inline std::int64_t uniform_int(RandomSource& rng, std::int64_t lo, std::int64_t hi)
{
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) {
        return static_cast<std::int64_t>(rng());
    }
    const std::uint64_t limit = RandomSource::max() - RandomSource::max() % span;
    std::uint64_t draw = rng();
    while (draw >= limit) {
        draw = rng();
    }
    return lo + static_cast<std::int64_t>(draw % span);
}

/// Uniform double in [0, 1).
inline double uniform_real(RandomSource& rng)
{
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform_real(RandomSource& rng, double lo, double hi)
{
    return lo + (hi - lo) * uniform_real(rng);
}

/// Standard normal via Box-Muller.
inline double normal(RandomSource& rng)
{
    constexpr double kTwoPi = 6.283185307179586476925286766559;
    double u1 = uniform_real(rng);
    while (u1 <= 0.0) {
        u1 = uniform_real(rng);
    }
    const double u2 = uniform_real(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

/// splitmix64 step; derives independent child seeds from a master seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream)
{
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace stone
