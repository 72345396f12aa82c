#pragma once

#include <cstdint>
#include <random>

namespace dfe::detail {

// Portable draws from a 64-bit engine; the standard distributions are
// implementation-defined, these are not.

inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

inline std::uint64_t uniform_index(std::mt19937_64& rng, std::uint64_t n) { return rng() % n; }

template <class Vec>
void shuffle(Vec& v, std::mt19937_64& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const std::size_t k = static_cast<std::size_t>(uniform_index(rng, i));
        std::swap(v[i - 1], v[k]);
    }
}

} // namespace dfe::detail
