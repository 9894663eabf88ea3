#pragma once

#include <cmath>
#include <cstdint>

namespace lmlx {

// Stateless counter-based RNG. Every draw is a pure function of (key, counter),
// so randomized code is reproducible regardless of evaluation order or thread
// count. The mixer is the splitmix64 finalizer.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t rng_u64(uint64_t key, uint64_t counter) {
    return mix64(mix64(key) ^ mix64(counter ^ 0x2545f4914f6cdd1dull));
}

// Seed derivation for independent sub-streams (e.g. one per sampled candidate).
inline uint64_t derive_seed(uint64_t base, uint64_t index) {
    return rng_u64(base, index);
}

// Uniform in [0, 1), 53 random bits.
inline double rng_uniform(uint64_t key, uint64_t counter) {
    return static_cast<double>(rng_u64(key, counter) >> 11) * 0x1.0p-53;
}

// Standard normal via Box-Muller; consumes counters (2c, 2c+1).
inline double rng_normal(uint64_t key, uint64_t counter) {
    double u1 = rng_uniform(key, 2 * counter);
    double u2 = rng_uniform(key, 2 * counter + 1);
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace lmlx
