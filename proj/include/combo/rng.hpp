#pragma once

// Deterministic, platform-independent random streams.
//
// std::mt19937 is portable but the <random> distributions are not
// (their algorithms are implementation-defined), and the dataset /
// training contracts here require bit-identical results across
// toolchains. PCG32 plus explicit conversions keeps every byte pinned.

#include <cstdint>
#include <cmath>

namespace combo {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

class Pcg32 {
public:
    explicit Pcg32(std::uint64_t seed, std::uint64_t stream = 0) {
        std::uint64_t s = seed;
        state_ = splitmix64(s);
        inc_ = (splitmix64(s) ^ (stream * 0x5851f42d4c957f2dull)) | 1ull;
        next_u32();
    }

    std::uint32_t next_u32() {
        std::uint64_t old = state_;
        state_ = old * 6364136223846793005ull + inc_;
        std::uint32_t xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
        std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
    }

    // Unbiased integer in [0, bound) via rejection.
    std::uint32_t next_below(std::uint32_t bound) {
        std::uint32_t threshold = (-bound) % bound;
        for (;;) {
            std::uint32_t r = next_u32();
            if (r >= threshold) return r % bound;
        }
    }

    int next_int(int lo, int hi) {  // inclusive range
        return lo + static_cast<int>(next_below(static_cast<std::uint32_t>(hi - lo + 1)));
    }

    double next_double() {  // [0,1)
        return static_cast<double>(next_u32() >> 8) * (1.0 / 16777216.0);
    }

    float next_float() {  // [0,1)
        return static_cast<float>(next_u32() >> 8) * (1.0f / 16777216.0f);
    }

    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Box-Muller, one value per call (the pair's sibling is discarded so the
    // stream position does not depend on call parity).
    double next_gaussian() {
        double u1 = next_double();
        double u2 = next_double();
        while (u1 <= 1e-12) u1 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

private:
    std::uint64_t state_;
    std::uint64_t inc_;
};

// Child stream derivation: hash the (seed, index...) tuple so parallel and
// serial generation agree bit-for-bit.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t s = base ^ (a * 0x9e3779b97f4a7c15ull) ^ (b * 0xc2b2ae3d27d4eb4full);
    return splitmix64(s);
}

}  // namespace combo
