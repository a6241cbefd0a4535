// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace shapemoe {

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Deterministic stream RNG. The normal() spare is part of the serializable state
// so a restored stream continues bit-exactly.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    // Sub-stream seed for sample `index` of a corpus seeded with `seed`.
    static uint64_t derive(uint64_t seed, uint64_t index) {
        uint64_t s = seed ^ (0x9E3779B97F4A7C15ull * (index + 1));
        splitmix64(s);
        return splitmix64(s);
    }

    uint64_t next_u64() { return splitmix64(state_); }

    // [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n), Lemire's widening-multiply method.
    uint64_t below(uint64_t n) {
        while (true) {
            uint64_t x = next_u64();
            __uint128_t m = __uint128_t(x) * n;
            uint64_t lo = uint64_t(m);
            if (lo >= n || lo >= uint64_t(-n) % n) return uint64_t(m >> 64);
        }
    }

    // Standard normal via Box-Muller; the second draw is cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    uint64_t state() const { return state_; }
    bool have_spare() const { return have_spare_; }
    double spare() const { return spare_; }
    void restore(uint64_t state, bool have_spare, double spare) {
        state_ = state;
        have_spare_ = have_spare;
        spare_ = spare;
    }

private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace shapemoe
