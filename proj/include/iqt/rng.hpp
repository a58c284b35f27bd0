// SPDX-License-Identifier: Apache-2.0
//
// Deterministic random source. All sampling goes through explicit bit
// manipulation so a given seed reproduces the same stream on every build.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace iqt {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 bits of entropy.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). n must be > 0.
    std::size_t uniform_int(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller (no cached spare, one draw per call).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // Normal(0, std) resampled until within +/- 2 std.
    double truncated_normal(double std_dev) {
        for (;;) {
            double z = normal();
            if (std::fabs(z) <= 2.0) return z * std_dev;
        }
    }

private:
    std::mt19937_64 gen_;
};

} // namespace iqt
