#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace crft {

/// Seeded generator with platform-independent uniform and Gaussian draws.
/// std::normal_distribution differs between standard libraries, so the
/// Gaussian is produced here from raw engine output (Box-Muller).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Derives an independent stream seed from a base seed and a key path.
    static std::uint64_t derive(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
        std::uint64_t s = mix(seed ^ 0x9e3779b97f4a7c15ULL);
        for (std::uint64_t k : keys) s = mix(s ^ mix(k + 0x632be59bd9b4e019ULL));
        return s;
    }

    std::uint64_t next() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Rejection keeps the draw unbiased.
        const std::uint64_t limit = (~std::uint64_t{0} / n) * n;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        constexpr double two_pi = 6.283185307179586;
        spare_ = radius * std::sin(two_pi * u2);
        has_spare_ = true;
        return radius * std::cos(two_pi * u2);
    }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace crft
