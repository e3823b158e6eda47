#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace mt {

// Deterministic splitmix64 generator. We do not use <random> distributions:
// their output is implementation-defined, and reproducibility across
// toolchains matters more here than statistical finesse.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in (0, 1); safe for log().
    double uniform_open() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Box-Muller; draws two uniforms per normal for a fixed consumption rate.
    double normal() {
        double u1 = uniform_open();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

    // i in [0, n).
    uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    // Stable stream derivation: hash the parent seed with a list of labels so
    // (seed, asset, t)-keyed tasks are independent of scheduling order.
    static uint64_t derive(uint64_t seed, std::initializer_list<uint64_t> parts) {
        uint64_t h = seed ^ 0x9e3779b97f4a7c15ULL;
        for (uint64_t p : parts) {
            h ^= p + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
            Rng mix(h);
            h = mix.next_u64();
        }
        return h;
    }

    static uint64_t hash_str(const char* s) {
        // FNV-1a
        uint64_t h = 1469598103934665603ULL;
        for (; *s; ++s) h = (h ^ static_cast<uint64_t>(*s)) * 1099511628211ULL;
        return h;
    }

private:
    uint64_t state_;
};

} // namespace mt
