#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace wtaspike {

// Splitmix64. Every random decision in the toolkit flows from one of these,
// seeded from a single run seed, so results are reproducible across builds
// and platforms (no dependence on std::mt19937 distribution internals).
class SplitMix64 {
public:
    explicit SplitMix64(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) {
        return lo + (hi - lo) * next_double();
    }

    // uniform integer in [0, n), n >= 1; rejection-free modulo is fine at these scales
    uint64_t next_below(uint64_t n) {
        return next_u64() % n;
    }

    // standard normal via Box-Muller
    double next_gaussian() {
        double u1 = next_double();
        double u2 = next_double();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // derive an independent stream for a named sub-purpose
    SplitMix64 fork(uint64_t stream_id) {
        SplitMix64 s(state_ ^ (0x9e3779b97f4a7c15ULL * (stream_id + 1)));
        s.next_u64();
        return s;
    }

private:
    uint64_t state_;
};

// k distinct indices drawn uniformly from [0, n), in selection order
inline std::vector<size_t> sample_without_replacement(SplitMix64& rng, size_t n, size_t k) {
    std::vector<size_t> pool(n);
    for (size_t i = 0; i < n; ++i) pool[i] = i;
    std::vector<size_t> out;
    out.reserve(k);
    for (size_t i = 0; i < k && i < n; ++i) {
        size_t j = i + static_cast<size_t>(rng.next_below(n - i));
        std::swap(pool[i], pool[j]);
        out.push_back(pool[i]);
    }
    return out;
}

} // namespace wtaspike
