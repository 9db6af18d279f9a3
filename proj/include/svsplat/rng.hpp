#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace svsplat {

/// Counter-based deterministic generator. Draw i is a pure function of
/// (seed, i), so streams are identical on every platform and can be split
/// into independent child streams by key without consuming state.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

    uint64_t next_u64() { return mix(seed_ + 0x9e3779b97f4a7c15ull * ++counter_); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller; one fresh pair per call, no caching,
    /// so the stream position stays a pure function of the call count.
    double normal() {
        double u1 = uniform();
        const double u2 = uniform();
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Uniform index in [0, n). Modulo bias is irrelevant for n << 2^64;
    /// what matters here is cross-platform determinism.
    uint64_t index(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    bool bernoulli(double p) { return uniform() < p; }

    /// Independent child stream; callers typically key it by parameter name.
    Rng split(uint64_t key) const { return Rng(mix(seed_ ^ mix(key))); }
    Rng split(std::string_view name) const { return split(fnv1a(name)); }

    static uint64_t fnv1a(std::string_view s) {
        uint64_t h = 0xcbf29ce484222325ull;
        for (char c : s) {
            h ^= static_cast<uint8_t>(c);
            h *= 0x100000001b3ull;
        }
        return h;
    }

private:
    // splitmix64 finalizer
    static uint64_t mix(uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebull;
        z ^= z >> 31;
        return z;
    }

    uint64_t seed_;
    uint64_t counter_ = 0;
};

} // namespace svsplat
