#pragma once

#include <cmath>
#include <cstdint>

namespace vpl {

// Deterministic, self-contained RNG. Standard library distributions are
// implementation-defined, so uniform and gaussian draws are generated here
// to keep artifacts bit-reproducible across toolchains.
//
// Core generator is xoshiro256++ seeded through splitmix64. Independent
// streams are derived by hashing (seed, stream tag) so parallel episodes
// and per-sample noise draws never share state.

inline uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    Rng(uint64_t seed, uint64_t stream) { reseed(seed ^ mix_(stream)); }

    void reseed(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& word : state_) word = splitmix64(sm);
        cached_gauss_valid_ = false;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl_(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl_(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n).
    uint64_t below(uint64_t n) {
        // Rejection sampling keeps the distribution exact.
        const uint64_t threshold = (0 - n) % n;
        for (;;) {
            const uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    // Standard normal via Box-Muller (pair cached).
    double gauss() {
        if (cached_gauss_valid_) {
            cached_gauss_valid_ = false;
            return cached_gauss_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        cached_gauss_ = r * std::sin(theta);
        cached_gauss_valid_ = true;
        return r * std::cos(theta);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Derive an independent child stream.
    Rng fork(uint64_t tag) const {
        uint64_t sm = state_[0] ^ mix_(tag);
        return Rng(splitmix64(sm));
    }

private:
    static uint64_t rotl_(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    static uint64_t mix_(uint64_t v) {
        uint64_t sm = v + 0x632be59bd9b4e019ULL;
        return splitmix64(sm);
    }

    uint64_t state_[4] = {};
    double cached_gauss_ = 0.0;
    bool cached_gauss_valid_ = false;
};

// Stable stream tags for the major RNG consumers. Keeping them in one place
// documents which subsystems draw from which streams.
namespace rng_stream {
constexpr uint64_t kEnvReset = 0x01;
constexpr uint64_t kDemoCollect = 0x02;
constexpr uint64_t kTrainNoise = 0x03;
constexpr uint64_t kTrainWindow = 0x04;
constexpr uint64_t kSampler = 0x05;
constexpr uint64_t kInit = 0x06;
constexpr uint64_t kEval = 0x07;
constexpr uint64_t kCondDropout = 0x08;
}  // namespace rng_stream

}  // namespace vpl
