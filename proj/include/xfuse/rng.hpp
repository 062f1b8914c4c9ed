#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include "xfuse/hash.hpp"

namespace xfuse {

// Deterministic seeded random stream: xoshiro256** seeded via splitmix64.
// All derived draws (uniform, normal, bounded int) are computed from raw
// 64-bit outputs with fixed arithmetic, so a given (seed, draw sequence)
// is bit-reproducible across runs and platforms.
class RngStream {
  public:
    static constexpr const char* kAlgorithm = "xoshiro256ss";

    explicit RngStream(uint64_t seed, std::string_view tag = {}) : user_seed_(seed) {
        seed_ = tag.empty() ? seed : splitmix(seed ^ fnv1a64(tag));
        uint64_t x = seed_;
        for (auto& s : state_) s = splitmix_next(x);
        if ((state_[0] | state_[1] | state_[2] | state_[3]) == 0) state_[0] = 1;
    }

    uint64_t seed() const { return user_seed_; }
    uint64_t draws() const { return draws_; }

    // Derives an independent stream; deterministic in (seed, tag).
    RngStream fork(std::string_view tag) const { return RngStream(seed_, tag); }

    uint64_t next_u64() {
        ++draws_;
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // (0, 1]
    double uniform_open() {
        return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; consumes exactly two draws.
    double normal() {
        const double u1 = uniform_open();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Unbiased integer in [0, n); rejection sampling.
    int bounded(int n) {
        const uint64_t un = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return static_cast<int>(x % un);
    }

    bool bernoulli(double p) { return uniform() < p; }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    static uint64_t splitmix_next(uint64_t& x) {
        uint64_t z = (x += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    static uint64_t splitmix(uint64_t x) { return splitmix_next(x); }

    uint64_t state_[4];
    uint64_t user_seed_ = 0;
    uint64_t seed_ = 0;
    uint64_t draws_ = 0;
};

}  // namespace xfuse
