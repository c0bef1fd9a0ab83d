#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>

namespace vicl {

// xoshiro256++ with splitmix64 seeding. We roll our own generator instead of
// <random> because std::normal_distribution is implementation-defined and the
// state must serialize into checkpoints byte-exactly.
class Rng {
public:
    Rng() : Rng(0x9e3779b97f4a7c15ULL) {}

    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& si : s_) {
            // splitmix64
            x += 0x9e3779b97f4a7c15ULL;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            si = z ^ (z >> 31);
        }
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0,1)
    double uniform() { return (double)(next_u64() >> 11) * 0x1.0p-53; }

    // uniform in [0,1]-open-below, used where log() must not see 0
    double uniform_pos() { return ((double)(next_u64() >> 11) + 1.0) * 0x1.0p-53; }

    // integer in [0, n)
    uint64_t below(uint64_t n) { return next_u64() % n; }

    // standard normal via Box-Muller, no cached spare so the state is just s_[4]
    double normal() {
        double u1 = uniform_pos();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    // derived stream for per-item work, order-independent
    Rng fork(uint64_t index) const {
        return Rng(s_[0] ^ (0x632be59bd9b4e019ULL * (index + 1)));
    }

    static constexpr size_t kStateBytes = 4 * sizeof(uint64_t);

    void save_state(uint8_t out[kStateBytes]) const { std::memcpy(out, s_.data(), kStateBytes); }
    void load_state(const uint8_t in[kStateBytes]) { std::memcpy(s_.data(), in, kStateBytes); }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<uint64_t, 4> s_{};
};

}  // namespace vicl
