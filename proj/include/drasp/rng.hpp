#pragma once

#include <cstdint>
#include <cmath>

namespace drasp {

// xoshiro256** with splitmix64 seeding. We roll our own generator because
// std::uniform_*_distribution output is implementation-defined and we want
// bit-identical runs across toolchains.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t x = seed;
        for (auto& w : s_) {
            x += 0x9e3779b97f4a7c15ULL;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            w = z ^ (z >> 31);
        }
        has_gauss_ = false;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) {
        // multiply-shift; bias is < 2^-64 * n, irrelevant at our scales
        unsigned __int128 m = (unsigned __int128)next_u64() * n;
        return (uint64_t)(m >> 64);
    }

    int range(int lo, int hi_inclusive) {
        return lo + int(below(uint64_t(hi_inclusive - lo + 1)));
    }

    double gauss() {
        if (has_gauss_) {
            has_gauss_ = false;
            return gauss_next_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 1e-300);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        gauss_next_ = r * std::sin(a);
        has_gauss_ = true;
        return r * std::cos(a);
    }

    bool coin(double p) { return uniform() < p; }

    // derive an independent stream, e.g. per task instance
    Rng fork() { return Rng(next_u64() ^ 0xd1b54a32d192ed03ULL); }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4]{};
    bool has_gauss_ = false;
    double gauss_next_ = 0.0;
};

} // namespace drasp
