#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace polydiff {

// splitmix64; used both as a mixer for deriving stream seeds and as the
// per-stream generator state update.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Small counter-style generator. Every consumer derives its own stream from
// (root seed, tag, counter), so draws are a pure function of those three and
// never depend on call order elsewhere in the program.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // decorrelate nearby seeds
        splitmix64(state_);
        splitmix64(state_);
    }

    static Rng stream(uint64_t seed, std::string_view tag, uint64_t counter = 0) {
        uint64_t s = seed ^ (fnv1a64(tag) * 0x9e3779b97f4a7c15ull) ^ (counter * 0xda942042e4dd58b5ull);
        return Rng(s);
    }

    uint64_t next_u64() { return splitmix64(state_); }

    uint32_t next_u32() { return static_cast<uint32_t>(next_u64() >> 32); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t below(uint64_t n) {
        // rejection-free modulo bias is negligible for the small n used here,
        // but keep it exact anyway
        uint64_t limit = ~0ull - (~0ull % n);
        uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return v % n;
    }

    int below_int(int n) { return static_cast<int>(below(static_cast<uint64_t>(n))); }

    // standard normal via Box-Muller (no cached second value; keeps the
    // draw count a pure function of the request count)
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    float normalf() { return static_cast<float>(normal()); }

private:
    uint64_t state_;
};

}  // namespace polydiff
