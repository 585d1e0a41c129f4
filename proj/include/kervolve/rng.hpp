#pragma once

#include <cstdint>
#include <vector>

namespace kervolve {

/// splitmix64 step; used both as a PRNG kernel and for seed derivation.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

/// Order-dependent combination of seed material into one 64-bit seed.
/// Deterministic across platforms; used to derive per-cell seeds from
/// (base seed, model id, lr index, fold).
inline uint64_t hash_combine(uint64_t a, uint64_t b) {
    uint64_t s = a ^ (b + 0x9e3779b97f4a7c15ull + (a << 6) + (a >> 2));
    return splitmix64(s);
}

inline uint64_t hash_string(const char* s) {
    // FNV-1a
    uint64_t h = 0xcbf29ce484222325ull;
    for (; *s; ++s) {
        h ^= static_cast<unsigned char>(*s);
        h *= 0x100000001b3ull;
    }
    return h;
}

/// Deterministic PRNG with explicit output mappings. The standard library
/// distributions are implementation-defined, so uniform/index/shuffle are
/// spelled out here to keep runs bit-reproducible across toolchains.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // decorrelate small consecutive seeds
        splitmix64(state_);
    }

    uint64_t next() { return splitmix64(state_); }

    /// Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform index in [0, n). Unbiased rejection sampling.
    uint64_t index(uint64_t n) {
        const uint64_t limit = ~uint64_t{0} - ~uint64_t{0} % n;
        uint64_t x;
        do {
            x = next();
        } while (x >= limit);
        return x % n;
    }

    /// Fisher-Yates shuffle with explicit index draws.
    template <class V>
    void shuffle(V& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
};

}  // namespace kervolve
