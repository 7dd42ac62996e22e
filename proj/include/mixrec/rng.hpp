#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "mixrec/common.hpp"

namespace mixrec {

// PCG32 generator. We roll our own instead of <random> so that every
// artifact is byte-reproducible independent of the standard library's
// distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0x853c49e6748fea9bULL) {
        state_ = 0u;
        inc_ = (stream << 1u) | 1u;
        next_u32();
        state_ += seed;
        next_u32();
    }

    std::uint32_t next_u32() {
        std::uint64_t old = state_;
        state_ = old * 6364136223846793005ULL + inc_;
        std::uint32_t xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
        std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
    }

    std::uint64_t next_u64() {
        std::uint64_t hi = next_u32();
        std::uint64_t lo = next_u32();
        return (hi << 32) | lo;
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n) {
        require(n > 0, "uniform_index: n must be positive");
        // Rejection sampling to avoid modulo bias.
        std::uint64_t threshold = (~n + 1) % n; // (2^64 - n) mod n
        for (;;) {
            std::uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    int uniform_int(int lo, int hi_inclusive) {
        return lo + static_cast<int>(uniform_index(
                        static_cast<std::uint64_t>(hi_inclusive - lo + 1)));
    }

    // Standard normal via Box-Muller, with the spare value cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform(); // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Derives an independent generator for a named purpose. All top-level
    // randomness flows from one seed through substreams like "data",
    // "train", "sample".
    Rng substream(std::string_view name) const {
        std::uint64_t h = 1469598103934665603ULL; // FNV-1a offset basis
        for (char c : name) {
            h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
            h *= 1099511628211ULL;
        }
        return Rng(splitmix(seed_view() ^ h), splitmix(h));
    }

    Rng substream(std::string_view name, std::uint64_t index) const {
        Rng r = substream(name);
        return Rng(splitmix(r.seed_view() + 0x9e3779b97f4a7c15ULL * (index + 1)),
                   splitmix(index));
    }

private:
    std::uint64_t seed_view() const { return state_; }

    static std::uint64_t splitmix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    std::uint64_t state_ = 0;
    std::uint64_t inc_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace mixrec
