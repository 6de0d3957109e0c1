#pragma once

// Counter-based deterministic RNG. Every draw is a pure function of
// (seed, stream, counter), so initialization order and parallel layout cannot
// change the values a given consumer sees. Streams are named; the name is
// hashed into the stream id.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace gecko {

namespace detail {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace detail

class Rng {
public:
    Rng(uint64_t seed, std::string_view stream_name)
        : seed_(seed), stream_(detail::fnv1a(stream_name)) {}
    Rng(uint64_t seed, uint64_t stream) : seed_(seed), stream_(stream) {}

    uint64_t bits(uint64_t counter) const {
        uint64_t x = detail::splitmix64(seed_ ^ 0x243f6a8885a308d3ULL);
        x ^= detail::splitmix64(stream_ + 0x452821e638d01377ULL);
        return detail::splitmix64(x ^ detail::splitmix64(counter));
    }

    // [0, 1)
    double uniform(uint64_t counter) const {
        return static_cast<double>(bits(counter) >> 11) * 0x1.0p-53;
    }

    double uniform(uint64_t counter, double lo, double hi) const {
        return lo + (hi - lo) * uniform(counter);
    }

    // standard normal via Box-Muller on two derived counters
    double normal(uint64_t counter) const {
        double u1 = static_cast<double>(bits(counter * 2) >> 11) * 0x1.0p-53;
        double u2 = static_cast<double>(bits(counter * 2 + 1) >> 11) * 0x1.0p-53;
        double r = std::sqrt(-2.0 * std::log1p(-u1));
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

    uint64_t integer(uint64_t counter, uint64_t n) const {
        return bits(counter) % n;  // toy scale; modulo bias is irrelevant here
    }

private:
    uint64_t seed_;
    uint64_t stream_;
};

// Convenience wrapper for sequential draws from one stream.
class RngStream {
public:
    RngStream(uint64_t seed, std::string_view name) : rng_(seed, name) {}

    double uniform() { return rng_.uniform(counter_++); }
    double uniform(double lo, double hi) { return rng_.uniform(counter_++, lo, hi); }
    double normal() { return rng_.normal(counter_++); }
    uint64_t integer(uint64_t n) { return rng_.integer(counter_++, n); }

private:
    Rng rng_;
    uint64_t counter_ = 0;
};

}  // namespace gecko
