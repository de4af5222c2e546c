#pragma once

#include <cstdint>
#include <string_view>

namespace butler {

// Counter-based deterministic RNG (splitmix64 over key + counter).
// Every draw is a pure function of (key, counter), so identical seeds give
// identical sequences on any platform. Named sub-streams let components
// (host-init, butler-init, batch-order, bench-pools, ...) share one root
// seed without draw-order coupling.
class Rng {
public:
    explicit Rng(uint64_t seed) : key_(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

    Rng stream(std::string_view name) const {
        uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
        for (unsigned char c : name) {
            h ^= c;
            h *= 0x100000001b3ull;
        }
        Rng r(0);
        r.key_ = mix(key_ ^ h);
        r.counter_ = 0;
        return r;
    }

    Rng stream(std::string_view name, uint64_t index) const {
        Rng r = stream(name);
        r.key_ = mix(r.key_ ^ (index * 0xbf58476d1ce4e5b9ull + 1));
        return r;
    }

    uint64_t next_u64() {
        ++counter_;
        return mix(key_ + counter_ * 0x9e3779b97f4a7c15ull);
    }

    // uniform in [0, 1)
    double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // uniform integer in [0, n)
    uint64_t next_below(uint64_t n) { return n ? next_u64() % n : 0; }

    uint64_t key() const { return key_; }

private:
    static uint64_t mix(uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebull;
        z ^= z >> 31;
        return z;
    }

    uint64_t key_ = 0;
    uint64_t counter_ = 0;
};

}  // namespace butler
