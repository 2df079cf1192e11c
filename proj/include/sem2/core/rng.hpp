#pragma once

#include <cstdint>

namespace sem2 {

// xoshiro256** seeded through splitmix64. Self-contained so trajectories
// and metrics are reproducible independent of the standard library's
// distribution implementations.
class Rng {
public:
    explicit Rng(uint64_t seed);

    uint64_t next_u64();
    double uniform();                        // [0, 1)
    double uniform(double lo, double hi);    // [lo, hi)
    double normal();                         // standard normal (Box-Muller)
    int64_t uniform_int(int64_t n);          // [0, n), n >= 1

    // Independent stream derived from this generator's seed and `stream`.
    Rng fork(uint64_t stream) const;

    uint64_t seed() const { return seed_; }

private:
    uint64_t s_[4];
    uint64_t seed_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

uint64_t splitmix64(uint64_t& state);
uint64_t hash_mix(uint64_t a, uint64_t b);
uint64_t hash_mix(uint64_t a, uint64_t b, uint64_t c);

} // namespace sem2
