#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace snipforge {

// Seeded 64-bit generator. `split` derives an independent child stream from a
// tag so each component (init, dropout, shuffling, synthesis) draws from its own
// sequence and adding draws in one place never perturbs another.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(mix(seed)) {}

    Rng split(std::string_view tag) const;
    Rng split(std::uint64_t index) const;

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() { return engine_(); }
    double uniform(double lo = 0.0, double hi = 1.0);
    double normal(double mean = 0.0, double stddev = 1.0);
    // Uniform integer in [lo, hi].
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
    bool bernoulli(double p) { return uniform() < p; }

    std::mt19937_64& engine() { return engine_; }

    static std::uint64_t mix(std::uint64_t x);

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

}  // namespace snipforge
