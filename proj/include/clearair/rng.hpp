// SPDX-License-Identifier: Apache-2.0
//
// Deterministic seeding and sampling. Every stochastic choice in the
// pipeline is derived from a 64-bit seed through these helpers, so runs
// are reproducible bit-for-bit across resumes and platforms.

#pragma once

#include <cstdint>
#include <string_view>

namespace clearair {

// SplitMix64 step; the workhorse behind seed derivation.
std::uint64_t splitmix64(std::uint64_t& state);

// Derives an independent stream seed from (base, salt...). Order matters.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt);
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt_a, std::uint64_t salt_b);
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag);

// Small counter-based generator. Unlike std::normal_distribution, the
// sample sequence is pinned by this codebase, not the standard library.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed ^ 0x9E3779B97F4A7C15ULL) {
        // warm up so nearby seeds decorrelate
        next_u64();
        next_u64();
    }

    std::uint64_t next_u64() { return splitmix64(state_); }

    // Uniform in [0, 1).
    double uniform();
    // Uniform in [lo, hi).
    double uniform(double lo, double hi);
    // Uniform integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n);
    // Standard normal via Box-Muller (cached pair).
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }
    // Normal truncated to mean +/- 2 stddev, used for weight init.
    double truncated_normal(double stddev);
    bool bernoulli(double p) { return uniform() < p; }

private:
    std::uint64_t state_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

} // namespace clearair
