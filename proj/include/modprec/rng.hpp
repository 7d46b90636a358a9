#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace modprec {

// All randomness in the library flows through this wrapper. Distributions are
// hand-rolled on top of std::mt19937_64 raw output so that streams are
// reproducible bit-for-bit regardless of the standard library's
// <random> distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    /// Uniform double in [0, 1) with 53 bits of entropy.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Standard normal via Box-Muller. Caches the second deviate.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        double u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    /// Uniform integer in [0, n). Modulo bias is negligible for n << 2^64.
    int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n)); }

    bool bernoulli(double p) { return uniform01() < p; }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

/// SplitMix64 finalizer; decorrelates seeds built from (seed, tag, index).
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Derives an independent stream seed for (seed, tag, index[, sub]).
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t index = 0,
                                 std::uint64_t sub = 0) {
    return mix64(mix64(mix64(mix64(seed) ^ tag) ^ index) ^ sub);
}

namespace rng_tag {
inline constexpr std::uint64_t param_init = 0x7061726d696e6974ULL; // "parminit"
inline constexpr std::uint64_t micro_batch = 0x6d6963726f626174ULL;
inline constexpr std::uint64_t modality = 0x6d6f64616c697479ULL;
inline constexpr std::uint64_t task_shape = 0x7461736b73687065ULL;
} // namespace rng_tag

} // namespace modprec
