#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace pivotnmt::nn {

// Seedable stream used by every stochastic operation in the library.
//
// The engine is std::mt19937_64, whose output sequence is fully specified by
// the standard. The distributions are implemented here rather than taken
// from <random>, because std::uniform_real_distribution and friends are
// implementation-defined and would break cross-toolchain reproducibility.
class Rng {
public:
    static constexpr std::string_view kAlgorithm = "mt19937_64";

    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform double in [0, 1) with 53 random mantissa bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). Rejection sampling removes modulo bias.
    std::size_t uniform_int(std::size_t n) {
        if (n <= 1) return 0;
        const std::uint64_t bound = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        std::uint64_t x = engine_();
        while (x >= limit) x = engine_();
        return static_cast<std::size_t>(x % bound);
    }

    // Standard normal via Box-Muller (one value per call, the pair's partner is cached).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Draw an index from an unnormalised non-negative weight vector.
    // Zero-weight entries are never returned.
    std::size_t categorical(std::span<const double> weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        const double u = uniform() * total;
        double acc = 0.0;
        std::size_t last_positive = 0;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            if (weights[i] <= 0.0) continue;
            acc += weights[i];
            last_positive = i;
            if (u < acc) return i;
        }
        return last_positive;
    }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const std::size_t j = uniform_int(i);
            std::swap(items[i - 1], items[j]);
        }
    }

    // Independent child stream, derived deterministically from this one.
    Rng fork() { return Rng(engine_()); }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

using RngHandle = Rng;

inline Rng seed_rng(std::uint64_t seed) { return Rng(seed); }

}  // namespace pivotnmt::nn
