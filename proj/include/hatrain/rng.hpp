#pragma once

// Deterministic random numbers.
//
// Everything random in the library (initialisation, synthetic data, probes,
// sampled sweeps, shuffling) draws from SplitMix64. The standard <random>
// distributions are implementation-defined, so the transforms to uniform,
// normal and Rademacher variates are written out here to keep results
// identical across compilers and platforms.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <utility>

namespace hat {

class SplitMix64 {
public:
    using result_type = std::uint64_t;

    explicit constexpr SplitMix64(std::uint64_t seed = 0) noexcept : state_(seed) {}

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return ~result_type{0}; }

    constexpr result_type operator()() noexcept {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n); n must be positive.
    std::uint64_t below(std::uint64_t n) noexcept {
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>((*this)()) * n) >> 64);
    }

    /// Standard normal via Box-Muller (one variate per call).
    double normal() noexcept {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// +1 or -1 with equal probability.
    double sign() noexcept { return ((*this)() >> 63) ? 1.0 : -1.0; }

    std::uint64_t state() const noexcept { return state_; }

private:
    std::uint64_t state_;
};

/// Independent stream for (seed, stream id); used to give every probe,
/// repeat, or worker its own generator without sharing state.
inline SplitMix64 substream(std::uint64_t seed, std::uint64_t stream) noexcept {
    SplitMix64 mix(seed ^ (0xd1b54a32d192ed03ULL * (stream + 1)));
    return SplitMix64(mix());
}

/// Fisher-Yates shuffle with a fixed algorithm (std::shuffle is not portable).
template <class T>
void shuffle(std::span<T> items, SplitMix64& rng) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(items[i - 1], items[j]);
    }
}

} // namespace hat
