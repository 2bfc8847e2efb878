#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "hatrain/hatrain.hpp"

namespace testing {

/// max_i |a_i - b_i| / max(max_i |b_i|, floor)
inline double rel_err(std::span<const double> a, std::span<const double> b, double floor = 1e-8) {
    double num = 0.0, den = floor;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num = std::max(num, std::fabs(a[i] - b[i]));
        den = std::max(den, std::fabs(b[i]));
    }
    return num / den;
}

template <class T>
std::vector<double> widen(std::span<const T> v) {
    return {v.begin(), v.end()};
}

/// Gaussian inputs with uniform labels for `arch`.
inline hat::Batch random_batch(const hat::Architecture& arch, std::size_t n, std::uint64_t seed) {
    hat::SplitMix64 rng(seed);
    hat::Batch b;
    b.inputs.resize(n * arch.input_size());
    for (auto& x : b.inputs) x = static_cast<float>(rng.normal());
    for (std::size_t i = 0; i < n; ++i) b.labels.push_back(static_cast<std::uint32_t>(rng.below(arch.classes())));
    return b;
}

/// Small separable blobs sized for `spec`.
inline hat::DataSplit blobs_for(const hat::ModelSpec& spec, std::size_t n, std::uint64_t seed, double spread = 0.5) {
    const hat::Architecture arch(spec);
    hat::BlobConfig c;
    c.n = n;
    c.dims = arch.input_size();
    c.classes = arch.classes();
    c.spread = spread;
    c.seed = seed;
    auto d = hat::synth_blobs(c);
    return {hat::with_shape(std::move(d.train), spec.input_shape), hat::with_shape(std::move(d.test), spec.input_shape)};
}

/// Loss of `arch` at double-precision parameters, for finite differences.
inline double loss_at(const hat::Architecture& arch, hat::BatchView b, std::span<const double> params) {
    const auto logits = hat::infer<double>(arch, params, b);
    return hat::loss_xe<double>(logits, b.labels, arch.classes());
}

} // namespace testing
