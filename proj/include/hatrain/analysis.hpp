#pragma once

// Post-training analyses: 2-D loss landscapes, perturbation magnitudes of
// damaging flips, bit-position counts, magnitude pruning, symmetric
// quantization.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "hatrain/bitflip.hpp"
#include "hatrain/data.hpp"
#include "hatrain/error.hpp"
#include "hatrain/model.hpp"
#include "hatrain/rng.hpp"

namespace hat {

// ---- landscape -------------------------------------------------------------------

struct LandscapeGrid {
    std::size_t layer = 0;
    std::uint64_t seed1 = 0, seed2 = 0;
    double extent = 3.0;
    std::size_t steps = 0;
    std::vector<double> loss;  // row-major [i][j]: i along d1, j along d2

    double at(std::size_t i, std::size_t j) const { return loss[i * steps + j]; }
    std::size_t center() const { return steps / 2; }
    double coordinate(std::size_t i) const {
        return extent * (2.0 * static_cast<double>(i) - static_cast<double>(steps - 1)) / static_cast<double>(steps - 1);
    }
    double spacing() const { return 2.0 * extent / static_cast<double>(steps - 1); }
};

/// Gaussian direction over one layer's parameters, scaled to unit L2 norm.
inline std::vector<double> unit_direction(std::size_t n, std::uint64_t seed) {
    SplitMix64 rng(seed);
    std::vector<double> d(n);
    double norm = 0.0;
    for (auto& x : d) {
        x = rng.normal();
        norm += x * x;
    }
    norm = std::sqrt(norm);
    if (norm > 0)
        for (auto& x : d) x /= norm;
    return d;
}

/// Loss of `m` on `batch` with layer `layer` moved to theta + a*d1 + b*d2 over
/// a steps x steps grid spanning [-extent, extent] on both axes.
inline LandscapeGrid landscape(const ParamStore& m, std::size_t layer, BatchView batch, double extent = 3.0,
                               std::size_t steps = 21, std::uint64_t seed1 = 1, std::uint64_t seed2 = 2,
                               unsigned workers = 1) {
    if (steps < 3 || steps % 2 == 0) throw ArgumentError("landscape: steps must be odd and >= 3");
    if (!(extent > 0.0)) throw ArgumentError("landscape: extent must be positive");
    if (layer >= m.arch().layers().size() || !m.arch().layer(layer).has_params())
        throw ArgumentError("landscape: layer " + std::to_string(layer) + " has no parameters");
    const LayerInfo& info = m.arch().layer(layer);
    const auto d1 = unit_direction(info.param_count(), seed1);
    const auto d2 = unit_direction(info.param_count(), seed2);
    const CachedEvaluator eval(m, batch);

    LandscapeGrid g;
    g.layer = layer;
    g.seed1 = seed1;
    g.seed2 = seed2;
    g.extent = extent;
    g.steps = steps;
    g.loss.assign(steps * steps, 0.0);

    workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(steps * steps)));
    auto run = [&](unsigned w) {
        std::vector<float> params(m.values().begin(), m.values().end());
        for (std::size_t cell = w; cell < steps * steps; cell += workers) {
            const double a = g.coordinate(cell / steps), b = g.coordinate(cell % steps);
            for (std::size_t k = 0; k < d1.size(); ++k) {
                const std::size_t id = info.param_offset + k;
                params[id] = static_cast<float>(static_cast<double>(m[id]) + (a * d1[k] + b * d2[k]));
            }
            g.loss[cell] = eval.loss_with(params, layer);
        }
    };
    if (workers == 1) {
        run(0);
    } else {
        std::vector<std::jthread> pool;
        for (unsigned w = 0; w < workers; ++w) pool.emplace_back(run, w);
    }
    return g;
}

/// Mean 5-point discrete Laplacian over interior cells within `radius` of the centre.
inline double center_curvature(const LandscapeGrid& g, std::size_t radius = 1) {
    const std::size_t c = g.center();
    const double h2 = g.spacing() * g.spacing();
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = c - std::min(radius, c - 1); i <= c + std::min(radius, c - 1); ++i)
        for (std::size_t j = c - std::min(radius, c - 1); j <= c + std::min(radius, c - 1); ++j) {
            sum += (g.at(i + 1, j) + g.at(i - 1, j) + g.at(i, j + 1) + g.at(i, j - 1) - 4.0 * g.at(i, j)) / h2;
            ++n;
        }
    return sum / static_cast<double>(n);
}

inline std::string landscape_csv(const LandscapeGrid& g) {
    std::string out = "i,j,a,b,loss\n";
    for (std::size_t i = 0; i < g.steps; ++i)
        for (std::size_t j = 0; j < g.steps; ++j) out += csv_row(i, j, g.coordinate(i), g.coordinate(j), g.at(i, j));
    return out;
}

// ---- flip statistics --------------------------------------------------------------

struct PerturbSummary {
    std::vector<double> deltas;  // ascending; +inf for non-finite flipped values
    std::size_t infinite = 0;
    double min = std::numeric_limits<double>::quiet_NaN();
    double median = std::numeric_limits<double>::quiet_NaN();  // lower median
};

/// |decoded(new) - decoded(old)| over flips with rad > threshold.
inline PerturbSummary perturb_threshold(std::span<const FlipRecord> records, double threshold = kErraticThreshold) {
    PerturbSummary s;
    for (const auto& r : records) {
        if (!(r.rad > threshold)) continue;
        const double nv = r.new_value(), ov = r.old_value();
        const double d = std::isfinite(nv) ? std::fabs(nv - ov) : std::numeric_limits<double>::infinity();
        s.infinite += std::isinf(d);
        s.deltas.push_back(d);
    }
    std::sort(s.deltas.begin(), s.deltas.end());
    if (!s.deltas.empty()) {
        s.min = s.deltas.front();
        s.median = s.deltas[(s.deltas.size() - 1) / 2];
    }
    return s;
}

/// Erratic flips per bit position 23..31; positions below 23 land in `mantissa`.
struct BitPositionHist {
    std::array<std::size_t, 9> counts{};  // index = bit - 23
    std::size_t mantissa = 0;

    std::size_t at(int bit) const { return counts.at(static_cast<std::size_t>(bit - kExponentLsb)); }
    std::size_t total() const { return std::accumulate(counts.begin(), counts.end(), mantissa); }
    double msb_share() const {
        const auto t = total();
        return t ? static_cast<double>(at(kExponentMsb)) / static_cast<double>(t) : 0.0;
    }
};

inline BitPositionHist bit_position_hist(std::span<const FlipRecord> records, double threshold = kErraticThreshold) {
    BitPositionHist h;
    for (const auto& r : records) {
        if (!(r.rad > threshold)) continue;
        if (r.bit >= kExponentLsb) ++h.counts[static_cast<std::size_t>(r.bit - kExponentLsb)];
        else ++h.mantissa;
    }
    return h;
}

/// One row per position; `position_1based` is bit + 1, so the exponent MSB reads 31.
inline std::string bit_position_csv(const BitPositionHist& h) {
    std::string out = "bit,position_1based,field,count\n";
    for (int b = kExponentLsb; b <= kSignBit; ++b)
        out += csv_row(b, b + 1, std::string(b == kSignBit ? "sign" : "exponent"), h.at(b));
    out += csv_row(std::string("0-22"), std::string("1-23"), std::string("mantissa"), h.mantissa);
    return out;
}

// ---- pruning ---------------------------------------------------------------------

struct PruneResult {
    ParamStore model;
    std::size_t zeroed = 0;
    double accuracy = std::numeric_limits<double>::quiet_NaN();
};

inline std::size_t nonzero_count(const ParamStore& m) {
    return static_cast<std::size_t>(std::count_if(m.values().begin(), m.values().end(), [](float v) { return v != 0.0f; }));
}

/// Zeroes the floor(sparsity * d) smallest-magnitude parameters (ties: lower id).
inline PruneResult prune(const ParamStore& m, double sparsity, const BatchView* evalset = nullptr) {
    if (!(sparsity >= 0.0 && sparsity <= 1.0)) throw ArgumentError("prune: sparsity must be in [0,1]");
    const std::size_t k = static_cast<std::size_t>(std::floor(sparsity * static_cast<double>(m.size())));
    std::vector<std::size_t> ids(m.size());
    std::iota(ids.begin(), ids.end(), 0);
    auto mag = [&](std::size_t i) {
        const float v = m[i];
        return std::isnan(v) ? std::numeric_limits<float>::infinity() : std::fabs(v);
    };
    std::stable_sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) { return mag(a) < mag(b); });
    PruneResult r{m, k, std::numeric_limits<double>::quiet_NaN()};
    for (std::size_t i = 0; i < k; ++i) r.model[ids[i]] = 0.0f;
    if (evalset) r.accuracy = accuracy(r.model, *evalset);
    return r;
}

struct PrunePoint {
    double sparsity = 0.0;
    std::size_t nonzero = 0;
    double accuracy = 0.0;
};

inline std::vector<PrunePoint> prune_sweep(const ParamStore& m, std::span<const double> sparsities, BatchView evalset) {
    std::vector<PrunePoint> out;
    for (double s : sparsities) {
        const auto r = prune(m, s, &evalset);
        out.push_back({s, nonzero_count(r.model), r.accuracy});
    }
    return out;
}

/// Largest swept sparsity whose accuracy stays within `drop` of the unpruned model.
inline double retained_sparsity(std::span<const PrunePoint> curve, double clean, double drop = 0.10) {
    double best = 0.0;
    for (const auto& p : curve)
        if (p.accuracy >= clean - drop) best = std::max(best, p.sparsity);
        else break;
    return best;
}

inline std::string prune_csv(std::span<const PrunePoint> curve) {
    std::string out = "sparsity,nonzero,accuracy\n";
    for (const auto& p : curve) out += csv_row(p.sparsity, p.nonzero, p.accuracy);
    return out;
}

// ---- quantization ------------------------------------------------------------------

enum class QuantMode : std::uint8_t { uniform, mixed };

struct QuantConfig {
    QuantMode mode = QuantMode::uniform;
    int bits = 8;        // uniform
    int dense_bits = 2;  // mixed
    int conv_bits = 4;   // mixed

    void validate() const {
        auto ok = [](int b) { return b == 2 || b == 4 || b == 8; };
        if (mode == QuantMode::uniform ? !ok(bits) : !(ok(dense_bits) && ok(conv_bits)))
            throw ArgumentError("quantize: bit widths must be 2, 4 or 8");
    }

    int bits_for(LayerKind k) const {
        if (mode == QuantMode::uniform) return bits;
        return k == LayerKind::conv2d ? conv_bits : dense_bits;
    }
};

struct LayerQuant {
    std::size_t layer = 0;
    int bits = 0;
    double scale = 0.0;  // 0 for an all-zero layer (left unchanged)
    double max_error = 0.0;
};

struct QuantResult {
    ParamStore model;
    std::vector<LayerQuant> layers;
    double accuracy = std::numeric_limits<double>::quiet_NaN();
};

/// Per-layer symmetric quantization of weights; biases are left in float32.
inline QuantResult quantize(const ParamStore& m, const QuantConfig& cfg, const BatchView* evalset = nullptr) {
    cfg.validate();
    QuantResult r{m, {}, std::numeric_limits<double>::quiet_NaN()};
    for (std::size_t li : m.arch().param_layers()) {
        const LayerInfo& info = m.arch().layer(li);
        LayerQuant lq;
        lq.layer = li;
        lq.bits = cfg.bits_for(info.kind);
        const double qmax = std::ldexp(1.0, lq.bits - 1) - 1.0;
        float peak = 0.0f;
        for (std::size_t i = 0; i < info.weight_count; ++i) peak = std::max(peak, std::fabs(m[info.param_offset + i]));
        if (peak > 0.0f && std::isfinite(peak)) {
            lq.scale = static_cast<double>(peak) / qmax;
            for (std::size_t i = 0; i < info.weight_count; ++i) {
                const std::size_t id = info.param_offset + i;
                const double q = std::clamp(std::round(static_cast<double>(m[id]) / lq.scale), -qmax, qmax);
                r.model[id] = static_cast<float>(q * lq.scale);
                lq.max_error = std::max(lq.max_error, std::fabs(static_cast<double>(r.model[id]) - m[id]));
            }
        }
        r.layers.push_back(lq);
    }
    if (evalset) r.accuracy = accuracy(r.model, *evalset);
    return r;
}

inline std::string quant_csv(const QuantResult& r) {
    std::string out = "layer,bits,scale,max_error\n";
    for (const auto& l : r.layers) out += csv_row(l.layer, l.bits, l.scale, l.max_error);
    return out;
}

} // namespace hat
