#pragma once

// Hutchinson trace estimation and Rayleigh-quotient eigenvalue estimates.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "hatrain/autodiff.hpp"
#include "hatrain/data.hpp"
#include "hatrain/error.hpp"
#include "hatrain/model.hpp"
#include "hatrain/rng.hpp"

namespace hat {

/// Subset of the flat parameter vector, as half-open ranges. Empty = everything.
struct ParamMask {
    std::vector<std::pair<std::size_t, std::size_t>> ranges;

    bool all() const { return ranges.empty(); }
    bool contains(std::size_t id) const {
        if (ranges.empty()) return true;
        for (const auto& [b, e] : ranges)
            if (id >= b && id < e) return true;
        return false;
    }
    std::size_t count(std::size_t d) const {
        if (ranges.empty()) return d;
        std::size_t n = 0;
        for (const auto& [b, e] : ranges) n += e - b;
        return n;
    }
};

/// Mask covering the parameters of the listed layers (empty list = all layers).
inline ParamMask mask_for_layers(const Architecture& arch, std::span<const std::size_t> layers) {
    ParamMask m;
    for (std::size_t li : layers) {
        if (li >= arch.layers().size()) throw ArgumentError("layer mask: no layer " + std::to_string(li));
        const LayerInfo& info = arch.layer(li);
        if (!info.has_params()) throw ArgumentError("layer mask: layer " + std::to_string(li) + " has no parameters");
        m.ranges.emplace_back(info.param_offset, info.param_offset + info.param_count());
    }
    std::sort(m.ranges.begin(), m.ranges.end());
    return m;
}

/// The last `n` parameterised layers.
inline std::vector<std::size_t> last_layers(const Architecture& arch, std::size_t n) {
    const auto& pl = arch.param_layers();
    n = std::min(n, pl.size());
    return {pl.end() - static_cast<std::ptrdiff_t>(n), pl.end()};
}

/// i.i.d. +-1 entries, deterministic per seed.
inline std::vector<double> rademacher(std::size_t d, std::uint64_t seed) {
    if (d == 0) throw ArgumentError("rademacher: dimension must be positive");
    SplitMix64 rng(seed);
    std::vector<double> v(d);
    for (auto& x : v) x = rng.sign();
    return v;
}

/// Rademacher on the masked coordinates, zero elsewhere.
inline std::vector<double> rademacher(std::size_t d, const ParamMask& mask, std::uint64_t seed) {
    if (mask.all()) return rademacher(d, seed);
    SplitMix64 rng(seed);
    std::vector<double> v(d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
        if (mask.contains(i)) v[i] = rng.sign();
    return v;
}

/// Seed of probe `i` in a run seeded with `seed`.
inline std::uint64_t probe_seed(std::uint64_t seed, std::size_t i) { return substream(seed, i)(); }

/// A tape holding one forward pass and its recorded gradient, reused for many
/// Hessian-vector products. Gradients and curvature are taken with respect to
/// the masked parameters only.
template <class T>
class CurvatureTape {
public:
    CurvatureTape(const ad::LossBuilder<T>& build, std::span<const T> params, ParamMask mask = {})
        : tape_(params.size()), mask_(std::move(mask)) {
        loss_ = build(tape_, params);
        for (ad::NodeId leaf : tape_.params())
            if (mask_.contains(tape_.node(leaf).param_offset)) wrt_.push_back(leaf);
        connected_ = tape_.requires_grad(loss_) && !wrt_.empty();
        if (connected_) {
            try {
                grad_ = tape_.backprop(loss_, true, wrt_);
            } catch (const GraphError&) {
                connected_ = false;
            }
        }
        if (!connected_) grad_.values = ad::GradVector<T>(params.size());
    }

    ad::Tape<T>& tape() { return tape_; }
    ad::NodeId loss_node() const { return loss_; }
    T loss() const { return tape_.value(loss_)[0]; }
    const ad::GradVector<T>& gradient() const { return grad_.values; }
    const std::vector<ad::NodeId>& wrt() const { return wrt_; }
    const ParamMask& mask() const { return mask_; }

    std::vector<T> hvp(std::span<const double> v) {
        const std::size_t mark = tape_.size();
        std::vector<T> out(tape_.param_count(), T{0});
        const ad::NodeId s = gradient_dot(v);
        if (s != ad::kNoNode && tape_.requires_grad(s)) {
            auto hv = tape_.backprop(s, false, wrt_);
            out = std::move(hv.values.values);
        }
        tape_.rewind(mark);
        return out;
    }

    /// v^T H v, accumulated in double.
    double quadratic(std::span<const double> v) {
        const auto hv = hvp(v);
        double q = 0.0;
        for (std::size_t i = 0; i < hv.size(); ++i) q += static_cast<double>(hv[i]) * v[i];
        return q;
    }

    /// v^T H v as a differentiable node (third-order graph); kNoNode when identically zero.
    ad::NodeId quadratic_node(std::span<const double> v) {
        const ad::NodeId s = gradient_dot(v);
        if (s == ad::kNoNode || !tape_.requires_grad(s)) return ad::kNoNode;
        const auto hv = tape_.backprop(s, true, wrt_);
        ad::NodeId q = ad::kNoNode;
        for (const auto& [leaf, hnode] : hv.nodes) {
            const ad::NodeId term = tape_.dot(hnode, slice(leaf, v));
            q = q == ad::kNoNode ? term : tape_.add(q, term);
        }
        return q;
    }

private:
    ad::NodeId slice(ad::NodeId leaf, std::span<const double> v) {
        const auto& n = tape_.node(leaf);
        std::vector<T> part(n.value.size());
        for (std::size_t i = 0; i < part.size(); ++i) part[i] = static_cast<T>(v[n.param_offset + i]);
        return tape_.constant(std::move(part), n.shape);
    }

    ad::NodeId gradient_dot(std::span<const double> v) {
        if (v.size() != tape_.param_count()) throw ShapeError("probe dimension does not match parameter count");
        if (!connected_) return ad::kNoNode;
        ad::NodeId s = ad::kNoNode;
        for (const auto& [leaf, gnode] : grad_.nodes) {
            const ad::NodeId term = tape_.dot(gnode, slice(leaf, v));
            s = s == ad::kNoNode ? term : tape_.add(s, term);
        }
        return s;
    }

    ad::Tape<T> tape_;
    ParamMask mask_;
    ad::NodeId loss_ = ad::kNoNode;
    std::vector<ad::NodeId> wrt_;
    ad::Gradient<T> grad_;
    bool connected_ = false;
};

enum class EigenNorm : std::uint8_t {
    rayleigh,  ///< v^T H v / (v^T v)
    norm,      ///< v^T H v / ||v||, the literal form
};

struct HessianEstimate {
    double trace = 0.0;
    std::vector<double> eigenvalues;  // descending
    std::vector<double> quadratics;   // v_i^T H v_i in probe order
    std::size_t probes = 0;
    std::uint64_t seed = 0;
};

inline double eigen_estimate(double quad, std::span<const double> v, EigenNorm norm) {
    double vv = 0.0;
    for (double x : v) vv += x * x;
    if (vv == 0.0) return 0.0;
    return norm == EigenNorm::rayleigh ? quad / vv : quad / std::sqrt(vv);
}

/// Reduces per-probe quadratic forms into a trace and sorted eigenvalue list.
inline HessianEstimate summarize_probes(std::vector<double> quads, std::span<const std::vector<double>> probes,
                                        EigenNorm norm, std::uint64_t seed) {
    HessianEstimate est;
    est.probes = quads.size();
    est.seed = seed;
    for (std::size_t i = 0; i < quads.size(); ++i) {
        if (!std::isfinite(quads[i])) throw NumericError("hutchinson: non-finite curvature");
        est.trace += quads[i];
        est.eigenvalues.push_back(eigen_estimate(quads[i], probes[i], norm));
    }
    est.trace /= static_cast<double>(quads.size());
    std::sort(est.eigenvalues.begin(), est.eigenvalues.end(), std::greater<>{});
    est.quadratics = std::move(quads);
    return est;
}

/// Hutchinson estimate with p Rademacher probes on a prepared curvature tape.
template <class T>
HessianEstimate hutchinson(CurvatureTape<T>& ct, std::size_t p, std::uint64_t seed,
                           EigenNorm norm = EigenNorm::rayleigh) {
    if (p == 0) throw ArgumentError("hutchinson: need at least one probe");
    if (!std::isfinite(static_cast<double>(ct.loss()))) throw NumericError("hutchinson: non-finite loss");
    const std::size_t d = ct.tape().param_count();
    std::vector<std::vector<double>> probes;
    std::vector<double> quads;
    for (std::size_t i = 0; i < p; ++i) {
        probes.push_back(rademacher(d, ct.mask(), probe_seed(seed, i)));
        quads.push_back(ct.quadratic(probes.back()));
    }
    return summarize_probes(std::move(quads), probes, norm, seed);
}

template <class T>
HessianEstimate hutchinson(const ad::LossBuilder<T>& build, std::span<const T> params, std::size_t p,
                           std::uint64_t seed, EigenNorm norm = EigenNorm::rayleigh) {
    CurvatureTape<T> ct(build, params);
    return hutchinson(ct, p, seed, norm);
}

template <class T>
HessianEstimate hutchinson(const Architecture& arch, std::span<const T> params, BatchView batch, std::size_t p,
                           std::uint64_t seed, const ParamMask& mask = {}, EigenNorm norm = EigenNorm::rayleigh) {
    CurvatureTape<T> ct(loss_builder<T>(arch, batch), params, mask);
    return hutchinson(ct, p, seed, norm);
}

inline HessianEstimate hutchinson(const ParamStore& m, BatchView batch, std::size_t p, std::uint64_t seed,
                                  const ParamMask& mask = {}, EigenNorm norm = EigenNorm::rayleigh) {
    return hutchinson<float>(m.arch(), m.values(), batch, p, seed, mask, norm);
}

inline constexpr std::size_t kExactOracleMaxParams = 60;

/// Sum of H_ii from basis-vector products in double precision. Tiny models only.
inline double exact_trace_oracle(const ad::LossBuilder<double>& build, std::span<const double> params) {
    if (params.size() > kExactOracleMaxParams)
        throw ArgumentError("exact_trace_oracle: " + std::to_string(params.size()) + " parameters exceeds " +
                            std::to_string(kExactOracleMaxParams));
    CurvatureTape<double> ct(build, params);
    std::vector<double> e(params.size(), 0.0);
    double trace = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        e[i] = 1.0;
        trace += ct.hvp(e)[i];
        e[i] = 0.0;
    }
    return trace;
}

inline double exact_trace_oracle(const ParamStore& m, BatchView batch) {
    const auto params = m.to_double();
    return exact_trace_oracle(loss_builder<double>(m.arch(), batch), params);
}

/// Dense Hessian in double precision from d basis products. Tiny models only.
inline std::vector<double> exact_hessian(const ad::LossBuilder<double>& build, std::span<const double> params) {
    if (params.size() > kExactOracleMaxParams) throw ArgumentError("exact_hessian: model too large");
    const std::size_t d = params.size();
    CurvatureTape<double> ct(build, params);
    std::vector<double> h(d * d), e(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
        e[j] = 1.0;
        const auto col = ct.hvp(e);
        for (std::size_t i = 0; i < d; ++i) h[i * d + j] = col[i];
        e[j] = 0.0;
    }
    return h;
}

struct SensitivityReport {
    double mean = 0.0, stddev = 0.0;
    std::vector<double> traces;
    std::size_t probes = 0;
    std::uint64_t seed = 0;
};

/// Trace estimated `repeats` times, each on `samples` fresh random training samples.
inline SensitivityReport sensitivity(const ParamStore& m, const Dataset& data, std::size_t samples = 1000,
                                     std::size_t repeats = 5, std::size_t p = 50, std::uint64_t seed = 0,
                                     const ParamMask& mask = {}) {
    if (data.size() < samples)
        throw ArgumentError("sensitivity: dataset has " + std::to_string(data.size()) + " samples, need " +
                            std::to_string(samples));
    if (repeats == 0) throw ArgumentError("sensitivity: repeats must be positive");
    SensitivityReport rep;
    rep.probes = p;
    rep.seed = seed;
    for (std::size_t r = 0; r < repeats; ++r) {
        SplitMix64 rng = substream(seed, 1000 + r);
        std::vector<std::size_t> ids(data.size());
        std::iota(ids.begin(), ids.end(), std::size_t{0});
        for (std::size_t i = 0; i < samples; ++i) std::swap(ids[i], ids[i + rng.below(ids.size() - i)]);
        ids.resize(samples);
        const Batch batch = data.gather(ids);
        rep.traces.push_back(hutchinson(m, batch.view(), p, probe_seed(seed, r), mask).trace);
    }
    for (double t : rep.traces) rep.mean += t;
    rep.mean /= static_cast<double>(repeats);
    for (double t : rep.traces) rep.stddev += (t - rep.mean) * (t - rep.mean);
    rep.stddev = std::sqrt(rep.stddev / static_cast<double>(repeats));
    return rep;
}

} // namespace hat
