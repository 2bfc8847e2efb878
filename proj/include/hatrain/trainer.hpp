#pragma once

// Baseline and Hessian-aware training.
//
// A Hessian-aware step adds alpha * Tr to the cross-entropy, where Tr is the
// Hutchinson estimate over the masked layers, but only when the median of the
// per-probe eigenvalue estimates exceeds the gate threshold tau. A skipped
// step instead lowers tau to that median. The gradient of Tr is the gradient
// of recorded v^T H v graphs, i.e. a third backward pass through the tape.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hatrain/autodiff.hpp"
#include "hatrain/data.hpp"
#include "hatrain/error.hpp"
#include "hatrain/hessian.hpp"
#include "hatrain/model.hpp"
#include "hatrain/rng.hpp"

namespace hat {

enum class OptimizerKind : std::uint8_t { sgd, rmsprop };
enum class Gating : std::uint8_t { median_threshold, always, running_average };
enum class Normalization : std::uint8_t { none, min_max };

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::rmsprop;
    double lr = 1e-3;
    double momentum = 0.0;      // sgd
    double rms_decay = 0.99;    // rmsprop
    double rms_eps = 1e-8;      // rmsprop
    std::size_t batch_size = 64;
    std::size_t epochs = 10;
    double lr_gamma = 1.0;           // step decay factor
    std::size_t lr_step_epochs = 0;  // 0 = constant rate
    double alpha = 1.0;
    std::size_t probes = 50;
    std::size_t trace_probes = 0;  // probes entering the differentiable trace term; 0 = all
    Gating gating = Gating::median_threshold;
    Normalization normalization = Normalization::none;
    EigenNorm eigen_norm = EigenNorm::rayleigh;
    std::vector<std::size_t> hessian_layers;  // empty = all parameterised layers
    bool log_trace = false;                   // estimate curvature even when alpha = 0
    std::uint64_t seed = 1;

    void validate() const {
        if (!(alpha >= 0.0)) throw ArgumentError("config: alpha must be >= 0");
        if (probes < 1) throw ArgumentError("config: probes must be >= 1");
        if (!(lr > 0.0)) throw ArgumentError("config: learning rate must be > 0");
        if (batch_size < 1) throw ArgumentError("config: batch size must be >= 1");
        if (momentum < 0.0 || momentum >= 1.0) throw ArgumentError("config: momentum must be in [0,1)");
        if (rms_decay <= 0.0 || rms_decay >= 1.0) throw ArgumentError("config: rms decay must be in (0,1)");
    }

    bool hessian_aware() const { return alpha > 0.0; }
};

/// Baseline defaults: momentum SGD, rate x0.25 every 10 epochs, 40 epochs.
inline TrainConfig baseline_config() {
    TrainConfig c;
    c.optimizer = OptimizerKind::sgd;
    c.lr = 0.1;
    c.momentum = 0.8;
    c.epochs = 40;
    c.lr_gamma = 0.25;
    c.lr_step_epochs = 10;
    c.alpha = 0.0;
    return c;
}

/// Hessian-aware defaults: RMSProp, alpha = 1, p = 50, median gating, same schedule.
inline TrainConfig hat_config() {
    TrainConfig c = baseline_config();
    c.optimizer = OptimizerKind::rmsprop;
    c.lr = 1e-3;
    c.momentum = 0.0;
    c.alpha = 1.0;
    c.probes = 50;
    return c;
}

// ---- gate -------------------------------------------------------------------

struct GateState {
    double tau = 0.0;
    double trace_sum = 0.0;  // running-average variant
    std::size_t trace_count = 0;
};

struct GateDecision {
    bool regularize = false;
    double median = 0.0;
    double tau_before = 0.0;
};

/// Lower median (the element at (n-1)/2 in ascending order).
inline double median(std::span<const double> values) {
    if (values.empty()) throw ArgumentError("median: empty list");
    std::vector<double> v(values.begin(), values.end());
    const auto mid = v.begin() + static_cast<std::ptrdiff_t>((v.size() - 1) / 2);
    std::nth_element(v.begin(), mid, v.end());
    return *mid;
}

/// Median-threshold rule: regularize iff median(lambda) > tau; otherwise tau <- median.
inline GateDecision gate(std::span<const double> eigenvalues, GateState& state) {
    GateDecision d;
    d.median = median(eigenvalues);
    d.tau_before = state.tau;
    d.regularize = d.median > state.tau;
    if (!d.regularize) state.tau = d.median;
    return d;
}

/// Dispatches on the configured gating mode. `trace` feeds the running-average variant.
inline GateDecision gate(std::span<const double> eigenvalues, double trace, GateState& state, Gating mode) {
    switch (mode) {
    case Gating::median_threshold: return gate(eigenvalues, state);
    case Gating::always: {
        GateDecision d;
        d.median = median(eigenvalues);
        d.tau_before = state.tau;
        d.regularize = true;
        return d;
    }
    case Gating::running_average: {
        GateDecision d;
        d.median = median(eigenvalues);
        d.tau_before = state.trace_count ? state.trace_sum / static_cast<double>(state.trace_count) : 0.0;
        d.regularize = state.trace_count == 0 || trace > d.tau_before;
        state.trace_sum += trace;
        ++state.trace_count;
        state.tau = state.trace_sum / static_cast<double>(state.trace_count);
        return d;
    }
    }
    return {};
}

/// Min-max normalised trace, (Tr - min) / (max - min). A degenerate range leaves Tr - min.
inline double minmax_normalize(double trace, std::span<const double> eigenvalues, double* scale = nullptr) {
    const auto [lo, hi] = std::minmax_element(eigenvalues.begin(), eigenvalues.end());
    const double range = *hi - *lo;
    const double s = range > 0.0 ? 1.0 / range : 1.0;
    if (scale) *scale = s;
    return (trace - *lo) * s;
}

// ---- optimizers -------------------------------------------------------------

template <class T>
struct OptimizerState {
    std::vector<T> buffer;  // momentum (sgd) or squared-gradient average (rmsprop)
    bool started = false;
};

template <class T>
void optimizer_step(const TrainConfig& cfg, double lr, std::span<T> params, std::span<const T> grad,
                    OptimizerState<T>& st) {
    if (st.buffer.size() != params.size()) st.buffer.assign(params.size(), T{0});
    const T eta = static_cast<T>(lr);
    switch (cfg.optimizer) {
    case OptimizerKind::sgd: {
        const T mu = static_cast<T>(cfg.momentum);
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (cfg.momentum > 0.0) {
                st.buffer[i] = st.started ? mu * st.buffer[i] + grad[i] : grad[i];
                params[i] -= eta * st.buffer[i];
            } else {
                params[i] -= eta * grad[i];
            }
        }
        break;
    }
    case OptimizerKind::rmsprop: {
        const T rho = static_cast<T>(cfg.rms_decay);
        const T eps = static_cast<T>(cfg.rms_eps);
        for (std::size_t i = 0; i < params.size(); ++i) {
            st.buffer[i] = rho * st.buffer[i] + (T{1} - rho) * grad[i] * grad[i];
            params[i] -= eta * grad[i] / (std::sqrt(st.buffer[i]) + eps);
        }
        break;
    }
    }
    st.started = true;
}

// ---- one step -----------------------------------------------------------------

struct StepLog {
    std::size_t epoch = 0, step = 0;
    double loss = 0.0;        // cross-entropy
    double total_loss = 0.0;  // including the regulariser when applied
    double trace = std::numeric_limits<double>::quiet_NaN();
    double median = std::numeric_limits<double>::quiet_NaN();
    double tau = 0.0;  // threshold in effect when the decision was made
    bool regularized = false;
    bool finite = true;
    double accuracy = 0.0;  // on the mini-batch, before the update
};

/// Everything a step needs besides the config: optimizer moments, gate, counters.
template <class T>
struct TrainState {
    OptimizerState<T> optimizer;
    GateState gate;
    std::size_t step = 0;
    std::size_t epoch = 0;
};

/// One step of Hessian-aware training (or a baseline step when the curvature
/// term is disabled). `lr` lets the caller apply a schedule.
template <class T>
StepLog hat_step(const Architecture& arch, std::span<T> params, BatchView batch, const TrainConfig& cfg,
                 TrainState<T>& state, double lr) {
    StepLog log;
    log.epoch = state.epoch;
    log.step = state.step;
    const std::uint64_t step_seed = substream(cfg.seed ^ 0x5851f42d4c957f2dULL, state.step)();
    ++state.step;
    const std::span<const T> cparams(params.data(), params.size());
    const std::size_t classes = arch.classes();

    const bool curvature = cfg.hessian_aware() || cfg.log_trace;
    if (!curvature) {
        ad::Tape<T> tape(params.size());
        const auto fwd = forward<T>(tape, arch, cparams, batch);
        const ad::NodeId loss = cross_entropy<T>(tape, fwd.logits, batch.labels);
        log.loss = log.total_loss = static_cast<double>(tape.value(loss)[0]);
        log.accuracy = accuracy<T>(tape.value(fwd.logits), batch.labels, classes);
        if (!std::isfinite(log.loss)) {
            log.finite = false;
            return log;
        }
        const auto grad = tape.backprop(loss, false);
        optimizer_step<T>(cfg, lr, params, grad.values.values, state.optimizer);
        return log;
    }

    const ParamMask mask = mask_for_layers(arch, cfg.hessian_layers);
    CurvatureTape<T> ct(loss_builder<T>(arch, batch), cparams, mask);
    log.loss = static_cast<double>(ct.loss());
    // shared kernels: identical to the logits on the tape
    log.accuracy = accuracy<T>(infer<T>(arch, cparams, batch), batch.labels, classes);
    if (!std::isfinite(log.loss)) {
        log.finite = false;
        return log;
    }

    const std::size_t p = cfg.probes;
    const std::size_t n_trace = cfg.trace_probes == 0 ? p : std::min(cfg.trace_probes, p);
    const bool differentiable = cfg.hessian_aware();
    std::vector<std::vector<double>> probes(p);
    std::vector<double> quads(p, 0.0);
    std::vector<ad::NodeId> quad_nodes;
    // unrecorded probes first: their passes rewind the tape, recorded ones must stay
    for (std::size_t i = differentiable ? n_trace : 0; i < p; ++i) {
        probes[i] = rademacher(params.size(), mask, probe_seed(step_seed, i));
        quads[i] = ct.quadratic(probes[i]);
    }
    if (differentiable) {
        for (std::size_t i = 0; i < n_trace; ++i) {
            probes[i] = rademacher(params.size(), mask, probe_seed(step_seed, i));
            const ad::NodeId q = ct.quadratic_node(probes[i]);
            if (q != ad::kNoNode) {
                quad_nodes.push_back(q);
                quads[i] = static_cast<double>(ct.tape().value(q)[0]);
            }
        }
    }

    HessianEstimate est;
    try {
        est = summarize_probes(quads, probes, cfg.eigen_norm, step_seed);
    } catch (const NumericError&) {
        log.finite = false;
        return log;
    }
    log.trace = est.trace;
    const GateDecision decision = gate(est.eigenvalues, est.trace, state.gate, cfg.gating);
    log.median = decision.median;
    log.tau = decision.tau_before;
    log.regularized = differentiable && decision.regularize;

    auto grad = ct.tape().backprop(ct.loss_node(), false);
    log.total_loss = log.loss;
    if (log.regularized) {
        double scale = 1.0;
        double term = est.trace;
        if (cfg.normalization == Normalization::min_max) term = minmax_normalize(est.trace, est.eigenvalues, &scale);
        log.total_loss = log.loss + cfg.alpha * term;
        if (!quad_nodes.empty()) {
            ad::Tape<T>& tape = ct.tape();
            ad::NodeId sum = quad_nodes.front();
            for (std::size_t i = 1; i < quad_nodes.size(); ++i) sum = tape.add(sum, quad_nodes[i]);
            const ad::NodeId reg = tape.scale(sum, cfg.alpha * scale / static_cast<double>(n_trace));
            if (tape.requires_grad(reg)) {
                const auto rgrad = tape.backprop(reg, false, ct.wrt());
                for (std::size_t i = 0; i < grad.values.size(); ++i) grad.values[i] += rgrad.values[i];
            }
        }
    }
    if (!std::isfinite(log.total_loss) ||
        !std::all_of(grad.values.values.begin(), grad.values.values.end(), [](T g) { return std::isfinite(g); })) {
        log.finite = false;
        return log;
    }
    optimizer_step<T>(cfg, lr, params, grad.values.values, state.optimizer);
    return log;
}

// ---- training loop -------------------------------------------------------------

struct EpochLog {
    std::size_t epoch = 0;
    double loss = 0.0;
    double trace = std::numeric_limits<double>::quiet_NaN();
    double regularized_fraction = 0.0;
    double train_accuracy = 0.0;
    double test_accuracy = std::numeric_limits<double>::quiet_NaN();
    double wall_ms = 0.0;
};

struct TrainResult {
    ParamStore model;
    std::vector<StepLog> steps;
    std::vector<EpochLog> epochs;
};

inline double scheduled_lr(const TrainConfig& cfg, std::size_t epoch) {
    if (cfg.lr_step_epochs == 0) return cfg.lr;
    return cfg.lr * std::pow(cfg.lr_gamma, static_cast<double>(epoch / cfg.lr_step_epochs));
}

/// Trains from the seeded initialisation. Deterministic per (spec, data, config).
inline TrainResult train(const ModelSpec& spec, const Dataset& data, const TrainConfig& cfg,
                         const Dataset* test = nullptr) {
    cfg.validate();
    if (data.size() == 0) throw ArgumentError("train: empty dataset");
    TrainResult res{build(spec, cfg.seed), {}, {}};
    const Architecture& arch = res.model.arch();
    check_batch(arch, data.view());

    TrainState<float> state;
    std::vector<std::size_t> order(data.size());
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        state.epoch = epoch;
        std::iota(order.begin(), order.end(), std::size_t{0});
        SplitMix64 rng = substream(cfg.seed, 0x1000 + epoch);
        shuffle<std::size_t>(order, rng);
        const double lr = scheduled_lr(cfg, epoch);

        EpochLog ep;
        ep.epoch = epoch;
        std::size_t steps = 0, finite = 0, regularized = 0, traced = 0;
        double trace_sum = 0.0;
        for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
            const std::size_t count = std::min(cfg.batch_size, order.size() - first);
            const Batch batch = data.gather(std::span<const std::size_t>(order).subspan(first, count));
            StepLog log = hat_step<float>(arch, res.model.values(), batch.view(), cfg, state, lr);
            ++steps;
            if (log.finite) {
                ++finite;
                ep.loss += log.loss;
            }
            if (std::isfinite(log.trace)) {
                ++traced;
                trace_sum += log.trace;
            }
            regularized += log.regularized;
            res.steps.push_back(log);
        }
        if (finite == 0) throw NumericError("train: non-finite loss for every step of epoch " + std::to_string(epoch));
        ep.loss /= static_cast<double>(finite);
        if (traced) ep.trace = trace_sum / static_cast<double>(traced);
        ep.regularized_fraction = static_cast<double>(regularized) / static_cast<double>(steps);
        const auto t1 = std::chrono::steady_clock::now();
        ep.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        ep.train_accuracy = accuracy(res.model, data.view());
        if (test) ep.test_accuracy = accuracy(res.model, test->view());
        res.epochs.push_back(ep);
    }
    return res;
}

} // namespace hat
