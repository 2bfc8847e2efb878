#pragma once

// Progressive bit search: repeatedly commit the single candidate flip that
// raises the attack-batch loss the most, until the eval set reaches a target
// relative accuracy drop or the flip budget runs out.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "hatrain/autodiff.hpp"
#include "hatrain/bitflip.hpp"
#include "hatrain/error.hpp"
#include "hatrain/model.hpp"

namespace hat {

struct Candidate {
    std::size_t param_id = 0;
    std::size_t layer = 0;
    int bit = kExponentMsb;
    bool sign = false;  // true for the sign-bit variant

    friend bool operator==(const Candidate&, const Candidate&) = default;
};

/// Loss used to compare trial flips; NaN is treated as the worst case.
inline double attack_loss(double v) { return std::isnan(v) ? std::numeric_limits<double>::infinity() : v; }

/// Attack-batch damage: loss first, then accuracy once the loss saturates at +inf.
struct Damage {
    double loss = 0.0;
    double accuracy = 1.0;

    bool operator>(const Damage& o) const {
        if (loss != o.loss) return loss > o.loss;
        return accuracy < o.accuracy;
    }
};

/// Mean cross-entropy gradient on `batch`, in double precision.
inline std::vector<double> loss_gradient(const ParamStore& m, BatchView batch) {
    check_batch(m.arch(), batch);
    const auto params = m.to_double();
    ad::Tape<double> tape(params.size());
    const auto loss = loss_builder<double>(m.arch(), batch)(tape, params);
    return ad::backprop(tape, loss, false).values.values;
}

/// Per layer, the k parameters with the largest |dL/dtheta| (ties: larger
/// |theta|, then lower id), each with the exponent MSB and optionally the sign
/// bit. Returned sorted by (param_id, bit).
inline std::vector<Candidate> rank_candidates(const ParamStore& m, BatchView batch, std::size_t k,
                                              bool include_sign = true) {
    if (k < 1) throw ArgumentError("rank_candidates: k must be >= 1");
    const auto grad = loss_gradient(m, batch);
    auto mag = [](double v) { return std::isnan(v) ? std::numeric_limits<double>::infinity() : std::fabs(v); };
    std::vector<Candidate> out;
    for (std::size_t li : m.arch().param_layers()) {
        const LayerInfo& info = m.arch().layer(li);
        std::vector<std::size_t> ids(info.param_count());
        std::iota(ids.begin(), ids.end(), info.param_offset);
        const std::size_t take = std::min(k, ids.size());
        std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(take), ids.end(),
                          [&](std::size_t a, std::size_t b) {
                              const double ga = mag(grad[a]), gb = mag(grad[b]);
                              if (ga != gb) return ga > gb;
                              const double ta = mag(m[a]), tb = mag(m[b]);
                              if (ta != tb) return ta > tb;
                              return a < b;
                          });
        for (std::size_t i = 0; i < take; ++i) {
            out.push_back({ids[i], li, kExponentMsb, false});
            if (include_sign) out.push_back({ids[i], li, kSignBit, true});
        }
    }
    std::sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) {
        return a.param_id != b.param_id ? a.param_id < b.param_id : a.bit < b.bit;
    });
    return out;
}

struct AttackConfig {
    double target_rad = 0.9;
    std::size_t budget = 50;
    std::size_t k = 10;
    bool include_sign = true;
    unsigned workers = 1;
};

struct AttackStep {
    std::size_t iteration = 0;
    FlipRecord flip;
    double loss_before = 0.0, loss_after = 0.0;
};

struct AttackResult {
    std::vector<AttackStep> steps;
    double clean_accuracy = 0.0;
    double final_accuracy = 0.0;
    bool reached_target = false;
    ParamStore attacked;

    std::size_t flips() const { return steps.size(); }
    double final_rad() const { return clean_accuracy > 0 ? (clean_accuracy - final_accuracy) / clean_accuracy : 0.0; }
};

/// Attacks a copy of `victim`; the victim itself is never written.
inline AttackResult progressive_search(const ParamStore& victim, BatchView attack_batch, BatchView evalset,
                                       const AttackConfig& cfg = {}) {
    if (cfg.k < 1) throw ArgumentError("progressive_search: k must be >= 1");
    check_batch(victim.arch(), attack_batch);
    check_batch(victim.arch(), evalset);

    AttackResult res;
    res.attacked = victim;
    res.clean_accuracy = accuracy(victim, evalset);
    if (!(res.clean_accuracy > 0.0)) throw ArgumentError("progressive_search: zero clean accuracy");
    res.final_accuracy = res.clean_accuracy;
    auto reached = [&] { return res.final_rad() >= cfg.target_rad; };
    res.reached_target = reached();

    for (std::size_t it = 0; it < cfg.budget && !res.reached_target; ++it) {
        const CachedEvaluator trial(res.attacked, attack_batch);
        const Damage before{attack_loss(trial.clean_loss()), trial.clean_accuracy()};
        const auto cands = rank_candidates(res.attacked, attack_batch, cfg.k, cfg.include_sign);

        std::vector<Damage> damage(cands.size());
        const unsigned workers = std::max(1u, std::min<unsigned>(cfg.workers, static_cast<unsigned>(cands.size())));
        auto run = [&](unsigned w) {
            std::vector<float> params(res.attacked.values().begin(), res.attacked.values().end());
            for (std::size_t c = w; c < cands.size(); c += workers) {
                const float old = params[cands[c].param_id];
                params[cands[c].param_id] = flip_bit(old, cands[c].bit);
                const auto [loss, acc] = trial.score_with(params, cands[c].layer);
                damage[c] = {attack_loss(loss), acc};
                params[cands[c].param_id] = old;
            }
        };
        if (workers == 1) {
            run(0);
        } else {
            std::vector<std::jthread> pool;
            for (unsigned w = 0; w < workers; ++w) pool.emplace_back(run, w);
        }

        // Candidates are in id order, so the first maximum is the lowest id.
        std::size_t best = 0;
        for (std::size_t c = 1; c < cands.size(); ++c)
            if (damage[c] > damage[best]) best = c;
        if (cands.empty() || !(damage[best] > before)) break;

        const Candidate& pick = cands[best];
        const std::uint32_t old_bits = res.attacked.bits(pick.param_id);
        res.attacked.set_bits(pick.param_id, flip_bit(old_bits, pick.bit));
        res.final_accuracy = accuracy(res.attacked, evalset);
        AttackStep step;
        step.iteration = it;
        step.flip = {pick.param_id, pick.layer, pick.bit, old_bits, res.attacked.bits(pick.param_id),
                     res.final_accuracy, res.final_rad()};
        step.loss_before = before.loss;
        step.loss_after = damage[best].loss;
        res.steps.push_back(step);
        res.reached_target = reached();
    }
    return res;
}

inline std::string attack_csv(const AttackResult& r) {
    std::string out = "iteration,param_id,bit,loss_before,loss_after,acc_after\n";
    for (const auto& s : r.steps)
        out += csv_row(s.iteration, s.flip.param_id, s.flip.bit, s.loss_before, s.loss_after, s.flip.acc_after);
    return out;
}

} // namespace hat
