#pragma once

// Single-bit corruption of float32 parameters.
//
// Bits are numbered from 0 (mantissa LSB) to 31 (sign); 23..30 are the
// exponent and 30 is its most significant bit. Some reports also print the
// 1-based position (bit + 1), under which the exponent MSB is "bit 31".

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "hatrain/data.hpp"
#include "hatrain/error.hpp"
#include "hatrain/hash.hpp"
#include "hatrain/model.hpp"
#include "hatrain/rng.hpp"

namespace hat {

inline constexpr int kSignBit = 31;
inline constexpr int kExponentMsb = 30;
inline constexpr int kExponentLsb = 23;

inline std::uint32_t flip_bit(std::uint32_t pattern, int pos) {
    if (pos < 0 || pos > 31) throw ArgumentError("flip_bit: position " + std::to_string(pos) + " outside [0,31]");
    return pattern ^ (std::uint32_t{1} << pos);
}

inline float flip_bit(float value, int pos) {
    return std::bit_cast<float>(flip_bit(std::bit_cast<std::uint32_t>(value), pos));
}

inline float decode(std::uint32_t pattern) { return std::bit_cast<float>(pattern); }

struct FlipRecord {
    std::size_t param_id = 0;
    std::size_t layer = 0;
    int bit = 0;
    std::uint32_t old_bits = 0, new_bits = 0;
    double acc_after = 0.0;
    double rad = 0.0;

    float old_value() const { return decode(old_bits); }
    float new_value() const { return decode(new_bits); }
};

/// Relative accuracy drop (A_c - A_p) / A_c.
inline double rad(double clean, double corrupted) {
    if (!(clean > 0.0)) throw ArgumentError("rad: clean accuracy must be positive");
    return (clean - corrupted) / clean;
}

enum class SweepStrategy : std::uint8_t { all_bits, exponent_only, msb_only, sampled };

struct SweepPlan {
    SweepStrategy strategy = SweepStrategy::exponent_only;
    double fraction = 1.0;  // sampled
    std::uint64_t seed = 0; // sampled
    std::vector<std::size_t> layers;  // empty = every parameterised layer
};

/// Bits examined per parameter for a strategy (sampled draws from all 32).
inline std::vector<int> plan_bits(SweepStrategy s) {
    switch (s) {
    case SweepStrategy::msb_only: return {kExponentMsb};
    case SweepStrategy::exponent_only: {
        std::vector<int> b;
        for (int i = kExponentLsb; i <= kSignBit; ++i) b.push_back(i);
        return b;
    }
    case SweepStrategy::all_bits:
    case SweepStrategy::sampled: {
        std::vector<int> b(32);
        std::iota(b.begin(), b.end(), 0);
        return b;
    }
    }
    return {};
}

/// (parameter, bit) pairs in ascending order; unique by construction.
inline std::vector<std::pair<std::size_t, int>> plan_pairs(const Architecture& arch, const SweepPlan& plan) {
    std::vector<std::size_t> layers = plan.layers;
    if (layers.empty()) layers = arch.param_layers();
    std::sort(layers.begin(), layers.end());
    layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
    const auto bits = plan_bits(plan.strategy);
    std::vector<std::pair<std::size_t, int>> pairs;
    for (std::size_t li : layers) {
        if (li >= arch.layers().size() || !arch.layer(li).has_params())
            throw ArgumentError("sweep plan: layer " + std::to_string(li) + " has no parameters");
        const LayerInfo& info = arch.layer(li);
        for (std::size_t i = 0; i < info.param_count(); ++i)
            for (int b : bits) pairs.emplace_back(info.param_offset + i, b);
    }
    if (plan.strategy == SweepStrategy::sampled) {
        if (!(plan.fraction > 0.0 && plan.fraction <= 1.0)) throw ArgumentError("sweep plan: fraction must be in (0,1]");
        const auto keep = static_cast<std::size_t>(std::llround(plan.fraction * static_cast<double>(pairs.size())));
        SplitMix64 rng(plan.seed);
        for (std::size_t i = 0; i < keep; ++i) std::swap(pairs[i], pairs[i + rng.below(pairs.size() - i)]);
        pairs.resize(keep);
        std::sort(pairs.begin(), pairs.end());
    }
    return pairs;
}

/// Scores a model on a fixed evaluation set, reusing clean activations below
/// the first layer whose parameters differ from the reference copy.
class CachedEvaluator {
public:
    CachedEvaluator(const ParamStore& reference, BatchView evalset)
        : arch_(reference.arch_ptr()), labels_(evalset.labels.begin(), evalset.labels.end()) {
        check_batch(*arch_, evalset);
        std::vector<float> x(evalset.inputs.begin(), evalset.inputs.end());
        for (std::size_t li = 0; li < arch_->layers().size(); ++li) {
            acts_.push_back(x);
            x = apply_layer<float>(*arch_, li, reference.values(), x, labels_.size());
        }
        clean_ = accuracy<float>(x, labels_, arch_->classes());
        clean_loss_ = loss_xe<float>(x, labels_, arch_->classes());
    }

    double clean_accuracy() const { return clean_; }
    double clean_loss() const { return clean_loss_; }
    std::size_t size() const { return labels_.size(); }
    std::span<const std::uint32_t> labels() const { return labels_; }

    /// Logits when only layers >= `first_changed` may differ from the reference.
    std::vector<float> logits(std::span<const float> params, std::size_t first_changed) const {
        return infer_from<float>(*arch_, first_changed, params, acts_.at(first_changed), labels_.size());
    }

    double accuracy_with(std::span<const float> params, std::size_t first_changed) const {
        return accuracy<float>(logits(params, first_changed), labels_, arch_->classes());
    }

    double loss_with(std::span<const float> params, std::size_t first_changed) const {
        return loss_xe<float>(logits(params, first_changed), labels_, arch_->classes());
    }

    /// (loss, accuracy) from one forward pass.
    std::pair<double, double> score_with(std::span<const float> params, std::size_t first_changed) const {
        const auto z = logits(params, first_changed);
        return {loss_xe<float>(z, labels_, arch_->classes()), accuracy<float>(z, labels_, arch_->classes())};
    }

private:
    std::shared_ptr<const Architecture> arch_;
    std::vector<std::uint32_t> labels_;
    std::vector<std::vector<float>> acts_;
    double clean_ = 0.0, clean_loss_ = 0.0;
};

inline unsigned default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

/// Flips every planned (parameter, bit) pair one at a time, scores the eval
/// set, and restores the pattern. Workers own private copies of the
/// parameters; records come back in plan order.
inline std::vector<FlipRecord> sweep(const ParamStore& model, const SweepPlan& plan, BatchView evalset,
                                     unsigned workers = 1) {
    const auto pairs = plan_pairs(model.arch(), plan);
    const CachedEvaluator eval(model, evalset);
    const double clean = eval.clean_accuracy();
    if (!(clean > 0.0)) throw ArgumentError("sweep: model has zero clean accuracy on the eval set");
    const std::uint64_t before = fnv1a64(model.bytes());

    std::vector<FlipRecord> out(pairs.size());
    workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(pairs.size(), 1))));
    std::vector<std::string> failures(workers);

    auto run = [&](unsigned w) {
        std::vector<float> params(model.values().begin(), model.values().end());
        for (std::size_t k = w; k < pairs.size(); k += workers) {
            const auto [id, bit] = pairs[k];
            const std::uint32_t old_bits = std::bit_cast<std::uint32_t>(params[id]);
            const std::uint32_t new_bits = flip_bit(old_bits, bit);
            const ParamLocation loc = model.locate(id);
            params[id] = std::bit_cast<float>(new_bits);
            const double acc = eval.accuracy_with(params, loc.layer);
            params[id] = std::bit_cast<float>(old_bits);
            if (std::bit_cast<std::uint32_t>(params[id]) != old_bits) {
                failures[w] = "restoration failed at parameter " + std::to_string(id);
                return;
            }
            out[k] = {id, loc.layer, bit, old_bits, new_bits, acc, (clean - acc) / clean};
        }
        if (fnv1a64(std::as_bytes(std::span<const float>(params))) != before)
            failures[w] = "worker copy differs from the model after restoration";
    };

    if (workers == 1) {
        run(0);
    } else {
        std::vector<std::jthread> pool;
        for (unsigned w = 0; w < workers; ++w) pool.emplace_back(run, w);
    }
    for (const auto& f : failures)
        if (!f.empty()) throw Error("sweep: " + f);
    if (fnv1a64(model.bytes()) != before) throw Error("sweep: model bytes changed");
    return out;
}

// ---- summaries -----------------------------------------------------------------

inline constexpr double kErraticThreshold = 0.10;

struct Census {
    std::size_t erratic = 0;
    std::size_t swept = 0;  // distinct parameters in the records
    double ratio = 0.0;
    std::vector<std::size_t> erratic_ids;  // ascending
};

/// A parameter is erratic if any of its swept bits yields rad > threshold.
inline Census census(std::span<const FlipRecord> records, double threshold = kErraticThreshold) {
    std::vector<std::pair<std::size_t, bool>> per;  // (param, erratic)
    per.reserve(records.size());
    for (const auto& r : records) per.emplace_back(r.param_id, r.rad > threshold);
    std::sort(per.begin(), per.end());
    Census c;
    for (std::size_t i = 0; i < per.size();) {
        std::size_t j = i;
        bool erratic = false;
        while (j < per.size() && per[j].first == per[i].first) erratic |= per[j++].second;
        ++c.swept;
        if (erratic) c.erratic_ids.push_back(per[i].first);
        i = j;
    }
    c.erratic = c.erratic_ids.size();
    c.ratio = c.swept ? static_cast<double>(c.erratic) / static_cast<double>(c.swept) : 0.0;
    return c;
}

/// 20 bins of width 0.05 over (0, 1] plus an underflow bin for rad <= 0.
struct RadHistogram {
    static constexpr std::size_t kBins = 20;
    static constexpr double kWidth = 0.05;
    std::size_t underflow = 0;
    std::array<std::size_t, kBins> bins{};

    static std::size_t bin_of(double rad) {
        const double scaled = std::floor(rad / kWidth + 1e-9);  // 0.95 / 0.05 is 18.999...
        return static_cast<std::size_t>(std::clamp(scaled, 0.0, static_cast<double>(kBins - 1)));
    }

    std::size_t total() const { return std::accumulate(bins.begin(), bins.end(), underflow); }

    /// Flips in bins covering [lo, 1.0].
    std::size_t mass_from(double lo) const {
        std::size_t n = 0;
        for (std::size_t b = bin_of(lo); b < kBins; ++b) n += bins[b];
        return n;
    }
};

inline RadHistogram histogram(std::span<const FlipRecord> records) {
    RadHistogram h;
    for (const auto& r : records) {
        if (!(r.rad > 0.0)) ++h.underflow;
        else ++h.bins[RadHistogram::bin_of(r.rad)];
    }
    return h;
}

// ---- CSV ---------------------------------------------------------------------------

inline constexpr const char* kFlipCsvHeader = "param_id,layer,bit,old_hex,new_hex,acc_after,rad\n";

inline std::string flips_csv(std::span<const FlipRecord> records) {
    std::string out = kFlipCsvHeader;
    for (const auto& r : records)
        out += csv_row(r.param_id, r.layer, r.bit, hex32(r.old_bits), hex32(r.new_bits), r.acc_after, r.rad);
    return out;
}

inline std::vector<FlipRecord> parse_flips_csv(const CsvTable& t) {
    const std::vector<std::string> want = {"param_id", "layer", "bit", "old_hex", "new_hex", "acc_after", "rad"};
    if (t.header != want) throw FormatError("flip csv: header must be " + std::string(kFlipCsvHeader));
    std::vector<FlipRecord> out;
    out.reserve(t.rows.size());
    try {
        for (const auto& row : t.rows) {
            FlipRecord r;
            r.param_id = std::stoull(row[0]);
            r.layer = std::stoull(row[1]);
            r.bit = std::stoi(row[2]);
            r.old_bits = static_cast<std::uint32_t>(std::stoul(row[3], nullptr, 16));
            r.new_bits = static_cast<std::uint32_t>(std::stoul(row[4], nullptr, 16));
            r.acc_after = std::stod(row[5]);
            r.rad = std::stod(row[6]);
            if (r.bit < 0 || r.bit > 31) throw FormatError("flip csv: bit out of range");
            out.push_back(r);
        }
    } catch (const std::logic_error&) {
        throw FormatError("flip csv: malformed number");
    }
    return out;
}

inline std::string histogram_csv(const RadHistogram& h) {
    std::string out = "bin,lo,hi,count\n";
    out += csv_row(std::string("underflow"), std::string("-inf"), 0.0, h.underflow);
    for (std::size_t b = 0; b < RadHistogram::kBins; ++b)
        out += csv_row(b, RadHistogram::kWidth * static_cast<double>(b), RadHistogram::kWidth * static_cast<double>(b + 1),
                       h.bins[b]);
    return out;
}

} // namespace hat
