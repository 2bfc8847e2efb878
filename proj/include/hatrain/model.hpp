#pragma once

// Small feed-forward models over a flat float32 parameter buffer.
//
// The buffer is the corruption target: parameter `id` lives at byte 4*id, and
// each parameterised layer stores its weights followed by its biases. Dense
// weights are [out, in]; conv weights are [out_ch, in_ch * k * k].

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "hatrain/autodiff.hpp"
#include "hatrain/error.hpp"
#include "hatrain/kernels.hpp"
#include "hatrain/rng.hpp"

namespace hat {

static_assert(std::endian::native == std::endian::little,
              "parameter byte layout assumes a little-endian host");

struct Dense {
    std::size_t in = 0, out = 0;
};
struct Conv2d {
    std::size_t in_channels = 0, out_channels = 0, kernel = 0;
};
struct Relu {};
struct MaxPool {
    std::size_t k = 2;
};
struct Flatten {};

using LayerSpec = std::variant<Dense, Conv2d, Relu, MaxPool, Flatten>;

enum class LayerKind : std::uint8_t { dense = 0, conv2d = 1, relu = 2, maxpool = 3, flatten = 4 };

inline LayerKind kind_of(const LayerSpec& l) { return static_cast<LayerKind>(l.index()); }

inline const char* kind_name(LayerKind k) {
    switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::flatten: return "flatten";
    }
    return "?";
}

struct ModelSpec {
    std::vector<LayerSpec> layers;
    /// Per-sample shape: {features} or {channels, height, width}.
    std::vector<std::size_t> input_shape;
    std::size_t classes = 0;
};

/// Resolved shapes and parameter ranges for one layer.
struct LayerInfo {
    LayerKind kind{};
    std::vector<std::size_t> in_shape, out_shape;  // per sample
    std::size_t param_offset = 0;
    std::size_t weight_count = 0, bias_count = 0;

    std::size_t param_count() const { return weight_count + bias_count; }
    bool has_params() const { return param_count() > 0; }
};

inline std::size_t product(const std::vector<std::size_t>& s) {
    std::size_t p = 1;
    for (auto v : s) p *= v;
    return p;
}

/// A validated ModelSpec with its parameter layout.
class Architecture {
public:
    explicit Architecture(ModelSpec spec) : spec_(std::move(spec)) {
        if (spec_.classes == 0) throw ShapeError("model: class count must be positive");
        if (spec_.input_shape.empty() || product(spec_.input_shape) == 0)
            throw ShapeError("model: empty input shape");
        std::vector<std::size_t> cur = spec_.input_shape;
        std::size_t offset = 0;
        for (std::size_t li = 0; li < spec_.layers.size(); ++li) {
            LayerInfo info;
            info.kind = kind_of(spec_.layers[li]);
            info.in_shape = cur;
            info.param_offset = offset;
            const std::string where = "layer " + std::to_string(li) + " (" + kind_name(info.kind) + "): ";
            std::visit(
                [&](const auto& l) {
                    using L = std::decay_t<decltype(l)>;
                    if constexpr (std::is_same_v<L, Dense>) {
                        if (cur.size() != 1 || cur[0] != l.in)
                            throw ShapeError(where + "expects " + std::to_string(l.in) + " features");
                        if (l.out == 0) throw ShapeError(where + "zero outputs");
                        info.weight_count = l.in * l.out;
                        info.bias_count = l.out;
                        cur = {l.out};
                    } else if constexpr (std::is_same_v<L, Conv2d>) {
                        if (cur.size() != 3 || cur[0] != l.in_channels)
                            throw ShapeError(where + "expects [" + std::to_string(l.in_channels) + ",h,w]");
                        if (l.kernel == 0 || l.kernel > cur[1] || l.kernel > cur[2] || l.out_channels == 0)
                            throw ShapeError(where + "kernel does not fit the input");
                        info.weight_count = l.out_channels * l.in_channels * l.kernel * l.kernel;
                        info.bias_count = l.out_channels;
                        cur = {l.out_channels, cur[1] - l.kernel + 1, cur[2] - l.kernel + 1};
                    } else if constexpr (std::is_same_v<L, MaxPool>) {
                        if (cur.size() != 3 || l.k == 0 || cur[1] < l.k || cur[2] < l.k)
                            throw ShapeError(where + "pool window does not fit the input");
                        cur = {cur[0], cur[1] / l.k, cur[2] / l.k};
                    } else if constexpr (std::is_same_v<L, Flatten>) {
                        cur = {product(cur)};
                    }
                },
                spec_.layers[li]);
            info.out_shape = cur;
            offset += info.param_count();
            layers_.push_back(std::move(info));
        }
        if (cur.size() != 1 || cur[0] != spec_.classes)
            throw ShapeError("model: final output must be " + std::to_string(spec_.classes) + " logits");
        param_count_ = offset;
        for (std::size_t li = 0; li < layers_.size(); ++li)
            if (layers_[li].has_params()) param_layers_.push_back(li);
    }

    const ModelSpec& spec() const { return spec_; }
    const std::vector<LayerInfo>& layers() const { return layers_; }
    const LayerInfo& layer(std::size_t i) const { return layers_.at(i); }
    /// Indices of layers that own parameters, in order.
    const std::vector<std::size_t>& param_layers() const { return param_layers_; }
    std::size_t param_count() const { return param_count_; }
    std::size_t input_size() const { return product(spec_.input_shape); }
    std::size_t classes() const { return spec_.classes; }

private:
    ModelSpec spec_;
    std::vector<LayerInfo> layers_;
    std::vector<std::size_t> param_layers_;
    std::size_t param_count_ = 0;
};

struct ParamLocation {
    std::size_t layer = 0;
    std::size_t offset = 0;  // within the layer's parameter block
    std::size_t byte_offset = 0;

    friend bool operator==(const ParamLocation&, const ParamLocation&) = default;
};

/// Canonical float32 parameters plus the architecture they belong to.
class ParamStore {
public:
    ParamStore() = default;
    ParamStore(std::shared_ptr<const Architecture> arch, std::vector<float> data)
        : arch_(std::move(arch)), data_(std::move(data)) {
        if (!arch_) throw ArgumentError("ParamStore: null architecture");
        if (data_.size() != arch_->param_count())
            throw ShapeError("ParamStore: expected " + std::to_string(arch_->param_count()) +
                             " parameters, got " + std::to_string(data_.size()));
    }

    const Architecture& arch() const { return *arch_; }
    const std::shared_ptr<const Architecture>& arch_ptr() const { return arch_; }
    std::size_t size() const { return data_.size(); }
    std::span<float> values() { return data_; }
    std::span<const float> values() const { return data_; }
    float& operator[](std::size_t id) { return data_[id]; }
    float operator[](std::size_t id) const { return data_[id]; }

    std::uint32_t bits(std::size_t id) const { return std::bit_cast<std::uint32_t>(data_.at(id)); }
    void set_bits(std::size_t id, std::uint32_t pattern) { data_.at(id) = std::bit_cast<float>(pattern); }

    std::span<const std::byte> bytes() const { return std::as_bytes(std::span<const float>(data_)); }

    ParamLocation locate(std::size_t id) const {
        if (id >= data_.size())
            throw ArgumentError("param_locate: id " + std::to_string(id) + " out of range");
        const auto& pl = arch_->param_layers();
        auto it = std::upper_bound(pl.begin(), pl.end(), id, [&](std::size_t v, std::size_t li) {
            return v < arch_->layer(li).param_offset;
        });
        const std::size_t layer = *(it - 1);
        const std::size_t offset = id - arch_->layer(layer).param_offset;
        return {layer, offset, 4 * id};
    }

    std::size_t flat_id(std::size_t layer, std::size_t offset) const {
        const LayerInfo& info = arch_->layer(layer);
        if (offset >= info.param_count())
            throw ArgumentError("flat_id: offset " + std::to_string(offset) + " outside layer " +
                                std::to_string(layer));
        return info.param_offset + offset;
    }

    std::vector<double> to_double() const { return {data_.begin(), data_.end()}; }

    friend bool operator==(const ParamStore& a, const ParamStore& b) {
        return a.data_.size() == b.data_.size() &&
               std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(float)) == 0;
    }

private:
    std::shared_ptr<const Architecture> arch_;
    std::vector<float> data_;
};

/// Deterministic init: weights and biases uniform in +-sqrt(1/fan_in).
inline ParamStore build(const ModelSpec& spec, std::uint64_t seed) {
    auto arch = std::make_shared<const Architecture>(spec);
    std::vector<float> data(arch->param_count());
    SplitMix64 rng(seed);
    for (std::size_t li : arch->param_layers()) {
        const LayerInfo& info = arch->layer(li);
        const std::size_t fan_in = info.weight_count / info.bias_count;
        const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
        for (std::size_t i = 0; i < info.param_count(); ++i)
            data[info.param_offset + i] = static_cast<float>(rng.uniform(-bound, bound));
    }
    return ParamStore(std::move(arch), std::move(data));
}

// ---- data views -------------------------------------------------------------

/// Row-major samples and their labels; non-owning.
struct BatchView {
    std::span<const float> inputs;
    std::span<const std::uint32_t> labels;

    std::size_t size() const { return labels.size(); }
};

/// Owning mini-batch.
struct Batch {
    std::vector<float> inputs;
    std::vector<std::uint32_t> labels;

    BatchView view() const { return {inputs, labels}; }
    std::size_t size() const { return labels.size(); }
};

inline void check_batch(const Architecture& arch, BatchView b) {
    if (b.inputs.size() != b.size() * arch.input_size())
        throw ShapeError("batch: expected " + std::to_string(arch.input_size()) + " features per sample");
    for (auto y : b.labels)
        if (y >= arch.classes()) throw ShapeError("batch: label " + std::to_string(y) + " out of range");
}

// ---- differentiable forward -------------------------------------------------

template <class T>
struct TapeForward {
    ad::NodeId logits = ad::kNoNode;
    /// Parameter leaf ids per parameterised layer: {weight, bias}.
    std::vector<std::pair<ad::NodeId, ad::NodeId>> leaves;
    /// Layer index per entry of `leaves`.
    std::vector<std::size_t> leaf_layers;
};

/// Records the forward pass on `tape`. The tape must be sized to param_count().
template <class T>
TapeForward<T> forward(ad::Tape<T>& tape, const Architecture& arch, std::span<const T> params,
                       BatchView batch) {
    check_batch(arch, batch);
    if (params.size() != arch.param_count()) throw ShapeError("forward: parameter count mismatch");
    const std::size_t n = batch.size();
    TapeForward<T> out;

    std::vector<T> x(batch.inputs.begin(), batch.inputs.end());
    ad::Shape xs{n};
    xs.insert(xs.end(), arch.spec().input_shape.begin(), arch.spec().input_shape.end());
    ad::NodeId h = tape.constant(std::move(x), xs);

    for (std::size_t li = 0; li < arch.layers().size(); ++li) {
        const LayerInfo& info = arch.layer(li);
        const auto& spec = arch.spec().layers[li];
        auto leaf = [&](std::size_t from, std::size_t count, ad::Shape s) {
            return tape.param(params.subspan(info.param_offset + from, count), info.param_offset + from,
                              std::move(s));
        };
        switch (info.kind) {
        case LayerKind::dense: {
            const auto& d = std::get<Dense>(spec);
            const ad::NodeId w = leaf(0, info.weight_count, {d.out, d.in});
            const ad::NodeId b = leaf(info.weight_count, info.bias_count, {d.out});
            out.leaves.emplace_back(w, b);
            out.leaf_layers.push_back(li);
            const ad::NodeId y = tape.matmul(tape.reshape(h, {n, d.in}), w, false, true);
            h = tape.add(y, tape.broadcast(b, n, 1, {n, d.out}));
            break;
        }
        case LayerKind::conv2d: {
            const auto& c = std::get<Conv2d>(spec);
            const kernels::ConvGeom g{n, c.in_channels, info.in_shape[1], info.in_shape[2], c.kernel};
            const ad::NodeId w = leaf(0, info.weight_count, {c.out_channels, g.patch_size()});
            const ad::NodeId b = leaf(info.weight_count, info.bias_count, {c.out_channels});
            out.leaves.emplace_back(w, b);
            out.leaf_layers.push_back(li);
            const ad::NodeId cols = tape.im2col(h, g);
            const ad::NodeId y = tape.matmul(cols, w, false, true);  // [n*P, out_ch]
            const ad::Shape ys{n, c.out_channels, g.out_height(), g.out_width()};
            const ad::NodeId yt = tape.transpose(y, n, g.patches(), c.out_channels, ys);
            h = tape.add(yt, tape.broadcast(b, n, g.patches(), ys));
            break;
        }
        case LayerKind::relu: h = tape.relu(h); break;
        case LayerKind::maxpool: {
            const std::size_t k = std::get<MaxPool>(spec).k;
            const auto& s = info.in_shape;
            auto idx = std::make_shared<const std::vector<std::uint32_t>>(
                kernels::maxpool_argmax<T>(tape.value(h), n, s[0], s[1], s[2], k));
            h = tape.gather(h, std::move(idx), {n, info.out_shape[0], info.out_shape[1], info.out_shape[2]});
            break;
        }
        case LayerKind::flatten: h = tape.reshape(h, {n, info.out_shape[0]}); break;
        }
    }
    out.logits = tape.reshape(h, {n, arch.classes()});
    return out;
}

/// Mean softmax cross-entropy as a tape node.
template <class T>
ad::NodeId cross_entropy(ad::Tape<T>& tape, ad::NodeId logits, std::span<const std::uint32_t> labels) {
    const ad::Shape& s = tape.shape(logits);
    const std::size_t n = s[0], c = s[1];
    if (labels.size() != n) throw ShapeError("cross_entropy: label count mismatch");
    auto pick = std::make_shared<std::vector<std::uint32_t>>(n);
    for (std::size_t i = 0; i < n; ++i) (*pick)[i] = static_cast<std::uint32_t>(i * c + labels[i]);
    const ad::NodeId lse = tape.logsumexp(logits);
    const ad::NodeId target = tape.gather(logits, std::move(pick), {n});
    return tape.scale(tape.sum(tape.sub(lse, target)), 1.0 / static_cast<double>(n));
}

/// Loss builder for hvp()/exact oracles over a fixed batch.
template <class T>
ad::LossBuilder<T> loss_builder(const Architecture& arch, BatchView batch) {
    return [&arch, batch](ad::Tape<T>& tape, std::span<const T> params) {
        const auto fwd = forward<T>(tape, arch, params, batch);
        return cross_entropy<T>(tape, fwd.logits, batch.labels);
    };
}

// ---- plain inference --------------------------------------------------------

/// Applies layer `li` to a batch of activations.
template <class T>
std::vector<T> apply_layer(const Architecture& arch, std::size_t li, std::span<const T> params,
                           std::span<const T> x, std::size_t n) {
    const LayerInfo& info = arch.layer(li);
    const auto& spec = arch.spec().layers[li];
    switch (info.kind) {
    case LayerKind::dense: {
        const auto& d = std::get<Dense>(spec);
        const auto w = params.subspan(info.param_offset, info.weight_count);
        const auto b = params.subspan(info.param_offset + info.weight_count, info.bias_count);
        std::vector<T> y(n * d.out), bias(n * d.out);
        kernels::matmul<T>(x, w, y, n, d.in, d.out, false, true);
        kernels::broadcast<T>(b, bias, n, d.out, 1);
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = y[i] + bias[i];
        return y;
    }
    case LayerKind::conv2d: {
        const auto& c = std::get<Conv2d>(spec);
        const kernels::ConvGeom g{n, c.in_channels, info.in_shape[1], info.in_shape[2], c.kernel};
        const auto w = params.subspan(info.param_offset, info.weight_count);
        const auto b = params.subspan(info.param_offset + info.weight_count, info.bias_count);
        std::vector<T> cols(g.cols_size()), y(n * g.patches() * c.out_channels);
        kernels::im2col<T>(x, cols, g);
        kernels::matmul<T>(cols, w, y, n * g.patches(), g.patch_size(), c.out_channels, false, true);
        std::vector<T> yt(y.size()), bias(y.size());
        kernels::transpose_last2<T>(y, yt, n, g.patches(), c.out_channels);
        kernels::broadcast<T>(b, bias, n, c.out_channels, g.patches());
        for (std::size_t i = 0; i < yt.size(); ++i) yt[i] = yt[i] + bias[i];
        return yt;
    }
    case LayerKind::relu: {
        std::vector<T> y(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
        return y;
    }
    case LayerKind::maxpool: {
        const auto& s = info.in_shape;
        const auto idx = kernels::maxpool_argmax<T>(x, n, s[0], s[1], s[2], std::get<MaxPool>(spec).k);
        std::vector<T> y(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) y[i] = x[idx[i]];
        return y;
    }
    case LayerKind::flatten: return {x.begin(), x.end()};
    }
    return {};
}

/// Runs layers [from, end) starting from activations `x` (the input of layer `from`).
template <class T>
std::vector<T> infer_from(const Architecture& arch, std::size_t from, std::span<const T> params,
                          std::vector<T> x, std::size_t n) {
    for (std::size_t li = from; li < arch.layers().size(); ++li) x = apply_layer<T>(arch, li, params, x, n);
    return x;
}

/// Logits [n, classes] for a batch.
template <class T>
std::vector<T> infer(const Architecture& arch, std::span<const T> params, BatchView batch) {
    check_batch(arch, batch);
    return infer_from<T>(arch, 0, params, std::vector<T>(batch.inputs.begin(), batch.inputs.end()),
                         batch.size());
}

inline std::vector<float> infer(const ParamStore& m, BatchView batch) {
    return infer<float>(m.arch(), m.values(), batch);
}

/// Mean cross-entropy with a max-shifted softmax.
template <class T>
double loss_xe(std::span<const T> logits, std::span<const std::uint32_t> labels, std::size_t classes) {
    if (logits.size() != labels.size() * classes) throw ShapeError("loss_xe: logits/labels mismatch");
    if (labels.empty()) return 0.0;
    std::vector<T> lse(labels.size());
    kernels::logsumexp_rows<T>(logits, lse, labels.size(), classes);
    double total = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        total += static_cast<double>(lse[i] - logits[i * classes + labels[i]]);
    return total / static_cast<double>(labels.size());
}

/// Index of the largest logit, or nullopt-like `classes` when the row is not finite.
template <class T>
std::size_t predict_row(std::span<const T> row) {
    std::size_t best = 0;
    for (std::size_t c = 0; c < row.size(); ++c) {
        if (!std::isfinite(row[c])) return row.size();
        if (row[c] > row[best]) best = c;
    }
    return best;
}

/// Fraction of rows whose argmax equals the label; rows with any non-finite logit are wrong.
template <class T>
double accuracy(std::span<const T> logits, std::span<const std::uint32_t> labels, std::size_t classes) {
    if (logits.size() != labels.size() * classes) throw ShapeError("accuracy: logits/labels mismatch");
    if (labels.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        correct += predict_row<T>(logits.subspan(i * classes, classes)) == labels[i];
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

inline double accuracy(const ParamStore& m, BatchView batch) {
    return accuracy<float>(infer(m, batch), batch.labels, m.arch().classes());
}

inline double loss(const ParamStore& m, BatchView batch) {
    return loss_xe<float>(infer(m, batch), batch.labels, m.arch().classes());
}

// ---- model zoo --------------------------------------------------------------

namespace zoo {

/// Two conv + two dense layers. On 1x8x8 inputs: d = 772 for 4 classes.
inline ModelSpec basenet(std::vector<std::size_t> input, std::size_t classes) {
    const std::size_t c = input.at(0), h = input.at(1), w = input.at(2);
    const std::size_t h2 = (h - 2) / 2 - 1, w2 = (w - 2) / 2 - 1;
    return {{Conv2d{c, 4, 3}, Relu{}, MaxPool{2}, Conv2d{4, 8, 2}, Relu{}, Flatten{},
             Dense{8 * h2 * w2, 16}, Relu{}, Dense{16, classes}},
            std::move(input), classes};
}

/// Two conv + three dense layers. On 1x8x8 inputs: d = 1520 for 4 classes.
inline ModelSpec lenet(std::vector<std::size_t> input, std::size_t classes) {
    const std::size_t c = input.at(0), h = input.at(1), w = input.at(2);
    const std::size_t h2 = (h - 2) / 2 - 1, w2 = (w - 2) / 2 - 1;
    return {{Conv2d{c, 6, 3}, Relu{}, MaxPool{2}, Conv2d{6, 8, 2}, Relu{}, Flatten{},
             Dense{8 * h2 * w2, 24}, Relu{}, Dense{24, 16}, Relu{}, Dense{16, classes}},
            std::move(input), classes};
}

/// Dense-ReLU-dense; with the defaults (4 features, 6 hidden, 3 classes) d = 51.
inline ModelSpec tinynet(std::size_t features = 4, std::size_t hidden = 6, std::size_t classes = 3) {
    return {{Dense{features, hidden}, Relu{}, Dense{hidden, classes}}, {features}, classes};
}

/// 2-2-2 dense net with d = 12, small enough to enumerate all 2^d sign probes.
inline ModelSpec micronet() { return {{Dense{2, 2}, Relu{}, Dense{2, 2}}, {2}, 2}; }

} // namespace zoo

} // namespace hat
