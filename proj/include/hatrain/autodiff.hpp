#pragma once

// Tensor-level reverse-mode differentiation.
//
// Every op is evaluated eagerly when it is appended, so node ids are always
// topologically ordered. The backward rule of every op is written in terms of
// other tape ops, which makes the op set closed under differentiation: a
// gradient pass run with `record = true` appends its own nodes and can itself
// be differentiated. Two nested passes give Hessian-vector products; a third
// gives the gradient of a curvature term, which Hessian-aware training needs.
//
// Second-order conventions: ReLU contributes a zero second derivative (its
// mask is a constant of the forward values) and max-pool routes every order of
// derivative through the argmax chosen in the forward pass.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hatrain/error.hpp"
#include "hatrain/kernels.hpp"

namespace hat::ad {

using NodeId = std::int32_t;
using Shape = std::vector<std::size_t>;

inline constexpr NodeId kNoNode = -1;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

enum class Precision : std::uint8_t { f32, f64 };

template <class T>
inline constexpr Precision precision_of = sizeof(T) == 4 ? Precision::f32 : Precision::f64;

/// One entry per parameter, aligned with the flat parameter order.
template <class T>
struct GradVector {
    std::vector<T> values;

    static constexpr Precision precision = precision_of<T>;

    GradVector() = default;
    explicit GradVector(std::size_t d) : values(d, T{0}) {}
    explicit GradVector(std::vector<T> v) : values(std::move(v)) {}

    std::size_t size() const { return values.size(); }
    T& operator[](std::size_t i) { return values[i]; }
    const T& operator[](std::size_t i) const { return values[i]; }
};

enum class Op : std::uint8_t {
    Param,
    Constant,
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    Broadcast,  // [mid] -> [outer, mid, inner]
    SumReduce,  // [outer, mid, inner] -> [mid]
    Im2Col,
    Col2Im,
    Transpose,  // [outer, rows, cols] -> [outer, cols, rows]
    Gather,
    Scatter,
    Reshape,
    MaskMul,    // g * [ref > 0], ref is not differentiated
    LogSumExp,  // rows of [n, c] -> [n]
    Softmax,    // rows of [n, c]
};

template <class T>
class Tape;

/// Result of a backward pass.
template <class T>
struct Gradient {
    GradVector<T> values;
    /// (parameter leaf, gradient node) pairs; only filled for recorded passes.
    std::vector<std::pair<NodeId, NodeId>> nodes;

    NodeId node_for(NodeId leaf) const {
        for (const auto& [l, g] : nodes)
            if (l == leaf) return g;
        return kNoNode;
    }
};

template <class T>
class Tape {
public:
    struct Node {
        Op op = Op::Constant;
        NodeId a = kNoNode;
        NodeId b = kNoNode;
        Shape shape;
        std::vector<T> value;
        bool requires_grad = false;

        // op attributes
        double factor = 0.0;
        bool trans_a = false, trans_b = false;
        std::size_t outer = 0, mid = 0, inner = 0;
        kernels::ConvGeom geom{};
        std::shared_ptr<const std::vector<std::uint32_t>> index;
        std::size_t scatter_size = 0;
        std::size_t param_offset = 0;
    };

    explicit Tape(std::size_t param_count = 0) : param_count_(param_count) {}

    std::size_t param_count() const { return param_count_; }
    std::size_t size() const { return nodes_.size(); }
    const Node& node(NodeId id) const { return nodes_.at(check(id)); }
    const std::vector<T>& value(NodeId id) const { return node(id).value; }
    const Shape& shape(NodeId id) const { return node(id).shape; }
    bool requires_grad(NodeId id) const { return node(id).requires_grad; }
    const std::vector<NodeId>& params() const { return params_; }

    /// Drops every node appended after `mark` (a previous size()).
    void rewind(std::size_t mark) {
        nodes_.resize(mark);
        while (!params_.empty() && static_cast<std::size_t>(params_.back()) >= mark)
            params_.pop_back();
    }

    // ---- leaves -----------------------------------------------------------

    /// A differentiable slice of the flat parameter vector starting at `offset`.
    NodeId param(std::span<const T> values, std::size_t offset, Shape shape) {
        if (values.size() != numel(shape)) throw ShapeError("param: value count != shape size");
        if (offset + values.size() > param_count_)
            throw ShapeError("param: slice exceeds parameter count");
        Node n;
        n.op = Op::Param;
        n.shape = std::move(shape);
        n.value.assign(values.begin(), values.end());
        n.requires_grad = true;
        n.param_offset = offset;
        const NodeId id = push(std::move(n));
        params_.push_back(id);
        return id;
    }

    NodeId constant(std::vector<T> values, Shape shape) {
        if (values.size() != numel(shape)) throw ShapeError("constant: value count != shape size");
        Node n;
        n.op = Op::Constant;
        n.shape = std::move(shape);
        n.value = std::move(values);
        return push(std::move(n));
    }

    NodeId scalar(T v) { return constant({v}, Shape{}); }

    // ---- ops --------------------------------------------------------------

    NodeId add(NodeId a, NodeId b) { return binary(Op::Add, a, b); }
    NodeId sub(NodeId a, NodeId b) { return binary(Op::Sub, a, b); }
    NodeId mul(NodeId a, NodeId b) { return binary(Op::Mul, a, b); }

    NodeId scale(NodeId a, double factor) {
        Node n = unary(Op::Scale, a, shape(a));
        n.factor = factor;
        return emit(std::move(n));
    }

    /// op(A) * op(B) for 2-D operands.
    NodeId matmul(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false) {
        const Shape& sa = shape(a);
        const Shape& sb = shape(b);
        if (sa.size() != 2 || sb.size() != 2) throw ShapeError("matmul: operands must be 2-D");
        const std::size_t m = trans_a ? sa[1] : sa[0];
        const std::size_t ka = trans_a ? sa[0] : sa[1];
        const std::size_t kb = trans_b ? sb[1] : sb[0];
        const std::size_t n = trans_b ? sb[0] : sb[1];
        if (ka != kb)
            throw ShapeError("matmul: inner dimensions differ " + shape_str(sa) + " x " +
                             shape_str(sb));
        Node node = unary(Op::MatMul, a, Shape{m, n});
        node.b = b;
        node.requires_grad = requires_grad(a) || requires_grad(b);
        node.trans_a = trans_a;
        node.trans_b = trans_b;
        return emit(std::move(node));
    }

    NodeId broadcast(NodeId b, std::size_t outer, std::size_t inner, Shape out_shape) {
        const std::size_t mid = numel(shape(b));
        if (numel(out_shape) != outer * mid * inner) throw ShapeError("broadcast: bad output shape");
        Node n = unary(Op::Broadcast, b, std::move(out_shape));
        n.outer = outer;
        n.mid = mid;
        n.inner = inner;
        return emit(std::move(n));
    }

    NodeId sum_reduce(NodeId x, std::size_t outer, std::size_t mid, std::size_t inner,
                      Shape out_shape) {
        if (numel(shape(x)) != outer * mid * inner || numel(out_shape) != mid)
            throw ShapeError("sum_reduce: bad dimensions");
        Node n = unary(Op::SumReduce, x, std::move(out_shape));
        n.outer = outer;
        n.mid = mid;
        n.inner = inner;
        return emit(std::move(n));
    }

    NodeId sum(NodeId x) { return sum_reduce(x, 1, 1, numel(shape(x)), Shape{}); }

    NodeId dot(NodeId a, NodeId b) { return sum(mul(a, b)); }

    NodeId im2col(NodeId x, const kernels::ConvGeom& g) {
        if (numel(shape(x)) != g.input_size()) throw ShapeError("im2col: input size mismatch");
        Node n = unary(Op::Im2Col, x, Shape{g.batch * g.patches(), g.patch_size()});
        n.geom = g;
        return emit(std::move(n));
    }

    NodeId col2im(NodeId cols, const kernels::ConvGeom& g) {
        if (numel(shape(cols)) != g.cols_size()) throw ShapeError("col2im: input size mismatch");
        Node n = unary(Op::Col2Im, cols, Shape{g.batch, g.channels, g.height, g.width});
        n.geom = g;
        return emit(std::move(n));
    }

    NodeId transpose(NodeId x, std::size_t outer, std::size_t rows, std::size_t cols,
                     Shape out_shape) {
        if (numel(shape(x)) != outer * rows * cols || numel(out_shape) != outer * rows * cols)
            throw ShapeError("transpose: bad dimensions");
        Node n = unary(Op::Transpose, x, std::move(out_shape));
        n.outer = outer;
        n.mid = rows;
        n.inner = cols;
        return emit(std::move(n));
    }

    NodeId gather(NodeId x, std::shared_ptr<const std::vector<std::uint32_t>> index, Shape out_shape) {
        if (index->size() != numel(out_shape)) throw ShapeError("gather: index/shape mismatch");
        const std::size_t src = numel(shape(x));
        for (auto i : *index)
            if (i >= src) throw ShapeError("gather: index out of range");
        Node n = unary(Op::Gather, x, std::move(out_shape));
        n.index = std::move(index);
        return emit(std::move(n));
    }

    NodeId scatter(NodeId g, std::shared_ptr<const std::vector<std::uint32_t>> index, Shape out_shape) {
        if (index->size() != numel(shape(g))) throw ShapeError("scatter: index/shape mismatch");
        Node n = unary(Op::Scatter, g, std::move(out_shape));
        n.index = std::move(index);
        n.scatter_size = numel(n.shape);
        return emit(std::move(n));
    }

    NodeId reshape(NodeId x, Shape out_shape) {
        if (numel(out_shape) != numel(shape(x))) throw ShapeError("reshape: size changes");
        return emit(unary(Op::Reshape, x, std::move(out_shape)));
    }

    /// g * [ref > 0]; gradients flow into g only.
    NodeId mask_mul(NodeId g, NodeId ref) {
        if (numel(shape(g)) != numel(shape(ref))) throw ShapeError("mask_mul: size mismatch");
        Node n = unary(Op::MaskMul, g, shape(g));
        n.b = ref;
        return emit(std::move(n));
    }

    NodeId relu(NodeId x) { return mask_mul(x, x); }

    NodeId logsumexp(NodeId z) {
        const Shape& s = shape(z);
        if (s.size() != 2) throw ShapeError("logsumexp: expects [rows, cols]");
        return emit(unary(Op::LogSumExp, z, Shape{s[0]}));
    }

    NodeId softmax(NodeId z) {
        if (shape(z).size() != 2) throw ShapeError("softmax: expects [rows, cols]");
        return emit(unary(Op::Softmax, z, shape(z)));
    }

    /// Re-evaluates a node from its parents' cached values.
    std::vector<T> recompute(NodeId id) const { return evaluate(node(id)); }

    // ---- differentiation --------------------------------------------------

    /// d(output)/d(params). `wrt` restricts the pass to the listed parameter
    /// leaves (empty = all); excluded leaves receive zero gradient. With
    /// `record` the backward nodes stay on the tape and remain differentiable,
    /// otherwise they are dropped before returning.
    Gradient<T> backprop(NodeId output, bool record, std::span<const NodeId> wrt = {}) {
        if (output < 0 || static_cast<std::size_t>(output) >= nodes_.size())
            throw GraphError("backprop: output node is not on the tape");
        if (numel(shape(output)) != 1)
            throw ShapeError("backprop: output must be scalar, got " + shape_str(shape(output)));

        const auto last = static_cast<std::size_t>(output) + 1;
        std::vector<char> reach(last, 0);
        for (std::size_t i = 0; i < last; ++i) {
            const Node& n = nodes_[i];
            if (n.op == Op::Param) {
                reach[i] = wrt.empty() || std::find(wrt.begin(), wrt.end(), static_cast<NodeId>(i)) != wrt.end();
            } else if (n.requires_grad) {
                reach[i] = (n.a != kNoNode && reach[n.a]) || (differentiable_b(n) && reach[n.b]);
            }
        }
        if (!reach[output]) throw GraphError("backprop: output does not depend on any parameter");

        const std::size_t mark = nodes_.size();
        std::vector<NodeId> grads(last, kNoNode);
        grads[output] = constant({T{1}}, shape(output));

        auto accumulate = [&](NodeId target, NodeId g) {
            if (target == kNoNode || !reach[target]) return;
            grads[target] = grads[target] == kNoNode ? g : add(grads[target], g);
        };

        for (std::size_t i = last; i-- > 0;) {
            if (grads[i] == kNoNode || !reach[i]) continue;
            if (nodes_[i].op == Op::Param) continue;
            backward_rule(static_cast<NodeId>(i), grads[i], accumulate);
        }

        Gradient<T> out;
        out.values = GradVector<T>(param_count_);
        for (NodeId leaf : params_) {
            if (static_cast<std::size_t>(leaf) >= last || grads[leaf] == kNoNode) continue;
            const Node& n = nodes_[leaf];
            const std::vector<T>& g = nodes_[grads[leaf]].value;
            std::copy(g.begin(), g.end(), out.values.values.begin() + static_cast<std::ptrdiff_t>(n.param_offset));
            if (record) out.nodes.emplace_back(leaf, grads[leaf]);
        }
        if (!record) rewind(mark);
        return out;
    }

private:
    std::size_t check(NodeId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
            throw GraphError("unknown node id " + std::to_string(id));
        return static_cast<std::size_t>(id);
    }

    static bool differentiable_b(const Node& n) {
        return n.b != kNoNode && n.op != Op::MaskMul;
    }

    Node unary(Op op, NodeId a, Shape out_shape) const {
        Node n;
        n.op = op;
        n.a = a;
        n.shape = std::move(out_shape);
        n.requires_grad = requires_grad(a);
        return n;
    }

    NodeId binary(Op op, NodeId a, NodeId b) {
        if (shape(a) != shape(b))
            throw ShapeError("elementwise op: shapes differ " + shape_str(shape(a)) + " vs " +
                             shape_str(shape(b)));
        Node n = unary(op, a, shape(a));
        n.b = b;
        n.requires_grad = requires_grad(a) || requires_grad(b);
        return emit(std::move(n));
    }

    NodeId emit(Node n) {
        n.value = evaluate(n);
        return push(std::move(n));
    }

    NodeId push(Node n) {
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    std::vector<T> evaluate(const Node& n) const {
        if (n.op == Op::Param || n.op == Op::Constant) return n.value;
        const std::vector<T>& x = nodes_[n.a].value;
        std::vector<T> out(numel(n.shape));
        switch (n.op) {
        case Op::Add: {
            const auto& y = nodes_[n.b].value;
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
            break;
        }
        case Op::Sub: {
            const auto& y = nodes_[n.b].value;
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
            break;
        }
        case Op::Mul: {
            const auto& y = nodes_[n.b].value;
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
            break;
        }
        case Op::Scale: {
            const T f = static_cast<T>(n.factor);
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * f;
            break;
        }
        case Op::MatMul: {
            const Shape& sa = nodes_[n.a].shape;
            const std::size_t k = n.trans_a ? sa[0] : sa[1];
            kernels::matmul<T>(x, nodes_[n.b].value, out, n.shape[0], k, n.shape[1], n.trans_a,
                               n.trans_b);
            break;
        }
        case Op::Broadcast: kernels::broadcast<T>(x, out, n.outer, n.mid, n.inner); break;
        case Op::SumReduce: kernels::sum_reduce<T>(x, out, n.outer, n.mid, n.inner); break;
        case Op::Im2Col: kernels::im2col<T>(x, out, n.geom); break;
        case Op::Col2Im: kernels::col2im<T>(x, out, n.geom); break;
        case Op::Transpose: kernels::transpose_last2<T>(x, out, n.outer, n.mid, n.inner); break;
        case Op::Gather:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[(*n.index)[i]];
            break;
        case Op::Scatter:
            for (std::size_t i = 0; i < x.size(); ++i) out[(*n.index)[i]] += x[i];
            break;
        case Op::Reshape: out = x; break;
        case Op::MaskMul: {
            const auto& ref = nodes_[n.b].value;
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = ref[i] > T{0} ? x[i] : T{0};
            break;
        }
        case Op::LogSumExp: {
            const Shape& s = nodes_[n.a].shape;
            kernels::logsumexp_rows<T>(x, out, s[0], s[1]);
            break;
        }
        case Op::Softmax: kernels::softmax_rows<T>(x, out, n.shape[0], n.shape[1]); break;
        case Op::Param:
        case Op::Constant: break;
        }
        return out;
    }

    // Appends the vector-Jacobian product of node `id` with upstream gradient `g`.
    // Nodes are re-read by index because appending may reallocate storage.
    template <class Acc>
    void backward_rule(NodeId id, NodeId g, Acc&& acc) {
        const Op op = nodes_[id].op;
        const NodeId a = nodes_[id].a;
        const NodeId b = nodes_[id].b;
        switch (op) {
        case Op::Add:
            acc(a, g);
            acc(b, g);
            break;
        case Op::Sub:
            acc(a, g);
            if (reachable(b)) acc(b, scale(g, -1.0));
            break;
        case Op::Mul:
            if (reachable(a)) acc(a, mul(g, b));
            if (reachable(b)) acc(b, mul(g, a));
            break;
        case Op::Scale: acc(a, scale(g, nodes_[id].factor)); break;
        case Op::MatMul: {
            const bool ta = nodes_[id].trans_a, tb = nodes_[id].trans_b;
            if (reachable(a)) {
                if (!ta) acc(a, tb ? matmul(g, b, false, false) : matmul(g, b, false, true));
                else acc(a, tb ? matmul(b, g, true, true) : matmul(b, g, false, true));
            }
            if (reachable(b)) {
                if (!tb) acc(b, ta ? matmul(a, g, false, false) : matmul(a, g, true, false));
                else acc(b, ta ? matmul(g, a, true, true) : matmul(g, a, true, false));
            }
            break;
        }
        case Op::Broadcast: {
            const auto [o, m, i] = dims(id);
            acc(a, sum_reduce(g, o, m, i, shape(a)));
            break;
        }
        case Op::SumReduce: {
            const auto [o, m, i] = dims(id);
            acc(a, broadcast(g, o, i, shape(a)));
            break;
        }
        case Op::Im2Col: {
            const auto geom = nodes_[id].geom;
            acc(a, reshape(col2im(g, geom), shape(a)));
            break;
        }
        case Op::Col2Im: {
            const auto geom = nodes_[id].geom;
            acc(a, reshape(im2col(g, geom), shape(a)));
            break;
        }
        case Op::Transpose: {
            const auto [o, r, c] = dims(id);
            acc(a, transpose(g, o, c, r, shape(a)));
            break;
        }
        case Op::Gather: {
            auto index = nodes_[id].index;
            acc(a, scatter(g, std::move(index), shape(a)));
            break;
        }
        case Op::Scatter: {
            auto index = nodes_[id].index;
            acc(a, gather(g, std::move(index), shape(a)));
            break;
        }
        case Op::Reshape: acc(a, reshape(g, shape(a))); break;
        case Op::MaskMul: acc(a, mask_mul(g, b)); break;
        case Op::LogSumExp: {
            const Shape zs = shape(a);
            const NodeId s = softmax(a);
            acc(a, mul(broadcast(g, 1, zs[1], zs), s));
            break;
        }
        case Op::Softmax: {
            // J^T g = s * (g - rowsum(g * s))
            const Shape zs = shape(id);
            const NodeId t = mul(g, id);
            const NodeId r = sum_reduce(t, 1, zs[0], zs[1], Shape{zs[0]});
            acc(a, sub(t, mul(id, broadcast(r, 1, zs[1], zs))));
            break;
        }
        case Op::Param:
        case Op::Constant: break;
        }
    }

    bool reachable(NodeId id) const { return id != kNoNode && nodes_[id].requires_grad; }

    std::tuple<std::size_t, std::size_t, std::size_t> dims(NodeId id) const {
        const Node& n = nodes_[id];
        return {n.outer, n.mid, n.inner};
    }

    std::size_t param_count_;
    std::vector<Node> nodes_;
    std::vector<NodeId> params_;
};

template <class T>
Gradient<T> backprop(Tape<T>& tape, NodeId output, bool record) {
    return tape.backprop(output, record);
}

/// Builds a scalar loss on a fresh tape, registering parameter leaves itself.
template <class T>
using LossBuilder = std::function<NodeId(Tape<T>&, std::span<const T>)>;

/// H v as the gradient of (g . v), with g taken from a recorded backward pass.
template <class T>
GradVector<T> hvp(const LossBuilder<T>& build, std::span<const T> params, std::span<const T> v) {
    if (v.size() != params.size())
        throw ShapeError("hvp: probe has " + std::to_string(v.size()) + " entries, expected " +
                         std::to_string(params.size()));
    Tape<T> tape(params.size());
    const NodeId loss = build(tape, params);
    if (!tape.requires_grad(loss)) return GradVector<T>(params.size());
    const Gradient<T> g = tape.backprop(loss, true);

    NodeId gv = kNoNode;
    for (const auto& [leaf, gnode] : g.nodes) {
        const auto& leaf_node = tape.node(leaf);
        const auto first = v.begin() + static_cast<std::ptrdiff_t>(leaf_node.param_offset);
        std::vector<T> slice(first, first + static_cast<std::ptrdiff_t>(leaf_node.value.size()));
        const NodeId term = tape.dot(gnode, tape.constant(std::move(slice), tape.shape(gnode)));
        gv = gv == kNoNode ? term : tape.add(gv, term);
    }
    if (gv == kNoNode || !tape.requires_grad(gv)) return GradVector<T>(params.size());
    return tape.backprop(gv, false).values;
}

/// Central-difference gradient in double precision; a test oracle.
inline GradVector<double> finite_diff_gradient(const std::function<double(std::span<const double>)>& loss,
                                               std::span<const double> params, double step) {
    if (!(step > 0.0)) throw ArgumentError("finite_diff_gradient: step must be positive");
    std::vector<double> x(params.begin(), params.end());
    GradVector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + step;
        const double up = loss(x);
        x[i] = keep - step;
        const double down = loss(x);
        x[i] = keep;
        out[i] = (up - down) / (2.0 * step);
    }
    return out;
}

} // namespace hat::ad
