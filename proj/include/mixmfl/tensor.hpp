#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap shared handle onto a node. Ops executed while a
// GradTape is active on the current thread, with at least one input that
// requires a gradient, are recorded on that tape. GradTape::backward walks
// the recorded nodes once in reverse creation order and then clears the tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mixmfl/error.hpp"

namespace mixmfl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

class GradTape;

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    const GradTape* tape = nullptr;
    std::function<void(Node&)> backward;

    // Gradient buffer, zero-filled on first use.
    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

using NodePtr = std::shared_ptr<Node>;

inline thread_local GradTape* active_tape = nullptr;

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        if (shape.empty()) shape = {1};
        for (auto extent : shape) {
            if (extent == 0) fail(ErrorKind::ShapeMismatch, "zero extent in shape " + shape_str(shape));
        }
        if (shape_numel(shape) != values.size()) {
            fail(ErrorKind::ShapeMismatch, "shape " + shape_str(shape) + " does not hold " +
                                               std::to_string(values.size()) + " values");
        }
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor({1}, {v}, requires_grad);
    }

    static Tensor vector(std::vector<double> v, bool requires_grad = false) {
        auto n = v.size();
        return Tensor({n}, std::move(v), requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }

    const Shape& shape() const { return node_->shape; }
    std::size_t dim() const { return node_->shape.size(); }
    std::size_t size(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const double> values() const { return node_->value; }
    // Direct writes are meant for leaves (parameters, inputs) outside a tape.
    std::span<double> mutable_values() { return node_->value; }

    double item() const {
        if (numel() != 1) fail(ErrorKind::ShapeMismatch, "item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }
    double operator[](std::size_t i) const { return node_->value.at(i); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag) { node_->requires_grad = flag; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    // Same values, fresh leaf, no gradient history.
    Tensor detach() const { return Tensor(shape(), node_->value, false); }
    Tensor clone() const { return Tensor(shape(), node_->value, requires_grad()); }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    const detail::NodePtr& node() const { return node_; }

private:
    explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}
    friend Tensor record_result(Shape, std::vector<double>, bool, std::function<void(detail::Node&)>,
                                const char*);

    detail::NodePtr node_;
};

/// Records the ops of one forward pass and runs a single backward over them.
class GradTape {
public:
    GradTape() : previous_(detail::active_tape) { detail::active_tape = this; }
    ~GradTape() {
        clear();
        detail::active_tape = previous_;
    }
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    std::size_t size() const { return nodes_.size(); }

    void record(const detail::NodePtr& node) {
        node->tape = this;
        nodes_.push_back(node);
    }

    void backward(const Tensor& loss) {
        if (!loss.defined() || loss.node()->tape != this) {
            fail(ErrorKind::NoTape, "loss was not produced under this tape (or backward already ran)");
        }
        if (loss.numel() != 1) fail(ErrorKind::NonScalarLoss, "loss has shape " + shape_str(loss.shape()));
        loss.node()->grad_buffer()[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            detail::Node& node = **it;
            if (!node.grad.empty() && node.backward) node.backward(node);
        }
        clear();
    }

    void clear() {
        for (auto& node : nodes_) {
            node->backward = nullptr;
            node->tape = nullptr;
        }
        nodes_.clear();
    }

private:
    std::vector<detail::NodePtr> nodes_;
    GradTape* previous_;
};

// Wraps an op's forward value into a tensor, recording it on the active tape
// when some input needs a gradient.
inline Tensor record_result(Shape shape, std::vector<double> value, bool needs_grad,
                            std::function<void(detail::Node&)> backward, const char* op) {
    for (double v : value) {
        if (!std::isfinite(v)) fail(ErrorKind::NonFiniteValue, std::string("non-finite output from ") + op);
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    if (GradTape* tape = detail::active_tape; tape && needs_grad) {
        node->requires_grad = true;
        node->backward = std::move(backward);
        tape->record(node);
    }
    return Tensor(node);
}

inline Tensor make_op_result(Shape shape, std::vector<double> value,
                             std::initializer_list<const Tensor*> inputs,
                             std::function<void(detail::Node&)> backward, const char* op) {
    bool needs_grad = std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
    return record_result(std::move(shape), std::move(value), needs_grad, std::move(backward), op);
}

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        fail(ErrorKind::ShapeMismatch,
             std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

inline void require_rank(const Tensor& a, std::size_t rank, const char* op) {
    if (a.dim() != rank) {
        fail(ErrorKind::ShapeMismatch, std::string(op) + ": expected rank " + std::to_string(rank) +
                                           ", got " + shape_str(a.shape()));
    }
}

// Grad buffer of an input node if it participates in differentiation.
inline std::vector<double>* grad_of(const NodePtr& node) {
    return node->requires_grad ? &node->grad_buffer() : nullptr;
}

inline Shape drop_last(const Shape& shape) {
    if (shape.size() <= 1) return {1};
    return Shape(shape.begin(), shape.end() - 1);
}

// Splits a shape around `axis` into (outer, extent, inner) strides.
struct AxisView {
    std::size_t outer, extent, inner;
};

inline AxisView axis_view(const Shape& shape, std::size_t axis) {
    AxisView v{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
    return v;
}

inline std::size_t resolve_axis(const Tensor& t, int axis) {
    int rank = static_cast<int>(t.dim());
    int resolved = axis < 0 ? rank + axis : axis;
    if (resolved < 0 || resolved >= rank) {
        fail(ErrorKind::ShapeMismatch, "axis " + std::to_string(axis) + " out of range for " + shape_str(t.shape()));
    }
    return static_cast<std::size_t>(resolved);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    auto na = a.node(), nb = b.node();
    return make_op_result(a.shape(), std::move(out), {&a, &b}, [na, nb](detail::Node& self) {
        for (auto* g : {detail::grad_of(na), detail::grad_of(nb)}) {
            if (!g) continue;
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
        }
    }, "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    auto na = a.node(), nb = b.node();
    return make_op_result(a.shape(), std::move(out), {&a, &b}, [na, nb](detail::Node& self) {
        if (auto* g = detail::grad_of(na)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
        }
        if (auto* g = detail::grad_of(nb)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] -= self.grad[i];
        }
    }, "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    auto na = a.node(), nb = b.node();
    return make_op_result(a.shape(), std::move(out), {&a, &b}, [na, nb](detail::Node& self) {
        if (auto* g = detail::grad_of(na)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * nb->value[i];
        }
        if (auto* g = detail::grad_of(nb)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * na->value[i];
        }
    }, "mul");
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "div");
    std::vector<double> out(a.numel());
    auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
    auto na = a.node(), nb = b.node();
    return make_op_result(a.shape(), std::move(out), {&a, &b}, [na, nb](detail::Node& self) {
        if (auto* g = detail::grad_of(na)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] / nb->value[i];
        }
        if (auto* g = detail::grad_of(nb)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                (*g)[i] -= self.grad[i] * self.value[i] / nb->value[i];
            }
        }
    }, "div");
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.values().begin(), a.values().end());
    for (auto& v : out) v *= s;
    auto na = a.node();
    return make_op_result(a.shape(), std::move(out), {&a}, [na, s](detail::Node& self) {
        auto& g = na->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += s * self.grad[i];
    }, "scale");
}

inline Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.values().begin(), a.values().end());
    for (auto& v : out) v += s;
    auto na = a.node();
    return make_op_result(a.shape(), std::move(out), {&a}, [na](detail::Node& self) {
        auto& g = na->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }, "add_scalar");
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.values().begin(), a.values().end());
    for (auto& v : out) v = v > 0.0 ? v : 0.0;
    auto na = a.node();
    return make_op_result(a.shape(), std::move(out), {&a}, [na](detail::Node& self) {
        auto& g = na->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (na->value[i] > 0.0) g[i] += self.grad[i];
        }
    }, "relu");
}

inline Tensor log(const Tensor& a) {
    std::vector<double> out(a.numel());
    auto av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(av[i]);
    auto na = a.node();
    return make_op_result(a.shape(), std::move(out), {&a}, [na](detail::Node& self) {
        auto& g = na->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / na->value[i];
    }, "log");
}

inline Tensor abs(const Tensor& a) {
    std::vector<double> out(a.numel());
    auto av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(av[i]);
    auto na = a.node();
    return make_op_result(a.shape(), std::move(out), {&a}, [na](detail::Node& self) {
        auto& g = na->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            double x = na->value[i];
            g[i] += self.grad[i] * (x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0));
        }
    }, "abs");
}

// max(a, floor); the gradient is blocked where the floor is active.
inline Tensor clamp_min(const Tensor& a, double floor) {
    std::vector<double> out(a.values().begin(), a.values().end());
    for (auto& v : out) v = std::max(v, floor);
    auto na = a.node();
    return make_op_result(a.shape(), std::move(out), {&a}, [na, floor](detail::Node& self) {
        auto& g = na->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (na->value[i] > floor) g[i] += self.grad[i];
        }
    }, "clamp_min");
}

/// Identity forward; backward multiplies the upstream gradient by -lambda.
inline Tensor grl(const Tensor& x, double lambda = 1.0) {
    std::vector<double> out(x.values().begin(), x.values().end());
    auto nx = x.node();
    return make_op_result(x.shape(), std::move(out), {&x}, [nx, lambda](detail::Node& self) {
        auto& g = nx->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += -lambda * self.grad[i];
    }, "grl");
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
    auto av = a.values();
    double s = std::accumulate(av.begin(), av.end(), 0.0);
    auto na = a.node();
    return make_op_result({1}, {s}, {&a}, [na](detail::Node& self) {
        auto& g = na->grad_buffer();
        for (auto& v : g) v += self.grad[0];
    }, "sum");
}

inline Tensor mean(const Tensor& a) {
    auto av = a.values();
    double n = static_cast<double>(av.size());
    double s = std::accumulate(av.begin(), av.end(), 0.0) / n;
    auto na = a.node();
    return make_op_result({1}, {s}, {&a}, [na, n](detail::Node& self) {
        auto& g = na->grad_buffer();
        for (auto& v : g) v += self.grad[0] / n;
    }, "mean");
}

inline Tensor sum_last(const Tensor& a) {
    std::size_t k = a.shape().back();
    std::size_t rows = a.numel() / k;
    std::vector<double> out(rows, 0.0);
    auto av = a.values();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < k; ++j) out[r] += av[r * k + j];
    }
    auto na = a.node();
    return make_op_result(detail::drop_last(a.shape()), std::move(out), {&a}, [na, k](detail::Node& self) {
        auto& g = na->grad_buffer();
        for (std::size_t r = 0; r < self.grad.size(); ++r) {
            for (std::size_t j = 0; j < k; ++j) g[r * k + j] += self.grad[r];
        }
    }, "sum_last");
}

inline Tensor mean_last(const Tensor& a) {
    return scale(sum_last(a), 1.0 / static_cast<double>(a.shape().back()));
}

/// Population variance along the last axis.
inline Tensor variance_last(const Tensor& a) {
    std::size_t k = a.shape().back();
    std::size_t rows = a.numel() / k;
    std::vector<double> out(rows, 0.0), means(rows, 0.0);
    auto av = a.values();
    for (std::size_t r = 0; r < rows; ++r) {
        double m = 0.0;
        for (std::size_t j = 0; j < k; ++j) m += av[r * k + j];
        m /= static_cast<double>(k);
        double v = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            double d = av[r * k + j] - m;
            v += d * d;
        }
        means[r] = m;
        out[r] = v / static_cast<double>(k);
    }
    auto na = a.node();
    return make_op_result(detail::drop_last(a.shape()), std::move(out), {&a},
                          [na, k, means = std::move(means)](detail::Node& self) {
        auto& g = na->grad_buffer();
        double scale = 2.0 / static_cast<double>(k);
        for (std::size_t r = 0; r < self.grad.size(); ++r) {
            for (std::size_t j = 0; j < k; ++j) {
                g[r * k + j] += self.grad[r] * scale * (na->value[r * k + j] - means[r]);
            }
        }
    }, "variance_last");
}

namespace detail {

template <typename Better>
inline Tensor extreme_last(const Tensor& a, Better better, const char* op) {
    std::size_t k = a.shape().back();
    std::size_t rows = a.numel() / k;
    std::vector<double> out(rows);
    std::vector<std::size_t> arg(rows);
    auto av = a.values();
    for (std::size_t r = 0; r < rows; ++r) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j) {
            if (better(av[r * k + j], av[r * k + best])) best = j;
        }
        arg[r] = best;
        out[r] = av[r * k + best];
    }
    auto na = a.node();
    return make_op_result(drop_last(a.shape()), std::move(out), {&a},
                          [na, k, arg = std::move(arg)](Node& self) {
        auto& g = na->grad_buffer();
        for (std::size_t r = 0; r < self.grad.size(); ++r) g[r * k + arg[r]] += self.grad[r];
    }, op);
}

}  // namespace detail

/// Max along the last axis; ties resolve to the lowest index, which also
/// receives the whole gradient.
inline Tensor max_last(const Tensor& a) {
    return detail::extreme_last(a, [](double x, double best) { return x > best; }, "max_last");
}

inline Tensor min_last(const Tensor& a) {
    return detail::extreme_last(a, [](double x, double best) { return x < best; }, "min_last");
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        fail(ErrorKind::ShapeMismatch, "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
    }
    std::vector<double> out(a.values().begin(), a.values().end());
    auto na = a.node();
    return make_op_result(std::move(shape), std::move(out), {&a}, [na](detail::Node& self) {
        auto& g = na->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }, "reshape");
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) fail(ErrorKind::ShapeMismatch, "concat of zero tensors");
    std::size_t ax = detail::resolve_axis(parts[0], axis);
    Shape out_shape = parts[0].shape();
    out_shape[ax] = 0;
    for (const auto& p : parts) {
        if (p.dim() != out_shape.size()) fail(ErrorKind::ShapeMismatch, "concat rank mismatch");
        for (std::size_t i = 0; i < out_shape.size(); ++i) {
            if (i != ax && p.shape()[i] != parts[0].shape()[i]) {
                fail(ErrorKind::ShapeMismatch, "concat: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
            }
        }
        out_shape[ax] += p.shape()[ax];
    }
    auto view = detail::axis_view(out_shape, ax);
    std::vector<double> out(shape_numel(out_shape));
    std::vector<detail::NodePtr> nodes;
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        std::size_t chunk = p.shape()[ax] * view.inner;
        auto pv = p.values();
        for (std::size_t o = 0; o < view.outer; ++o) {
            std::copy_n(pv.begin() + o * chunk, chunk, out.begin() + o * view.extent * view.inner + offset);
        }
        nodes.push_back(p.node());
        offsets.push_back(offset);
        offset += chunk;
    }
    bool needs_grad = std::any_of(parts.begin(), parts.end(), [](const Tensor& p) { return p.requires_grad(); });
    return record_result(out_shape, std::move(out), needs_grad,
                          [nodes, offsets, view, ax](detail::Node& self) {
        for (std::size_t idx = 0; idx < nodes.size(); ++idx) {
            auto* g = detail::grad_of(nodes[idx]);
            if (!g) continue;
            std::size_t chunk = nodes[idx]->shape[ax] * view.inner;
            for (std::size_t o = 0; o < view.outer; ++o) {
                const double* src = self.grad.data() + o * view.extent * view.inner + offsets[idx];
                double* dst = g->data() + o * chunk;
                for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
            }
        }
    }, "concat");
}

/// Rows of `a` along axis 0, in the given order (repeats allowed).
inline Tensor index_select(const Tensor& a, const std::vector<std::size_t>& rows) {
    if (rows.empty()) fail(ErrorKind::ShapeMismatch, "index_select with no rows");
    std::size_t row_size = a.numel() / a.shape()[0];
    Shape out_shape = a.shape();
    out_shape[0] = rows.size();
    std::vector<double> out(rows.size() * row_size);
    auto av = a.values();
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= a.shape()[0]) fail(ErrorKind::ShapeMismatch, "index_select row out of range");
        std::copy_n(av.begin() + rows[r] * row_size, row_size, out.begin() + r * row_size);
    }
    auto na = a.node();
    return make_op_result(std::move(out_shape), std::move(out), {&a}, [na, rows, row_size](detail::Node& self) {
        auto& g = na->grad_buffer();
        for (std::size_t r = 0; r < rows.size(); ++r) {
            for (std::size_t j = 0; j < row_size; ++j) g[rows[r] * row_size + j] += self.grad[r * row_size + j];
        }
    }, "index_select");
}

// ---------------------------------------------------------------------------
// Softmax family

inline Tensor softmax(const Tensor& a, int axis = -1) {
    auto view = detail::axis_view(a.shape(), detail::resolve_axis(a, axis));
    std::vector<double> out(a.numel());
    auto av = a.values();
    for (std::size_t o = 0; o < view.outer; ++o) {
        for (std::size_t in = 0; in < view.inner; ++in) {
            std::size_t base = o * view.extent * view.inner + in;
            double mx = av[base];
            for (std::size_t j = 1; j < view.extent; ++j) mx = std::max(mx, av[base + j * view.inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < view.extent; ++j) {
                double e = std::exp(av[base + j * view.inner] - mx);
                out[base + j * view.inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < view.extent; ++j) out[base + j * view.inner] /= z;
        }
    }
    auto na = a.node();
    return make_op_result(a.shape(), std::move(out), {&a}, [na, view](detail::Node& self) {
        auto& g = na->grad_buffer();
        for (std::size_t o = 0; o < view.outer; ++o) {
            for (std::size_t in = 0; in < view.inner; ++in) {
                std::size_t base = o * view.extent * view.inner + in;
                double dot = 0.0;
                for (std::size_t j = 0; j < view.extent; ++j) {
                    std::size_t i = base + j * view.inner;
                    dot += self.grad[i] * self.value[i];
                }
                for (std::size_t j = 0; j < view.extent; ++j) {
                    std::size_t i = base + j * view.inner;
                    g[i] += self.value[i] * (self.grad[i] - dot);
                }
            }
        }
    }, "softmax");
}

inline Tensor log_softmax(const Tensor& a, int axis = -1) {
    auto view = detail::axis_view(a.shape(), detail::resolve_axis(a, axis));
    std::vector<double> out(a.numel());
    auto av = a.values();
    for (std::size_t o = 0; o < view.outer; ++o) {
        for (std::size_t in = 0; in < view.inner; ++in) {
            std::size_t base = o * view.extent * view.inner + in;
            double mx = av[base];
            for (std::size_t j = 1; j < view.extent; ++j) mx = std::max(mx, av[base + j * view.inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < view.extent; ++j) z += std::exp(av[base + j * view.inner] - mx);
            double lse = mx + std::log(z);
            for (std::size_t j = 0; j < view.extent; ++j) out[base + j * view.inner] = av[base + j * view.inner] - lse;
        }
    }
    auto na = a.node();
    return make_op_result(a.shape(), std::move(out), {&a}, [na, view](detail::Node& self) {
        auto& g = na->grad_buffer();
        for (std::size_t o = 0; o < view.outer; ++o) {
            for (std::size_t in = 0; in < view.inner; ++in) {
                std::size_t base = o * view.extent * view.inner + in;
                double total = 0.0;
                for (std::size_t j = 0; j < view.extent; ++j) total += self.grad[base + j * view.inner];
                for (std::size_t j = 0; j < view.extent; ++j) {
                    std::size_t i = base + j * view.inner;
                    g[i] += self.grad[i] - std::exp(self.value[i]) * total;
                }
            }
        }
    }, "log_softmax");
}

// ---------------------------------------------------------------------------
// Linear algebra and convolution

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    std::size_t n = a.size(0), k = a.size(1), m = b.size(1);
    if (b.size(0) != k) fail(ErrorKind::ShapeMismatch, "matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<double> out(n * m, 0.0);
    auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            double x = av[i * k + p];
            for (std::size_t j = 0; j < m; ++j) out[i * m + j] += x * bv[p * m + j];
        }
    }
    auto na = a.node(), nb = b.node();
    return make_op_result({n, m}, std::move(out), {&a, &b}, [na, nb, n, k, m](detail::Node& self) {
        if (auto* g = detail::grad_of(na)) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < m; ++j) s += self.grad[i * m + j] * nb->value[p * m + j];
                    (*g)[i * k + p] += s;
                }
            }
        }
        if (auto* g = detail::grad_of(nb)) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    double x = na->value[i * k + p];
                    for (std::size_t j = 0; j < m; ++j) (*g)[p * m + j] += x * self.grad[i * m + j];
                }
            }
        }
    }, "matmul");
}

/// y = x W^T + b with x: N×in, W: out×in, b: out.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    detail::require_rank(x, 2, "linear");
    detail::require_rank(w, 2, "linear");
    std::size_t n = x.size(0), in = x.size(1), out_dim = w.size(0);
    if (w.size(1) != in || b.numel() != out_dim) {
        fail(ErrorKind::ShapeMismatch, "linear: x " + shape_str(x.shape()) + ", W " + shape_str(w.shape()) +
                                           ", b " + shape_str(b.shape()));
    }
    std::vector<double> out(n * out_dim);
    auto xv = x.values(), wv = w.values(), bv = b.values();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t o = 0; o < out_dim; ++o) {
            double s = bv[o];
            for (std::size_t p = 0; p < in; ++p) s += xv[i * in + p] * wv[o * in + p];
            out[i * out_dim + o] = s;
        }
    }
    auto nx = x.node(), nw = w.node(), nb = b.node();
    return make_op_result({n, out_dim}, std::move(out), {&x, &w, &b},
                          [nx, nw, nb, n, in, out_dim](detail::Node& self) {
        auto* gx = detail::grad_of(nx);
        auto* gw = detail::grad_of(nw);
        auto* gb = detail::grad_of(nb);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t o = 0; o < out_dim; ++o) {
                double go = self.grad[i * out_dim + o];
                if (gb) (*gb)[o] += go;
                if (gx) {
                    for (std::size_t p = 0; p < in; ++p) (*gx)[i * in + p] += go * nw->value[o * in + p];
                }
                if (gw) {
                    for (std::size_t p = 0; p < in; ++p) (*gw)[o * in + p] += go * nx->value[i * in + p];
                }
            }
        }
    }, "linear");
}

namespace detail {

struct ConvGeometry {
    std::size_t n, cin, cout, h, w, k;
    long pad;
};

// Calls f(dy, dx, y0, y1, x0, x1, weight offset ky*k+kx) for each kernel tap,
// with [y0,y1)×[x0,x1) the output region whose shifted input lies in bounds.
template <typename F>
inline void for_each_tap(const ConvGeometry& g, F&& f) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
        long dy = static_cast<long>(ky) - g.pad;
        std::size_t y0 = static_cast<std::size_t>(std::max(0L, -dy));
        std::size_t y1 = static_cast<std::size_t>(std::min(static_cast<long>(g.h), static_cast<long>(g.h) - dy));
        for (std::size_t kx = 0; kx < g.k; ++kx) {
            long dx = static_cast<long>(kx) - g.pad;
            std::size_t x0 = static_cast<std::size_t>(std::max(0L, -dx));
            std::size_t x1 = static_cast<std::size_t>(std::min(static_cast<long>(g.w), static_cast<long>(g.w) - dx));
            f(dy, dx, y0, y1, x0, x1, ky * g.k + kx);
        }
    }
}

}  // namespace detail

namespace detail {

// Column matrix of one sample: row (ci·k² + tap) holds input channel ci
// shifted by that tap, zero outside the image. Shape (Cin·k²)×(H·W).
inline void im2col(const ConvGeometry& g, const double* in, std::vector<double>& cols) {
    const std::size_t plane = g.h * g.w, kk = g.k * g.k;
    cols.assign(g.cin * kk * plane, 0.0);
    for (std::size_t ci = 0; ci < g.cin; ++ci) {
        const double* src = in + ci * plane;
        for_each_tap(g, [&](long dy, long dx, std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1,
                            std::size_t tap) {
            double* row = cols.data() + (ci * kk + tap) * plane;
            for (std::size_t y = y0; y < y1; ++y) {
                const double* irow = src + static_cast<std::size_t>(static_cast<long>(y) + dy) * g.w + dx;
                for (std::size_t x = x0; x < x1; ++x) row[y * g.w + x] = irow[x];
            }
        });
    }
}

}  // namespace detail

/// Stride-1 "same" convolution: x N×Cin×H×W, w Cout×Cin×k×k (k odd), b Cout.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
    detail::require_rank(x, 4, "conv2d");
    detail::require_rank(w, 4, "conv2d");
    detail::ConvGeometry geo{x.size(0), x.size(1), w.size(0), x.size(2), x.size(3), w.size(2),
                             static_cast<long>(w.size(2) / 2)};
    if (w.size(1) != geo.cin || w.size(3) != geo.k || geo.k % 2 == 0 || b.numel() != geo.cout) {
        fail(ErrorKind::ShapeMismatch, "conv2d: x " + shape_str(x.shape()) + ", W " + shape_str(w.shape()) +
                                           ", b " + shape_str(b.shape()));
    }
    const std::size_t plane = geo.h * geo.w, rows = geo.cin * geo.k * geo.k;
    std::vector<double> out(geo.n * geo.cout * plane);
    std::vector<double> cols;
    auto xv = x.values(), wv = w.values(), bv = b.values();
    for (std::size_t n = 0; n < geo.n; ++n) {
        detail::im2col(geo, xv.data() + n * geo.cin * plane, cols);
        for (std::size_t co = 0; co < geo.cout; ++co) {
            double* o = out.data() + (n * geo.cout + co) * plane;
            std::fill_n(o, plane, bv[co]);
            const double* wrow = wv.data() + co * rows;
            for (std::size_t r = 0; r < rows; ++r) {
                const double wt = wrow[r];
                const double* c = cols.data() + r * plane;
                for (std::size_t p = 0; p < plane; ++p) o[p] += wt * c[p];
            }
        }
    }
    auto nx = x.node(), nw = w.node(), nb = b.node();
    return make_op_result({geo.n, geo.cout, geo.h, geo.w}, std::move(out), {&x, &w, &b},
                          [nx, nw, nb, geo](detail::Node& self) {
        const std::size_t plane = geo.h * geo.w, kk = geo.k * geo.k;
        auto* gx = detail::grad_of(nx);
        auto* gw = detail::grad_of(nw);
        auto* gb = detail::grad_of(nb);
        for (std::size_t n = 0; n < geo.n; ++n) {
            const double* go_n = self.grad.data() + n * geo.cout * plane;
            if (gb) {
                for (std::size_t co = 0; co < geo.cout; ++co) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < plane; ++i) s += go_n[co * plane + i];
                    (*gb)[co] += s;
                }
            }
            for (std::size_t co = 0; co < geo.cout; ++co) {
                const double* go = go_n + co * plane;
                for (std::size_t ci = 0; ci < geo.cin; ++ci) {
                    const double* in = nx->value.data() + (n * geo.cin + ci) * plane;
                    double* gwk = gw ? gw->data() + (co * geo.cin + ci) * kk : nullptr;
                    if (!gwk) continue;
                    detail::for_each_tap(geo, [&](long dy, long dx, std::size_t y0, std::size_t y1,
                                                  std::size_t x0, std::size_t x1, std::size_t tap) {
                        double acc = 0.0;
                        for (std::size_t y = y0; y < y1; ++y) {
                            const double* grow = go + y * geo.w;
                            const double* irow = in + static_cast<std::size_t>(static_cast<long>(y) + dy) * geo.w + dx;
                            for (std::size_t xx = x0; xx < x1; ++xx) acc += grow[xx] * irow[xx];
                        }
                        gwk[tap] += acc;
                    });
                }
            }
            if (!gx) continue;
            for (std::size_t co = 0; co < geo.cout; ++co) {
                const double* go = go_n + co * plane;
                for (std::size_t ci = 0; ci < geo.cin; ++ci) {
                    const double* wk = nw->value.data() + (co * geo.cin + ci) * kk;
                    double* gin = gx->data() + (n * geo.cin + ci) * plane;
                    detail::for_each_tap(geo, [&](long dy, long dx, std::size_t y0, std::size_t y1,
                                                  std::size_t x0, std::size_t x1, std::size_t tap) {
                        const double wt = wk[tap];
                        for (std::size_t y = y0; y < y1; ++y) {
                            const double* grow = go + y * geo.w;
                            double* girow = gin + static_cast<std::size_t>(static_cast<long>(y) + dy) * geo.w + dx;
                            for (std::size_t xx = x0; xx < x1; ++xx) girow[xx] += wt * grow[xx];
                        }
                    });
                }
            }
        }
    }, "conv2d");
}

/// N×C×H×W -> N×C spatial mean.
inline Tensor global_average_pool(const Tensor& x) {
    detail::require_rank(x, 4, "global_average_pool");
    std::size_t n = x.size(0), c = x.size(1), plane = x.size(2) * x.size(3);
    std::vector<double> out(n * c);
    auto xv = x.values();
    for (std::size_t i = 0; i < n * c; ++i) {
        double s = 0.0;
        for (std::size_t p = 0; p < plane; ++p) s += xv[i * plane + p];
        out[i] = s / static_cast<double>(plane);
    }
    auto nx = x.node();
    return make_op_result({n, c}, std::move(out), {&x}, [nx, plane](detail::Node& self) {
        auto& g = nx->grad_buffer();
        double inv = 1.0 / static_cast<double>(plane);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            for (std::size_t p = 0; p < plane; ++p) g[i * plane + p] += self.grad[i] * inv;
        }
    }, "global_average_pool");
}

/// N×C -> N×C×H×W, every spatial position equal to the input row.
inline Tensor broadcast_spatial(const Tensor& v, std::size_t h, std::size_t w) {
    detail::require_rank(v, 2, "broadcast_spatial");
    std::size_t rows = v.numel(), plane = h * w;
    std::vector<double> out(rows * plane);
    auto vv = v.values();
    for (std::size_t i = 0; i < rows; ++i) std::fill_n(out.begin() + i * plane, plane, vv[i]);
    auto nv = v.node();
    return make_op_result({v.size(0), v.size(1), h, w}, std::move(out), {&v}, [nv, plane](detail::Node& self) {
        auto& g = nv->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            double s = 0.0;
            for (std::size_t p = 0; p < plane; ++p) s += self.grad[i * plane + p];
            g[i] += s;
        }
    }, "broadcast_spatial");
}

}  // namespace mixmfl
