// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rmot {

/// Raised when operand extents do not line up.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a documented precondition is violated by the caller.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

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

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    bool leaf = true;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// Copies share storage; values produced by operations are never mutated
/// afterwards. Parameters are the exception: optimizers and initializers
/// write through mutable_data().
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        node_->data.assign(shape_numel(shape), fill);
        node_->shape = std::move(shape);
        set_requires_grad(requires_grad);
    }

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        if (shape_numel(shape) != values.size()) {
            throw DimensionError("tensor: " + std::to_string(values.size()) +
                                 " values do not fill shape " + shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(values);
        set_requires_grad(requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) { return Tensor(Shape{1}, {v}, requires_grad); }
    static Tensor zeros(Shape s, bool requires_grad = false) { return Tensor(std::move(s), 0.0, requires_grad); }
    static Tensor ones(Shape s) { return Tensor(std::move(s), 1.0); }
    static Tensor eye(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t.node_->data[i * n + i] = 1.0;
        return t;
    }
    static Tensor row(std::vector<double> v) {
        const std::size_t n = v.size();
        return Tensor({1, n}, std::move(v));
    }
    static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor({r, c}, std::move(v)); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }
    std::size_t rows() const { return node_->shape.empty() ? 1 : node_->shape[0]; }
    std::size_t cols() const { return node_->shape.size() < 2 ? 1 : node_->data.size() / rows(); }

    std::span<const double> data() const { return node_->data; }
    std::span<const double> grad() const { return node_->grad; }
    double operator[](std::size_t i) const { return node_->data[i]; }
    double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
    double item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }
    std::vector<double> to_vector() const { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->leaf; }
    void set_requires_grad(bool on) {
        node_->requires_grad = on;
        if (on) node_->ensure_grad();
        else node_->grad.clear();
    }

    /// Copy of the values, cut off from any recorded history.
    Tensor detach() const { return Tensor(shape(), node_->data); }

    std::span<double> mutable_data() { return node_->data; }
    std::span<double> mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    const detail::NodePtr& impl() const { return node_; }
    static Tensor wrap(detail::NodePtr node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

private:
    detail::NodePtr node_;
};

/// Ordered record of differentiable operations executed while it is active.
///
/// Backward walks the record once in reverse. Gradients of every tensor the
/// tape touched are reset before the walk, so repeated backward calls on the
/// same tape produce identical leaf gradients.
class Tape {
public:
    using BackwardFn = std::function<void()>;

    void record(detail::NodePtr output, std::vector<detail::NodePtr> inputs, BackwardFn fn) {
        entries_.push_back({std::move(output), std::move(inputs), std::move(fn)});
    }

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    void clear() { entries_.clear(); }

    void backward(const Tensor& loss) {
        if (!loss.defined() || loss.numel() != 1) {
            throw ContractError("backward: loss must be a scalar tensor");
        }
        if (entries_.empty()) throw ContractError("backward: tape is empty");
        if (!loss.requires_grad()) throw ContractError("backward: loss does not depend on any parameter");
        for (auto& e : entries_) {
            zero(*e.output);
            for (auto& in : e.inputs) zero(*in);
        }
        loss.impl()->ensure_grad();
        loss.impl()->grad[0] = 1.0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->fn();
    }

private:
    struct Entry {
        detail::NodePtr output;
        std::vector<detail::NodePtr> inputs;
        BackwardFn fn;
    };

    static void zero(detail::Node& n) {
        if (n.requires_grad) {
            n.ensure_grad();
            std::fill(n.grad.begin(), n.grad.end(), 0.0);
        }
    }

    std::vector<Entry> entries_;
};

namespace detail {
inline thread_local Tape* active_tape = nullptr;
}

inline Tape* active_tape() { return detail::active_tape; }

/// Makes a tape the recording target for the current thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape) : previous_(detail::active_tape) { detail::active_tape = &tape; }
    ~TapeScope() { detail::active_tape = previous_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

/// Suspends recording for the current thread.
class NoGradScope {
public:
    NoGradScope() : previous_(detail::active_tape) { detail::active_tape = nullptr; }
    ~NoGradScope() { detail::active_tape = previous_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* previous_;
};

namespace detail {

// Builds the output tensor and, when recording and any input needs a
// gradient, registers `fn` on the active tape. `fn` receives the output node.
template <class Fn>
Tensor record(Shape shape, std::vector<double> values, std::initializer_list<const Tensor*> inputs, Fn&& fn) {
    Tensor out(std::move(shape), std::move(values));
    Tape* tape = active_tape;
    if (tape == nullptr) return out;
    bool needs = false;
    for (const Tensor* t : inputs) needs = needs || t->requires_grad();
    if (!needs) return out;
    NodePtr o = out.impl();
    o->requires_grad = true;
    o->leaf = false;
    o->ensure_grad();
    std::vector<NodePtr> ins;
    ins.reserve(inputs.size());
    for (const Tensor* t : inputs) ins.push_back(t->impl());
    tape->record(o, std::move(ins), [o, f = std::forward<Fn>(fn)]() { f(*o); });
    return out;
}

template <class Fn>
Tensor record_many(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs, Fn&& fn) {
    Tensor out(std::move(shape), std::move(values));
    Tape* tape = active_tape;
    if (tape == nullptr) return out;
    bool needs = false;
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
    if (!needs) return out;
    NodePtr o = out.impl();
    o->requires_grad = true;
    o->leaf = false;
    o->ensure_grad();
    std::vector<NodePtr> ins;
    for (const Tensor& t : inputs) ins.push_back(t.impl());
    tape->record(o, std::move(ins), [o, f = std::forward<Fn>(fn)]() { f(*o); });
    return out;
}

inline void require_2d(const Tensor& t, const char* op) {
    if (t.dim() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

// C[m×n] += A[m×k]·B[k×n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m×k] += A[m×n]·B[k×n]ᵀ
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double* bp = b + p * n;
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += ai[j] * bp[j];
            c[i * k + p] += s;
        }
    }
}

// C[k×n] += A[m×k]ᵀ·B[m×n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            double* cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

enum class Broadcast { Same, Scalar, Row };

inline Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return Broadcast::Same;
    if (b.numel() == 1) return Broadcast::Scalar;
    // leading-axis broadcast: b matches a's trailing extents
    const std::size_t inner = a.numel() / std::max<std::size_t>(a.rows(), 1);
    if (a.dim() >= 2 && b.numel() == inner &&
        (b.dim() == a.dim() - 1 || (b.dim() == a.dim() && b.shape()[0] == 1))) {
        return Broadcast::Row;
    }
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                         shape_str(a.shape()));
}

inline std::size_t bindex(Broadcast k, std::size_t i, std::size_t inner) {
    switch (k) {
        case Broadcast::Same: return i;
        case Broadcast::Scalar: return 0;
        case Broadcast::Row: return i % inner;
    }
    return i;
}

template <class Fwd, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, DA da, DB db) {
    const Broadcast kind = broadcast_kind(a, b, op);
    const std::size_t n = a.numel();
    const std::size_t inner = kind == Broadcast::Row ? b.numel() : 1;
    std::vector<double> out(n);
    const auto ad = a.data();
    const auto bd = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i], bd[bindex(kind, i, inner)]);
    return record(a.shape(), std::move(out), {&a, &b},
                  [an = a.impl(), bn = b.impl(), kind, inner, da, db](Node& o) {
                      for (std::size_t i = 0; i < o.data.size(); ++i) {
                          const std::size_t j = bindex(kind, i, inner);
                          const double g = o.grad[i];
                          if (an->requires_grad) an->grad[i] += g * da(an->data[i], bn->data[j], o.data[i]);
                          if (bn->requires_grad) bn->grad[j] += g * db(an->data[i], bn->data[j], o.data[i]);
                      }
                  });
}

template <class Fwd, class D>
Tensor unary(const Tensor& a, Fwd fwd, D d) {
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    const auto ad = a.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(ad[i]);
    return record(a.shape(), std::move(out), {&a}, [an = a.impl(), d](Node& o) {
        for (std::size_t i = 0; i < o.data.size(); ++i) an->grad[i] += o.grad[i] * d(an->data[i], o.data[i]);
    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    return detail::record({m, n}, std::move(out), {&a, &b}, [an = a.impl(), bn = b.impl(), m, k, n](detail::Node& o) {
        if (an->requires_grad) detail::gemm_nt(o.grad.data(), bn->data.data(), an->grad.data(), m, n, k);
        if (bn->requires_grad) detail::gemm_tn(an->data.data(), o.grad.data(), bn->grad.data(), m, k, n);
    });
}

/// x·W + b with x: m×in, W: in×out, b: out (or undefined).
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    detail::require_2d(x, "linear");
    detail::require_2d(w, "linear");
    const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
    if (w.rows() != k) {
        throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    }
    const bool has_bias = b.defined();
    if (has_bias && b.numel() != n) throw DimensionError("linear: bias extent " + shape_str(b.shape()));
    std::vector<double> out(m * n, 0.0);
    if (has_bias) {
        for (std::size_t i = 0; i < m; ++i) std::copy(b.data().begin(), b.data().end(), out.begin() + i * n);
    }
    detail::gemm_nn(x.data().data(), w.data().data(), out.data(), m, k, n);
    const Tensor bias = has_bias ? b : Tensor::zeros({n});
    return detail::record({m, n}, std::move(out), {&x, &w, &bias},
                          [xn = x.impl(), wn = w.impl(), bn = bias.impl(), m, k, n](detail::Node& o) {
                              if (xn->requires_grad) detail::gemm_nt(o.grad.data(), wn->data.data(), xn->grad.data(), m, n, k);
                              if (wn->requires_grad) detail::gemm_tn(xn->data.data(), o.grad.data(), wn->grad.data(), m, k, n);
                              if (bn->requires_grad) {
                                  for (std::size_t i = 0; i < m; ++i)
                                      for (std::size_t j = 0; j < n; ++j) bn->grad[j] += o.grad[i * n + j];
                              }
                          });
}

inline Tensor transpose(const Tensor& a) {
    detail::require_2d(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    const auto ad = a.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = ad[i * n + j];
    return detail::record({n, m}, std::move(out), {&a}, [an = a.impl(), m, n](detail::Node& o) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += o.grad[j * m + i];
    });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    }
    return detail::record(std::move(shape), a.to_vector(), {&a}, [an = a.impl()](detail::Node& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
        [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
        [](double x, double y, double) { return -x / (y * y); });
}

/// Elementwise min; the gradient goes to `a` on ties.
inline Tensor minimum(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, "minimum", [](double x, double y) { return std::min(x, y); },
        [](double x, double y, double) { return x <= y ? 1.0 : 0.0; },
        [](double x, double y, double) { return x <= y ? 0.0 : 1.0; });
}

/// Elementwise max; the gradient goes to `a` on ties.
inline Tensor maximum(const Tensor& a, const Tensor& b) {
    return detail::binary(
        a, b, "maximum", [](double x, double y) { return std::max(x, y); },
        [](double x, double y, double) { return x >= y ? 1.0 : 0.0; },
        [](double x, double y, double) { return x >= y ? 0.0 : 1.0; });
}

inline Tensor scale(const Tensor& a, double c) {
    return detail::unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
    return detail::unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Tensor relu(const Tensor& a) {
    return detail::unary(
        a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double logit(double p, double eps = 1e-6) {
    p = std::clamp(p, eps, 1.0 - eps);
    return std::log(p / (1.0 - p));
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary(a, [](double x) { return sigmoid(x); }, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
    return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor abs(const Tensor& a) {
    return detail::unary(
        a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

// ---------------------------------------------------------------------------
// Reductions and normalizers

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return detail::record({1}, {s}, {&a}, [an = a.impl()](detail::Node& o) {
        for (double& g : an->grad) g += o.grad[0];
    });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Sum of a list of scalars (or same-shaped tensors).
inline Tensor add_all(const std::vector<Tensor>& terms, const Shape& shape = {1}) {
    std::vector<double> out(shape_numel(shape), 0.0);
    for (const Tensor& t : terms) {
        if (t.numel() != out.size()) throw DimensionError("add_all: mismatched term " + shape_str(t.shape()));
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += t[i];
    }
    std::vector<Tensor> ins = terms;
    return detail::record_many(shape, std::move(out), ins, [ins](detail::Node& o) {
        for (const Tensor& t : ins) {
            if (!t.requires_grad()) continue;
            auto& g = t.impl()->grad;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
    });
}

/// Numerically stable softmax along `axis`.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= std::max<std::size_t>(x.dim(), 1)) throw ContractError("softmax: axis out of range");
    const Shape& s = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t len = s.empty() ? 1 : s[axis];
    std::vector<double> out(x.numel());
    const auto xd = x.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, xd[base + k * inner]);
            double z = 0.0;
            for (std::size_t k = 0; k < len; ++k) {
                const double e = std::exp(xd[base + k * inner] - mx);
                out[base + k * inner] = e;
                z += e;
            }
            for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
        }
    }
    return detail::record(s, std::move(out), {&x}, [xn = x.impl(), outer, inner, len](detail::Node& o) {
        for (std::size_t a = 0; a < outer; ++a) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = a * len * inner + in;
                double dot = 0.0;
                for (std::size_t k = 0; k < len; ++k) dot += o.grad[base + k * inner] * o.data[base + k * inner];
                for (std::size_t k = 0; k < len; ++k) {
                    const std::size_t idx = base + k * inner;
                    xn->grad[idx] += o.data[idx] * (o.grad[idx] - dot);
                }
            }
        }
    });
}

/// Normalizes each row of the last axis to zero mean and unit variance, then
/// applies gamma and beta.
inline Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    const std::size_t n = x.shape().back();
    if (gamma.numel() != n || beta.numel() != n) throw DimensionError("layernorm: affine extent mismatch");
    const std::size_t m = x.numel() / n;
    std::vector<double> out(x.numel());
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(m);
    const auto xd = x.data();
    const auto gd = gamma.data();
    const auto bd = beta.data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = xd.data() + i * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(n);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[i * n + j] = (row[j] - mu) * inv_std[i];
            out[i * n + j] = xhat[i * n + j] * gd[j] + bd[j];
        }
    }
    return detail::record(
        x.shape(), std::move(out), {&x, &gamma, &beta},
        [xn = x.impl(), gn = gamma.impl(), bn = beta.impl(), xhat = std::move(xhat), inv_std = std::move(inv_std), m,
         n](detail::Node& o) {
            for (std::size_t i = 0; i < m; ++i) {
                const double* go = o.grad.data() + i * n;
                const double* xh = xhat.data() + i * n;
                if (gn->requires_grad)
                    for (std::size_t j = 0; j < n; ++j) gn->grad[j] += go[j] * xh[j];
                if (bn->requires_grad)
                    for (std::size_t j = 0; j < n; ++j) bn->grad[j] += go[j];
                if (xn->requires_grad) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double d = go[j] * gn->data[j];
                        s1 += d;
                        s2 += d * xh[j];
                    }
                    const double inv_n = 1.0 / static_cast<double>(n);
                    for (std::size_t j = 0; j < n; ++j) {
                        const double d = go[j] * gn->data[j];
                        xn->grad[i * n + j] += inv_std[i] * (d - inv_n * s1 - xh[j] * inv_n * s2);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Slicing and assembly (2-D)

inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
    detail::require_2d(a, "slice_rows");
    if (r0 > r1 || r1 > a.rows()) throw DimensionError("slice_rows: range out of bounds");
    const std::size_t n = a.cols();
    std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(r0 * n),
                            a.data().begin() + static_cast<std::ptrdiff_t>(r1 * n));
    return detail::record({r1 - r0, n}, std::move(out), {&a}, [an = a.impl(), r0, n](detail::Node& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[r0 * n + i] += o.grad[i];
    });
}

inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
    detail::require_2d(a, "slice_cols");
    const std::size_t m = a.rows(), n = a.cols(), w = c1 - c0;
    if (c0 > c1 || c1 > n) throw DimensionError("slice_cols: range out of bounds");
    std::vector<double> out(m * w);
    const auto ad = a.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = ad[i * n + c0 + j];
    return detail::record({m, w}, std::move(out), {&a}, [an = a.impl(), m, n, w, c0](detail::Node& o) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) an->grad[i * n + c0 + j] += o.grad[i * w + j];
    });
}

inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
    detail::require_2d(a, "gather_rows");
    const std::size_t n = a.cols();
    std::vector<double> out(idx.size() * n);
    const auto ad = a.data();
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= a.rows()) throw DimensionError("gather_rows: index out of range");
        std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>(idx[r] * n), n, out.begin() + static_cast<std::ptrdiff_t>(r * n));
    }
    return detail::record({idx.size(), n}, std::move(out), {&a}, [an = a.impl(), idx, n](detail::Node& o) {
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < n; ++j) an->grad[idx[r] * n + j] += o.grad[r * n + j];
    });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
    const std::size_t n = parts.front().cols();
    std::size_t m = 0;
    for (const Tensor& p : parts) {
        detail::require_2d(p, "concat_rows");
        if (p.cols() != n) throw DimensionError("concat_rows: column extents differ");
        m += p.rows();
    }
    std::vector<double> out;
    out.reserve(m * n);
    for (const Tensor& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return detail::record_many({m, n}, std::move(out), parts, [parts](detail::Node& o) {
        std::size_t off = 0;
        for (const Tensor& p : parts) {
            if (p.requires_grad()) {
                auto& g = p.impl()->grad;
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[off + i];
            }
            off += p.numel();
        }
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
    const std::size_t m = parts.front().rows();
    std::size_t n = 0;
    for (const Tensor& p : parts) {
        detail::require_2d(p, "concat_cols");
        if (p.rows() != m) throw DimensionError("concat_cols: row extents differ");
        n += p.cols();
    }
    std::vector<double> out(m * n);
    std::size_t c0 = 0;
    for (const Tensor& p : parts) {
        const std::size_t w = p.cols();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) out[i * n + c0 + j] = p[i * w + j];
        c0 += w;
    }
    return detail::record_many({m, n}, std::move(out), parts, [parts, m, n](detail::Node& o) {
        std::size_t c = 0;
        for (const Tensor& p : parts) {
            const std::size_t w = p.cols();
            if (p.requires_grad()) {
                auto& g = p.impl()->grad;
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < w; ++j) g[i * w + j] += o.grad[i * n + c + j];
            }
            c += w;
        }
    });
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Max over coordinates of |analytic − numeric| / max(1, |numeric|) for the
/// scalar function `f` with respect to every tensor in `wrt`. Non-scalar
/// outputs are summed. The tensors are perturbed in place and restored.
inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> wrt, double h = 1e-5) {
    if (h <= 0.0) throw ContractError("grad_check: step must be positive");
    std::vector<bool> had(wrt.size());
    for (std::size_t i = 0; i < wrt.size(); ++i) {
        had[i] = wrt[i].requires_grad();
        wrt[i].set_requires_grad(true);
    }
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor y = f();
        if (y.numel() != 1) y = sum(y);
        if (!tape.empty() && y.requires_grad()) tape.backward(y);
        for (Tensor& t : wrt) {
            if (t.grad().empty()) analytic.emplace_back(t.numel(), 0.0);
            else analytic.emplace_back(t.grad().begin(), t.grad().end());
        }
    }
    auto eval = [&f]() {
        NoGradScope ng;
        Tensor y = f();
        double s = 0.0;
        for (double v : y.data()) s += v;
        return s;
    };
    double worst = 0.0;
    for (std::size_t t = 0; t < wrt.size(); ++t) {
        auto d = wrt[t].mutable_data();
        for (std::size_t i = 0; i < d.size(); ++i) {
            const double keep = d[i];
            d[i] = keep + h;
            const double up = eval();
            d[i] = keep - h;
            const double down = eval();
            d[i] = keep;
            const double numeric = (up - down) / (2.0 * h);
            worst = std::max(worst, std::fabs(analytic[t][i] - numeric) / std::max(1.0, std::fabs(numeric)));
        }
    }
    for (std::size_t i = 0; i < wrt.size(); ++i) {
        if (!had[i]) wrt[i].set_requires_grad(false);
    }
    return worst;
}

/// Single-input form: checks d f(x) / dx.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
    Tensor leaf(x.shape(), x.to_vector(), true);
    return grad_check([&]() { return f(leaf); }, {leaf}, h);
}

inline bool all_finite(const Tensor& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace rmot
