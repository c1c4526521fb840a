#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "simflow/ad/tensor.hpp"

namespace simflow::ad {

/// A trainable array. `grad` accumulates across backward passes until zeroed.
template <class Real>
struct parameter {
    std::string name;
    basic_tensor<Real> value;
    basic_tensor<Real> grad;
};

enum class op_kind : std::uint8_t {
    constant,
    input,
    parameter,
    stop_gradient,
    linear,
    matmul,
    add,
    sub,
    mul,
    div,
    scale,
    add_scalar,
    elu,
    silu,
    sigmoid,
    tanh,
    exp,
    log,
    square,
    concat_cols,
    slice_cols,
    repeat_rows,
    reshape,
    sum,
    mean,
    row_sum,
    conv2d,
    group_norm,
    bce_logits,
};

inline const char* op_name(op_kind k) {
    switch (k) {
    case op_kind::constant: return "constant";
    case op_kind::input: return "input";
    case op_kind::parameter: return "parameter";
    case op_kind::stop_gradient: return "stop_gradient";
    case op_kind::linear: return "linear";
    case op_kind::matmul: return "matmul";
    case op_kind::add: return "add";
    case op_kind::sub: return "sub";
    case op_kind::mul: return "mul";
    case op_kind::div: return "div";
    case op_kind::scale: return "scale";
    case op_kind::add_scalar: return "add_scalar";
    case op_kind::elu: return "elu";
    case op_kind::silu: return "silu";
    case op_kind::sigmoid: return "sigmoid";
    case op_kind::tanh: return "tanh";
    case op_kind::exp: return "exp";
    case op_kind::log: return "log";
    case op_kind::square: return "square";
    case op_kind::concat_cols: return "concat_cols";
    case op_kind::slice_cols: return "slice_cols";
    case op_kind::repeat_rows: return "repeat_rows";
    case op_kind::reshape: return "reshape";
    case op_kind::sum: return "sum";
    case op_kind::mean: return "mean";
    case op_kind::row_sum: return "row_sum";
    case op_kind::conv2d: return "conv2d";
    case op_kind::group_norm: return "group_norm";
    case op_kind::bce_logits: return "bce_logits";
    }
    return "?";
}

template <class Real>
class tape;

/// Handle to a node recorded on a tape.
template <class Real>
class var {
public:
    var() = default;
    var(tape<Real>* t, std::size_t id) : tape_(t), id_(id) {}

    const basic_tensor<Real>& value() const { return tape_->value(id_); }
    const shape_t& shape() const { return value().shape(); }
    tape<Real>& graph() const { return *tape_; }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    tape<Real>* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Records operations in execution order, which is also a topological order:
/// a node can only reference ids that already exist.
template <class Real>
class tape {
public:
    using tensor_type = basic_tensor<Real>;
    using backward_fn = std::function<void(tape&, std::size_t)>;

    struct node {
        op_kind kind;
        std::vector<std::size_t> inputs;
        tensor_type value;
        tensor_type grad;
        bool needs_grad = false;
        parameter<Real>* param = nullptr;
        backward_fn backward;
        const tensor_type* ref = nullptr;  // leaf aliasing external storage

        const tensor_type& val() const { return ref ? *ref : value; }
    };

    tape() = default;
    tape(const tape&) = delete;
    tape& operator=(const tape&) = delete;
    tape(tape&&) = default;
    tape& operator=(tape&&) = default;

    var<Real> constant(tensor_type value) { return push_leaf(op_kind::constant, std::move(value), false, nullptr); }

    /// A leaf whose gradient is tracked and can be read back with gradient().
    var<Real> input(tensor_type value) { return push_leaf(op_kind::input, std::move(value), true, nullptr); }

    /// Trainable leaf. The parameter's storage is aliased, not copied, and
    /// must outlive the tape.
    var<Real> param(parameter<Real>& p) {
        nodes_.push_back(node{op_kind::parameter, {}, {}, {}, true, &p, {}, &p.value});
        return var<Real>(this, nodes_.size() - 1);
    }

    /// Constant leaf aliasing external storage (frozen weights).
    var<Real> constant_ref(const tensor_type& value) {
        nodes_.push_back(node{op_kind::constant, {}, {}, {}, false, nullptr, {}, &value});
        return var<Real>(this, nodes_.size() - 1);
    }

    var<Real> record(op_kind kind, std::vector<std::size_t> inputs, tensor_type value, backward_fn fn) {
        bool needs = false;
        for (auto i : inputs) needs = needs || nodes_.at(i).needs_grad;
        if (!value.all_finite())
            throw numerical_error(std::string("non-finite activation produced by op '") + op_name(kind) + "'");
        node n{kind, std::move(inputs), std::move(value), {}, needs, nullptr, needs ? std::move(fn) : backward_fn{}, nullptr};
        nodes_.push_back(std::move(n));
        return var<Real>(this, nodes_.size() - 1);
    }

    const tensor_type& value(std::size_t id) const { return nodes_[id].val(); }
    const node& at(std::size_t id) const { return nodes_.at(id); }
    std::size_t size() const noexcept { return nodes_.size(); }
    bool consumed() const noexcept { return consumed_; }

    /// Gradient buffer of a node, allocated as zeros on first access.
    tensor_type& grad_buffer(std::size_t id) {
        auto& n = nodes_[id];
        if (n.grad.empty()) n.grad = tensor_type(n.val().shape(), Real(0));
        return n.grad;
    }

    bool wants_grad(std::size_t id) const { return nodes_[id].needs_grad; }

    /// Reverse sweep from `out`. The seed defaults to ones. Parameter
    /// gradients are added into parameter::grad. Unless `retain` is set the
    /// tape is marked consumed and a second call throws.
    void backward(var<Real> out, const tensor_type* seed = nullptr, bool retain = false) {
        if (consumed_) throw std::logic_error("tape: graph already consumed by a previous backward()");
        for (auto& n : nodes_) n.grad = tensor_type{};
        auto& g = grad_buffer(out.id());
        if (seed) {
            if (seed->size() != g.size()) throw std::invalid_argument("tape: seed shape mismatch");
            std::copy(seed->data().begin(), seed->data().end(), g.data().begin());
        } else {
            g.fill(Real(1));
        }
        for (std::size_t i = out.id() + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (!n.needs_grad || n.grad.empty()) continue;
            if (n.param) {
                auto& pg = n.param->grad;
                if (pg.size() != n.grad.size()) pg = tensor_type(n.param->value.shape(), Real(0));
                for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
            } else if (n.backward) {
                n.backward(*this, i);
            }
        }
        if (!retain) consumed_ = true;
    }

    /// Gradient of the last backward() with respect to an input() leaf.
    tensor_type gradient(var<Real> v) const {
        const auto& n = nodes_.at(v.id());
        if (n.grad.empty()) return tensor_type(n.val().shape(), Real(0));
        return n.grad;
    }

private:
    var<Real> push_leaf(op_kind kind, tensor_type value, bool needs, parameter<Real>* p) {
        nodes_.push_back(node{kind, {}, std::move(value), {}, needs, p, {}, nullptr});
        return var<Real>(this, nodes_.size() - 1);
    }

    std::vector<node> nodes_;
    bool consumed_ = false;
};

namespace detail {

template <class Real>
using row_matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class Real>
using cmap = Eigen::Map<const row_matrix<Real>>;

template <class Real>
using mmap = Eigen::Map<row_matrix<Real>>;

struct broadcast_plan {
    std::size_t rows, cols;
    std::size_t ra, ca, rb, cb;
    shape_t out_shape;
};

template <class Real>
broadcast_plan plan_broadcast(const basic_tensor<Real>& a, const basic_tensor<Real>& b, const char* what) {
    broadcast_plan p{};
    p.ra = a.rows();
    p.ca = a.cols();
    p.rb = b.rows();
    p.cb = b.cols();
    if (a.size() == 1) p.ra = p.ca = 1;
    if (b.size() == 1) p.rb = p.cb = 1;
    auto pick = [&](std::size_t x, std::size_t y) {
        if (x == y || y == 1) return x;
        if (x == 1) return y;
        throw std::invalid_argument(std::string(what) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                                    shape_string(b.shape()));
    };
    p.rows = pick(p.ra, p.rb);
    p.cols = pick(p.ca, p.cb);
    if (a.size() == p.rows * p.cols && a.size() >= b.size())
        p.out_shape = a.shape();
    else if (b.size() == p.rows * p.cols)
        p.out_shape = b.shape();
    else
        p.out_shape = {p.rows, p.cols};
    return p;
}

inline std::size_t bidx(std::size_t r, std::size_t c, std::size_t rr, std::size_t cc) {
    return (rr == 1 ? 0 : r) * cc + (cc == 1 ? 0 : c);
}

// Elementwise binary op with 2-D broadcasting. `fwd(a, b)` computes the
// value; `da(a, b, y)` and `db(a, b, y)` are the partial derivatives.
template <class Real, class F, class DA, class DB>
var<Real> binary(op_kind kind, var<Real> a, var<Real> b, F fwd, DA da, DB db) {
    auto& t = a.graph();
    if (&t != &b.graph()) throw std::invalid_argument("ad: operands recorded on different tapes");
    const auto& av = a.value();
    const auto& bv = b.value();
    auto p = plan_broadcast(av, bv, op_name(kind));
    basic_tensor<Real> out(p.out_shape);
    for (std::size_t r = 0; r < p.rows; ++r)
        for (std::size_t c = 0; c < p.cols; ++c)
            out[r * p.cols + c] = fwd(av[bidx(r, c, p.ra, p.ca)], bv[bidx(r, c, p.rb, p.cb)]);
    const auto ia = a.id(), ib = b.id();
    return t.record(kind, {ia, ib}, std::move(out), [p, ia, ib, da, db](tape<Real>& tp, std::size_t self) {
        const auto& g = tp.at(self).grad;
        const auto& y = tp.value(self);
        const auto& x0 = tp.value(ia);
        const auto& x1 = tp.value(ib);
        if (tp.wants_grad(ia)) {
            auto& ga = tp.grad_buffer(ia);
            for (std::size_t r = 0; r < p.rows; ++r)
                for (std::size_t c = 0; c < p.cols; ++c) {
                    auto k = r * p.cols + c;
                    auto i0 = bidx(r, c, p.ra, p.ca), i1 = bidx(r, c, p.rb, p.cb);
                    ga[i0] += g[k] * da(x0[i0], x1[i1], y[k]);
                }
        }
        if (tp.wants_grad(ib)) {
            auto& gb = tp.grad_buffer(ib);
            for (std::size_t r = 0; r < p.rows; ++r)
                for (std::size_t c = 0; c < p.cols; ++c) {
                    auto k = r * p.cols + c;
                    auto i0 = bidx(r, c, p.ra, p.ca), i1 = bidx(r, c, p.rb, p.cb);
                    gb[i1] += g[k] * db(x0[i0], x1[i1], y[k]);
                }
        }
    });
}

// Elementwise unary op; `d(x, y)` is dy/dx.
template <class Real, class F, class D>
var<Real> unary(op_kind kind, var<Real> a, F fwd, D d) {
    auto& t = a.graph();
    const auto& av = a.value();
    basic_tensor<Real> out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
    const auto ia = a.id();
    return t.record(kind, {ia}, std::move(out), [ia, d](tape<Real>& tp, std::size_t self) {
        const auto& g = tp.at(self).grad;
        const auto& y = tp.value(self);
        const auto& x = tp.value(ia);
        auto& ga = tp.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * d(x[i], y[i]);
    });
}

} // namespace detail

template <class Real>
var<Real> add(var<Real> a, var<Real> b) {
    return detail::binary(
        op_kind::add, a, b, [](Real x, Real y) { return x + y; }, [](Real, Real, Real) { return Real(1); },
        [](Real, Real, Real) { return Real(1); });
}

template <class Real>
var<Real> sub(var<Real> a, var<Real> b) {
    return detail::binary(
        op_kind::sub, a, b, [](Real x, Real y) { return x - y; }, [](Real, Real, Real) { return Real(1); },
        [](Real, Real, Real) { return Real(-1); });
}

template <class Real>
var<Real> mul(var<Real> a, var<Real> b) {
    return detail::binary(
        op_kind::mul, a, b, [](Real x, Real y) { return x * y; }, [](Real, Real y, Real) { return y; },
        [](Real x, Real, Real) { return x; });
}

template <class Real>
var<Real> div(var<Real> a, var<Real> b) {
    return detail::binary(
        op_kind::div, a, b, [](Real x, Real y) { return x / y; }, [](Real, Real y, Real) { return Real(1) / y; },
        [](Real, Real y, Real out) { return -out / y; });
}

template <class Real>
var<Real> scale(var<Real> a, Real s) {
    return detail::unary(
        op_kind::scale, a, [s](Real x) { return s * x; }, [s](Real, Real) { return s; });
}

template <class Real>
var<Real> add_scalar(var<Real> a, Real s) {
    return detail::unary(
        op_kind::add_scalar, a, [s](Real x) { return x + s; }, [](Real, Real) { return Real(1); });
}

template <class Real>
var<Real> elu(var<Real> a) {
    return detail::unary(
        op_kind::elu, a, [](Real x) { return x >= Real(0) ? x : std::expm1(x); },
        [](Real x, Real y) { return x >= Real(0) ? Real(1) : y + Real(1); });
}

template <class Real>
var<Real> sigmoid(var<Real> a) {
    return detail::unary(
        op_kind::sigmoid, a,
        [](Real x) {
            if (x >= Real(0)) return Real(1) / (Real(1) + std::exp(-x));
            Real e = std::exp(x);
            return e / (Real(1) + e);
        },
        [](Real, Real y) { return y * (Real(1) - y); });
}

template <class Real>
var<Real> silu(var<Real> a) {
    return detail::unary(
        op_kind::silu, a,
        [](Real x) {
            Real s = x >= Real(0) ? Real(1) / (Real(1) + std::exp(-x)) : std::exp(x) / (Real(1) + std::exp(x));
            return x * s;
        },
        [](Real x, Real) {
            Real s = x >= Real(0) ? Real(1) / (Real(1) + std::exp(-x)) : std::exp(x) / (Real(1) + std::exp(x));
            return s * (Real(1) + x * (Real(1) - s));
        });
}

template <class Real>
var<Real> tanh(var<Real> a) {
    return detail::unary(
        op_kind::tanh, a, [](Real x) { return std::tanh(x); }, [](Real, Real y) { return Real(1) - y * y; });
}

template <class Real>
var<Real> exp(var<Real> a) {
    return detail::unary(
        op_kind::exp, a, [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
}

template <class Real>
var<Real> log(var<Real> a) {
    return detail::unary(
        op_kind::log, a, [](Real x) { return std::log(x); }, [](Real x, Real) { return Real(1) / x; });
}

template <class Real>
var<Real> square(var<Real> a) {
    return detail::unary(
        op_kind::square, a, [](Real x) { return x * x; }, [](Real x, Real) { return Real(2) * x; });
}

/// Copies the value; no gradient flows to anything upstream.
template <class Real>
var<Real> stop_gradient(var<Real> a) {
    auto& t = a.graph();
    return t.constant(a.value());
}

/// y = x·W + b, x:[n,k], W:[k,m], b:[m] (broadcast over rows).
template <class Real>
var<Real> linear(var<Real> x, var<Real> w, var<Real> b) {
    auto& t = x.graph();
    const auto& xv = x.value();
    const auto& wv = w.value();
    const auto& bv = b.value();
    const std::size_t n = xv.rows(), k = xv.cols();
    if (wv.rank() != 2 || wv.dim(0) != k)
        throw std::invalid_argument("linear: input " + shape_string(xv.shape()) + " vs weight " +
                                    shape_string(wv.shape()));
    const std::size_t m = wv.dim(1);
    if (bv.size() != m) throw std::invalid_argument("linear: bias size mismatch");
    basic_tensor<Real> out({n, m});
    detail::mmap<Real> Y(out.data().data(), n, m);
    Y.noalias() = detail::cmap<Real>(xv.data().data(), n, k) * detail::cmap<Real>(wv.data().data(), k, m);
    Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>> bias(bv.data().data(), m);
    Y.rowwise() += bias;
    const auto ix = x.id(), iw = w.id(), ib = b.id();
    return t.record(op_kind::linear, {ix, iw, ib}, std::move(out),
                    [ix, iw, ib, n, k, m](tape<Real>& tp, std::size_t self) {
                        const auto& g = tp.at(self).grad;
                        detail::cmap<Real> G(g.data().data(), n, m);
                        if (tp.wants_grad(ix)) {
                            auto& gx = tp.grad_buffer(ix);
                            detail::mmap<Real>(gx.data().data(), n, k).noalias() +=
                                G * detail::cmap<Real>(tp.value(iw).data().data(), k, m).transpose();
                        }
                        if (tp.wants_grad(iw)) {
                            auto& gw = tp.grad_buffer(iw);
                            detail::mmap<Real>(gw.data().data(), k, m).noalias() +=
                                detail::cmap<Real>(tp.value(ix).data().data(), n, k).transpose() * G;
                        }
                        if (tp.wants_grad(ib)) {
                            auto& gb = tp.grad_buffer(ib);
                            Eigen::Map<Eigen::Matrix<Real, 1, Eigen::Dynamic>>(gb.data().data(), m) +=
                                G.colwise().sum();
                        }
                    });
}

template <class Real>
var<Real> matmul(var<Real> a, var<Real> b) {
    auto& t = a.graph();
    const auto& av = a.value();
    const auto& bv = b.value();
    const std::size_t n = av.rows(), k = av.cols();
    if (bv.rank() != 2 || bv.dim(0) != k) throw std::invalid_argument("matmul: inner dimension mismatch");
    const std::size_t m = bv.dim(1);
    basic_tensor<Real> out({n, m});
    detail::mmap<Real>(out.data().data(), n, m).noalias() =
        detail::cmap<Real>(av.data().data(), n, k) * detail::cmap<Real>(bv.data().data(), k, m);
    const auto ia = a.id(), ib = b.id();
    return t.record(op_kind::matmul, {ia, ib}, std::move(out), [ia, ib, n, k, m](tape<Real>& tp, std::size_t self) {
        detail::cmap<Real> G(tp.at(self).grad.data().data(), n, m);
        if (tp.wants_grad(ia))
            detail::mmap<Real>(tp.grad_buffer(ia).data().data(), n, k).noalias() +=
                G * detail::cmap<Real>(tp.value(ib).data().data(), k, m).transpose();
        if (tp.wants_grad(ib))
            detail::mmap<Real>(tp.grad_buffer(ib).data().data(), k, m).noalias() +=
                detail::cmap<Real>(tp.value(ia).data().data(), n, k).transpose() * G;
    });
}

/// Column-wise concatenation of rank-2 views with equal row counts.
template <class Real>
var<Real> concat_cols(const std::vector<var<Real>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    auto& t = parts.front().graph();
    const std::size_t n = parts.front().value().rows();
    std::vector<std::size_t> widths, ids;
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.value().rows() != n) throw std::invalid_argument("concat_cols: row count mismatch");
        widths.push_back(p.value().cols());
        ids.push_back(p.id());
        total += widths.back();
    }
    basic_tensor<Real> out({n, total});
    std::size_t off = 0;
    for (std::size_t j = 0; j < parts.size(); ++j) {
        const auto& v = parts[j].value();
        for (std::size_t r = 0; r < n; ++r)
            std::copy_n(v.data().begin() + r * widths[j], widths[j], out.data().begin() + r * total + off);
        off += widths[j];
    }
    return t.record(op_kind::concat_cols, ids, std::move(out), [ids, widths, n, total](tape<Real>& tp, std::size_t self) {
        const auto& g = tp.at(self).grad;
        std::size_t o = 0;
        for (std::size_t j = 0; j < ids.size(); ++j) {
            if (tp.wants_grad(ids[j])) {
                auto& gi = tp.grad_buffer(ids[j]);
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t c = 0; c < widths[j]; ++c) gi[r * widths[j] + c] += g[r * total + o + c];
            }
            o += widths[j];
        }
    });
}

template <class Real>
var<Real> slice_cols(var<Real> a, std::size_t begin, std::size_t count) {
    auto& t = a.graph();
    const auto& av = a.value();
    const std::size_t n = av.rows(), c = av.cols();
    if (begin + count > c) throw std::invalid_argument("slice_cols: out of range");
    basic_tensor<Real> out({n, count});
    for (std::size_t r = 0; r < n; ++r)
        std::copy_n(av.data().begin() + r * c + begin, count, out.data().begin() + r * count);
    const auto ia = a.id();
    return t.record(op_kind::slice_cols, {ia}, std::move(out), [ia, n, c, begin, count](tape<Real>& tp, std::size_t self) {
        const auto& g = tp.at(self).grad;
        auto& ga = tp.grad_buffer(ia);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t k = 0; k < count; ++k) ga[r * c + begin + k] += g[r * count + k];
    });
}

/// [1, c] -> [n, c].
template <class Real>
var<Real> repeat_rows(var<Real> a, std::size_t n) {
    auto& t = a.graph();
    const auto& av = a.value();
    if (av.rows() != 1) throw std::invalid_argument("repeat_rows: expects a single row");
    const std::size_t c = av.cols();
    basic_tensor<Real> out({n, c});
    for (std::size_t r = 0; r < n; ++r) std::copy_n(av.data().begin(), c, out.data().begin() + r * c);
    const auto ia = a.id();
    return t.record(op_kind::repeat_rows, {ia}, std::move(out), [ia, n, c](tape<Real>& tp, std::size_t self) {
        const auto& g = tp.at(self).grad;
        auto& ga = tp.grad_buffer(ia);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t k = 0; k < c; ++k) ga[k] += g[r * c + k];
    });
}

template <class Real>
var<Real> reshape(var<Real> a, shape_t shape) {
    auto& t = a.graph();
    basic_tensor<Real> out = a.value();
    out.reshape(std::move(shape));
    const auto ia = a.id();
    return t.record(op_kind::reshape, {ia}, std::move(out), [ia](tape<Real>& tp, std::size_t self) {
        const auto& g = tp.at(self).grad;
        auto& ga = tp.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

template <class Real>
var<Real> sum(var<Real> a) {
    auto& t = a.graph();
    const auto& av = a.value();
    Real s = 0;
    if constexpr (std::is_same_v<Real, float>) {
        double acc = 0;
        for (auto x : av.data()) acc += x;
        s = static_cast<Real>(acc);
    } else {
        for (auto x : av.data()) s += x;
    }
    const auto ia = a.id();
    return t.record(op_kind::sum, {ia}, basic_tensor<Real>::scalar(s), [ia](tape<Real>& tp, std::size_t self) {
        const Real g = tp.at(self).grad[0];
        auto& ga = tp.grad_buffer(ia);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
}

template <class Real>
var<Real> mean(var<Real> a) {
    const auto n = a.value().size();
    return scale(sum(a), Real(1) / static_cast<Real>(n));
}

/// [n, c] -> [n, 1].
template <class Real>
var<Real> row_sum(var<Real> a) {
    auto& t = a.graph();
    const auto& av = a.value();
    const std::size_t n = av.rows(), c = av.cols();
    basic_tensor<Real> out({n, 1});
    for (std::size_t r = 0; r < n; ++r) {
        Real s = 0;
        for (std::size_t k = 0; k < c; ++k) s += av[r * c + k];
        out[r] = s;
    }
    const auto ia = a.id();
    return t.record(op_kind::row_sum, {ia}, std::move(out), [ia, n, c](tape<Real>& tp, std::size_t self) {
        const auto& g = tp.at(self).grad;
        auto& ga = tp.grad_buffer(ia);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t k = 0; k < c; ++k) ga[r * c + k] += g[r];
    });
}

/// 3x3 convolution, zero padding 1, on NHWC input [N,H,W,C]. Weight layout
/// [9*C, O] with row index (ky*3 + kx)*C + c; output [N,H',W',O].
template <class Real>
var<Real> conv2d(var<Real> x, var<Real> w, var<Real> b, std::size_t stride) {
    auto& t = x.graph();
    const auto& xv = x.value();
    if (xv.rank() != 4) throw std::invalid_argument("conv2d: expects NHWC input, got " + shape_string(xv.shape()));
    const std::size_t N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    const auto& wv = w.value();
    if (wv.rank() != 2 || wv.dim(0) != 9 * C)
        throw std::invalid_argument("conv2d: weight " + shape_string(wv.shape()) + " does not match " +
                                    std::to_string(C) + " input channels");
    const std::size_t O = wv.dim(1);
    const std::size_t Ho = (H - 1) / stride + 1, Wo = (W - 1) / stride + 1;
    const std::size_t rows = N * Ho * Wo, K = 9 * C;
    auto cols = std::make_shared<aligned_vector<Real>>(rows * K, Real(0));
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                Real* dst = cols->data() + ((n * Ho + oy) * Wo + ox) * K;
                for (std::size_t ky = 0; ky < 3; ++ky) {
                    const long iy = static_cast<long>(oy * stride + ky) - 1;
                    if (iy < 0 || iy >= static_cast<long>(H)) continue;
                    for (std::size_t kx = 0; kx < 3; ++kx) {
                        const long ix = static_cast<long>(ox * stride + kx) - 1;
                        if (ix < 0 || ix >= static_cast<long>(W)) continue;
                        const Real* src = xv.data().data() + ((n * H + iy) * W + ix) * C;
                        std::copy_n(src, C, dst + (ky * 3 + kx) * C);
                    }
                }
            }
    basic_tensor<Real> out({N, Ho, Wo, O});
    detail::mmap<Real> Y(out.data().data(), rows, O);
    Y.noalias() = detail::cmap<Real>(cols->data(), rows, K) * detail::cmap<Real>(wv.data().data(), K, O);
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<Real, 1, Eigen::Dynamic>>(b.value().data().data(), O);
    const auto ix = x.id(), iw = w.id(), ib = b.id();
    return t.record(op_kind::conv2d, {ix, iw, ib}, std::move(out),
                    [=](tape<Real>& tp, std::size_t self) {
                        detail::cmap<Real> G(tp.at(self).grad.data().data(), rows, O);
                        detail::cmap<Real> Cm(cols->data(), rows, K);
                        if (tp.wants_grad(iw))
                            detail::mmap<Real>(tp.grad_buffer(iw).data().data(), K, O).noalias() += Cm.transpose() * G;
                        if (tp.wants_grad(ib))
                            Eigen::Map<Eigen::Matrix<Real, 1, Eigen::Dynamic>>(tp.grad_buffer(ib).data().data(), O) +=
                                G.colwise().sum();
                        if (tp.wants_grad(ix)) {
                            detail::row_matrix<Real> gcols =
                                G * detail::cmap<Real>(tp.value(iw).data().data(), K, O).transpose();
                            auto& gx = tp.grad_buffer(ix);
                            for (std::size_t n = 0; n < N; ++n)
                                for (std::size_t oy = 0; oy < Ho; ++oy)
                                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                                        const Real* src = gcols.data() + ((n * Ho + oy) * Wo + ox) * K;
                                        for (std::size_t ky = 0; ky < 3; ++ky) {
                                            const long iy = static_cast<long>(oy * stride + ky) - 1;
                                            if (iy < 0 || iy >= static_cast<long>(H)) continue;
                                            for (std::size_t kx = 0; kx < 3; ++kx) {
                                                const long ixx = static_cast<long>(ox * stride + kx) - 1;
                                                if (ixx < 0 || ixx >= static_cast<long>(W)) continue;
                                                Real* dst = gx.data().data() + ((n * H + iy) * W + ixx) * C;
                                                const Real* s = src + (ky * 3 + kx) * C;
                                                for (std::size_t c = 0; c < C; ++c) dst[c] += s[c];
                                            }
                                        }
                                    }
                        }
                    });
}

/// Group normalization over channels-last data: the last dim is channels,
/// statistics are per (sample, group) over all spatial positions.
template <class Real>
var<Real> group_norm(var<Real> x, var<Real> gamma, var<Real> beta, std::size_t groups, Real eps = Real(1e-5)) {
    auto& t = x.graph();
    const auto& xv = x.value();
    const std::size_t N = xv.rows();
    const std::size_t C = xv.shape().back();
    if (groups == 0 || C % groups != 0)
        throw std::invalid_argument("group_norm: " + std::to_string(C) + " channels not divisible into " +
                                    std::to_string(groups) + " groups");
    const std::size_t S = xv.size() / (N * C);  // spatial positions per sample
    const std::size_t cg = C / groups;
    const double M = static_cast<double>(S * cg);
    auto xhat = std::make_shared<aligned_vector<Real>>(xv.size());
    auto inv_std = std::make_shared<std::vector<Real>>(N * groups);
    basic_tensor<Real> out(xv.shape());
    const auto& gv = gamma.value();
    const auto& bv = beta.value();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t g = 0; g < groups; ++g) {
            double mu = 0, var = 0;
            for (std::size_t s = 0; s < S; ++s)
                for (std::size_t c = g * cg; c < (g + 1) * cg; ++c) mu += xv[(n * S + s) * C + c];
            mu /= M;
            for (std::size_t s = 0; s < S; ++s)
                for (std::size_t c = g * cg; c < (g + 1) * cg; ++c) {
                    double d = xv[(n * S + s) * C + c] - mu;
                    var += d * d;
                }
            var /= M;
            const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
            (*inv_std)[n * groups + g] = static_cast<Real>(is);
            for (std::size_t s = 0; s < S; ++s)
                for (std::size_t c = g * cg; c < (g + 1) * cg; ++c) {
                    const std::size_t k = (n * S + s) * C + c;
                    const Real h = static_cast<Real>((xv[k] - mu) * is);
                    (*xhat)[k] = h;
                    out[k] = h * gv[c] + bv[c];
                }
        }
    const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
    return t.record(op_kind::group_norm, {ix, ig, ib}, std::move(out), [=](tape<Real>& tp, std::size_t self) {
        const auto& g = tp.at(self).grad;
        const auto& gam = tp.value(ig);
        if (tp.wants_grad(ig) || tp.wants_grad(ib)) {
            auto& gg = tp.grad_buffer(ig);
            auto& gb = tp.grad_buffer(ib);
            for (std::size_t k = 0; k < g.size(); ++k) {
                const std::size_t c = k % C;
                gg[c] += g[k] * (*xhat)[k];
                gb[c] += g[k];
            }
        }
        if (!tp.wants_grad(ix)) return;
        auto& gx = tp.grad_buffer(ix);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t grp = 0; grp < groups; ++grp) {
                double m1 = 0, m2 = 0;
                for (std::size_t s = 0; s < S; ++s)
                    for (std::size_t c = grp * cg; c < (grp + 1) * cg; ++c) {
                        const std::size_t k = (n * S + s) * C + c;
                        const double gh = static_cast<double>(g[k]) * gam[c];
                        m1 += gh;
                        m2 += gh * (*xhat)[k];
                    }
                m1 /= M;
                m2 /= M;
                const double is = (*inv_std)[n * groups + grp];
                for (std::size_t s = 0; s < S; ++s)
                    for (std::size_t c = grp * cg; c < (grp + 1) * cg; ++c) {
                        const std::size_t k = (n * S + s) * C + c;
                        const double gh = static_cast<double>(g[k]) * gam[c];
                        gx[k] += static_cast<Real>(is * (gh - m1 - (*xhat)[k] * m2));
                    }
            }
    });
}

/// Mean binary cross-entropy of logits [n,1] against 0/1 labels.
template <class Real>
var<Real> bce_with_logits(var<Real> logits, const std::vector<Real>& labels) {
    auto& t = logits.graph();
    const auto& z = logits.value();
    if (z.size() != labels.size()) throw std::invalid_argument("bce_with_logits: label count mismatch");
    double acc = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double x = z[i];
        acc += std::max(x, 0.0) - x * labels[i] + std::log1p(std::exp(-std::abs(x)));
    }
    const auto n = static_cast<double>(z.size());
    const auto iz = logits.id();
    return t.record(op_kind::bce_logits, {iz}, basic_tensor<Real>::scalar(static_cast<Real>(acc / n)),
                    [iz, labels, n](tape<Real>& tp, std::size_t self) {
                        const Real g = tp.at(self).grad[0];
                        const auto& zz = tp.value(iz);
                        auto& gz = tp.grad_buffer(iz);
                        for (std::size_t i = 0; i < zz.size(); ++i) {
                            const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(zz[i])));
                            gz[i] += static_cast<Real>(g * (s - labels[i]) / n);
                        }
                    });
}

template <class Real>
var<Real> operator+(var<Real> a, var<Real> b) { return add(a, b); }
template <class Real>
var<Real> operator-(var<Real> a, var<Real> b) { return sub(a, b); }
template <class Real>
var<Real> operator*(var<Real> a, var<Real> b) { return mul(a, b); }
template <class Real>
var<Real> operator/(var<Real> a, var<Real> b) { return div(a, b); }

} // namespace simflow::ad
