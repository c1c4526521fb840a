#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "simflow/ad/network.hpp"

namespace simflow::ad {

struct gradient_check_result {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

/// Compares reverse-mode parameter gradients of `loss` with central
/// differences. Relative error per entry is |a - f| / max(|a|, |f|, floor);
/// the floor turns entries whose gradient is numerically zero into absolute
/// checks. `max_entries` subsamples evenly when a model is large (0 = all).
inline gradient_check_result check_parameter_gradients(std::vector<parameter<double>>& params,
                                                       const std::function<var<double>(tape<double>&)>& loss,
                                                       double eps = 1e-4, std::size_t max_entries = 0,
                                                       double floor = 1e-3) {
    for (auto& p : params) p.grad = basic_tensor<double>(p.value.shape(), 0.0);
    {
        tape<double> t;
        auto l = loss(t);
        t.backward(l);
    }
    std::size_t total = 0;
    for (const auto& p : params) total += p.value.size();
    const std::size_t stride = (max_entries == 0 || total <= max_entries) ? 1 : total / max_entries;
    auto eval = [&] {
        tape<double> t;
        return loss(t).value()[0];
    };
    gradient_check_result res;
    std::size_t flat = 0;
    for (auto& p : params) {
        for (std::size_t k = 0; k < p.value.size(); ++k, ++flat) {
            if (flat % stride) continue;
            const double x = p.value[k];
            p.value[k] = x + eps;
            const double fp = eval();
            p.value[k] = x - eps;
            const double fm = eval();
            p.value[k] = x;
            const double fd = (fp - fm) / (2 * eps);
            const double a = p.grad[k];
            const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), floor});
            res.max_rel_error = std::max(res.max_rel_error, rel);
            ++res.checked;
        }
    }
    return res;
}

/// Finite-difference check of a model on `input`, in double precision. The
/// scalar probed is sum(w * output) with fixed pseudo-random weights w.
template <class Real>
double gradient_check(const model<Real>& m, const basic_tensor<Real>& input, double eps = 1e-4,
                      std::size_t max_entries = 0) {
    auto md = m.template cast<double>();
    auto in = input.template cast<double>();
    rng gen(0x5eed);
    const std::size_t outs = in.rows() * md.spec().output_dim;
    basic_tensor<double> w({in.rows(), md.spec().output_dim});
    for (std::size_t i = 0; i < outs; ++i) w[i] = gen.uniform(-1.0, 1.0);
    auto loss = [&](tape<double>& t) {
        auto out = md.forward(t, t.constant(in));
        return sum(mul(out, t.constant(w)));
    };
    return check_parameter_gradients(md.params(), loss, eps, max_entries).max_rel_error;
}

} // namespace simflow::ad
