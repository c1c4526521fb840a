#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "simflow/ad/tape.hpp"

namespace simflow::ad {

struct adam_config {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled: p -= lr * wd * p
};

template <class Real>
struct adam_state {
    std::uint64_t step = 0;
    std::vector<std::vector<Real>> m, v;

    void reset(const std::vector<parameter<Real>>& params) {
        step = 0;
        m.assign(params.size(), {});
        v.assign(params.size(), {});
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i].assign(params[i].value.size(), Real(0));
            v[i].assign(params[i].value.size(), Real(0));
        }
    }
};

/// One bias-corrected Adam update with decoupled weight decay, using each
/// parameter's accumulated `grad`. Nothing is modified if any gradient entry
/// is non-finite.
template <class Real>
void adam_step(std::vector<parameter<Real>>& params, adam_state<Real>& st, const adam_config& cfg) {
    if (st.m.size() != params.size()) st.reset(params);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        if (p.grad.empty()) continue;
        if (p.grad.size() != p.value.size() || st.m[i].size() != p.value.size())
            throw std::invalid_argument("adam: shape mismatch for parameter " + p.name);
        if (!p.grad.all_finite()) throw numerical_error("adam: non-finite gradient in parameter " + p.name);
    }
    ++st.step;
    const double t = static_cast<double>(st.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        auto& m = st.m[i];
        auto& v = st.v[i];
        for (std::size_t k = 0; k < p.value.size(); ++k) {
            const double g = p.grad.empty() ? 0.0 : static_cast<double>(p.grad[k]);
            const double mk = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            const double vk = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            m[k] = static_cast<Real>(mk);
            v[k] = static_cast<Real>(vk);
            const double x = p.value[k];
            const double upd = (mk / c1) / (std::sqrt(vk / c2) + cfg.eps);
            p.value[k] = static_cast<Real>(x - cfg.lr * upd - cfg.lr * cfg.weight_decay * x);
        }
    }
}

} // namespace simflow::ad
