#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "simflow/ad/tape.hpp"
#include "simflow/flow/velocity_model.hpp"
#include "simflow/random.hpp"

namespace simflow::flow {

/// Velocity of a batch of states at time t.
using field_fn = std::function<tensor(double t, const tensor& theta)>;

/// Forward Euler over the uniform grid t_k = k / n_steps, k = 0..n_steps-1.
inline tensor integrate(const field_fn& v, tensor theta, std::size_t n_steps) {
    if (n_steps == 0) throw std::invalid_argument("integrate: n_steps must be >= 1");
    const double h = 1.0 / static_cast<double>(n_steps);
    for (std::size_t k = 0; k < n_steps; ++k) {
        const double t = static_cast<double>(k) * h;
        const auto vel = v(t, theta);
        if (vel.size() != theta.size()) throw std::invalid_argument("integrate: velocity shape mismatch");
        for (std::size_t i = 0; i < theta.size(); ++i) theta[i] += static_cast<float>(h * vel[i]);
        if (!theta.all_finite())
            throw numerical_error("integrate: non-finite state at step " + std::to_string(k) + " (t=" +
                                  std::to_string(t) + ")");
    }
    return theta;
}

inline double standard_normal_log_density(const float* x, std::size_t d) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(x[j]) * x[j];
    return -0.5 * s - 0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi);
}

template <class Real>
using graph_field_fn = std::function<ad::var<Real>(ad::tape<Real>&, ad::var<Real> theta, double t)>;

/// log p_1(theta1) under the flow with a standard-normal source, via the
/// instantaneous change of variables. Integrates backward over the same grid
/// the sampler uses (time t_k with the state at t_{k+1}); the divergence is the
/// exact Jacobian trace from d reverse sweeps over one recorded graph.
template <class Real>
std::vector<double> log_density(const graph_field_fn<Real>& v, const ad::basic_tensor<Real>& theta1,
                                std::size_t n_steps) {
    if (n_steps == 0) throw std::invalid_argument("log_density: n_steps must be >= 1");
    const std::size_t n = theta1.rows(), d = theta1.cols();
    if (d > 32) throw std::invalid_argument("log_density: exact trace limited to d <= 32");
    const double h = 1.0 / static_cast<double>(n_steps);
    auto theta = theta1;
    std::vector<double> div_integral(n, 0.0);
    for (std::size_t k = n_steps; k-- > 0;) {
        const double t = static_cast<double>(k) * h;
        ad::tape<Real> tp;
        auto x = tp.input(theta);
        auto vel = v(tp, x, t);
        if (vel.value().size() != theta.size()) throw std::invalid_argument("log_density: velocity shape mismatch");
        ad::basic_tensor<Real> seed(vel.shape());
        for (std::size_t j = 0; j < d; ++j) {
            seed.fill(Real(0));
            for (std::size_t r = 0; r < n; ++r) seed[r * d + j] = Real(1);
            tp.backward(vel, &seed, true);
            const auto g = tp.gradient(x);
            for (std::size_t r = 0; r < n; ++r) div_integral[r] += h * static_cast<double>(g[r * d + j]);
        }
        const auto& vv = vel.value();
        for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= static_cast<Real>(h * vv[i]);
        if (!theta.all_finite()) throw numerical_error("log_density: non-finite state in reverse integration");
    }
    std::vector<double> out(n);
    for (std::size_t r = 0; r < n; ++r) {
        double s = 0;
        for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(theta[r * d + j]) * theta[r * d + j];
        out[r] = -0.5 * s - 0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi) - div_integral[r];
        if (!std::isfinite(out[r])) throw numerical_error("log_density: non-finite divergence");
    }
    return out;
}

/// Draws standard-normal source points in network space.
inline tensor source_samples(std::size_t n, std::size_t d, rng& r) {
    tensor out({n, d});
    for (auto& v : out.data()) v = static_cast<float>(r.normal());
    return out;
}

/// Posterior samples (network space) for one observation row `x_o`. With
/// self-conditioning the slot is 0 on the first Euler step and the previous
/// step's one-step estimate afterwards.
inline tensor sample_posterior(velocity_model& m, const tensor& x_o, std::size_t n, std::size_t n_steps, rng& r,
                               const tensor* theta0 = nullptr) {
    tensor start = theta0 ? *theta0 : source_samples(n, m.theta_dim, r);
    tensor feats;
    const bool enc = m.has_encoder();
    if (enc) feats = m.features(x_o);
    tensor slot({n, m.theta_dim});
    const std::size_t d = m.theta_dim;
    auto field = [&](double t, const tensor& theta) {
        std::vector<float> tt(n, static_cast<float>(t));
        auto v = m.evaluate(tt, theta, m.self_conditioning ? &slot : nullptr, x_o, enc ? &feats : nullptr);
        if (m.self_conditioning)
            for (std::size_t i = 0; i < n * d; ++i) slot[i] = theta[i] + static_cast<float>(1.0 - t) * v[i];
        return v;
    };
    return integrate(field, std::move(start), n_steps);
}

} // namespace simflow::flow
