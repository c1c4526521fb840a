#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "simflow/flow/transform.hpp"
#include "simflow/tasks/task.hpp"

namespace simflow::control {

using param_vector = std::vector<double>;
using tasks::cost_gradient;
using tasks::simulator_failure;

enum class variant { none, gradient, learned, zero };

inline std::string to_string(variant v) {
    switch (v) {
        case variant::none: return "none";
        case variant::gradient: return "gradient";
        case variant::learned: return "learned";
        case variant::zero: return "zero";
    }
    return "?";
}

inline variant parse_variant(const std::string& s) {
    if (s == "none") return variant::none;
    if (s == "gradient") return variant::gradient;
    if (s == "learned") return variant::learned;
    if (s == "zero") return variant::zero;
    throw std::invalid_argument("unknown control variant '" + s + "'");
}

/// Native-space view of a simulator as seen by the control loop.
struct simulator_handle {
    std::size_t theta_dim = 0;
    std::size_t x_dim = 0;
    std::size_t noise_dim = 0;
    bool differentiable = false;
    std::function<param_vector(const param_vector& theta, const std::vector<double>& z)> simulate;
    std::function<cost_gradient(const param_vector& theta, const std::vector<double>& z, const param_vector& x_o)>
        cost_and_gradient;
    /// Observation -> network space, written to `out` (x_dim floats).
    std::function<void(const param_vector& x, float* out)> x_to_network;
};

/// Handle over a benchmark task; observations use the given standardizer.
inline simulator_handle task_handle(const tasks::task& t, flow::standardizer x_space) {
    const auto& info = t.info();
    simulator_handle h;
    h.theta_dim = info.theta_dim;
    h.x_dim = info.x_dim;
    h.noise_dim = info.noise_dim;
    h.differentiable = info.differentiable;
    h.simulate = [&t](const param_vector& th, const std::vector<double>& z) { return t.simulate(th, z); };
    h.cost_and_gradient = [&t](const param_vector& th, const std::vector<double>& z, const param_vector& x_o) {
        return t.cost_and_gradient(th, z, x_o);
    };
    h.x_to_network = [xs = std::move(x_space)](const param_vector& x, float* out) {
        for (std::size_t j = 0; j < x.size(); ++j) {
            const double v = xs.forward1(j, x[j]);
            if (!std::isfinite(v)) throw simulator_failure("simulated observation outside transform domain");
            out[j] = static_cast<float>(v);
        }
    };
    return h;
}

/// Raw signal [C(S_z(theta), x_o); grad_theta C] in native coordinates.
inline cost_gradient gradient_control(const simulator_handle& sim, const param_vector& theta,
                                      const param_vector& x_o, const std::vector<double>& z) {
    if (!sim.differentiable || !sim.cost_and_gradient)
        throw std::logic_error("gradient_control: simulator is not differentiable");
    auto cg = sim.cost_and_gradient(theta, z, x_o);
    if (cg.grad.size() != theta.size()) throw std::logic_error("gradient_control: gradient size mismatch");
    if (!std::isfinite(cg.cost)) throw simulator_failure("non-finite cost");
    for (double g : cg.grad)
        if (!std::isfinite(g)) throw simulator_failure("non-finite cost gradient");
    return cg;
}

struct signal_config {
    bool compress = true;  // sign(C) log(1 + |C|) on the cost channel
    double grad_clip = 1e3;
};

inline double compress_cost(double c) { return std::copysign(std::log1p(std::abs(c)), c); }

/// Network-space payload for the gradient variant: the cost channel followed by
/// the gradient with respect to the network coordinates of theta (chain rule
/// through the standardizer), clipped entrywise.
inline std::vector<float> gradient_payload(const cost_gradient& cg, const param_vector& theta_native,
                                           const flow::standardizer& theta_space, const signal_config& cfg) {
    std::vector<float> out(1 + cg.grad.size());
    out[0] = static_cast<float>(cfg.compress ? compress_cost(cg.cost) : cg.cost);
    for (std::size_t j = 0; j < cg.grad.size(); ++j) {
        double dtheta_dy = theta_space.scale[j];
        if (theta_space.log_dims[j]) dtheta_dy *= theta_native[j];
        const double g = cg.grad[j] * dtheta_dy;
        out[1 + j] = static_cast<float>(std::clamp(g, -cfg.grad_clip, cfg.grad_clip));
    }
    return out;
}

/// Native parameters for one network-space row.
inline param_vector to_native(const flow::standardizer& s, const float* y) {
    param_vector th(s.dim());
    for (std::size_t j = 0; j < th.size(); ++j) th[j] = s.inverse1(j, static_cast<double>(y[j]));
    return th;
}

} // namespace simflow::control
