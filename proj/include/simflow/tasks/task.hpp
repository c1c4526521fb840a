#pragma once

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "simflow/ad/dual.hpp"
#include "simflow/ad/tensor.hpp"
#include "simflow/random.hpp"

#ifndef SIMFLOW_CONFIG_DIR
#define SIMFLOW_CONFIG_DIR "config"
#endif

namespace simflow::tasks {

using json = nlohmann::json;
using param_vector = std::vector<double>;
using ad::dual;

/// A simulator could not produce a finite output for this (theta, z).
class simulator_failure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct task_info {
    std::string name;
    std::size_t theta_dim = 0;
    std::size_t x_dim = 0;
    std::size_t noise_dim = 0;
    bool tractable = false;       // exact log-likelihood available
    bool differentiable = false;  // cost gradient available
    std::vector<bool> theta_log;  // network-space transform: log before z-scoring
    std::vector<bool> x_log;
};

/// Cost value and its gradient with respect to theta.
struct cost_gradient {
    double cost = 0;
    param_vector grad;
};

inline constexpr double neg_inf = -std::numeric_limits<double>::infinity();

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

inline double normal_log_pdf(double x, double mean, double sd) {
    const double u = (x - mean) / sd;
    return -0.5 * u * u - std::log(sd) - 0.5 * std::log(2.0 * std::numbers::pi);
}

class task {
public:
    virtual ~task() = default;

    virtual const task_info& info() const = 0;
    virtual param_vector sample_prior(rng& r) const = 0;
    virtual double log_prior(const param_vector& theta) const = 0;

    /// Deterministic in (theta, z); throws simulator_failure on non-finite output.
    virtual param_vector simulate(const param_vector& theta, const std::vector<double>& z) const = 0;

    virtual double log_likelihood(const param_vector&, const param_vector&) const {
        throw std::logic_error("task '" + info().name + "' has no tractable likelihood");
    }

    /// Control cost C(S_z(theta), x_o) and its exact theta-gradient.
    virtual cost_gradient cost_and_gradient(const param_vector&, const std::vector<double>&,
                                            const param_vector&) const {
        throw std::logic_error("task '" + info().name + "' is not differentiable");
    }

    /// Cost without gradient (also for non-differentiable tasks).
    virtual double cost(const param_vector& x_sim, const param_vector& x_o) const {
        double s = 0;
        for (std::size_t i = 0; i < x_sim.size(); ++i) s += 0.5 * (x_sim[i] - x_o[i]) * (x_sim[i] - x_o[i]);
        return s;
    }

    std::vector<double> draw_noise(rng& r) const { return r.normals(info().noise_dim); }

    std::vector<param_vector> sample_prior(std::size_t n, rng& r) const {
        if (n == 0) throw std::invalid_argument("sample_prior: n must be >= 1");
        std::vector<param_vector> out(n);
        for (auto& th : out) th = sample_prior(r);
        return out;
    }

protected:
    void check_theta(const param_vector& theta) const {
        if (theta.size() != info().theta_dim)
            throw std::invalid_argument(info().name + ": theta has " + std::to_string(theta.size()) + " entries, expected " +
                                        std::to_string(info().theta_dim));
    }
    void check_noise(const std::vector<double>& z) const {
        if (z.size() != info().noise_dim)
            throw std::invalid_argument(info().name + ": noise block has " + std::to_string(z.size()) +
                                        " entries, expected " + std::to_string(info().noise_dim));
    }
};

/// Task constants: $SIMFLOW_TASKS_CONFIG if set, else config/tasks.json of
/// the source tree.
inline json load_task_constants(const std::string& path = "") {
    std::string p = path;
    if (p.empty()) {
        const char* env = std::getenv("SIMFLOW_TASKS_CONFIG");
        p = env ? env : std::string(SIMFLOW_CONFIG_DIR) + "/tasks.json";
    }
    std::ifstream is(p);
    if (!is) throw std::runtime_error("cannot open task constants file " + p);
    return json::parse(is);
}

/// Runs a templated simulator with theta promoted to dual numbers and returns
/// value plus gradient. `f(theta_dual)` must return dual<D>.
template <std::size_t D, class F>
cost_gradient with_gradient(const param_vector& theta, F&& f) {
    std::array<dual<D>, D> th;
    for (std::size_t i = 0; i < D; ++i) th[i] = dual<D>::variable(theta[i], i);
    dual<D> c = f(th);
    if (!ad::is_finite(c)) throw simulator_failure("non-finite cost or gradient");
    return {c.v, param_vector(c.d.begin(), c.d.end())};
}

} // namespace simflow::tasks
