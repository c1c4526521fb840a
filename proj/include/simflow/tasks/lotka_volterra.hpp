#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "simflow/tasks/task.hpp"

namespace simflow::tasks {

struct ode_grid {
    double t0 = 0;
    double t1 = 20;
    std::size_t n_internal_steps = 400;
    std::vector<double> obs_times;

    void validate() const {
        if (!(t1 > t0) || n_internal_steps == 0) throw std::invalid_argument("ode_grid: empty interval");
        for (std::size_t i = 0; i < obs_times.size(); ++i) {
            if (obs_times[i] < t0 || obs_times[i] > t1) throw std::invalid_argument("ode_grid: observation outside range");
            if (i && obs_times[i] <= obs_times[i - 1]) throw std::invalid_argument("ode_grid: times not increasing");
        }
    }

    /// Internal step index at which each observation time lies.
    std::vector<std::size_t> obs_steps() const {
        std::vector<std::size_t> out;
        const double h = (t1 - t0) / static_cast<double>(n_internal_steps);
        for (double t : obs_times) out.push_back(static_cast<std::size_t>(std::llround((t - t0) / h)));
        return out;
    }
};

/// Predator-prey ODE integrated with RK4 in log-population coordinates.
/// Returns log X at each observation time followed by log Y.
template <class T>
std::vector<T> lv_solve_log(const std::array<T, 4>& theta, const ode_grid& grid, double x0, double y0) {
    const T& a = theta[0];
    const T& b = theta[1];
    const T& g = theta[2];
    const T& d = theta[3];
    using std::exp;
    using std::log;
    auto rhs = [&](const T& u, const T& w, T& du, T& dw) {
        du = a - b * exp(w);
        dw = d * exp(u) - g;
    };
    const double h = (grid.t1 - grid.t0) / static_cast<double>(grid.n_internal_steps);
    const auto steps = grid.obs_steps();
    const std::size_t n_obs = steps.size();
    std::vector<T> out(2 * n_obs);
    T u = std::log(x0), w = std::log(y0);
    std::size_t next = 0;
    for (std::size_t k = 0; k <= grid.n_internal_steps && next < n_obs; ++k) {
        while (next < n_obs && steps[next] == k) {
            out[next] = u;
            out[n_obs + next] = w;
            ++next;
        }
        if (k == grid.n_internal_steps) break;
        T k1u, k1w, k2u, k2w, k3u, k3w, k4u, k4w;
        rhs(u, w, k1u, k1w);
        rhs(u + 0.5 * h * k1u, w + 0.5 * h * k1w, k2u, k2w);
        rhs(u + 0.5 * h * k2u, w + 0.5 * h * k2w, k3u, k3w);
        rhs(u + h * k3u, w + h * k3w, k4u, k4w);
        u = u + (h / 6.0) * (k1u + 2.0 * k2u + 2.0 * k3u + k4u);
        w = w + (h / 6.0) * (k1w + 2.0 * k2w + 2.0 * k3w + k4w);
        if (!ad::is_finite(u) || !ad::is_finite(w)) throw simulator_failure("Lotka-Volterra state blew up");
    }
    return out;
}

class lotka_volterra final : public task {
public:
    explicit lotka_volterra(const json& c) {
        info_ = {"lotka_volterra", 4, 0, 0, true, true, {true, true, true, true}, {}};
        log_mean_ = c.at("prior_log_mean").get<std::vector<double>>();
        log_std_ = c.at("prior_log_std").get<std::vector<double>>();
        x0_ = c.at("x0").get<double>();
        y0_ = c.at("y0").get<double>();
        sigma_ = c.at("obs_noise").get<double>();
        const auto n_obs = c.at("n_obs").get<std::size_t>();
        grid_.t0 = 0;
        grid_.t1 = c.at("t_end").get<double>();
        grid_.n_internal_steps = c.at("internal_steps").get<std::size_t>();
        for (std::size_t i = 0; i < n_obs; ++i)
            grid_.obs_times.push_back(grid_.t1 * static_cast<double>(i + 1) / static_cast<double>(n_obs));
        grid_.validate();
        info_.x_dim = 2 * n_obs;
        info_.noise_dim = 2 * n_obs;
        info_.x_log.assign(info_.x_dim, true);
    }

    const task_info& info() const override { return info_; }
    const ode_grid& grid() const { return grid_; }
    double obs_noise() const { return sigma_; }
    double x0() const { return x0_; }
    double y0() const { return y0_; }

    param_vector sample_prior(rng& r) const override {
        param_vector th(4);
        for (std::size_t i = 0; i < 4; ++i) th[i] = std::exp(log_mean_[i] + log_std_[i] * r.normal());
        return th;
    }

    double log_prior(const param_vector& th) const override {
        check_theta(th);
        double s = 0;
        for (std::size_t i = 0; i < 4; ++i) {
            if (!(th[i] > 0)) return neg_inf;
            s += normal_log_pdf(std::log(th[i]), log_mean_[i], log_std_[i]) - std::log(th[i]);
        }
        return s;
    }

    template <class T>
    std::vector<T> solve_log(const std::array<T, 4>& th) const {
        return lv_solve_log(th, grid_, x0_, y0_);
    }

    /// Populations (not logs) at the observation times, [X..., Y...].
    param_vector solve(const param_vector& th) const {
        check_theta(th);
        auto lg = solve_log(std::array<double, 4>{th[0], th[1], th[2], th[3]});
        param_vector out(lg.size());
        for (std::size_t i = 0; i < lg.size(); ++i) out[i] = std::exp(lg[i]);
        return out;
    }

    param_vector simulate(const param_vector& th, const std::vector<double>& z) const override {
        check_theta(th);
        check_noise(z);
        if (!(th[0] > 0 && th[1] > 0 && th[2] > 0 && th[3] > 0)) throw simulator_failure("non-positive LV rate");
        auto lg = solve_log(std::array<double, 4>{th[0], th[1], th[2], th[3]});
        param_vector x(lg.size());
        for (std::size_t i = 0; i < lg.size(); ++i) {
            x[i] = std::exp(lg[i] + sigma_ * z[i]);
            if (!std::isfinite(x[i]) || x[i] <= 0) throw simulator_failure("LV observation not finite/positive");
        }
        return x;
    }

    /// x = exp(log(traj) + sigma z) applied to given trajectories.
    param_vector observe(const param_vector& traj, const std::vector<double>& z) const {
        if (traj.size() != z.size()) throw std::invalid_argument("lv_observe: size mismatch");
        param_vector x(traj.size());
        for (std::size_t i = 0; i < traj.size(); ++i) {
            if (!(traj[i] > 0)) throw simulator_failure("lv_observe: non-positive trajectory value");
            x[i] = std::exp(std::log(traj[i]) + sigma_ * z[i]);
        }
        return x;
    }

    template <class T>
    T log_likelihood_t(const std::array<T, 4>& th, const param_vector& x_o) const {
        auto lg = solve_log(th);
        T s = 0.0;
        for (std::size_t i = 0; i < lg.size(); ++i) {
            if (!(x_o[i] > 0)) throw std::invalid_argument("lv_log_likelihood: observations must be positive");
            const double lx = std::log(x_o[i]);
            T u = (lx - lg[i]) / sigma_;
            s = s - 0.5 * u * u - lx - std::log(sigma_) - 0.5 * std::log(2.0 * std::numbers::pi);
        }
        return s;
    }

    double log_likelihood(const param_vector& th, const param_vector& x_o) const override {
        check_theta(th);
        if (!(th[0] > 0 && th[1] > 0 && th[2] > 0 && th[3] > 0)) return neg_inf;
        try {
            return log_likelihood_t(std::array<double, 4>{th[0], th[1], th[2], th[3]}, x_o);
        } catch (const simulator_failure&) {
            return neg_inf;
        }
    }

    cost_gradient log_likelihood_gradient(const param_vector& th, const param_vector& x_o) const {
        return with_gradient<4>(th, [&](const std::array<dual<4>, 4>& t) { return log_likelihood_t(t, x_o); });
    }

    /// C = 1/2 sum ((log S_z(theta) - log x_o) / sigma)^2; its z-average is
    /// the negative log-likelihood up to a constant.
    template <class T>
    T cost_t(const std::array<T, 4>& th, const std::vector<double>& z, const param_vector& x_o) const {
        auto lg = solve_log(th);
        T s = 0.0;
        for (std::size_t i = 0; i < lg.size(); ++i) {
            T u = (lg[i] + sigma_ * z[i] - std::log(x_o[i])) / sigma_;
            s = s + 0.5 * u * u;
        }
        return s;
    }

    double cost(const param_vector& x_sim, const param_vector& x_o) const override {
        double s = 0;
        for (std::size_t i = 0; i < x_sim.size(); ++i) {
            const double u = (std::log(x_sim[i]) - std::log(x_o[i])) / sigma_;
            s += 0.5 * u * u;
        }
        return s;
    }

    cost_gradient cost_and_gradient(const param_vector& th, const std::vector<double>& z,
                                    const param_vector& x_o) const override {
        check_theta(th);
        check_noise(z);
        if (!(th[0] > 0 && th[1] > 0 && th[2] > 0 && th[3] > 0)) throw simulator_failure("non-positive LV rate");
        return with_gradient<4>(th, [&](const std::array<dual<4>, 4>& t) { return cost_t(t, z, x_o); });
    }

private:
    task_info info_;
    std::vector<double> log_mean_, log_std_;
    double x0_ = 30, y0_ = 1, sigma_ = 0.1;
    ode_grid grid_;
};

} // namespace simflow::tasks
