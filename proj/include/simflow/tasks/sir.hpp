#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "simflow/tasks/task.hpp"

namespace simflow::tasks {

/// Smallest k with P(Bin(n, p) <= k) >= u. The pmf recurrence runs in log
/// space so leading terms may underflow harmlessly; the scan stops once the
/// remaining upper tail is below double resolution.
inline int binomial_inverse_cdf(int n, double p, double u) {
    if (!(p > 0)) return 0;
    if (!(p < 1)) return n;
    const double lr = std::log(p) - std::log1p(-p);
    const double mean = n * p;
    double lpmf = n * std::log1p(-p);
    double cum = 0;
    for (int k = 0; k < n; ++k) {
        const double pk = std::exp(lpmf);
        cum += pk;
        if (cum >= u) return k;
        if (k > mean && pk < 1e-17 * cum) return k;
        lpmf += std::log(static_cast<double>(n - k)) - std::log(static_cast<double>(k + 1)) + lr;
    }
    return n;
}

inline double binomial_log_pmf(int k, int n, double p) {
    if (k < 0 || k > n) return neg_inf;
    if (p <= 0) return k == 0 ? 0.0 : neg_inf;
    if (p >= 1) return k == n ? 0.0 : neg_inf;
    return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) + k * std::log(p) +
           (n - k) * std::log1p(-p);
}

struct sir_state {
    double s, i, r;
};

class sir final : public task {
public:
    explicit sir(const json& c) {
        info_ = {"sir", 2, 0, 0, true, false, {true, true}, {}};
        log_mean_ = c.at("prior_log_mean").get<std::vector<double>>();
        log_std_ = c.at("prior_log_std").get<std::vector<double>>();
        population_ = c.at("population").get<double>();
        i0_ = c.at("i0").get<double>();
        t_end_ = c.at("t_end").get<double>();
        n_obs_ = c.at("n_obs").get<std::size_t>();
        steps_ = c.at("internal_steps").get<std::size_t>();
        trials_ = c.at("n_trials").get<int>();
        if (steps_ % n_obs_ != 0) throw std::invalid_argument("sir: internal_steps must be a multiple of n_obs");
        info_.x_dim = n_obs_;
        info_.noise_dim = n_obs_;
        info_.x_log.assign(n_obs_, false);
    }

    const task_info& info() const override { return info_; }
    double population() const { return population_; }
    double i0() const { return i0_; }
    double t_end() const { return t_end_; }
    std::size_t internal_steps() const { return steps_; }

    param_vector sample_prior(rng& r) const override {
        return {std::exp(log_mean_[0] + log_std_[0] * r.normal()), std::exp(log_mean_[1] + log_std_[1] * r.normal())};
    }

    double log_prior(const param_vector& th) const override {
        check_theta(th);
        double s = 0;
        for (std::size_t i = 0; i < 2; ++i) {
            if (!(th[i] > 0)) return neg_inf;
            s += normal_log_pdf(std::log(th[i]), log_mean_[i], log_std_[i]) - std::log(th[i]);
        }
        return s;
    }

    /// Full RK4 state at every internal step (steps_ + 1 entries).
    std::vector<sir_state> solve(const param_vector& th) const {
        check_theta(th);
        const double b = th[0], g = th[1], n = population_;
        const double h = t_end_ / static_cast<double>(steps_);
        auto f = [&](const sir_state& x) {
            const double inf = b * x.s * x.i / n;
            return sir_state{-inf, inf - g * x.i, g * x.i};
        };
        auto axpy = [](const sir_state& x, double a, const sir_state& k) {
            return sir_state{x.s + a * k.s, x.i + a * k.i, x.r + a * k.r};
        };
        std::vector<sir_state> out;
        out.reserve(steps_ + 1);
        sir_state x{n - i0_, i0_, 0};
        out.push_back(x);
        for (std::size_t k = 0; k < steps_; ++k) {
            const auto k1 = f(x), k2 = f(axpy(x, 0.5 * h, k1)), k3 = f(axpy(x, 0.5 * h, k2)), k4 = f(axpy(x, h, k3));
            x.s += h / 6 * (k1.s + 2 * k2.s + 2 * k3.s + k4.s);
            x.i += h / 6 * (k1.i + 2 * k2.i + 2 * k3.i + k4.i);
            x.r += h / 6 * (k1.r + 2 * k2.r + 2 * k3.r + k4.r);
            if (!std::isfinite(x.s) || !std::isfinite(x.i) || !std::isfinite(x.r))
                throw simulator_failure("SIR state not finite");
            out.push_back(x);
        }
        return out;
    }

    /// Infected fraction I/N at the observation times, clamped to [0, 1].
    param_vector infected_fraction(const param_vector& th) const {
        const auto traj = solve(th);
        const std::size_t stride = steps_ / n_obs_;
        param_vector p(n_obs_);
        for (std::size_t i = 0; i < n_obs_; ++i) p[i] = std::clamp(traj[(i + 1) * stride].i / population_, 0.0, 1.0);
        return p;
    }

    param_vector simulate(const param_vector& th, const std::vector<double>& z) const override {
        check_theta(th);
        check_noise(z);
        if (!(th[0] >= 0 && th[1] >= 0)) throw simulator_failure("negative SIR rate");
        const auto p = infected_fraction(th);
        param_vector x(n_obs_);
        for (std::size_t i = 0; i < n_obs_; ++i)
            x[i] = binomial_inverse_cdf(trials_, p[i], normal_cdf(z[i])) / static_cast<double>(trials_);
        return x;
    }

    double log_likelihood(const param_vector& th, const param_vector& x_o) const override {
        check_theta(th);
        if (!(th[0] > 0 && th[1] > 0)) return neg_inf;
        param_vector p;
        try {
            p = infected_fraction(th);
        } catch (const simulator_failure&) {
            return neg_inf;
        }
        double s = 0;
        for (std::size_t i = 0; i < n_obs_; ++i)
            s += binomial_log_pmf(static_cast<int>(std::lround(x_o[i] * trials_)), trials_, p[i]);
        return s;
    }

private:
    task_info info_;
    std::vector<double> log_mean_, log_std_;
    double population_ = 1e6, i0_ = 1, t_end_ = 160;
    std::size_t n_obs_ = 10, steps_ = 1600;
    int trials_ = 1000;
};

} // namespace simflow::tasks
