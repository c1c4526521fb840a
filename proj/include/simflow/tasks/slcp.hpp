#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "simflow/tasks/task.hpp"

namespace simflow::tasks {

class slcp final : public task {
public:
    explicit slcp(const json& c) {
        lo_ = c.at("prior_low").get<double>();
        hi_ = c.at("prior_high").get<double>();
        draws_ = c.at("n_draws").get<std::size_t>();
        clamp_ = c.at("rho_clamp").get<double>();
        info_ = {"slcp", 5, 2 * draws_, 2 * draws_, true, false, std::vector<bool>(5, false),
                 std::vector<bool>(2 * draws_, false)};
    }

    const task_info& info() const override { return info_; }

    param_vector sample_prior(rng& r) const override {
        param_vector th(5);
        for (auto& v : th) v = r.uniform(lo_, hi_);
        return th;
    }

    double log_prior(const param_vector& th) const override {
        check_theta(th);
        for (double v : th)
            if (v < lo_ || v > hi_) return neg_inf;
        return -5.0 * std::log(hi_ - lo_);
    }

    struct gaussian2 {
        double m1, m2, s1, s2, rho;
    };

    gaussian2 moments(const param_vector& th) const {
        const double lim = 1.0 - clamp_;
        return {th[0], th[1], th[2] * th[2], th[3] * th[3], std::clamp(std::tanh(th[4]), -lim, lim)};
    }

    param_vector simulate(const param_vector& th, const std::vector<double>& z) const override {
        check_theta(th);
        check_noise(z);
        const auto g = moments(th);
        const double c = std::sqrt(1.0 - g.rho * g.rho);
        param_vector x(2 * draws_);
        for (std::size_t j = 0; j < draws_; ++j) {
            const double a = z[2 * j], b = z[2 * j + 1];
            x[2 * j] = g.m1 + g.s1 * a;
            x[2 * j + 1] = g.m2 + g.s2 * (g.rho * a + c * b);
        }
        return x;
    }

    double log_likelihood(const param_vector& th, const param_vector& x_o) const override {
        check_theta(th);
        const auto g = moments(th);
        if (!(g.s1 > 0 && g.s2 > 0)) return neg_inf;
        const double c2 = 1.0 - g.rho * g.rho;
        const double log_norm = -std::log(2.0 * std::numbers::pi) - std::log(g.s1) - std::log(g.s2) - 0.5 * std::log(c2);
        double s = 0;
        for (std::size_t j = 0; j < draws_; ++j) {
            const double u = (x_o[2 * j] - g.m1) / g.s1, v = (x_o[2 * j + 1] - g.m2) / g.s2;
            s += log_norm - 0.5 * (u * u - 2 * g.rho * u * v + v * v) / c2;
        }
        return s;
    }

private:
    task_info info_;
    double lo_ = -3, hi_ = 3, clamp_ = 1e-6;
    std::size_t draws_ = 4;
};

} // namespace simflow::tasks
