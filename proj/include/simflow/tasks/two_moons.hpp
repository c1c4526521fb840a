#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "simflow/tasks/task.hpp"

namespace simflow::tasks {

class two_moons final : public task {
public:
    explicit two_moons(const json& c) {
        info_ = {"two_moons", 2, 2, 2, true, false, {false, false}, {false, false}};
        lo_ = c.at("prior_low").get<double>();
        hi_ = c.at("prior_high").get<double>();
        r_mean_ = c.at("r_mean").get<double>();
        r_std_ = c.at("r_std").get<double>();
        offset_ = c.at("x_offset").get<double>();
    }

    const task_info& info() const override { return info_; }

    param_vector sample_prior(rng& r) const override { return {r.uniform(lo_, hi_), r.uniform(lo_, hi_)}; }

    double log_prior(const param_vector& th) const override {
        check_theta(th);
        for (double v : th)
            if (v < lo_ || v > hi_) return neg_inf;
        return -2.0 * std::log(hi_ - lo_);
    }

    /// Crescent point before the theta-dependent shift.
    param_vector crescent(double a, double r) const { return {r * std::cos(a) + offset_, r * std::sin(a)}; }

    param_vector shift(const param_vector& th) const {
        return {-std::abs(th[0] + th[1]) / std::numbers::sqrt2, (-th[0] + th[1]) / std::numbers::sqrt2};
    }

    param_vector simulate(const param_vector& th, const std::vector<double>& z) const override {
        check_theta(th);
        check_noise(z);
        const double a = std::numbers::pi * (normal_cdf(z[0]) - 0.5);
        const double r = r_mean_ + r_std_ * z[1];
        const auto p = crescent(a, r);
        const auto s = shift(th);
        return {p[0] + s[0], p[1] + s[1]};
    }

    /// Change of variables (a, r) -> crescent point: density p(a) p(r) / r.
    double log_likelihood(const param_vector& th, const param_vector& x_o) const override {
        check_theta(th);
        const auto s = shift(th);
        const double px = x_o[0] - s[0] - offset_, py = x_o[1] - s[1];
        if (px < 0) return neg_inf;
        const double r = std::hypot(px, py);
        if (!(r > 0)) return neg_inf;
        return -std::log(std::numbers::pi) + normal_log_pdf(r, r_mean_, r_std_) - std::log(r);
    }

    /// Exact posterior draws: noise (a, r) from its prior, one of the two
    /// sign branches with probability 1/2, rejection on the prior box.
    std::vector<param_vector> sample_posterior(const param_vector& x_o, std::size_t n, rng& r,
                                               std::size_t max_tries_per_draw = 100000) const {
        std::vector<param_vector> out;
        out.reserve(n);
        std::size_t tries = 0;
        while (out.size() < n) {
            if (++tries > max_tries_per_draw * n) throw std::runtime_error("two_moons: posterior rejection sampler stalled");
            const double a = std::numbers::pi * (r.uniform() - 0.5);
            const double rad = r_mean_ + r_std_ * r.normal();
            const bool flip = r.uniform() < 0.5;
            const auto p = crescent(a, rad);
            const double s0 = x_o[0] - p[0], s1 = x_o[1] - p[1];
            if (s0 > 0) continue;
            const double sum = (flip ? 1.0 : -1.0) * (-std::numbers::sqrt2 * s0), diff = std::numbers::sqrt2 * s1;
            param_vector th{(sum - diff) / 2, (sum + diff) / 2};
            if (th[0] < lo_ || th[0] > hi_ || th[1] < lo_ || th[1] > hi_) continue;
            out.push_back(std::move(th));
        }
        return out;
    }

private:
    task_info info_;
    double lo_ = -1, hi_ = 1, r_mean_ = 0.1, r_std_ = 0.01, offset_ = 0.25;
};

} // namespace simflow::tasks
