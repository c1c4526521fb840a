#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "simflow/tasks/task.hpp"

namespace simflow::tasks {

/// theta ~ N(0, I), x = A theta + sigma z. Conjugate, so the posterior is known.
class linear_gaussian final : public task {
public:
    explicit linear_gaussian(const json& c) {
        const auto m = c.at("matrix").get<std::vector<std::vector<double>>>();
        sigma_ = c.at("noise_std").get<double>();
        const std::size_t xd = m.size(), td = m.at(0).size();
        a_.resize(static_cast<Eigen::Index>(xd), static_cast<Eigen::Index>(td));
        for (std::size_t i = 0; i < xd; ++i)
            for (std::size_t j = 0; j < td; ++j) a_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = m[i].at(j);
        info_ = {"linear_gaussian", td, xd, xd, true, true, std::vector<bool>(td, false), std::vector<bool>(xd, false)};
        const Eigen::MatrixXd prec =
            Eigen::MatrixXd::Identity(a_.cols(), a_.cols()) + a_.transpose() * a_ / (sigma_ * sigma_);
        post_cov_ = prec.inverse();
        post_chol_ = Eigen::LLT<Eigen::MatrixXd>(post_cov_).matrixL();
    }

    const task_info& info() const override { return info_; }
    const Eigen::MatrixXd& matrix() const { return a_; }
    double noise_std() const { return sigma_; }
    const Eigen::MatrixXd& posterior_covariance() const { return post_cov_; }

    Eigen::VectorXd posterior_mean(const param_vector& x_o) const {
        const Eigen::Map<const Eigen::VectorXd> x(x_o.data(), static_cast<Eigen::Index>(x_o.size()));
        return post_cov_ * a_.transpose() * x / (sigma_ * sigma_);
    }

    /// Exact posterior draws.
    std::vector<param_vector> sample_posterior(const param_vector& x_o, std::size_t n, rng& r) const {
        const Eigen::VectorXd mu = posterior_mean(x_o);
        std::vector<param_vector> out(n);
        Eigen::VectorXd e(mu.size());
        for (auto& th : out) {
            for (Eigen::Index i = 0; i < e.size(); ++i) e(i) = r.normal();
            const Eigen::VectorXd v = mu + post_chol_ * e;
            th.assign(v.data(), v.data() + v.size());
        }
        return out;
    }

    param_vector sample_prior(rng& r) const override { return r.normals(info_.theta_dim); }

    double log_prior(const param_vector& th) const override {
        check_theta(th);
        double s = 0;
        for (double v : th) s += normal_log_pdf(v, 0, 1);
        return s;
    }

    param_vector simulate(const param_vector& th, const std::vector<double>& z) const override {
        check_theta(th);
        check_noise(z);
        param_vector x(info_.x_dim);
        for (std::size_t i = 0; i < x.size(); ++i) {
            double s = sigma_ * z[i];
            for (std::size_t j = 0; j < th.size(); ++j) s += a_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * th[j];
            x[i] = s;
        }
        return x;
    }

    double log_likelihood(const param_vector& th, const param_vector& x_o) const override {
        const auto mean = simulate(th, std::vector<double>(info_.noise_dim, 0.0));
        double s = 0;
        for (std::size_t i = 0; i < mean.size(); ++i) s += normal_log_pdf(x_o[i], mean[i], sigma_);
        return s;
    }

    double cost(const param_vector& x_sim, const param_vector& x_o) const override {
        double s = 0;
        for (std::size_t i = 0; i < x_sim.size(); ++i) {
            const double u = (x_sim[i] - x_o[i]) / sigma_;
            s += 0.5 * u * u;
        }
        return s;
    }

    /// C = 1/2 ||(A theta + sigma z - x_o) / sigma||^2, gradient A^T r / sigma.
    cost_gradient cost_and_gradient(const param_vector& th, const std::vector<double>& z,
                                    const param_vector& x_o) const override {
        const auto x = simulate(th, z);
        cost_gradient out{cost(x, x_o), param_vector(th.size(), 0.0)};
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double r = (x[i] - x_o[i]) / (sigma_ * sigma_);
            for (std::size_t j = 0; j < th.size(); ++j)
                out.grad[j] += a_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * r;
        }
        return out;
    }

private:
    task_info info_;
    Eigen::MatrixXd a_, post_cov_, post_chol_;
    double sigma_ = 0.5;
};

} // namespace simflow::tasks
