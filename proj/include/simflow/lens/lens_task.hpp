#pragma once

#include <cmath>
#include <vector>

#include "simflow/lens/render.hpp"
#include "simflow/tasks/task.hpp"

namespace simflow::lens {

/// Lensing as a simulation task over the 17 free parameters. The cost is
/// the chi^2 of the noiseless render against x_o, with the sigma map
/// estimated from x_o.
class lens_task final : public tasks::task {
public:
    explicit lens_task(const tasks::json& c) : inst_(instrument::from_json(c)) {
        const std::size_t np = inst_.pixels();
        info_ = {"lens", free_dim, np, np, true, true, std::vector<bool>(free_dim, false), std::vector<bool>(np, false)};
    }

    const tasks::task_info& info() const override { return info_; }
    const instrument& inst() const { return inst_; }
    const prior_ranges& priors() const { return priors_; }

    tasks::param_vector sample_prior(rng& r) const override { return reduce_full(sample_scene(r, priors_)); }

    double log_prior(const tasks::param_vector& theta) const override {
        check_theta(theta);
        return log_prior_free(theta, priors_);
    }

    tasks::param_vector simulate(const tasks::param_vector& theta, const std::vector<double>& z) const override {
        check_theta(theta);
        check_noise(z);
        auto img = render(expand_free(theta), inst_, z).image;
        for (double v : img)
            if (!std::isfinite(v)) throw tasks::simulator_failure("lens: non-finite pixel");
        return img;
    }

    double log_likelihood(const tasks::param_vector& theta, const tasks::param_vector& x_o) const override {
        check_theta(theta);
        return log_likelihood_free(theta, observation_from_image(x_o, inst_), inst_);
    }

    tasks::cost_gradient cost_and_gradient(const tasks::param_vector& theta, const std::vector<double>&,
                                           const tasks::param_vector& x_o) const override {
        check_theta(theta);
        auto g = chi2_and_gradient_free(theta, observation_from_image(x_o, inst_), inst_);
        if (!std::isfinite(g.value)) throw tasks::simulator_failure("lens: non-finite chi2");
        for (double v : g.grad)
            if (!std::isfinite(v)) throw tasks::simulator_failure("lens: non-finite chi2 gradient");
        return {g.value, std::move(g.grad)};
    }

    double cost(const tasks::param_vector& x_sim, const tasks::param_vector& x_o) const override {
        return chi2_of_model(x_sim, observation_from_image(x_o, inst_));
    }

private:
    instrument inst_;
    prior_ranges priors_;
    tasks::task_info info_;
};

/// Network-space image transform asinh(x / background) / 4.
inline float network_pixel(double x, double background_rms) { return static_cast<float>(std::asinh(x / background_rms) / 4.0); }

} // namespace simflow::lens
