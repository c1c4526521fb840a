#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include <boost/math/distributions/binomial.hpp>

#include "simflow/tasks/registry.hpp"

using namespace simflow;
using namespace simflow::tasks;

namespace {

const json& constants() {
    static const json c = load_task_constants();
    return c;
}

lotka_volterra lv() { return lotka_volterra(constants().at("lotka_volterra")); }

ode_grid dense_grid(double t1, std::size_t steps) {
    ode_grid g;
    g.t1 = t1;
    g.n_internal_steps = steps;
    for (std::size_t k = 1; k <= steps; ++k) g.obs_times.push_back(t1 * static_cast<double>(k) / static_cast<double>(steps));
    return g;
}

double lv_invariant(const param_vector& th, double x, double y) {
    return th[3] * x - th[2] * std::log(x) + th[1] * y - th[0] * std::log(y);
}

const param_vector lv_median{std::exp(-0.125), std::exp(-3.0), std::exp(-0.125), std::exp(-3.0)};

template <class F>
param_vector central_difference(const param_vector& th, F f, double rel_h = 1e-6) {
    param_vector g(th.size());
    for (std::size_t i = 0; i < th.size(); ++i) {
        const double h = rel_h * std::max(1.0, std::abs(th[i]));
        auto a = th, b = th;
        a[i] += h;
        b[i] -= h;
        g[i] = (f(a) - f(b)) / (2 * h);
    }
    return g;
}

double max_rel_error(const param_vector& a, const param_vector& b, double floor = 1e-6) {
    double worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), floor}));
    return worst;
}

} // namespace

TEST(TaskRegistry, DimensionsPerTask) {
    const std::vector<std::tuple<std::string, std::size_t, std::size_t>> want{
        {"lotka_volterra", 4, 20}, {"sir", 2, 10}, {"slcp", 5, 8}, {"two_moons", 2, 2}, {"linear_gaussian", 2, 2}};
    for (const auto& [name, td, xd] : want) {
        auto t = make_task(name);
        EXPECT_EQ(t->info().theta_dim, td) << name;
        EXPECT_EQ(t->info().x_dim, xd) << name;
        EXPECT_EQ(t->info().name, name);
    }
}

TEST(TaskRegistry, UnknownTaskThrows) { EXPECT_THROW(make_task("gaussian_mixture"), unknown_task); }

TEST(TaskRegistry, AliasesResolve) {
    EXPECT_EQ(make_task("lv")->info().name, "lotka_volterra");
    EXPECT_EQ(make_task("tm")->info().name, "two_moons");
}

TEST(LotkaVolterra, EquilibriumIsConstant) {
    const param_vector th{1.0, 0.5, 1.0, 0.25};
    auto out = lv_solve_log(std::array<double, 4>{th[0], th[1], th[2], th[3]}, dense_grid(20, 400), 4.0, 2.0);
    for (std::size_t i = 0; i < 400; ++i) {
        EXPECT_NEAR(std::exp(out[i]), 4.0, 1e-6);
        EXPECT_NEAR(std::exp(out[400 + i]), 2.0, 1e-6);
    }
}

TEST(LotkaVolterra, FirstIntegralDriftSmall) {
    auto task = lv();
    const auto g = dense_grid(task.grid().t1, task.grid().n_internal_steps);
    const auto& th = lv_median;
    auto out = lv_solve_log(std::array<double, 4>{th[0], th[1], th[2], th[3]}, g, task.x0(), task.y0());
    const double v0 = lv_invariant(th, task.x0(), task.y0());
    const std::size_t n = g.obs_times.size();
    double worst = 0;
    for (std::size_t i = 0; i < n; ++i)
        worst = std::max(worst, std::abs(lv_invariant(th, std::exp(out[i]), std::exp(out[n + i])) - v0));
    EXPECT_LT(worst, 1e-4);
}

TEST(LotkaVolterra, DecoupledClosedForm) {
    const double a = 0.7, c = 0.4;
    auto g = dense_grid(20, 400);
    auto out = lv_solve_log(std::array<double, 4>{a, 0.0, c, 0.0}, g, 30.0, 1.0);
    for (std::size_t i = 0; i < 400; ++i) {
        const double t = g.obs_times[i];
        EXPECT_NEAR(std::exp(out[i]) / (30.0 * std::exp(a * t)), 1.0, 1e-5);
        EXPECT_NEAR(std::exp(out[400 + i]) / std::exp(-c * t), 1.0, 1e-5);
    }
}

TEST(LotkaVolterra, Rk4FourthOrderOnInvariant) {
    const auto& th = lv_median;
    const double v0 = lv_invariant(th, 30.0, 1.0);
    std::vector<double> err;
    for (std::size_t steps : {200, 400, 800, 1600}) {
        const auto g = dense_grid(20, steps);
        auto out = lv_solve_log(std::array<double, 4>{th[0], th[1], th[2], th[3]}, g, 30.0, 1.0);
        double worst = 0;
        for (std::size_t i = 0; i < steps; ++i)
            worst = std::max(worst, std::abs(lv_invariant(th, std::exp(out[i]), std::exp(out[steps + i])) - v0));
        err.push_back(worst);
    }
    for (std::size_t i = 0; i + 1 < err.size(); ++i) {
        const double slope = std::log2(err[i] / err[i + 1]);
        EXPECT_NEAR(slope, 4.0, 0.5) << "refinement " << i << " errors " << err[i] << " " << err[i + 1];
    }
}

TEST(LotkaVolterra, ObserveExamples) {
    auto task = lv();
    EXPECT_NEAR(task.observe({10.0}, {1.0})[0], 11.052, 1e-3);
    EXPECT_DOUBLE_EQ(task.observe({10.0}, {1.0})[0], 10.0 * std::exp(0.1));
    const auto traj = task.solve(lv_median);
    EXPECT_EQ(traj.size(), 20u);
    const auto x = task.observe(traj, std::vector<double>(20, 0.0));
    for (std::size_t i = 0; i < 20; ++i) EXPECT_NEAR(x[i], traj[i], 1e-12 * traj[i]);
    EXPECT_THROW(task.observe({0.0}, {0.0}), simulator_failure);
}

TEST(LotkaVolterra, SimulateShapeAndNoiselessLimit) {
    auto task = lv();
    const auto x = task.simulate(lv_median, std::vector<double>(20, 0.0));
    const auto traj = task.solve(lv_median);
    ASSERT_EQ(x.size(), 20u);
    for (std::size_t i = 0; i < 20; ++i) EXPECT_NEAR(x[i], traj[i], 1e-12 * traj[i]);
}

TEST(LotkaVolterra, LikelihoodStationaryAtNoiselessData) {
    auto task = lv();
    const auto x_o = task.simulate(lv_median, std::vector<double>(20, 0.0));
    const auto g = task.log_likelihood_gradient(lv_median, x_o);
    double norm = 0;
    for (double v : g.grad) norm += v * v;
    EXPECT_LT(std::sqrt(norm), 1e-3);
    const double peak = task.log_likelihood(lv_median, x_o);
    for (std::size_t i = 0; i < 4; ++i) {
        auto th = lv_median;
        th[i] *= 1.01;
        EXPECT_LT(task.log_likelihood(th, x_o), peak) << i;
    }
}

TEST(LotkaVolterra, LikelihoodGridScanPeaksAtTruth) {
    auto task = lv();
    const auto x_o = task.simulate(lv_median, std::vector<double>(20, 0.0));
    const double peak = task.log_likelihood(lv_median, x_o);
    for (std::size_t i = 0; i < 4; ++i)
        for (int k = -5; k <= 5; ++k) {
            if (k == 0) continue;
            auto th = lv_median;
            th[i] *= 1.0 + 0.02 * k;
            EXPECT_LT(task.log_likelihood(th, x_o), peak);
        }
}

TEST(LotkaVolterra, LikelihoodGradientMatchesFiniteDifferences) {
    auto task = lv();
    rng r(3);
    for (int rep = 0; rep < 10; ++rep) {
        const auto th0 = task.sample_prior(r);
        const auto x_o = task.simulate(task.sample_prior(r), task.draw_noise(r));
        const auto g = task.log_likelihood_gradient(th0, x_o);
        const auto fd = central_difference(th0, [&](const param_vector& t) { return task.log_likelihood(t, x_o); });
        EXPECT_LT(max_rel_error(g.grad, fd, 1e-3), 1e-3);
    }
}

TEST(LotkaVolterra, CostGradientMatchesFiniteDifferences) {
    auto task = lv();
    rng r(4);
    for (int rep = 0; rep < 10; ++rep) {
        const auto th = task.sample_prior(r);
        const auto z = task.draw_noise(r);
        const auto x_o = task.simulate(task.sample_prior(r), task.draw_noise(r));
        const auto cg = task.cost_and_gradient(th, z, x_o);
        EXPECT_NEAR(cg.cost, task.cost(task.simulate(th, z), x_o), 1e-9 * std::max(1.0, cg.cost));
        const auto fd = central_difference(th, [&](const param_vector& t) { return task.cost(task.simulate(t, z), x_o); });
        EXPECT_LT(max_rel_error(cg.grad, fd, 1e-3), 1e-3);
    }
}

TEST(LotkaVolterra, AntitheticCostGradientIsNegativeLikelihoodGradient) {
    auto task = lv();
    rng r(5);
    const auto th = task.sample_prior(r);
    const auto x_o = task.simulate(task.sample_prior(r), task.draw_noise(r));
    auto z = task.draw_noise(r);
    auto nz = z;
    for (auto& v : nz) v = -v;
    const auto a = task.cost_and_gradient(th, z, x_o), b = task.cost_and_gradient(th, nz, x_o);
    const auto ll = task.log_likelihood_gradient(th, x_o);
    for (std::size_t i = 0; i < 4; ++i)
        EXPECT_NEAR(0.5 * (a.grad[i] + b.grad[i]), -ll.grad[i], 1e-8 * std::max(1.0, std::abs(ll.grad[i])));
}

TEST(LotkaVolterra, NonPositiveRateFails) {
    auto task = lv();
    EXPECT_THROW(task.simulate({-1, 0.05, 1, 0.05}, std::vector<double>(20, 0.0)), simulator_failure);
    EXPECT_EQ(task.log_prior({-1, 0.05, 1, 0.05}), neg_inf);
}

TEST(Sir, ConservesPopulation) {
    sir task(constants().at("sir"));
    const auto traj = task.solve({0.6, 0.1});
    EXPECT_EQ(traj.size(), task.internal_steps() + 1);
    for (const auto& s : traj) EXPECT_NEAR(s.s + s.i + s.r, task.population(), 1e-6 * task.population());
}

TEST(Sir, ZeroContactRateDecaysExponentially) {
    sir task(constants().at("sir"));
    const double g = 0.125;
    const auto traj = task.solve({0.0, g});
    const double h = task.t_end() / static_cast<double>(task.internal_steps());
    for (std::size_t k = 0; k < traj.size(); k += 10) {
        const double want = task.i0() * std::exp(-g * h * static_cast<double>(k));
        EXPECT_NEAR(traj[k].i / want, 1.0, 1e-5);
    }
}

TEST(Sir, OutputsAreProportions) {
    sir task(constants().at("sir"));
    rng r(6);
    for (int rep = 0; rep < 200; ++rep) {
        const auto x = task.simulate(task.sample_prior(r), task.draw_noise(r));
        ASSERT_EQ(x.size(), 10u);
        for (double v : x) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
}

TEST(Sir, BinomialInverseCdfMatchesBoost) {
    rng r(7);
    for (int rep = 0; rep < 2000; ++rep) {
        const double p = rep % 2 ? r.uniform() : std::pow(10.0, -r.uniform(0, 6));
        const double u = r.uniform_open();
        const int k = binomial_inverse_cdf(1000, p, u);
        boost::math::binomial_distribution<double> b(1000, p);
        EXPECT_GE(boost::math::cdf(b, k), u * (1 - 1e-12)) << p << " " << u;
        if (k > 0) EXPECT_LT(boost::math::cdf(b, k - 1), u * (1 + 1e-12)) << p << " " << u;
    }
}

TEST(Sir, LikelihoodIsBinomialProduct) {
    sir task(constants().at("sir"));
    const param_vector th{0.5, 0.12};
    rng r(8);
    const auto x = task.simulate(th, task.draw_noise(r));
    const auto p = task.infected_fraction(th);
    double want = 0;
    for (std::size_t i = 0; i < 10; ++i) {
        boost::math::binomial_distribution<double> b(1000, p[i]);
        want += std::log(boost::math::pdf(b, std::round(x[i] * 1000)));
    }
    EXPECT_NEAR(task.log_likelihood(th, x), want, 1e-8 * std::abs(want));
}

TEST(TwoMoons, FormulaEvaluation) {
    auto t = make_task("two_moons");
    const auto x = t->simulate({0, 0}, {0, 0});
    EXPECT_NEAR(x[0], 0.35, 1e-12);
    EXPECT_NEAR(x[1], 0.0, 1e-12);
}

TEST(TwoMoons, ReflectedParameterGivesIdenticalObservation) {
    auto t = make_task("two_moons");
    rng r(9);
    for (int i = -10; i <= 10; ++i)
        for (int j = -10; j <= 10; ++j) {
            const double p = 0.1 * i, q = 0.1 * j;
            const auto z = t->draw_noise(r);
            EXPECT_EQ(t->simulate({p, q}, z), t->simulate({-q, -p}, z));
        }
}

TEST(TwoMoons, CrescentIsHalfCircle) {
    two_moons t(constants().at("two_moons"));
    for (int k = 0; k <= 100; ++k) {
        const double a = -std::numbers::pi / 2 + std::numbers::pi * k / 100.0;
        const auto p = t.crescent(a, 0.1);
        EXPECT_NEAR(std::hypot(p[0] - 0.25, p[1]), 0.1, 1e-12);
        EXPECT_GE(p[0] - 0.25, -1e-12);
    }
    const auto hi = t.simulate({0, 0}, {40, 0}), lo = t.simulate({0, 0}, {-40, 0});
    EXPECT_NEAR(hi[0], 0.25, 1e-12);
    EXPECT_NEAR(hi[1], 0.1, 1e-12);
    EXPECT_NEAR(lo[1], -0.1, 1e-12);
}

TEST(TwoMoons, LikelihoodMatchesJacobianOfNoiseMap) {
    auto t = make_task("two_moons");
    rng r(10);
    for (int rep = 0; rep < 50; ++rep) {
        const auto th = t->sample_prior(r);
        const auto z = t->draw_noise(r);
        const auto x = t->simulate(th, z);
        const double h = 1e-6;
        double jac[2][2];
        for (int c = 0; c < 2; ++c) {
            auto zp = z, zm = z;
            zp[c] += h;
            zm[c] -= h;
            const auto a = t->simulate(th, zp), b = t->simulate(th, zm);
            for (int rr = 0; rr < 2; ++rr) jac[rr][c] = (a[rr] - b[rr]) / (2 * h);
        }
        const double det = std::abs(jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0]);
        const double want = normal_log_pdf(z[0], 0, 1) + normal_log_pdf(z[1], 0, 1) - std::log(det);
        EXPECT_NEAR(t->log_likelihood(th, x), want, 1e-5);
    }
}

TEST(Slcp, NoiselessMeanRepeated) {
    auto t = make_task("slcp");
    const param_vector th{0.3, -1.2, 0.7, 1.4, 0.5};
    const auto x = t->simulate(th, std::vector<double>(8, 0.0));
    for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_EQ(x[2 * j], 0.3);
        EXPECT_EQ(x[2 * j + 1], -1.2);
    }
}

TEST(Slcp, IdentityCovarianceWhitens) {
    auto t = make_task("slcp");
    rng r(11);
    const auto z = t->draw_noise(r);
    EXPECT_EQ(t->simulate({0, 0, 1, 1, 0}, z), z);
}

TEST(Slcp, MonteCarloCovariance) {
    slcp t(constants().at("slcp"));
    const param_vector th{0.5, -0.5, 1.1, -0.9, 0.8};
    const auto g = t.moments(th);
    const double c11 = g.s1 * g.s1, c22 = g.s2 * g.s2, c12 = g.rho * g.s1 * g.s2;
    rng r(12);
    const std::size_t n = 100000;
    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto x = t.simulate(th, t.draw_noise(r));
        const double a = x[6] - g.m1, b = x[7] - g.m2;
        sx += a, sy += b, sxx += a * a, syy += b * b, sxy += a * b;
    }
    const double nn = static_cast<double>(n);
    // Standard errors of Gaussian second moments.
    const double se11 = std::sqrt(2 * c11 * c11 / nn), se22 = std::sqrt(2 * c22 * c22 / nn);
    const double se12 = std::sqrt((c11 * c22 + c12 * c12) / nn);
    EXPECT_NEAR(sxx / nn, c11, 3 * se11);
    EXPECT_NEAR(syy / nn, c22, 3 * se22);
    EXPECT_NEAR(sxy / nn, c12, 3 * se12);
    EXPECT_NEAR(sx / nn, 0, 3 * std::sqrt(c11 / nn));
    EXPECT_NEAR(sy / nn, 0, 3 * std::sqrt(c22 / nn));
}

TEST(Slcp, LikelihoodAtStandardBivariateNormal) {
    auto t = make_task("slcp");
    EXPECT_NEAR(t->log_likelihood({0, 0, 1, 1, 0}, std::vector<double>(8, 0.0)), 4 * -std::log(2 * std::numbers::pi), 1e-12);
    EXPECT_NEAR(t->log_likelihood({0, 0, 1, 1, 0}, std::vector<double>(8, 0.0)), -7.3515, 1e-4);
}

TEST(Slcp, LikelihoodDecreasesAwayFromMean) {
    auto t = make_task("slcp");
    const param_vector th{0.2, 0.1, 1.3, 0.8, -0.4};
    double prev = t->log_likelihood(th, {0.2, 0.1, 0.2, 0.1, 0.2, 0.1, 0.2, 0.1});
    for (int k = 1; k <= 10; ++k) {
        std::vector<double> x{0.2, 0.1, 0.2, 0.1, 0.2, 0.1, 0.2, 0.1};
        x[0] += 0.3 * k;
        const double v = t->log_likelihood(th, x);
        EXPECT_LT(v, prev);
        prev = v;
    }
}

TEST(Slcp, ExtremeCorrelationClamped) {
    auto t = make_task("slcp");
    rng r(13);
    const auto x = t->simulate({0, 0, 1, 1, 40}, t->draw_noise(r));
    for (double v : x) EXPECT_TRUE(std::isfinite(v));
    EXPECT_TRUE(std::isfinite(t->log_likelihood({0, 0, 1, 1, 40}, x)));
}

TEST(Priors, TwoMoonsSupport) {
    auto t = make_task("two_moons");
    rng r(14);
    for (const auto& th : t->sample_prior(10000, r))
        for (double v : th) {
            EXPECT_GE(v, -1.0);
            EXPECT_LE(v, 1.0);
        }
}

TEST(Priors, LotkaVolterraLogMoments) {
    auto t = make_task("lotka_volterra");
    rng r(15);
    const std::size_t n = 100000;
    std::array<double, 4> s{};
    for (const auto& th : t->sample_prior(n, r))
        for (std::size_t i = 0; i < 4; ++i) s[i] += std::log(th[i]);
    const std::array<double, 4> want{-0.125, -3, -0.125, -3};
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(s[i] / n, want[i], 3 * 0.5 / std::sqrt(static_cast<double>(n)));
}

TEST(Priors, SirLogMoments) {
    auto t = make_task("sir");
    rng r(16);
    const std::size_t n = 100000;
    double a = 0, b = 0;
    for (const auto& th : t->sample_prior(n, r)) a += std::log(th[0]), b += std::log(th[1]);
    EXPECT_NEAR(a / n, std::log(0.4), 3 * 0.5 / std::sqrt(static_cast<double>(n)));
    EXPECT_NEAR(b / n, std::log(0.125), 3 * 0.2 / std::sqrt(static_cast<double>(n)));
}

TEST(Priors, SeedReproducesFirstSample) {
    for (const auto& name : task_names()) {
        auto t = make_task(name);
        rng a(77), b(77);
        EXPECT_EQ(t->sample_prior(a), t->sample_prior(b)) << name;
    }
    auto t = make_task("slcp");
    rng r(1);
    EXPECT_THROW(t->sample_prior(0, r), std::invalid_argument);
}

TEST(Priors, LogPriorSupport) {
    EXPECT_EQ(make_task("slcp")->log_prior({0, 0, 0, 0, 3.5}), neg_inf);
    EXPECT_NEAR(make_task("two_moons")->log_prior({0.2, -0.3}), -std::log(4.0), 1e-12);
}

TEST(Simulators, PureFunctionOfThetaAndNoise) {
    for (const auto& name : task_names()) {
        auto t = make_task(name);
        rng r(18);
        for (int i = 0; i < 20; ++i) {
            const auto th = t->sample_prior(r);
            const auto z = t->draw_noise(r);
            EXPECT_EQ(t->simulate(th, z), t->simulate(th, z)) << name;
        }
    }
}

TEST(Simulators, PriorPredictiveMostlyFinite) {
    for (const auto& name : task_names()) {
        auto t = make_task(name);
        rng r(19);
        const std::size_t n = 100000;
        std::size_t ok = 0;
        for (std::size_t i = 0; i < n; ++i) {
            try {
                const auto x = t->simulate(t->sample_prior(r), t->draw_noise(r));
                bool finite = true;
                for (double v : x) finite = finite && std::isfinite(v);
                ok += finite;
            } catch (const simulator_failure&) {
            }
        }
        EXPECT_GE(static_cast<double>(ok) / n, 0.999) << name;
    }
}

TEST(Simulators, WrongDimensionsRejected) {
    auto t = make_task("lotka_volterra");
    EXPECT_THROW(t->simulate({1, 1, 1}, std::vector<double>(20, 0.0)), std::invalid_argument);
    EXPECT_THROW(t->simulate(lv_median, std::vector<double>(3, 0.0)), std::invalid_argument);
    EXPECT_THROW(make_task("sir")->cost_and_gradient({1, 1}, std::vector<double>(10), std::vector<double>(10)),
                 std::logic_error);
}

TEST(LinearGaussian, PosteriorMatchesGridQuadrature) {
    linear_gaussian t(constants().at("linear_gaussian"));
    const param_vector x_o{0.8, -0.3};
    const auto mu = t.posterior_mean(x_o);
    const auto& cov = t.posterior_covariance();
    double z = 0, m0 = 0, m1 = 0, v00 = 0, v01 = 0, v11 = 0;
    const int n = 400;
    const double lo = -4, h = 8.0 / n;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const param_vector th{lo + (i + 0.5) * h, lo + (j + 0.5) * h};
            const double w = std::exp(t.log_prior(th) + t.log_likelihood(th, x_o));
            z += w, m0 += w * th[0], m1 += w * th[1];
            v00 += w * th[0] * th[0], v01 += w * th[0] * th[1], v11 += w * th[1] * th[1];
        }
    m0 /= z, m1 /= z;
    EXPECT_NEAR(mu(0), m0, 1e-6);
    EXPECT_NEAR(mu(1), m1, 1e-6);
    EXPECT_NEAR(cov(0, 0), v00 / z - m0 * m0, 1e-6);
    EXPECT_NEAR(cov(0, 1), v01 / z - m0 * m1, 1e-6);
    EXPECT_NEAR(cov(1, 1), v11 / z - m1 * m1, 1e-6);
}

TEST(LinearGaussian, CostGradientMatchesFiniteDifferences) {
    auto t = make_task("linear_gaussian");
    rng r(20);
    for (int rep = 0; rep < 20; ++rep) {
        const auto th = t->sample_prior(r), z = t->draw_noise(r);
        const auto x_o = t->simulate(t->sample_prior(r), t->draw_noise(r));
        const auto cg = t->cost_and_gradient(th, z, x_o);
        const auto fd = central_difference(th, [&](const param_vector& p) { return t->cost(t->simulate(p, z), x_o); });
        EXPECT_LT(max_rel_error(cg.grad, fd, 1e-3), 1e-6);
    }
}

TEST(TwoMoons, ExactPosteriorMatchesImportanceWeightedPrior) {
    two_moons t(constants().at("two_moons"));
    rng r(11);
    const auto x_o = t.simulate({0.3, -0.6}, t.draw_noise(r));
    const auto post = t.sample_posterior(x_o, 20000, r);
    for (const auto& th : post) ASSERT_TRUE(std::isfinite(t.log_likelihood(th, x_o) + t.log_prior(th)));
    // Probes: theta1, theta2, theta1 * theta2.
    auto probe = [](const param_vector& th, int k) { return k == 0 ? th[0] : k == 1 ? th[1] : th[0] * th[1]; };
    double sw = 0, sw2 = 0, m[3] = {0, 0, 0}, m2[3] = {0, 0, 0};
    for (int i = 0; i < 2000000; ++i) {
        const auto th = t.sample_prior(r);
        const double ll = t.log_likelihood(th, x_o);
        if (!std::isfinite(ll)) continue;
        const double w = std::exp(ll);
        sw += w;
        sw2 += w * w;
        for (int k = 0; k < 3; ++k) {
            m[k] += w * probe(th, k);
            m2[k] += w * probe(th, k) * probe(th, k);
        }
    }
    const double ess = sw * sw / sw2;
    ASSERT_GT(ess, 1000);
    for (int k = 0; k < 3; ++k) {
        const double is_mean = m[k] / sw, sd = std::sqrt(m2[k] / sw - is_mean * is_mean);
        double ex = 0;
        for (const auto& th : post) ex += probe(th, k) / static_cast<double>(post.size());
        const double se = sd * std::sqrt(1.0 / ess + 1.0 / static_cast<double>(post.size()));
        EXPECT_NEAR(ex, is_mean, 4 * se) << "probe " << k;
    }
}
