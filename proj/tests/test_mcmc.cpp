#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "simflow/mcmc/aies.hpp"
#include "simflow/metrics/calibration.hpp"
#include "simflow/tasks/registry.hpp"

using namespace simflow;
using namespace simflow::mcmc;

namespace {

double std_normal_lp(const param_vector& x) {
    double s = 0;
    for (double v : x) s -= 0.5 * v * v;
    return s;
}

ensemble normal_init(std::size_t n, std::size_t d, rng& r) {
    return init_ensemble([d](rng& g) { return g.normals(d); }, std_normal_lp, n, r);
}

struct moments {
    std::vector<double> mean, var;
};

moments chain_moments(const aies_result& res) {
    moments m{std::vector<double>(res.dim, 0.0), std::vector<double>(res.dim, 0.0)};
    const auto flat = res.flat();
    for (const auto& x : flat)
        for (std::size_t j = 0; j < res.dim; ++j) m.mean[j] += x[j];
    for (auto& v : m.mean) v /= static_cast<double>(flat.size());
    for (const auto& x : flat)
        for (std::size_t j = 0; j < res.dim; ++j) m.var[j] += (x[j] - m.mean[j]) * (x[j] - m.mean[j]);
    for (auto& v : m.var) v /= static_cast<double>(flat.size() - 1);
    return m;
}

double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

} // namespace

TEST(Stretch, UnitFactorInOneDimension) {
    rng r(1);
    for (int i = 0; i < 100; ++i) {
        auto p = propose_stretch({0.3}, {-1.2}, 2.0, r);
        EXPECT_EQ(p.log_factor, 0.0);
    }
}

TEST(Stretch, UnitZIsIdentity) {
    const param_vector w{0.7, -2.5, 3.25}, o{1.0, 4.0, -0.5};
    auto p = stretch_from_z(w, o, 1.0);
    EXPECT_EQ(p.position, w);
    EXPECT_EQ(p.log_factor, 0.0);
}

TEST(Stretch, LogFactorScalesWithDimension) {
    auto p = stretch_from_z({0, 0, 0, 0}, {1, 1, 1, 1}, 1.5);
    EXPECT_NEAR(p.log_factor, 3 * std::log(1.5), 1e-15);
}

TEST(Stretch, ZDensityChiSquare) {
    // Density 1 / (2 (sqrt(a) - 1/sqrt(a)) sqrt(z)) on [1/a, a]; CDF F(z) = (sqrt(z) - 1/sqrt(a)) / (sqrt(a) - 1/sqrt(a)).
    const double a = 2.0;
    const std::size_t n = 1'000'000, bins = 50;
    rng r(7);
    std::vector<double> counts(bins, 0);
    const double lo = 1 / a, hi = a;
    for (std::size_t i = 0; i < n; ++i) {
        const double z = propose_stretch({0.0, 0.0}, {1.0, 1.0}, a, r).z;
        ASSERT_GE(z, lo);
        ASSERT_LE(z, hi);
        counts[std::min(bins - 1, static_cast<std::size_t>((z - lo) / (hi - lo) * bins))] += 1;
    }
    auto cdf = [&](double z) { return (std::sqrt(z) - 1 / std::sqrt(a)) / (std::sqrt(a) - 1 / std::sqrt(a)); };
    double stat = 0;
    for (std::size_t b = 0; b < bins; ++b) {
        const double e0 = lo + (hi - lo) * static_cast<double>(b) / bins, e1 = lo + (hi - lo) * static_cast<double>(b + 1) / bins;
        const double expected = n * (cdf(e1) - cdf(e0));
        stat += (counts[b] - expected) * (counts[b] - expected) / expected;
    }
    EXPECT_GT(metrics::chi_square_sf(stat, bins - 1), 0.01) << "chi2 = " << stat;
}

TEST(Stretch, RejectsSmallScale) {
    rng r(1);
    EXPECT_THROW(propose_stretch({0.0}, {1.0}, 1.0, r), std::invalid_argument);
    move_config m;
    m.a = 0.9;
    EXPECT_THROW(m.validate(), std::invalid_argument);
}

TEST(DifferentialEvolution, EqualComplementsGiveJitterOnly) {
    rng r(3);
    const param_vector w{1.0, -2.0}, o{5.0, 5.0};
    auto p = propose_de(w, o, o, 1.19, 1e-6, r);
    for (std::size_t i = 0; i < w.size(); ++i) {
        EXPECT_NE(p[i], w[i]);
        EXPECT_LT(std::abs(p[i] - w[i]), 1e-5);
    }
}

TEST(DifferentialEvolution, DefaultScale) {
    move_config m;
    EXPECT_DOUBLE_EQ(m.de_scale(2), 1.19);
    m.gamma_de = 0.5;
    EXPECT_EQ(m.de_scale(2), 0.5);
}

TEST(DifferentialEvolution, ProposalIsTranslation) {
    rng r(3);
    auto p = propose_de({0.0, 0.0}, {2.0, 1.0}, {1.0, 3.0}, 0.5, 0.0, r);
    EXPECT_DOUBLE_EQ(p[0], 0.5);
    EXPECT_DOUBLE_EQ(p[1], -1.0);
}

TEST(DifferentialEvolution, NeedsThreeWalkers) {
    ensemble e{{{0.0}, {1.0}}, {0.0, -0.5}};
    rng r(1);
    detail::step_stats st;
    EXPECT_THROW(detail::de_step(e, std_normal_lp, 1.0, 1e-6, r, st), std::invalid_argument);
}

TEST(Moves, ProbabilitiesMustSumToOne) {
    move_config m;
    m.p_de = 0.6;
    EXPECT_THROW(m.validate(), std::invalid_argument);
    m.p_de = 0.5;
    EXPECT_NO_THROW(m.validate());
}

TEST(Aies, DefaultWalkers) {
    EXPECT_EQ(default_walkers(2), 64u);
    EXPECT_EQ(default_walkers(17), 68u);
    EXPECT_EQ(default_walkers(40), 160u);
}

TEST(Aies, StandardNormal2d) {
    rng r(11);
    aies_config cfg;
    cfg.warmup = 1000;
    cfg.n_steps = 5000;
    auto res = aies_run(std_normal_lp, normal_init(64, 2, r), cfg, r);
    ASSERT_EQ(res.n_kept, 5000u);
    const auto ess = effective_sample_size(res);
    const auto m = chain_moments(res);
    for (std::size_t j = 0; j < 2; ++j) {
        const double se_mean = std::sqrt(1.0 / ess[j]);
        const double se_var = std::sqrt(2.0 / ess[j]);
        EXPECT_LT(std::abs(m.mean[j]), 3 * se_mean) << "coord " << j << " ess " << ess[j];
        EXPECT_LT(std::abs(m.var[j] - 1.0), 3 * se_var) << "coord " << j << " ess " << ess[j];
        EXPECT_GT(ess[j], 1000.0);
    }
    EXPECT_GT(res.acceptance, 0.2);
    EXPECT_LT(res.acceptance, 0.95);
}

TEST(Aies, RespectsBoxSupport) {
    auto lp = [](const param_vector& x) {
        for (double v : x)
            if (v < -1 || v > 2) return -std::numeric_limits<double>::infinity();
        return 0.0;
    };
    rng r(5);
    auto init = init_ensemble([](rng& g) { return param_vector{g.uniform(-3, 3), g.uniform(-3, 3), g.uniform(-3, 3)}; }, lp,
                              32, r);
    aies_config cfg;
    cfg.warmup = 200;
    cfg.n_steps = 1000;
    auto res = aies_run(lp, init, cfg, r);
    for (double v : res.samples) {
        ASSERT_GE(v, -1.0);
        ASSERT_LE(v, 2.0);
    }
    const auto m = chain_moments(res);
    for (double mu : m.mean) EXPECT_NEAR(mu, 0.5, 0.1);
}

TEST(Aies, LinearGaussianConjugatePosterior) {
    auto task = tasks::make_task("linear_gaussian");
    auto& lg = dynamic_cast<tasks::linear_gaussian&>(*task);
    rng r(21);
    const param_vector theta_star{0.8, -0.6};
    const auto x_o = lg.simulate(theta_star, lg.draw_noise(r));
    auto lp = [&](const param_vector& th) { return lg.log_prior(th) + lg.log_likelihood(th, x_o); };
    auto init = init_ensemble([&](rng& g) { return lg.sample_prior(g); }, lp, 64, r);
    aies_config cfg;
    cfg.warmup = 1000;
    cfg.n_steps = 4000;
    auto res = aies_run(lp, init, cfg, r);
    const auto ess = effective_sample_size(res);
    const Eigen::VectorXd mu = lg.posterior_mean(x_o);
    const Eigen::MatrixXd cov = lg.posterior_covariance();
    const auto flat = res.flat();
    Eigen::VectorXd m = Eigen::VectorXd::Zero(2);
    for (const auto& x : flat) m += Eigen::Vector2d(x[0], x[1]);
    m /= static_cast<double>(flat.size());
    Eigen::MatrixXd c = Eigen::MatrixXd::Zero(2, 2);
    for (const auto& x : flat) {
        const Eigen::Vector2d d = Eigen::Vector2d(x[0], x[1]) - m;
        c += d * d.transpose();
    }
    c /= static_cast<double>(flat.size() - 1);
    const double n_eff = std::min(ess[0], ess[1]);
    for (int i = 0; i < 2; ++i) {
        EXPECT_LT(std::abs(m(i) - mu(i)), 3 * std::sqrt(cov(i, i) / n_eff)) << i;
        for (int j = 0; j < 2; ++j) {
            const double se = std::sqrt((cov(i, i) * cov(j, j) + cov(i, j) * cov(i, j)) / n_eff);
            EXPECT_LT(std::abs(c(i, j) - cov(i, j)), 3 * se) << i << "," << j;
        }
    }
}

TEST(Aies, OneDimensionalKolmogorovSmirnov) {
    rng r(31);
    aies_config cfg;
    cfg.warmup = 500;
    cfg.n_steps = 160 * 60;
    auto res = aies_run(std_normal_lp, normal_init(64, 1, r), cfg, r);
    const double tau = integrated_time(res.coordinate(0), res.n_walkers);
    ASSERT_LT(2 * tau, 60.0) << "thinning too short for tau " << tau;
    // Every 60th step of every walker: 160 * 64 ~ 10^4 nearly independent draws.
    std::vector<double> xs;
    for (std::size_t s = 59; s < res.n_kept; s += 60)
        for (std::size_t w = 0; w < res.n_walkers; ++w) xs.push_back(res.draw(s, w)[0]);
    EXPECT_EQ(xs.size(), 160u * 64u);
    auto ks = metrics::ks_test(xs, std_normal_cdf);
    EXPECT_GT(ks.p_value, 0.01) << "D = " << ks.statistic;
}

TEST(Aies, AffineInvarianceIsBitExactForStretch) {
    // y = A x with A = diag(4, 0.5, 2) composed with a permutation; exact in floating point.
    const std::vector<std::size_t> perm{2, 0, 1};
    const std::vector<double> scale{4.0, 0.5, 2.0};
    auto forward = [&](const param_vector& x) {
        param_vector y(3);
        for (std::size_t i = 0; i < 3; ++i) y[i] = scale[i] * x[perm[i]];
        return y;
    };
    auto inverse = [&](const param_vector& y) {
        param_vector x(3);
        for (std::size_t i = 0; i < 3; ++i) x[perm[i]] = y[i] / scale[i];
        return x;
    };
    auto lp_x = [](const param_vector& x) {
        return -0.5 * (x[0] * x[0] + 2 * (x[1] - 1) * (x[1] - 1) + 0.5 * x[2] * x[2] + 0.8 * x[0] * x[2]);
    };
    auto lp_y = [&](const param_vector& y) { return lp_x(inverse(y)); };
    rng ri(3);
    auto init_x = init_ensemble([](rng& g) { return g.normals(3); }, lp_x, 16, ri);
    ensemble init_y;
    for (const auto& w : init_x.walkers) init_y.walkers.push_back(forward(w));
    for (const auto& w : init_y.walkers) init_y.log_prob.push_back(lp_y(w));
    aies_config cfg;
    cfg.warmup = 50;
    cfg.n_steps = 300;
    cfg.moves.p_stretch = 1.0;
    cfg.moves.p_de = 0.0;
    rng rx(99), ry(99);
    auto res_x = aies_run(lp_x, init_x, cfg, rx);
    auto res_y = aies_run(lp_y, init_y, cfg, ry);
    ASSERT_EQ(res_x.samples.size(), res_y.samples.size());
    for (std::size_t s = 0; s < res_x.n_kept; ++s)
        for (std::size_t w = 0; w < res_x.n_walkers; ++w) ASSERT_EQ(forward(res_x.draw(s, w)), res_y.draw(s, w));
    EXPECT_EQ(res_x.acceptance, res_y.acceptance);
}

TEST(Aies, DetectsDegenerateEnsemble) {
    ensemble e;
    for (int i = 0; i < 8; ++i) {
        e.walkers.push_back({1.0, static_cast<double>(i)});
        e.log_prob.push_back(std_normal_lp(e.walkers.back()));
    }
    rng r(1);
    aies_config cfg;
    cfg.warmup = 1;
    cfg.n_steps = 1;
    EXPECT_THROW(aies_run(std_normal_lp, e, cfg, r), degeneracy_error);
}

TEST(Aies, RejectsBadEnsembles) {
    rng r(1);
    aies_config cfg;
    EXPECT_THROW(aies_run(std_normal_lp, normal_init(4, 3, r), cfg, r), std::invalid_argument);
    EXPECT_THROW(aies_run(std_normal_lp, normal_init(7, 2, r), cfg, r), std::invalid_argument);
    auto e = normal_init(8, 2, r);
    e.log_prob[3] = -std::numeric_limits<double>::infinity();
    EXPECT_THROW(aies_run(std_normal_lp, e, cfg, r), std::invalid_argument);
}

TEST(Aies, InitRedrawsUntilFinite) {
    rng r(2);
    auto lp = [](const param_vector& x) { return x[0] > 0 ? 0.0 : -std::numeric_limits<double>::infinity(); };
    auto e = init_ensemble([](rng& g) { return g.normals(1); }, lp, 50, r);
    for (const auto& w : e.walkers) EXPECT_GT(w[0], 0.0);
    EXPECT_THROW(init_ensemble([](rng& g) { return param_vector{-g.uniform()}; }, lp, 1, r, 10), std::runtime_error);
}

TEST(Aies, Deterministic) {
    aies_config cfg;
    cfg.warmup = 50;
    cfg.n_steps = 100;
    rng a(5), b(5);
    auto ra = aies_run(std_normal_lp, normal_init(16, 2, a), cfg, a);
    auto rb = aies_run(std_normal_lp, normal_init(16, 2, b), cfg, b);
    EXPECT_EQ(ra.samples, rb.samples);
    EXPECT_EQ(ra.log_prob_calls, 150u * 16u);
}

TEST(IntegratedTime, WhiteNoiseIsAboutOne) {
    rng r(8);
    auto x = r.normals(20000 * 4);
    EXPECT_NEAR(integrated_time(x, 4), 1.0, 0.1);
}

TEST(IntegratedTime, Ar1MatchesClosedForm) {
    // x_t = phi x_{t-1} + e has tau = (1 + phi) / (1 - phi).
    const double phi = 0.8;
    const std::size_t n = 100000, walkers = 4;
    rng r(9);
    std::vector<double> chain(n * walkers);
    std::vector<double> state(walkers, 0.0);
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t w = 0; w < walkers; ++w) chain[s * walkers + w] = state[w] = phi * state[w] + r.normal();
    EXPECT_NEAR(integrated_time(chain, walkers), 9.0, 0.6);
}
