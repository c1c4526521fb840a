#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "simflow/metrics/c2st.hpp"
#include "simflow/metrics/calibration.hpp"
#include "simflow/metrics/mmd.hpp"
#include "simflow/metrics/report.hpp"
#include "simflow/tasks/registry.hpp"

using namespace simflow;
using namespace simflow::metrics;

namespace {

sample_matrix normal_matrix(std::size_t n, std::size_t d, double shift, rng& r) {
    sample_matrix m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = shift + r.normal();
    return m;
}

double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double gauss_k(double a, double b) { return std::exp(-(a - b) * (a - b) / 2.0); }

} // namespace

TEST(Mmd, TwoPointHandExample) {
    sample_matrix a(2, 1), b(2, 1);
    a << 0, 1;
    b << 0, 1;
    EXPECT_NEAR(mmd(a, b, 1.0), std::exp(-0.5) - 1.0, 1e-14);
}

TEST(Mmd, RequiresTwoSamplesAndMatchingDims) {
    sample_matrix a(1, 1), b(3, 1), c(3, 2);
    a << 0;
    b << 0, 1, 2;
    c.setZero();
    EXPECT_THROW(mmd(a, b, 1.0), std::invalid_argument);
    EXPECT_THROW(mmd(b, c, 1.0), std::invalid_argument);
}

TEST(Mmd, UnbiasedUnderTheNull) {
    rng r(1);
    const int reps = 1000;
    double s = 0, s2 = 0;
    for (int k = 0; k < reps; ++k) {
        const double v = mmd(normal_matrix(100, 2, 0, r), normal_matrix(100, 2, 0, r), 1.0);
        s += v;
        s2 += v * v;
    }
    const double mean = s / reps, se = std::sqrt((s2 / reps - mean * mean) / reps);
    EXPECT_LT(std::abs(mean), 3 * se) << "mean " << mean << " se " << se;
}

TEST(Mmd, SameDistributionLargeSampleNearZero) {
    rng r(2);
    const auto a = normal_matrix(3000, 2, 0, r), b = normal_matrix(3000, 2, 0, r);
    // Under the null the U-statistic has scale O(1/n); 3/n is a conservative 3 SE bound for a bounded kernel.
    EXPECT_LT(std::abs(mmd(a, b)), 3.0 / 3000);
}

TEST(Mmd, MatchesMonteCarloPopulationValue) {
    rng r(3);
    const std::size_t n = 10000;
    const auto a = normal_matrix(n, 1, 0, r), b = normal_matrix(n, 1, 2, r);
    const double est = mmd(a, b, 1.0);

    // Population MMD^2 = E k(X,X') + E k(Y,Y') - 2 E k(X,Y) from independent pairs.
    rng o(4);
    const std::size_t m = 2'000'000;
    double s = 0, s2 = 0;
    for (std::size_t i = 0; i < m; ++i) {
        const double x1 = o.normal(), x2 = o.normal(), y1 = 2 + o.normal(), y2 = 2 + o.normal();
        const double h = gauss_k(x1, x2) + gauss_k(y1, y2) - gauss_k(x1, y2) - gauss_k(x2, y1);
        s += h;
        s2 += h * h;
    }
    const double pop = s / m, se_oracle = std::sqrt((s2 / m - pop * pop) / m);

    // Estimator SE from the first-order projection g(x) = E k(x,X') - E k(x,Y), g(y) = E k(y,Y') - E k(y,X).
    auto projection_var = [&](const sample_matrix& self, const sample_matrix& other) {
        double gs = 0, gs2 = 0;
        const int probes = 400;
        for (int i = 0; i < probes; ++i) {
            double ks = 0, ko = 0;
            for (Eigen::Index j = 0; j < self.rows(); ++j) {
                if (j != i) ks += gauss_k(self(i, 0), self(j, 0));
                ko += gauss_k(self(i, 0), other(j, 0));
            }
            const double g = ks / static_cast<double>(self.rows() - 1) - ko / static_cast<double>(other.rows());
            gs += g;
            gs2 += g * g;
        }
        return gs2 / probes - (gs / probes) * (gs / probes);
    };
    const double se_est = std::sqrt(4 * projection_var(a, b) / n + 4 * projection_var(b, a) / n);
    const double se = std::hypot(se_oracle, se_est);
    EXPECT_LT(std::abs(est - pop), 3 * se) << "est " << est << " pop " << pop << " se " << se;
}

TEST(Mmd, MedianBandwidth) {
    sample_matrix a(2, 1), b(2, 1);
    a << 0, 1;
    b << 3, 7;
    // Pairwise distances {1, 3, 7, 2, 6, 4}: median of six is (3 + 4) / 2.
    EXPECT_DOUBLE_EQ(median_bandwidth(a, b), 3.5);
    sample_matrix z = sample_matrix::Zero(3, 2);
    EXPECT_THROW(median_bandwidth(z, z), std::invalid_argument);
}

TEST(C2st, IndistinguishableHalves) {
    rng r(5);
    const auto all = normal_matrix(6000, 2, 0, r);
    auto res = c2st(all.topRows(3000), all.bottomRows(3000));
    EXPECT_NEAR(res.accuracy, 0.5, 0.03);
    EXPECT_EQ(res.per_seed.size(), 5u);
}

TEST(C2st, ShiftedGaussiansReachBayesAccuracy) {
    rng r(6);
    auto res = c2st(normal_matrix(10000, 1, 0, r), normal_matrix(10000, 1, 1, r));
    EXPECT_NEAR(res.accuracy, std_normal_cdf(0.5), 0.02);
}

TEST(C2st, DisjointSupportsSeparate) {
    rng r(7);
    sample_matrix a(1000, 2), b(1000, 2);
    for (Eigen::Index i = 0; i < 1000; ++i) {
        a(i, 0) = r.uniform(0, 1);
        a(i, 1) = r.uniform(0, 1);
        b(i, 0) = r.uniform(1.5, 2.5);
        b(i, 1) = r.uniform(0, 1);
    }
    EXPECT_GT(c2st(a, b).accuracy, 0.99);
}

TEST(C2st, IdenticalDistributionsTwentySeeds) {
    rng r(8);
    c2st_config cfg;
    cfg.seeds = 20;
    auto res = c2st(normal_matrix(10000, 2, 0, r), normal_matrix(10000, 2, 0, r), cfg);
    EXPECT_GE(res.accuracy, 0.47);
    EXPECT_LE(res.accuracy, 0.53);
}

TEST(C2st, RejectsDegenerateInput) {
    rng r(9);
    sample_matrix a = normal_matrix(300, 2, 0, r), b = normal_matrix(300, 2, 0, r);
    a.col(1).setConstant(1.0);
    b.col(1).setConstant(1.0);
    EXPECT_THROW(c2st(a, b), std::invalid_argument);
    EXPECT_THROW(c2st(normal_matrix(100, 2, 0, r), normal_matrix(300, 2, 0, r)), std::invalid_argument);
    EXPECT_THROW(c2st(normal_matrix(300, 2, 0, r), normal_matrix(300, 3, 0, r)), std::invalid_argument);
}

TEST(C2st, Deterministic) {
    rng r(10);
    const auto a = normal_matrix(400, 2, 0, r), b = normal_matrix(400, 2, 0.5, r);
    EXPECT_EQ(c2st(a, b).per_seed, c2st(a, b).per_seed);
}

TEST(Sbc, RankCountsStrictlySmaller) {
    EXPECT_EQ(sbc_rank({0.1, 0.5, 0.9}, 0.6), 2u);
    EXPECT_EQ(sbc_rank({0.1, 0.5, 0.9}, 0.5), 1u);
    EXPECT_EQ(sbc_rank({0.1, 0.5, 0.9}, 1.0), 3u);
}

TEST(Sbc, ExactPosteriorGivesUniformRanks) {
    auto task = tasks::make_task("linear_gaussian");
    auto& lg = dynamic_cast<tasks::linear_gaussian&>(*task);
    sbc_problem_fns fns{[&](rng& g) { return lg.sample_prior(g); },
                        [&](const param_vector& th, rng& g) { return lg.simulate(th, lg.draw_noise(g)); },
                        [&](const param_vector& x, std::size_t L, rng& g) { return lg.sample_posterior(x, L, g); }};
    rng r(11);
    auto res = sbc_ranks(fns, coordinate_probes(2), 500, 19, r);
    EXPECT_EQ(res.failures, 0u);
    for (const auto& ranks : res.ranks) {
        ASSERT_EQ(ranks.size(), 500u);
        EXPECT_GT(uniformity_test(ranks, 19), 0.01);
    }
}

TEST(Sbc, PriorMeanSamplerIsDetected) {
    auto task = tasks::make_task("linear_gaussian");
    sbc_problem_fns fns{[&](rng& g) { return task->sample_prior(g); },
                        [&](const param_vector& th, rng& g) { return task->simulate(th, task->draw_noise(g)); },
                        [](const param_vector&, std::size_t L, rng&) { return std::vector<param_vector>(L, {0.0, 0.0}); }};
    rng r(12);
    auto res = sbc_ranks(fns, coordinate_probes(2), 500, 19, r);
    for (const auto& ranks : res.ranks) {
        EXPECT_LT(uniformity_test(ranks, 19), 0.01);
        std::size_t extreme = 0;
        for (auto k : ranks) extreme += k == 0 || k == 19;
        EXPECT_EQ(extreme, ranks.size());
    }
}

TEST(Sbc, FailuresAreSkippedAndCounted) {
    std::size_t calls = 0;
    sbc_problem_fns fns{[](rng& g) { return param_vector{g.normal()}; },
                        [&](const param_vector& th, rng&) {
                            if (++calls % 5 == 0) throw std::runtime_error("boom");
                            return th;
                        },
                        [](const param_vector&, std::size_t L, rng& g) {
                            std::vector<param_vector> out;
                            for (std::size_t l = 0; l < L; ++l) out.push_back({g.normal()});
                            return out;
                        }};
    rng r(13);
    auto res = sbc_ranks(fns, coordinate_probes(1), 100, 10, r);
    EXPECT_EQ(res.failures, 20u);
    EXPECT_EQ(res.ranks[0].size(), 80u);
}

TEST(Sbc, Preconditions) {
    sbc_problem_fns fns;
    rng r(1);
    EXPECT_THROW(sbc_ranks(fns, coordinate_probes(1), 100, 5, r), std::invalid_argument);
    EXPECT_THROW(sbc_ranks(fns, coordinate_probes(1), 20, 10, r), std::invalid_argument);
}

TEST(Uniformity, PerfectlyUniform) {
    std::vector<std::size_t> ranks;
    for (int rep = 0; rep < 10; ++rep)
        for (std::size_t k = 0; k <= 19; ++k) ranks.push_back(k);
    EXPECT_GT(uniformity_test(ranks, 19), 0.99);
    EXPECT_GT(uniformity_test(ranks, 19, 4), 0.99);
}

TEST(Uniformity, AllZeroRanks) {
    std::vector<std::size_t> ranks(500, 0);
    EXPECT_LT(uniformity_test(ranks, 19), 1e-10);
}

TEST(Uniformity, NullPValuesAreUniform) {
    rng r(14);
    std::vector<double> ps;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<std::size_t> ranks(1000);
        for (auto& k : ranks) k = r.index(20);
        ps.push_back(uniformity_test(ranks, 19, 20));
    }
    auto ks = ks_test(ps, [](double p) { return std::clamp(p, 0.0, 1.0); });
    EXPECT_GT(ks.p_value, 0.01);
}

TEST(Uniformity, Preconditions) {
    EXPECT_THROW(uniformity_test({}, 19), std::invalid_argument);
    EXPECT_THROW(uniformity_test({1, 2}, 19, 3), std::invalid_argument);
    EXPECT_THROW(uniformity_test({25}, 19), std::invalid_argument);
}

TEST(Kolmogorov, SeriesBranchesAgree) {
    // Both series converge for every lambda > 0; the implementation switches at 1.18.
    for (double lam = 0.4; lam < 3.0; lam += 0.05) {
        double alt = 0;
        for (int j = 1; j < 200; ++j) alt += (j % 2 ? 2.0 : -2.0) * std::exp(-2.0 * j * j * lam * lam);
        const double pi = std::numbers::pi;
        double theta = 0;
        for (int j = 1; j < 200; ++j) theta += std::exp(-(2.0 * j - 1) * (2.0 * j - 1) * pi * pi / (8 * lam * lam));
        theta = 1.0 - std::sqrt(2 * pi) / lam * theta;
        EXPECT_NEAR(alt, theta, 1e-10) << lam;
        EXPECT_NEAR(kolmogorov_sf(lam), alt, 1e-10) << lam;
    }
    EXPECT_EQ(kolmogorov_sf(0.0), 1.0);
}

TEST(Kolmogorov, DetectsWrongDistribution) {
    rng r(15);
    std::vector<double> xs(2000);
    for (auto& x : xs) x = 0.3 + r.normal();
    EXPECT_LT(ks_test(xs, std_normal_cdf).p_value, 1e-6);
    for (auto& x : xs) x = r.normal();
    EXPECT_GT(ks_test(xs, std_normal_cdf).p_value, 0.01);
}

TEST(AvgChi2, MeanOverSystemsAndSamples) {
    rng r(16);
    auto sampler = [](std::size_t s, std::size_t n, rng&) {
        if (s == 2) throw std::runtime_error("sampler failed");
        return std::vector<std::vector<double>>(n, {static_cast<double>(s)});
    };
    auto chi2 = [](std::size_t, const std::vector<double>& th) { return th[0] == 3 ? std::nan("") : 1.0 + th[0]; };
    auto rep = avg_chi2(5, 4, sampler, chi2, r);
    EXPECT_EQ(rep.sampler_failures, 1u);
    EXPECT_EQ(rep.chi2_failures, 4u);
    EXPECT_EQ(rep.n_evaluated, 12u);
    EXPECT_DOUBLE_EQ(rep.mean, (1.0 + 2.0 + 5.0) / 3.0);
    ASSERT_EQ(rep.per_system.size(), 5u);
    EXPECT_TRUE(std::isnan(rep.per_system[2]));
    EXPECT_TRUE(std::isnan(rep.per_system[3]));
    EXPECT_DOUBLE_EQ(rep.per_system[4], 5.0);
}

TEST(Report, JsonRow) {
    metric_report m{"c2st", 0.61, 0.01, {{"seeds", 5}}};
    auto j = m.to_json();
    EXPECT_EQ(j["metric"], "c2st");
    EXPECT_EQ(j["config"]["seeds"], 5);
    metric_report n{"mmd", 0.1};
    EXPECT_TRUE(n.to_json()["uncertainty"].is_null());
}
