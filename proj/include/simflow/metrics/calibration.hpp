#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>

#include "simflow/random.hpp"

namespace simflow::metrics {

using param_vector = std::vector<double>;

/// Number of f-values strictly below f_star.
inline std::size_t sbc_rank(const std::vector<double>& f_values, double f_star) {
    return static_cast<std::size_t>(
        std::count_if(f_values.begin(), f_values.end(), [&](double v) { return v < f_star; }));
}

struct sbc_problem_fns {
    std::function<param_vector(rng&)> prior;
    std::function<param_vector(const param_vector&, rng&)> simulate;
    std::function<std::vector<param_vector>(const param_vector& x_o, std::size_t L, rng&)> posterior;
};

struct sbc_result {
    std::size_t L = 0;
    std::vector<std::vector<std::size_t>> ranks;  // [probe][problem]
    std::size_t failures = 0;
};

/// Coordinate projections, one probe per parameter.
inline std::vector<std::function<double(const param_vector&)>> coordinate_probes(std::size_t d) {
    std::vector<std::function<double(const param_vector&)>> out;
    for (std::size_t j = 0; j < d; ++j) out.emplace_back([j](const param_vector& t) { return t.at(j); });
    return out;
}

/// A problem whose simulator or posterior sampler throws is skipped and counted.
inline sbc_result sbc_ranks(const sbc_problem_fns& fns, const std::vector<std::function<double(const param_vector&)>>& probes,
                            std::size_t n_problems, std::size_t L, rng& r) {
    if (L < 10) throw std::invalid_argument("sbc_ranks: L must be at least 10");
    if (n_problems < 50) throw std::invalid_argument("sbc_ranks: need at least 50 problems");
    if (probes.empty()) throw std::invalid_argument("sbc_ranks: no probe functions");
    sbc_result res;
    res.L = L;
    res.ranks.resize(probes.size());
    for (std::size_t p = 0; p < n_problems; ++p) {
        const param_vector theta = fns.prior(r);
        std::vector<param_vector> post;
        try {
            const param_vector x = fns.simulate(theta, r);
            post = fns.posterior(x, L, r);
            if (post.size() != L) throw std::runtime_error("posterior sampler returned the wrong number of draws");
        } catch (const std::exception&) {
            ++res.failures;
            continue;
        }
        for (std::size_t k = 0; k < probes.size(); ++k) {
            std::vector<double> f(L);
            for (std::size_t l = 0; l < L; ++l) f[l] = probes[k](post[l]);
            res.ranks[k].push_back(sbc_rank(f, probes[k](theta)));
        }
    }
    return res;
}

inline double chi_square_sf(double stat, double dof) { return boost::math::gamma_q(dof / 2.0, stat / 2.0); }

/// Chi-square goodness of fit of ranks in [0, L] against the discrete
/// uniform. bins = 0 uses L + 1 bins; otherwise bins must divide L + 1.
inline double uniformity_test(const std::vector<std::size_t>& ranks, std::size_t L, std::size_t bins = 0) {
    if (ranks.empty()) throw std::invalid_argument("uniformity_test: empty ranks");
    if (bins == 0) bins = L + 1;
    if (bins < 2 || (L + 1) % bins) throw std::invalid_argument("uniformity_test: bins must divide L + 1");
    const std::size_t width = (L + 1) / bins;
    std::vector<double> counts(bins, 0.0);
    for (auto k : ranks) {
        if (k > L) throw std::invalid_argument("uniformity_test: rank " + std::to_string(k) + " exceeds L");
        counts[k / width] += 1;
    }
    const double expected = static_cast<double>(ranks.size()) / static_cast<double>(bins);
    double stat = 0;
    for (double c : counts) stat += (c - expected) * (c - expected) / expected;
    return chi_square_sf(stat, static_cast<double>(bins - 1));
}

/// Survival function of the Kolmogorov distribution.
inline double kolmogorov_sf(double lambda) {
    if (lambda <= 0) return 1.0;
    if (lambda < 1.18) {
        const double pi = std::numbers::pi;
        const double y = std::exp(-pi * pi / (8 * lambda * lambda));
        double s = 0;
        for (int j = 1; j < 20; ++j) {
            s += std::pow(y, static_cast<double>((2 * j - 1) * (2 * j - 1)));
            if (std::pow(y, static_cast<double>((2 * j + 1) * (2 * j + 1))) < 1e-17 * s) break;
        }
        return std::clamp(1.0 - std::sqrt(2 * pi) / lambda * s, 0.0, 1.0);
    }
    double s = 0;
    for (int j = 1; j < 100; ++j) {
        const double term = std::exp(-2.0 * j * j * lambda * lambda);
        s += (j % 2 ? 1.0 : -1.0) * term;
        if (term < 1e-17) break;
    }
    return std::clamp(2 * s, 0.0, 1.0);
}

struct ks_result {
    double statistic = 0, p_value = 1;
};

/// One-sample Kolmogorov-Smirnov test against a continuous CDF, with the
/// (sqrt(n) + 0.12 + 0.11 / sqrt(n)) finite-sample correction.
inline ks_result ks_test(std::vector<double> xs, const std::function<double(double)>& cdf) {
    if (xs.empty()) throw std::invalid_argument("ks_test: empty sample");
    std::sort(xs.begin(), xs.end());
    const double n = static_cast<double>(xs.size());
    double d = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double f = cdf(xs[i]);
        d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
    }
    const double sn = std::sqrt(n);
    return {d, kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d)};
}

} // namespace simflow::metrics
