#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "simflow/metrics/samples.hpp"

namespace simflow::metrics {

/// Median pairwise Euclidean distance of the pooled sample (at most
/// `max_points` evenly spaced rows of each set are used).
inline double median_bandwidth(const sample_matrix& a, const sample_matrix& b, std::size_t max_points = 1000) {
    std::vector<Eigen::VectorXd> pts;
    auto take = [&](const sample_matrix& m) {
        const auto n = static_cast<std::size_t>(m.rows());
        const std::size_t stride = std::max<std::size_t>(1, n / max_points);
        for (std::size_t i = 0; i < n; i += stride) pts.push_back(m.row(static_cast<Eigen::Index>(i)).transpose());
    };
    take(a);
    take(b);
    std::vector<double> d;
    d.reserve(pts.size() * (pts.size() - 1) / 2);
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (std::size_t j = i + 1; j < pts.size(); ++j) d.push_back((pts[i] - pts[j]).norm());
    if (d.empty()) throw std::invalid_argument("median_bandwidth: need at least two points");
    auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
    std::nth_element(d.begin(), mid, d.end());
    double med = *mid;
    if (d.size() % 2 == 0) med = 0.5 * (med + *std::max_element(d.begin(), mid));
    if (!(med > 0)) throw std::invalid_argument("median_bandwidth: all points coincide");
    return med;
}

/// Unbiased U-statistic estimate of MMD^2 with k(x, y) = exp(-|x - y|^2 / (2 g^2)).
/// A non-positive bandwidth selects the median heuristic.
inline double mmd(const sample_matrix& a, const sample_matrix& b, double bandwidth = 0) {
    const auto m = a.rows(), n = b.rows();
    if (m < 2 || n < 2) throw std::invalid_argument("mmd: need at least 2 samples per set");
    if (a.cols() != b.cols()) throw std::invalid_argument("mmd: dimension mismatch");
    const double g = bandwidth > 0 ? bandwidth : median_bandwidth(a, b);
    const double inv = 1.0 / (2.0 * g * g);
    auto within = [&](const sample_matrix& x) {
        const Eigen::VectorXd sq = x.rowwise().squaredNorm();
        double s = 0;
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            const Eigen::VectorXd dots = x * x.row(i).transpose();
            for (Eigen::Index j = i + 1; j < x.rows(); ++j)
                s += std::exp(-std::max(0.0, sq(i) + sq(j) - 2 * dots(j)) * inv);
        }
        const double k = static_cast<double>(x.rows());
        return 2.0 * s / (k * (k - 1));
    };
    const Eigen::VectorXd sa = a.rowwise().squaredNorm(), sb = b.rowwise().squaredNorm();
    double cross = 0;
    for (Eigen::Index i = 0; i < m; ++i) {
        const Eigen::VectorXd dots = b * a.row(i).transpose();
        for (Eigen::Index j = 0; j < n; ++j) cross += std::exp(-std::max(0.0, sa(i) + sb(j) - 2 * dots(j)) * inv);
    }
    return within(a) + within(b) - 2.0 * cross / (static_cast<double>(m) * static_cast<double>(n));
}

} // namespace simflow::metrics
