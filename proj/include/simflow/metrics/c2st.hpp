#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "simflow/ad/adam.hpp"
#include "simflow/ad/network.hpp"
#include "simflow/metrics/samples.hpp"
#include "simflow/random.hpp"

namespace simflow::metrics {

struct c2st_config {
    std::size_t width_factor = 10;  // hidden width = width_factor * d
    double lr = 1e-3;
    std::size_t max_epochs = 200;
    std::size_t batch = 128;
    std::size_t patience = 10;
    double test_fraction = 0.2;
    double val_fraction = 0.1;  // of the training part, for early stopping
    std::size_t seeds = 5;
    std::uint64_t seed = 0;
    std::size_t min_samples = 200;
};

struct c2st_result {
    double accuracy = 0;
    std::vector<double> per_seed;
    std::vector<std::size_t> epochs;
    double standard_error() const {
        if (per_seed.size() < 2) return 0;
        double m = 0, v = 0;
        for (double a : per_seed) m += a;
        m /= static_cast<double>(per_seed.size());
        for (double a : per_seed) v += (a - m) * (a - m);
        v /= static_cast<double>(per_seed.size() - 1);
        return std::sqrt(v / static_cast<double>(per_seed.size()));
    }
};

inline ad::network_spec c2st_classifier_spec(std::size_t d, std::size_t width_factor = 10) {
    const std::size_t w = width_factor * d;
    ad::network_spec s;
    s.input_dim = d;
    s.output_dim = 1;
    s.layers = {ad::dense(d, w, ad::activation::elu), ad::dense(w, w, ad::activation::elu), ad::dense(w, 1)};
    return s;
}

namespace detail {

struct labelled {
    std::vector<std::size_t> idx;  // rows of the pooled, standardized matrix
};

inline ad::tensor gather(const std::vector<float>& data, std::size_t d, const std::vector<std::size_t>& rows,
                         std::size_t begin, std::size_t end) {
    ad::tensor out({end - begin, d});
    for (std::size_t k = begin; k < end; ++k)
        std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(rows[k] * d), d, out.row(k - begin).begin());
    return out;
}

inline double accuracy(ad::model<float>& net, const std::vector<float>& data, const std::vector<float>& labels,
                       std::size_t d, const std::vector<std::size_t>& rows) {
    std::size_t correct = 0;
    for (std::size_t b = 0; b < rows.size(); b += 4096) {
        const std::size_t e = std::min(rows.size(), b + 4096);
        const auto logits = net.evaluate(gather(data, d, rows, b, e));
        for (std::size_t k = b; k < e; ++k) correct += (logits[k - b] > 0) == (labels[rows[k]] > 0.5f);
    }
    return static_cast<double>(correct) / static_cast<double>(rows.size());
}

inline double loss(ad::model<float>& net, const std::vector<float>& data, const std::vector<float>& labels, std::size_t d,
                   const std::vector<std::size_t>& rows) {
    double acc = 0;
    for (std::size_t b = 0; b < rows.size(); b += 4096) {
        const std::size_t e = std::min(rows.size(), b + 4096);
        const auto logits = net.evaluate(gather(data, d, rows, b, e));
        for (std::size_t k = b; k < e; ++k) {
            const double x = logits[k - b], y = labels[rows[k]];
            acc += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
        }
    }
    return acc / static_cast<double>(rows.size());
}

} // namespace detail

/// Classifier two-sample test: held-out accuracy of an MLP trained to tell
/// the two sets apart, averaged over seeds. 0.5 means indistinguishable.
inline c2st_result c2st(const sample_matrix& p, const sample_matrix& q, const c2st_config& cfg = {}) {
    if (p.cols() != q.cols() || p.cols() == 0) throw std::invalid_argument("c2st: dimension mismatch");
    if (static_cast<std::size_t>(std::min(p.rows(), q.rows())) < cfg.min_samples)
        throw std::invalid_argument("c2st: need at least " + std::to_string(cfg.min_samples) + " samples per set");
    if (cfg.seeds == 0) throw std::invalid_argument("c2st: need at least one seed");
    const auto d = static_cast<std::size_t>(p.cols());
    const auto n = static_cast<std::size_t>(std::min(p.rows(), q.rows()));

    Eigen::MatrixXd pooled(2 * static_cast<Eigen::Index>(n), p.cols());
    pooled << p.topRows(static_cast<Eigen::Index>(n)), q.topRows(static_cast<Eigen::Index>(n));
    const Eigen::RowVectorXd mean = pooled.colwise().mean();
    pooled.rowwise() -= mean;
    const Eigen::RowVectorXd sd = (pooled.colwise().squaredNorm() / static_cast<double>(pooled.rows() - 1)).cwiseSqrt();
    for (Eigen::Index j = 0; j < sd.size(); ++j)
        if (!(sd(j) > 0) || !std::isfinite(sd(j)))
            throw std::invalid_argument("c2st: zero-variance or non-finite column " + std::to_string(j));
    std::vector<float> data(2 * n * d);
    std::vector<float> labels(2 * n);
    for (std::size_t i = 0; i < 2 * n; ++i) {
        labels[i] = i < n ? 0.0f : 1.0f;
        for (std::size_t j = 0; j < d; ++j)
            data[i * d + j] = static_cast<float>(pooled(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) /
                                                 sd(static_cast<Eigen::Index>(j)));
    }

    c2st_result res;
    for (std::size_t s = 0; s < cfg.seeds; ++s) {
        rng r(derive_seed(cfg.seed, stream::metric, s));
        std::vector<std::size_t> train, val, test;
        for (std::size_t cls = 0; cls < 2; ++cls) {
            std::vector<std::size_t> rows(n);
            std::iota(rows.begin(), rows.end(), cls * n);
            std::shuffle(rows.begin(), rows.end(), r.engine());
            const auto n_test = static_cast<std::size_t>(std::llround(cfg.test_fraction * static_cast<double>(n)));
            const auto n_val = static_cast<std::size_t>(std::llround(cfg.val_fraction * static_cast<double>(n - n_test)));
            test.insert(test.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_test));
            val.insert(val.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_test),
                       rows.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
            train.insert(train.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), rows.end());
        }
        auto net = ad::build_network<float>(c2st_classifier_spec(d, cfg.width_factor), r.next());
        auto best = net;
        ad::adam_state<float> st;
        ad::adam_config opt;
        opt.lr = cfg.lr;
        double best_loss = std::numeric_limits<double>::infinity();
        std::size_t since_best = 0, epoch = 0;
        for (; epoch < cfg.max_epochs && since_best < cfg.patience; ++epoch) {
            std::shuffle(train.begin(), train.end(), r.engine());
            for (std::size_t b = 0; b < train.size(); b += cfg.batch) {
                const std::size_t e = std::min(train.size(), b + cfg.batch);
                std::vector<float> y(e - b);
                for (std::size_t k = b; k < e; ++k) y[k - b] = labels[train[k]];
                ad::tape<float> tp;
                net.zero_grad();
                auto out = net.forward(tp, tp.constant(detail::gather(data, d, train, b, e)));
                tp.backward(ad::bce_with_logits(out, y));
                ad::adam_step(net.params(), st, opt);
            }
            const double l = detail::loss(net, data, labels, d, val);
            if (l < best_loss - 1e-6) {
                best_loss = l;
                best = net;
                since_best = 0;
            } else {
                ++since_best;
            }
        }
        res.per_seed.push_back(detail::accuracy(best, data, labels, d, test));
        res.epochs.push_back(epoch);
    }
    res.accuracy = std::accumulate(res.per_seed.begin(), res.per_seed.end(), 0.0) / static_cast<double>(res.per_seed.size());
    return res;
}

} // namespace simflow::metrics
