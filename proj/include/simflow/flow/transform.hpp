#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "simflow/ad/tensor.hpp"

namespace simflow::flow {

/// Per-dimension map into network space: optional log, then z-scoring.
struct standardizer {
    std::vector<double> mean, scale;
    std::vector<bool> log_dims;

    std::size_t dim() const { return mean.size(); }

    static standardizer fit(const ad::tensor& raw, std::vector<bool> log_dims = {}) {
        const std::size_t n = raw.rows(), d = raw.cols();
        if (n < 2) throw std::invalid_argument("standardizer: need at least 2 rows");
        if (log_dims.empty()) log_dims.assign(d, false);
        if (log_dims.size() != d) throw std::invalid_argument("standardizer: log mask size mismatch");
        standardizer s{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0), std::move(log_dims)};
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < d; ++j) s.mean[j] += s.pre(j, raw.at(r, j));
        for (auto& m : s.mean) m /= static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < d; ++j) {
                const double dv = s.pre(j, raw.at(r, j)) - s.mean[j];
                s.scale[j] += dv * dv;
            }
        for (auto& v : s.scale) {
            v = std::sqrt(v / static_cast<double>(n - 1));
            if (!(v > 1e-8)) v = 1.0;  // constant column
        }
        return s;
    }

    static standardizer identity(std::size_t d) {
        return {std::vector<double>(d, 0.0), std::vector<double>(d, 1.0), std::vector<bool>(d, false)};
    }

    template <class T>
    T forward1(std::size_t j, const T& v) const {
        using std::log;
        return ((log_dims[j] ? log(v) : v) - mean[j]) / scale[j];
    }

    template <class T>
    T inverse1(std::size_t j, const T& y) const {
        using std::exp;
        T v = y * scale[j] + mean[j];
        return log_dims[j] ? exp(v) : v;
    }

    ad::tensor forward(const ad::tensor& raw) const { return apply(raw, true); }
    ad::tensor inverse(const ad::tensor& z) const { return apply(z, false); }

    nlohmann::json to_json() const { return {{"mean", mean}, {"scale", scale}, {"log", log_dims}}; }

    static standardizer from_json(const nlohmann::json& j) {
        return {j.at("mean").get<std::vector<double>>(), j.at("scale").get<std::vector<double>>(),
                j.at("log").get<std::vector<bool>>()};
    }

private:
    double pre(std::size_t j, double v) const { return log_dims[j] ? std::log(v) : v; }

    ad::tensor apply(const ad::tensor& in, bool fwd) const {
        if (in.cols() != dim()) throw std::invalid_argument("standardizer: column count mismatch");
        ad::tensor out(in.shape());
        const std::size_t d = dim();
        for (std::size_t r = 0; r < in.rows(); ++r)
            for (std::size_t j = 0; j < d; ++j) {
                const double v = in[r * d + j];
                out[r * d + j] = static_cast<float>(fwd ? forward1(j, v) : inverse1(j, v));
            }
        if (!out.all_finite()) throw numerical_error("standardizer: non-finite value (log of non-positive entry?)");
        return out;
    }
};

} // namespace simflow::flow
