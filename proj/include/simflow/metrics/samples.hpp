#pragma once

#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "simflow/ad/tensor.hpp"

namespace simflow::metrics {

/// Rows are samples.
using sample_matrix = Eigen::MatrixXd;

inline sample_matrix to_matrix(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) return sample_matrix(0, 0);
    sample_matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != static_cast<std::size_t>(m.cols())) throw std::invalid_argument("to_matrix: ragged rows");
        for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
    return m;
}

inline sample_matrix to_matrix(const ad::tensor& t) {
    sample_matrix m(static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
    for (std::size_t i = 0; i < t.rows(); ++i)
        for (std::size_t j = 0; j < t.cols(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t.at(i, j);
    return m;
}

} // namespace simflow::metrics
