#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace simflow::flow {

using param_vector = std::vector<double>;

enum class path_kind { conditional_ot, independent_coupling };

struct path_config {
    path_kind kind = path_kind::conditional_ot;
    double sigma_min = 1e-4;  // conditional OT: std at t = 1
    double sigma = 1e-3;      // independent coupling: bandwidth around the straight line
    double alpha = 0.0;       // time prior density proportional to t^alpha
};

struct path_sample {
    double t = 0;
    param_vector theta_t;
    param_vector u;  // regression target
    param_vector z;
};

inline void require_same_dim(const param_vector& a, const param_vector& b, const char* what) {
    if (a.size() != b.size())
        throw std::invalid_argument(std::string(what) + ": dimension mismatch " + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()));
}

/// theta_t = t*theta1 + (1 - (1 - sigma_min) t) z, with its generating velocity.
inline path_sample sample_ot_path(const param_vector& theta1, double t, const param_vector& z, double sigma_min) {
    require_same_dim(theta1, z, "sample_ot_path");
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("sample_ot_path: t outside [0,1]");
    const double k = 1.0 - sigma_min;
    const double denom = 1.0 - k * t;
    if (!(denom > 0.0)) throw std::invalid_argument("sample_ot_path: non-positive scale; check sigma_min");
    path_sample s{t, param_vector(z.size()), param_vector(z.size()), z};
    for (std::size_t i = 0; i < z.size(); ++i) {
        s.theta_t[i] = t * theta1[i] + denom * z[i];
        s.u[i] = (theta1[i] - k * s.theta_t[i]) / denom;
    }
    return s;
}

/// theta_t = t*theta1 + (1-t) theta0 + sigma z, target theta1 - theta0.
inline path_sample sample_ic_path(const param_vector& theta0, const param_vector& theta1, double t,
                                  const param_vector& z, double sigma) {
    require_same_dim(theta0, theta1, "sample_ic_path");
    require_same_dim(theta1, z, "sample_ic_path");
    path_sample s{t, param_vector(z.size()), param_vector(z.size()), z};
    for (std::size_t i = 0; i < z.size(); ++i) {
        s.theta_t[i] = t * theta1[i] + (1.0 - t) * theta0[i] + sigma * z[i];
        s.u[i] = theta1[i] - theta0[i];
    }
    return s;
}

/// Inverse-CDF draw of t with density proportional to t^alpha on [0,1].
inline double sample_time(double alpha, double u) {
    if (!(alpha > -1.0)) throw std::invalid_argument("sample_time: alpha must exceed -1");
    return std::pow(u, 1.0 / (1.0 + alpha));
}

/// theta_hat_1 = theta_t + (1 - t) v
inline param_vector one_step_estimate(const param_vector& theta_t, double t, const param_vector& v) {
    require_same_dim(theta_t, v, "one_step_estimate");
    param_vector out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = theta_t[i] + (1.0 - t) * v[i];
    return out;
}

/// Velocity implied by a denoised estimate: (x_hat - theta_t) / (1 - t).
inline param_vector velocity_from_x_prediction(const param_vector& x_hat, const param_vector& theta_t, double t,
                                               double tol = 1e-6) {
    require_same_dim(x_hat, theta_t, "velocity_from_x_prediction");
    if (t >= 1.0 - tol) throw std::domain_error("velocity_from_x_prediction: t too close to 1");
    param_vector v(x_hat.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (x_hat[i] - theta_t[i]) / (1.0 - t);
    return v;
}

} // namespace simflow::flow
