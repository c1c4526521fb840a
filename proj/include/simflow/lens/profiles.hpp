#pragma once

#include <cmath>
#include <numbers>
#include <utility>

#include "simflow/ad/dual.hpp"

namespace simflow::lens {

using ad::value_of;

/// (position angle in degrees, axis ratio) -> (e1, e2), e = (1 - q) / (1 + q).
inline std::pair<double, double> ellipticity_from_angle(double phi_deg, double q) {
    const double c = (1 - q) / (1 + q), a = 2 * phi_deg * std::numbers::pi / 180.0;
    return {c * std::cos(a), c * std::sin(a)};
}

/// Inverse of ellipticity_from_angle; angle in [0, 180).
inline std::pair<double, double> angle_from_ellipticity(double e1, double e2) {
    const double c = std::hypot(e1, e2);
    double phi = 0.5 * std::atan2(e2, e1) * 180.0 / std::numbers::pi;
    if (phi < 0) phi += 180.0;
    return {phi, (1 - c) / (1 + c)};
}

/// Shear strength and orientation (degrees) -> (gamma1, gamma2).
inline std::pair<double, double> shear_from_polar(double gamma_ext, double phi_deg) {
    const double a = 2 * phi_deg * std::numbers::pi / 180.0;
    return {gamma_ext * std::cos(a), gamma_ext * std::sin(a)};
}

template <class T>
struct vec2 {
    T x{}, y{};
};

/// Below this 1 - q the SIE uses its series expansion in s^2 = 1 - q^2.
inline constexpr double sie_series_threshold = 1e-4;

enum class sie_branch { automatic, closed_form, series };

/// Deflection of a singular isothermal ellipsoid with convergence
/// kappa = theta_E / (2 sqrt(q x'^2 + y'^2 / q)) in the frame aligned with the
/// major axis. Zero exactly at the center.
template <class T>
vec2<T> sie_deflection(double px, double py, const T& theta_e, const T& e1, const T& e2, const T& cx, const T& cy,
                       sie_branch branch = sie_branch::automatic) {
    using std::atan;
    using std::atan2;
    using std::atanh;
    using std::cos;
    using std::sin;
    using std::sqrt;
    const T dx = px - cx, dy = py - cy;
    const T c2 = e1 * e1 + e2 * e2;
    const double cv = std::sqrt(value_of(c2));
    if (!(cv < 1)) return {T(std::nan("")), T(std::nan(""))};
    T cphi(1.0), sphi(0.0);
    if (cv > 0) {
        const T phi = 0.5 * atan2(e2, e1);
        cphi = cos(phi);
        sphi = sin(phi);
    }
    const T c = cv > 0 ? sqrt(c2) : T(0.0);
    const T q = (1.0 - c) / (1.0 + c);
    const T xr = cphi * dx + sphi * dy, yr = -sphi * dx + cphi * dy;
    const T psi2 = q * q * xr * xr + yr * yr;
    if (!(value_of(psi2) > 1e-30)) return {T(0.0), T(0.0)};
    const T psi = sqrt(psi2);
    const T s2 = 1.0 - q * q;
    const T f = theta_e * sqrt(q);
    T ax, ay;
    const bool series = branch == sie_branch::series ||
                        (branch == sie_branch::automatic && value_of(1.0 - q) < sie_series_threshold);
    if (series) {
        // atan(s u) / s and atanh(s w) / s to O(s^4).
        const T u = xr / psi, w = yr / psi;
        const T u2 = u * u, w2 = w * w;
        ax = f * u * (1.0 - s2 * u2 / 3.0 + s2 * s2 * u2 * u2 / 5.0);
        ay = f * w * (1.0 + s2 * w2 / 3.0 + s2 * s2 * w2 * w2 / 5.0);
    } else {
        const T s = sqrt(s2);
        ax = f / s * atan(s * xr / psi);
        ay = f / s * atanh(s * yr / psi);
    }
    return {cphi * ax - sphi * ay, sphi * ax + cphi * ay};
}

template <class T>
vec2<T> shear_deflection(double px, double py, const T& g1, const T& g2, const T& ra0, const T& dec0) {
    const T dx = px - ra0, dy = py - dec0;
    return {g1 * dx + g2 * dy, g2 * dx - g1 * dy};
}

inline double sersic_bn(double n) { return 1.9992 * n - 0.3271; }

template <class T>
T sersic_bn(const T& n) {
    return 1.9992 * n - 0.3271;
}

/// Surface brightness A exp(-b_n [(R / R_eff)^(1/n) - 1]) with the elliptical
/// radius R^2 = q x'^2 + y'^2 / q written directly in (e1, e2):
/// R^2 = [(1 + c^2 - 2 e1) x^2 + (1 + c^2 + 2 e1) y^2 - 4 e2 x y] / (1 - c^2).
template <class T>
T sersic(const T& px, const T& py, const T& amp, const T& r_eff, const T& n, const T& e1, const T& e2, const T& cx,
         const T& cy) {
    using std::exp;
    using std::log;
    const T dx = px - cx, dy = py - cy;
    const T c2 = e1 * e1 + e2 * e2;
    T r2 = ((1.0 + c2 - 2.0 * e1) * dx * dx + (1.0 + c2 + 2.0 * e1) * dy * dy - 4.0 * e2 * dx * dy) / (1.0 - c2);
    if (!(value_of(r2) > 1e-24)) r2 = T(1e-24);
    const T ratio = exp(0.5 * log(r2 / (r_eff * r_eff)) / n);
    return amp * exp(-sersic_bn(n) * (ratio - 1.0));
}

} // namespace simflow::lens
