#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "simflow/lens/profiles.hpp"
#include "simflow/random.hpp"

namespace simflow::lens {

/// Full scene vector layout (23 entries).
namespace idx {
enum : std::size_t {
    theta_e, e1, e2, x, y,
    gamma1, gamma2, ra0, dec0,
    src_amp, src_r, src_n, src_e1, src_e2, src_x, src_y,
    ll_amp, ll_r, ll_n, ll_e1, ll_e2, ll_x, ll_y,
    count
};
} // namespace idx

inline constexpr std::size_t full_dim = idx::count;
inline constexpr std::size_t free_dim = 17;

inline const std::array<const char*, full_dim>& parameter_names() {
    static const std::array<const char*, full_dim> names{
        "theta_E", "e1", "e2", "x_center", "y_center", "gamma1", "gamma2", "ra0", "dec0",
        "source_amp", "source_R_sersic", "source_n_sersic", "source_e1", "source_e2", "source_x", "source_y",
        "lens_light_amp", "lens_light_R_sersic", "lens_light_n_sersic", "lens_light_e1", "lens_light_e2",
        "lens_light_x", "lens_light_y"};
    return names;
}

/// Full-vector index of each free parameter. The lens light shares position
/// and ellipticity with the lens mass; ra0 = dec0 = 0.
inline constexpr std::array<std::size_t, free_dim> free_to_full{
    idx::theta_e, idx::e1, idx::e2, idx::x, idx::y, idx::gamma1, idx::gamma2,
    idx::src_amp, idx::src_r, idx::src_n, idx::src_e1, idx::src_e2, idx::src_x, idx::src_y,
    idx::ll_amp, idx::ll_r, idx::ll_n};

template <class T>
std::array<T, full_dim> expand_free(const std::array<T, free_dim>& f) {
    std::array<T, full_dim> s{};
    for (std::size_t k = 0; k < free_dim; ++k) s[free_to_full[k]] = f[k];
    s[idx::ra0] = T(0.0);
    s[idx::dec0] = T(0.0);
    s[idx::ll_e1] = s[idx::e1];
    s[idx::ll_e2] = s[idx::e2];
    s[idx::ll_x] = s[idx::x];
    s[idx::ll_y] = s[idx::y];
    return s;
}

inline std::vector<double> expand_free(const std::vector<double>& f) {
    if (f.size() != free_dim) throw std::invalid_argument("lens: free vector needs 17 entries");
    std::array<double, free_dim> a{};
    std::copy(f.begin(), f.end(), a.begin());
    const auto s = expand_free(a);
    return {s.begin(), s.end()};
}

inline std::vector<double> reduce_full(const std::vector<double>& s) {
    if (s.size() != full_dim) throw std::invalid_argument("lens: scene vector needs 23 entries");
    std::vector<double> f(free_dim);
    for (std::size_t k = 0; k < free_dim; ++k) f[k] = s[free_to_full[k]];
    return f;
}

/// Scene invariants: theta_E > 0, R_eff > 0, n in [0.5, 8], |e| < 1.
inline void validate_scene(const std::vector<double>& s) {
    if (s.size() != full_dim) throw std::invalid_argument("lens: scene vector needs 23 entries");
    for (double v : s)
        if (!std::isfinite(v)) throw std::invalid_argument("lens: non-finite scene parameter");
    auto fail = [](const std::string& m) { throw std::invalid_argument("lens: " + m); };
    if (!(s[idx::theta_e] > 0)) fail("theta_E must be positive");
    if (!(s[idx::src_r] > 0) || !(s[idx::ll_r] > 0)) fail("R_sersic must be positive");
    for (auto n : {s[idx::src_n], s[idx::ll_n]})
        if (n < 0.5 || n > 8) fail("Sersic index outside [0.5, 8]");
    for (auto [a, b] : {std::pair{idx::e1, idx::e2}, {idx::src_e1, idx::src_e2}, {idx::ll_e1, idx::ll_e2}})
        if (!(std::hypot(s[a], s[b]) < 1)) fail("ellipticity modulus must be below 1");
}

struct prior_ranges {
    double center = 0.2;
    double q_min = 0.25;
    double gamma_max = 0.1;
    double theta_e_lo = 0.5, theta_e_hi = 2.0;
    double amp_lo = 5.0, amp_hi = 10.0;
    double r_lo = 0.5, r_hi = 2.0;
    double n_lo = 1.5, n_hi = 4.0;

    double e_max() const { return (1 - q_min) / (1 + q_min); }
};

/// Full 23-entry scene with the mock-data ties applied.
inline std::vector<double> sample_scene(rng& r, const prior_ranges& p = {}) {
    std::vector<double> s(full_dim, 0.0);
    s[idx::x] = r.uniform(-p.center, p.center);
    s[idx::y] = r.uniform(-p.center, p.center);
    {
        const double phi = r.uniform(0, 180), q = r.uniform(p.q_min, 1);
        std::tie(s[idx::e1], s[idx::e2]) = ellipticity_from_angle(phi, q);
    }
    {
        const double phi = r.uniform(0, 180), g = r.uniform(0, p.gamma_max);
        std::tie(s[idx::gamma1], s[idx::gamma2]) = shear_from_polar(g, phi);
    }
    s[idx::theta_e] = r.uniform(p.theta_e_lo, p.theta_e_hi);
    s[idx::src_amp] = r.uniform(p.amp_lo, p.amp_hi);
    s[idx::src_r] = r.uniform(p.r_lo, p.r_hi);
    s[idx::src_n] = r.uniform(p.n_lo, p.n_hi);
    {
        const double phi = r.uniform(0, 180), q = r.uniform(p.q_min, 1);
        std::tie(s[idx::src_e1], s[idx::src_e2]) = ellipticity_from_angle(phi, q);
    }
    s[idx::src_x] = r.uniform(-p.center, p.center);
    s[idx::src_y] = r.uniform(-p.center, p.center);
    s[idx::ll_amp] = r.uniform(p.amp_lo, p.amp_hi);
    s[idx::ll_r] = r.uniform(p.r_lo, p.r_hi);
    s[idx::ll_n] = r.uniform(p.n_lo, p.n_hi);
    s[idx::ll_e1] = s[idx::e1];
    s[idx::ll_e2] = s[idx::e2];
    s[idx::ll_x] = s[idx::x];
    s[idx::ll_y] = s[idx::y];
    return s;
}

/// Log prior density of the 17 free parameters. Uniform priors on
/// (angle, axis ratio) and (angle, shear strength) induce the densities
/// 1 / (pi c (1 + c)^2 (1 - q_min)) on the ellipticity plane and
/// 1 / (2 pi g gamma_max) on the shear plane.
inline double log_prior_free(const std::vector<double>& f, const prior_ranges& p = {}) {
    if (f.size() != free_dim) throw std::invalid_argument("lens: free vector needs 17 entries");
    constexpr double ninf = -std::numeric_limits<double>::infinity();
    const double pi = std::numbers::pi;
    double lp = 0;
    auto uniform = [&](double v, double lo, double hi) {
        if (!(v >= lo && v <= hi)) return false;
        lp -= std::log(hi - lo);
        return true;
    };
    auto ellip = [&](double e1, double e2) {
        const double c = std::hypot(e1, e2);
        if (!(c > 0 && c <= p.e_max())) return false;
        lp -= std::log(pi * c * (1 + c) * (1 + c) * (1 - p.q_min));
        return true;
    };
    // free layout: 0 theta_E, 1-2 e, 3-4 center, 5-6 gamma, 7-9 source amp/R/n,
    // 10-11 source e, 12-13 source center, 14-16 lens light amp/R/n
    if (!uniform(f[0], p.theta_e_lo, p.theta_e_hi)) return ninf;
    if (!ellip(f[1], f[2])) return ninf;
    if (!uniform(f[3], -p.center, p.center) || !uniform(f[4], -p.center, p.center)) return ninf;
    const double g = std::hypot(f[5], f[6]);
    if (!(g > 0 && g <= p.gamma_max)) return ninf;
    lp -= std::log(2 * pi * g * p.gamma_max);
    if (!uniform(f[7], p.amp_lo, p.amp_hi) || !uniform(f[8], p.r_lo, p.r_hi) || !uniform(f[9], p.n_lo, p.n_hi))
        return ninf;
    if (!ellip(f[10], f[11])) return ninf;
    if (!uniform(f[12], -p.center, p.center) || !uniform(f[13], -p.center, p.center)) return ninf;
    if (!uniform(f[14], p.amp_lo, p.amp_hi) || !uniform(f[15], p.r_lo, p.r_hi) || !uniform(f[16], p.n_lo, p.n_hi))
        return ninf;
    return lp;
}

} // namespace simflow::lens
