#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "simflow/ad/dual.hpp"
#include "simflow/lens/instrument.hpp"
#include "simflow/lens/profiles.hpp"
#include "simflow/lens/scene.hpp"

namespace simflow::lens {

/// Pre-PSF pixel flux: source light traced through the lens equation plus
/// lens light, surface brightness times pixel area.
template <class T>
std::vector<T> surface_flux(const std::array<T, full_dim>& s, const instrument& in) {
    std::vector<T> out(in.pixels());
    const double area = in.pixel_area();
    for (std::size_t r = 0; r < in.size; ++r) {
        const double py = in.coord(r);
        for (std::size_t c = 0; c < in.size; ++c) {
            const double px = in.coord(c);
            const auto a = sie_deflection(px, py, s[idx::theta_e], s[idx::e1], s[idx::e2], s[idx::x], s[idx::y]);
            const auto g = shear_deflection(px, py, s[idx::gamma1], s[idx::gamma2], s[idx::ra0], s[idx::dec0]);
            const T bx = px - a.x - g.x, by = py - a.y - g.y;
            const T src = sersic(bx, by, s[idx::src_amp], s[idx::src_r], s[idx::src_n], s[idx::src_e1], s[idx::src_e2],
                                 s[idx::src_x], s[idx::src_y]);
            const T ll = sersic(T(px), T(py), s[idx::ll_amp], s[idx::ll_r], s[idx::ll_n], s[idx::ll_e1], s[idx::ll_e2],
                                s[idx::ll_x], s[idx::ll_y]);
            out[r * in.size + c] = (src + ll) * area;
        }
    }
    return out;
}

inline std::array<double, full_dim> as_array(const std::vector<double>& scene) {
    if (scene.size() != full_dim) throw std::invalid_argument("lens: scene vector needs 23 entries");
    std::array<double, full_dim> a{};
    std::copy(scene.begin(), scene.end(), a.begin());
    return a;
}

inline std::vector<double> render_noiseless(const std::vector<double>& scene, const instrument& in) {
    return convolve(surface_flux(as_array(scene), in), in.size, in.psf_kernel_1d());
}

/// sqrt(background^2 + max(model, 0) / exposure): Gaussian stand-in for shot noise.
inline std::vector<double> noise_sigma(const std::vector<double>& model, const instrument& in) {
    std::vector<double> s(model.size());
    const double b2 = in.background_rms * in.background_rms;
    for (std::size_t i = 0; i < model.size(); ++i) s[i] = std::sqrt(b2 + std::max(model[i], 0.0) / in.exposure);
    return s;
}

struct observation {
    std::vector<double> image;
    std::vector<double> sigma;
};

/// Noisy observation, deterministic in (scene, z). The sigma map is the one
/// used to draw the noise.
inline observation render(const std::vector<double>& scene, const instrument& in, const std::vector<double>& z) {
    if (z.size() != in.pixels()) throw std::invalid_argument("lens: noise block must have one entry per pixel");
    observation o;
    const auto model = render_noiseless(scene, in);
    o.sigma = noise_sigma(model, in);
    o.image.resize(model.size());
    for (std::size_t i = 0; i < model.size(); ++i) o.image[i] = model[i] + o.sigma[i] * z[i];
    return o;
}

/// Observation with the sigma map estimated from the noisy image itself,
/// for data whose generating scene is unknown.
inline observation observation_from_image(std::vector<double> image, const instrument& in) {
    if (image.size() != in.pixels()) throw std::invalid_argument("lens: image size does not match the instrument");
    observation o;
    o.sigma = noise_sigma(image, in);
    o.image = std::move(image);
    return o;
}

inline double chi2_of_model(const std::vector<double>& model, const observation& obs) {
    if (model.size() != obs.image.size() || obs.sigma.size() != obs.image.size())
        throw std::invalid_argument("lens: chi2 shape mismatch");
    double s = 0;
    for (std::size_t i = 0; i < model.size(); ++i) {
        const double r = (model[i] - obs.image[i]) / obs.sigma[i];
        s += r * r;
    }
    return s / static_cast<double>(model.size());
}

/// Mean over pixels of ((noiseless render - image) / sigma)^2.
inline double chi2(const std::vector<double>& scene, const observation& obs, const instrument& in) {
    return chi2_of_model(render_noiseless(scene, in), obs);
}

struct chi2_gradient {
    double value = 0;
    std::vector<double> grad;
};

namespace detail {

/// Forward-mode derivatives of the pre-PSF image, contracted with the
/// adjoint of the (linear, self-adjoint) PSF and chi^2 stages.
template <std::size_t N>
chi2_gradient chi2_with_gradient(const std::array<ad::dual<N>, full_dim>& s, const observation& obs,
                                 const instrument& in) {
    const auto u = surface_flux(s, in);
    std::vector<double> uv(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) uv[i] = u[i].v;
    const auto kernel = in.psf_kernel_1d();
    const auto model = convolve(uv, in.size, kernel);
    if (model.size() != obs.image.size()) throw std::invalid_argument("lens: chi2 shape mismatch");
    const double inv_n = 1.0 / static_cast<double>(model.size());
    std::vector<double> dm(model.size());
    double c = 0;
    for (std::size_t i = 0; i < model.size(); ++i) {
        const double r = (model[i] - obs.image[i]) / obs.sigma[i];
        c += r * r;
        dm[i] = 2.0 * r / obs.sigma[i] * inv_n;
    }
    const auto w = convolve(dm, in.size, kernel);
    chi2_gradient out{c * inv_n, std::vector<double>(N, 0.0)};
    for (std::size_t i = 0; i < u.size(); ++i)
        for (std::size_t k = 0; k < N; ++k) out.grad[k] += w[i] * u[i].d[k];
    return out;
}

} // namespace detail

/// chi^2 and its gradient with respect to all 23 scene entries.
inline chi2_gradient chi2_and_gradient(const std::vector<double>& scene, const observation& obs, const instrument& in) {
    const auto a = as_array(scene);
    std::array<ad::dual<full_dim>, full_dim> s;
    for (std::size_t k = 0; k < full_dim; ++k) s[k] = ad::dual<full_dim>::variable(a[k], k);
    return detail::chi2_with_gradient<full_dim>(s, obs, in);
}

/// chi^2 and its gradient with respect to the 17 free parameters (ties applied).
inline chi2_gradient chi2_and_gradient_free(const std::vector<double>& free, const observation& obs, const instrument& in) {
    if (free.size() != free_dim) throw std::invalid_argument("lens: free vector needs 17 entries");
    std::array<ad::dual<free_dim>, free_dim> f;
    for (std::size_t k = 0; k < free_dim; ++k) f[k] = ad::dual<free_dim>::variable(free[k], k);
    return detail::chi2_with_gradient<free_dim>(expand_free(f), obs, in);
}

/// Gaussian log-likelihood of the image given the free parameters.
inline double log_likelihood_free(const std::vector<double>& free, const observation& obs, const instrument& in) {
    const auto model = render_noiseless(expand_free(free), in);
    double s = 0;
    for (std::size_t i = 0; i < model.size(); ++i) {
        const double r = (model[i] - obs.image[i]) / obs.sigma[i];
        s += r * r;
    }
    return std::isfinite(s) ? -0.5 * s : -std::numeric_limits<double>::infinity();
}

} // namespace simflow::lens
