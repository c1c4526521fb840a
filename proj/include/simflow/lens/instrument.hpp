#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include <json.hpp>

namespace simflow::lens {

struct instrument {
    std::size_t size = 64;        // pixels per side
    double pixel_scale = 0.04;    // arcsec / pixel
    double psf_fwhm = 0.3;        // arcsec
    double background_rms = 0.01;
    double exposure = 1000.0;     // s
    double psf_truncation = 4.0;  // kernel half-width in PSF sigmas

    void validate() const {
        if (size == 0 || !(pixel_scale > 0) || !(psf_fwhm > 0) || !(background_rms > 0) || !(exposure > 0) ||
            !(psf_truncation > 0))
            throw std::invalid_argument("instrument: all settings must be positive");
    }

    std::size_t pixels() const { return size * size; }
    double pixel_area() const { return pixel_scale * pixel_scale; }

    /// Pixel-center coordinate (arcsec) of row or column index i; the image center is 0.
    double coord(std::size_t i) const { return (static_cast<double>(i) - 0.5 * static_cast<double>(size - 1)) * pixel_scale; }

    double psf_sigma_pixels() const { return psf_fwhm / (2.0 * std::sqrt(2.0 * std::log(2.0))) / pixel_scale; }

    /// One axis of the separable Gaussian kernel, cut at psf_truncation sigma
    /// and normalized so the 2-d kernel sums to 1.
    std::vector<double> psf_kernel_1d() const {
        const double s = psf_sigma_pixels();
        const auto half = static_cast<std::size_t>(std::floor(psf_truncation * s));
        std::vector<double> k(2 * half + 1);
        double total = 0;
        for (std::size_t i = 0; i < k.size(); ++i) {
            const double d = static_cast<double>(i) - static_cast<double>(half);
            k[i] = std::exp(-0.5 * d * d / (s * s));
            total += k[i];
        }
        for (auto& v : k) v /= total;
        return k;
    }

    static instrument from_json(const nlohmann::json& j) {
        instrument in;
        in.size = j.value("image_size", in.size);
        in.pixel_scale = j.value("pixel_scale", in.pixel_scale);
        in.psf_fwhm = j.value("psf_fwhm", in.psf_fwhm);
        in.background_rms = j.value("background_rms", in.background_rms);
        in.exposure = j.value("exposure", in.exposure);
        in.psf_truncation = j.value("psf_truncation", in.psf_truncation);
        in.validate();
        return in;
    }

    nlohmann::json to_json() const {
        return {{"image_size", size},         {"pixel_scale", pixel_scale}, {"psf_fwhm", psf_fwhm},
                {"background_rms", background_rms}, {"exposure", exposure}, {"psf_truncation", psf_truncation}};
    }
};

/// Separable convolution with zero padding; `kernel` is symmetric, so this is
/// also its own adjoint.
inline std::vector<double> convolve(const std::vector<double>& img, std::size_t size, const std::vector<double>& kernel) {
    const auto h = static_cast<std::ptrdiff_t>(kernel.size() / 2);
    const auto n = static_cast<std::ptrdiff_t>(size);
    std::vector<double> tmp(img.size(), 0.0), out(img.size(), 0.0);
    for (std::ptrdiff_t r = 0; r < n; ++r)
        for (std::ptrdiff_t c = 0; c < n; ++c) {
            double s = 0;
            for (std::ptrdiff_t k = -h; k <= h; ++k) {
                const auto cc = c + k;
                if (cc >= 0 && cc < n) s += kernel[static_cast<std::size_t>(k + h)] * img[static_cast<std::size_t>(r * n + cc)];
            }
            tmp[static_cast<std::size_t>(r * n + c)] = s;
        }
    for (std::ptrdiff_t r = 0; r < n; ++r)
        for (std::ptrdiff_t c = 0; c < n; ++c) {
            double s = 0;
            for (std::ptrdiff_t k = -h; k <= h; ++k) {
                const auto rr = r + k;
                if (rr >= 0 && rr < n) s += kernel[static_cast<std::size_t>(k + h)] * tmp[static_cast<std::size_t>(rr * n + c)];
            }
            out[static_cast<std::size_t>(r * n + c)] = s;
        }
    return out;
}

} // namespace simflow::lens
