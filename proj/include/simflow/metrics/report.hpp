#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "simflow/random.hpp"

namespace simflow::metrics {

struct metric_report {
    std::string metric;
    double value = 0;
    double uncertainty = std::nan("");  // NaN when undefined
    nlohmann::json config = nlohmann::json::object();

    nlohmann::json to_json() const {
        nlohmann::json j{{"metric", metric}, {"value", value}, {"config", config}};
        j["uncertainty"] = std::isfinite(uncertainty) ? nlohmann::json(uncertainty) : nlohmann::json(nullptr);
        return j;
    }
};

struct chi2_report {
    double mean = 0;
    std::vector<double> per_system;  // NaN for skipped systems
    std::size_t n_evaluated = 0;     // samples that contributed
    std::size_t sampler_failures = 0, chi2_failures = 0;
};

/// Mean chi^2 over systems x posterior samples. A system whose sampler
/// throws is skipped; a sample whose chi^2 throws or is non-finite is dropped.
inline chi2_report avg_chi2(std::size_t n_systems, std::size_t n_samples,
                            const std::function<std::vector<std::vector<double>>(std::size_t system, std::size_t n, rng&)>& sampler,
                            const std::function<double(std::size_t system, const std::vector<double>& theta)>& chi2, rng& r) {
    if (n_systems == 0 || n_samples == 0) throw std::invalid_argument("avg_chi2: need at least one system and sample");
    chi2_report rep;
    double total = 0;
    for (std::size_t s = 0; s < n_systems; ++s) {
        std::vector<std::vector<double>> draws;
        try {
            draws = sampler(s, n_samples, r);
        } catch (const std::exception&) {
            ++rep.sampler_failures;
            rep.per_system.push_back(std::nan(""));
            continue;
        }
        double sys = 0;
        std::size_t k = 0;
        for (const auto& th : draws) {
            double c;
            try {
                c = chi2(s, th);
            } catch (const std::exception&) {
                ++rep.chi2_failures;
                continue;
            }
            if (!std::isfinite(c)) {
                ++rep.chi2_failures;
                continue;
            }
            sys += c;
            ++k;
        }
        rep.per_system.push_back(k ? sys / static_cast<double>(k) : std::nan(""));
        total += sys;
        rep.n_evaluated += k;
    }
    if (rep.n_evaluated == 0) throw std::runtime_error("avg_chi2: every system or sample failed");
    rep.mean = total / static_cast<double>(rep.n_evaluated);
    return rep;
}

} // namespace simflow::metrics
