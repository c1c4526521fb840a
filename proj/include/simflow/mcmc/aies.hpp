#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "simflow/random.hpp"

namespace simflow::mcmc {

using param_vector = std::vector<double>;
using log_prob_fn = std::function<double(const param_vector&)>;

class degeneracy_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct move_config {
    double a = 2.0;         // stretch scale
    double gamma_de = 0.0;  // 0 selects 2.38 / sqrt(2 d)
    double p_stretch = 0.5;
    double p_de = 0.5;
    double de_jitter = 1e-6;

    double de_scale(std::size_t d) const { return gamma_de > 0 ? gamma_de : 2.38 / std::sqrt(2.0 * static_cast<double>(d)); }

    void validate() const {
        if (!(a > 1)) throw std::invalid_argument("move_config: stretch scale must exceed 1");
        if (p_stretch < 0 || p_de < 0 || std::abs(p_stretch + p_de - 1.0) > 1e-12)
            throw std::invalid_argument("move_config: move probabilities must be non-negative and sum to 1");
    }
};

/// Default walker count 2 * max(32, 2d).
inline std::size_t default_walkers(std::size_t d) { return 2 * std::max<std::size_t>(32, 2 * d); }

struct stretch_proposal {
    param_vector position;
    double log_factor = 0;  // (d - 1) log z
    double z = 1;
};

/// z = ((a - 1) u + 1)^2 / a has density proportional to 1 / sqrt(z) on [1/a, a].
inline double stretch_z(double a, double u) {
    const double s = (a - 1.0) * u + 1.0;
    return s * s / a;
}

inline stretch_proposal stretch_from_z(const param_vector& walker, const param_vector& other, double z) {
    stretch_proposal p;
    p.z = z;
    p.position.resize(walker.size());
    for (std::size_t j = 0; j < walker.size(); ++j) p.position[j] = other[j] + z * (walker[j] - other[j]);
    p.log_factor = (static_cast<double>(walker.size()) - 1.0) * std::log(z);
    return p;
}

inline stretch_proposal propose_stretch(const param_vector& walker, const param_vector& other, double a, rng& r) {
    if (!(a > 1)) throw std::invalid_argument("propose_stretch: a must exceed 1");
    return stretch_from_z(walker, other, stretch_z(a, r.uniform()));
}

/// walker + gamma (w_j - w_k) + jitter; symmetric, so no Hastings factor.
inline param_vector propose_de(const param_vector& walker, const param_vector& wj, const param_vector& wk, double gamma,
                               double jitter, rng& r) {
    param_vector p(walker.size());
    for (std::size_t i = 0; i < walker.size(); ++i) p[i] = walker[i] + gamma * (wj[i] - wk[i]) + jitter * r.normal();
    return p;
}

struct ensemble {
    std::vector<param_vector> walkers;
    std::vector<double> log_prob;

    std::size_t size() const { return walkers.size(); }
    std::size_t dim() const { return walkers.empty() ? 0 : walkers.front().size(); }
};

/// Walkers drawn from `sample`, redrawn until the log-probability is finite.
inline ensemble init_ensemble(const std::function<param_vector(rng&)>& sample, const log_prob_fn& log_prob,
                              std::size_t n, rng& r, std::size_t max_tries = 1000) {
    ensemble e;
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t tries = 0;
        for (;;) {
            auto w = sample(r);
            const double lp = log_prob(w);
            if (std::isfinite(lp)) {
                e.walkers.push_back(std::move(w));
                e.log_prob.push_back(lp);
                break;
            }
            if (++tries >= max_tries)
                throw std::runtime_error("init_ensemble: no finite log-probability after " + std::to_string(max_tries) +
                                         " draws");
        }
    }
    return e;
}

inline void check_spread(const ensemble& e) {
    const std::size_t d = e.dim();
    for (std::size_t j = 0; j < d; ++j) {
        const double v0 = e.walkers.front()[j];
        for (const auto& w : e.walkers)
            if (w[j] != v0) goto next;
        throw degeneracy_error("ensemble has zero spread in coordinate " + std::to_string(j));
    next:;
    }
}

struct aies_config {
    std::size_t n_steps = 4000;  // post-warmup
    std::size_t warmup = 4000;
    std::size_t thin = 1;
    move_config moves;
};

struct aies_result {
    std::size_t n_walkers = 0, dim = 0, n_kept = 0;
    std::vector<double> samples;  // [kept step][walker][dim]
    double acceptance = 0;        // post-warmup
    double warmup_seconds = 0, sampling_seconds = 0;
    std::size_t log_prob_calls = 0;
    ensemble final_state;

    param_vector draw(std::size_t step, std::size_t walker) const {
        const auto* p = samples.data() + (step * n_walkers + walker) * dim;
        return param_vector(p, p + dim);
    }

    /// Chain of one coordinate: [step][walker].
    std::vector<double> coordinate(std::size_t j) const {
        std::vector<double> out(n_kept * n_walkers);
        for (std::size_t s = 0; s < n_kept; ++s)
            for (std::size_t w = 0; w < n_walkers; ++w) out[s * n_walkers + w] = samples[(s * n_walkers + w) * dim + j];
        return out;
    }

    std::vector<param_vector> flat() const {
        std::vector<param_vector> out;
        out.reserve(n_kept * n_walkers);
        for (std::size_t s = 0; s < n_kept; ++s)
            for (std::size_t w = 0; w < n_walkers; ++w) out.push_back(draw(s, w));
        return out;
    }
};

namespace detail {

struct step_stats {
    std::size_t proposed = 0, accepted = 0, calls = 0;
};

/// One uniform is consumed per proposal whether or not it is finite.
inline bool accept(double log_new, double log_ratio, rng& r) {
    const double u = r.uniform_open();
    return std::isfinite(log_new) && std::log(u) < log_ratio;
}

/// Red-blue stretch update: each half moves against the other, frozen, half.
inline void stretch_step(ensemble& e, const log_prob_fn& lp, double a, rng& r, step_stats& st) {
    const std::size_t n = e.size(), half = n / 2;
    for (std::size_t s = 0; s < 2; ++s) {
        const std::size_t b0 = s == 0 ? 0 : half, b1 = s == 0 ? half : n;
        const std::size_t c0 = s == 0 ? half : 0, c1 = s == 0 ? n : half;
        std::vector<stretch_proposal> props(b1 - b0);
        for (std::size_t k = b0; k < b1; ++k) {
            const std::size_t o = c0 + r.index(c1 - c0);
            props[k - b0] = propose_stretch(e.walkers[k], e.walkers[o], a, r);
        }
        for (std::size_t k = b0; k < b1; ++k) {
            auto& p = props[k - b0];
            const double lnew = lp(p.position);
            ++st.calls;
            ++st.proposed;
            if (accept(lnew, p.log_factor + lnew - e.log_prob[k], r)) {
                e.walkers[k] = std::move(p.position);
                e.log_prob[k] = lnew;
                ++st.accepted;
            }
        }
    }
}

inline void de_step(ensemble& e, const log_prob_fn& lp, double gamma, double jitter, rng& r, step_stats& st) {
    const std::size_t n = e.size();
    if (n < 3) throw std::invalid_argument("differential-evolution move needs at least 3 walkers");
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t j = r.index(n - 1);
        if (j >= k) ++j;
        std::size_t m = r.index(n - 2);
        const std::size_t lo = std::min(j, k), hi = std::max(j, k);
        if (m >= lo) ++m;
        if (m >= hi) ++m;
        auto p = propose_de(e.walkers[k], e.walkers[j], e.walkers[m], gamma, jitter, r);
        const double lnew = lp(p);
        ++st.calls;
        ++st.proposed;
        if (accept(lnew, lnew - e.log_prob[k], r)) {
            e.walkers[k] = std::move(p);
            e.log_prob[k] = lnew;
            ++st.accepted;
        }
    }
}

} // namespace detail

/// Affine-invariant ensemble sampler mixing stretch and DE moves (one move
/// kind per step, chosen at random). Returns post-warmup draws.
inline aies_result aies_run(const log_prob_fn& lp, ensemble init, const aies_config& cfg, rng& r) {
    cfg.moves.validate();
    const std::size_t n = init.size(), d = init.dim();
    if (n < 2 * d || n < 4) throw std::invalid_argument("aies: need at least 2 d walkers");
    if (n % 2) throw std::invalid_argument("aies: walker count must be even");
    for (double v : init.log_prob)
        if (!std::isfinite(v)) throw std::invalid_argument("aies: initial log-probabilities must be finite");
    if (cfg.thin == 0) throw std::invalid_argument("aies: thin must be >= 1");
    check_spread(init);
    const double gamma = cfg.moves.de_scale(d);
    aies_result res;
    res.n_walkers = n;
    res.dim = d;
    res.samples.reserve((cfg.n_steps / cfg.thin) * n * d);
    ensemble e = std::move(init);
    detail::step_stats warm, samp;
    auto one_step = [&](detail::step_stats& st) {
        if (r.uniform() < cfg.moves.p_stretch)
            detail::stretch_step(e, lp, cfg.moves.a, r, st);
        else
            detail::de_step(e, lp, gamma, cfg.moves.de_jitter, r, st);
    };
    using clock = std::chrono::steady_clock;
    auto t0 = clock::now();
    for (std::size_t s = 0; s < cfg.warmup; ++s) one_step(warm);
    auto t1 = clock::now();
    check_spread(e);
    for (std::size_t s = 0; s < cfg.n_steps; ++s) {
        one_step(samp);
        if ((s + 1) % cfg.thin == 0) {
            for (const auto& w : e.walkers) res.samples.insert(res.samples.end(), w.begin(), w.end());
            ++res.n_kept;
        }
    }
    auto t2 = clock::now();
    check_spread(e);
    res.warmup_seconds = std::chrono::duration<double>(t1 - t0).count();
    res.sampling_seconds = std::chrono::duration<double>(t2 - t1).count();
    res.acceptance = samp.proposed ? static_cast<double>(samp.accepted) / static_cast<double>(samp.proposed) : 0.0;
    res.log_prob_calls = warm.calls + samp.calls;
    res.final_state = std::move(e);
    return res;
}

/// Integrated autocorrelation time of an ensemble chain ([step][walker]),
/// from the walker-averaged autocorrelation with Sokal's automatic window
/// (smallest M with M >= c tau(M)).
inline double integrated_time(const std::vector<double>& chain, std::size_t n_walkers, double c = 5.0) {
    if (n_walkers == 0 || chain.size() % n_walkers) throw std::invalid_argument("integrated_time: bad chain shape");
    const std::size_t n = chain.size() / n_walkers;
    if (n < 2) return 1.0;
    std::vector<std::vector<double>> xs;
    std::vector<double> c0s;
    for (std::size_t w = 0; w < n_walkers; ++w) {
        std::vector<double> x(n);
        double mean = 0;
        for (std::size_t s = 0; s < n; ++s) mean += chain[s * n_walkers + w];
        mean /= static_cast<double>(n);
        double c0 = 0;
        for (std::size_t s = 0; s < n; ++s) {
            x[s] = chain[s * n_walkers + w] - mean;
            c0 += x[s] * x[s];
        }
        if (c0 > 0) {
            xs.push_back(std::move(x));
            c0s.push_back(c0);
        }
    }
    if (xs.empty()) return 1.0;
    double tau = 1;
    for (std::size_t lag = 1; lag < n; ++lag) {
        double rho = 0;
        for (std::size_t w = 0; w < xs.size(); ++w) {
            const auto& x = xs[w];
            double ck = 0;
            for (std::size_t s = 0; s + lag < n; ++s) ck += x[s] * x[s + lag];
            rho += ck / c0s[w];
        }
        tau += 2 * rho / static_cast<double>(xs.size());
        if (static_cast<double>(lag) >= c * tau) break;
    }
    return std::max(tau, 1.0);
}

/// Effective sample size per coordinate: kept draws / tau.
inline std::vector<double> effective_sample_size(const aies_result& res) {
    std::vector<double> out(res.dim);
    for (std::size_t j = 0; j < res.dim; ++j)
        out[j] = static_cast<double>(res.n_kept * res.n_walkers) / integrated_time(res.coordinate(j), res.n_walkers);
    return out;
}

/// Warmup, then post-warmup chunks of `chunk` steps until the smallest
/// per-coordinate ESS reaches `target_ess` or `max_seconds` of sampling time
/// have passed. Results of all chunks are concatenated.
inline aies_result aies_run_until(const log_prob_fn& lp, ensemble init, const aies_config& cfg, double target_ess,
                                  std::size_t chunk, double max_seconds, rng& r) {
    if (chunk == 0 || chunk % cfg.thin) throw std::invalid_argument("aies_run_until: chunk must be a positive multiple of thin");
    aies_config first = cfg;
    first.n_steps = chunk;
    aies_result total = aies_run(lp, std::move(init), first, r);
    aies_config more = cfg;
    more.warmup = 0;
    more.n_steps = chunk;
    double accepted = total.acceptance * static_cast<double>(chunk);
    std::size_t steps = chunk;
    auto min_ess = [&] {
        const auto e = effective_sample_size(total);
        return *std::min_element(e.begin(), e.end());
    };
    while (min_ess() < target_ess && total.sampling_seconds < max_seconds) {
        auto part = aies_run(lp, total.final_state, more, r);
        total.samples.insert(total.samples.end(), part.samples.begin(), part.samples.end());
        total.n_kept += part.n_kept;
        total.sampling_seconds += part.sampling_seconds;
        total.log_prob_calls += part.log_prob_calls;
        accepted += part.acceptance * static_cast<double>(chunk);
        steps += chunk;
        total.final_state = std::move(part.final_state);
    }
    total.acceptance = accepted / static_cast<double>(steps);
    return total;
}

} // namespace simflow::mcmc
