#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "simflow/ad/adam.hpp"
#include "simflow/ad/network.hpp"
#include "simflow/flow/path.hpp"
#include "simflow/random.hpp"

namespace simflow::flow {

using ad::tensor;

enum class prediction { velocity, x_prediction };

/// Largest training time used with x-prediction; the velocity conversion
/// divides by (1 - t).
inline constexpr double x_prediction_t_max = 0.99;

inline tensor repeat_rows(const tensor& x, std::size_t n) {
    if (x.rows() == n) return x;
    if (x.rows() != 1) throw std::invalid_argument("repeat_rows: cannot broadcast " + std::to_string(x.rows()) + " rows");
    tensor out({n, x.cols()});
    for (std::size_t r = 0; r < n; ++r) std::copy(x.data().begin(), x.data().end(), out.data().begin() + r * x.cols());
    return out;
}

inline tensor take_rows(const tensor& x, const std::vector<std::size_t>& idx) {
    tensor out({idx.size(), x.cols()});
    const std::size_t c = x.cols();
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy_n(x.data().begin() + idx[r] * c, c, out.data().begin() + r * c);
    return out;
}

inline tensor column(const std::vector<float>& v) {
    return tensor({v.size(), 1}, std::vector<float>(v.begin(), v.end()));
}

/// v_phi(t, theta, x) with optional self-conditioning slot. Network input
/// columns: [t, theta, slot, observation]; image observations come last so
/// the network's encoder can consume them.
struct velocity_model {
    ad::model<float> net;
    std::size_t theta_dim = 0;
    std::size_t obs_dim = 0;
    prediction mode = prediction::velocity;
    bool self_conditioning = false;

    std::size_t slot_dim() const { return self_conditioning ? theta_dim : 0; }
    std::size_t image_dim() const { return net.spec().image_size(); }
    std::size_t flat_obs_dim() const { return obs_dim - image_dim(); }
    bool has_encoder() const { return image_dim() > 0; }

    static std::size_t input_dim(std::size_t theta_dim, std::size_t flat_obs_dim, bool self_conditioning) {
        return 1 + theta_dim + (self_conditioning ? theta_dim : 0) + flat_obs_dim;
    }

    void check() const {
        const auto& s = net.spec();
        if (s.output_dim != theta_dim) throw std::invalid_argument("velocity_model: output dim != theta dim");
        if (s.input_dim != input_dim(theta_dim, flat_obs_dim(), self_conditioning))
            throw std::invalid_argument("velocity_model: network input dim " + std::to_string(s.input_dim) +
                                        " inconsistent with theta/slot/observation dims");
    }

    /// Encoder features for observations (image models only).
    ad::var<float> encode(ad::tape<float>& t, const tensor& x, bool trainable) {
        auto img = ad::slice_cols(t.constant(x), flat_obs_dim(), image_dim());
        return net.encode(t, img, trainable);
    }

    /// Velocity for a batch. `x` has one row per sample or a single row that
    /// is broadcast. With precomputed `features` only the flat observation
    /// columns of `x` are read.
    ad::var<float> velocity(ad::tape<float>& tp, const std::vector<float>& t, ad::var<float> theta, const tensor* slot,
                            const tensor& x, bool trainable, ad::var<float> features = {}) {
        const std::size_t n = t.size();
        if (theta.value().rows() != n || theta.value().cols() != theta_dim)
            throw std::invalid_argument("velocity_model: theta batch shape " + ad::shape_string(theta.shape()));
        std::vector<ad::var<float>> parts{tp.constant(column(t)), theta};
        if (self_conditioning) {
            if (slot)
                parts.push_back(tp.constant(*slot));
            else
                parts.push_back(tp.constant(tensor({n, theta_dim})));
        }
        ad::var<float> out;
        if (has_encoder()) {
            if (!features.valid()) features = encode(tp, repeat_rows(x, n), trainable);
            if (flat_obs_dim() > 0) {
                tensor xf({x.rows(), flat_obs_dim()});
                for (std::size_t r = 0; r < x.rows(); ++r)
                    std::copy_n(x.data().begin() + r * x.cols(), flat_obs_dim(), xf.data().begin() + r * flat_obs_dim());
                parts.push_back(tp.constant(repeat_rows(xf, n)));
            }
            out = net.head(tp, ad::concat_cols(parts), features, trainable);
        } else {
            if (x.cols() != obs_dim) throw std::invalid_argument("velocity_model: observation width mismatch");
            if (obs_dim > 0) parts.push_back(tp.constant(repeat_rows(x, n)));
            out = net.forward(tp, ad::concat_cols(parts), trainable);
        }
        if (mode == prediction::x_prediction) {
            std::vector<float> w(n);
            for (std::size_t i = 0; i < n; ++i) {
                if (t[i] >= 1.0f - 1e-6f) throw std::domain_error("x-prediction velocity requested at t = 1");
                w[i] = 1.0f / (1.0f - t[i]);
            }
            out = ad::mul(ad::sub(out, theta), tp.constant(column(w)));
        }
        return out;
    }

    tensor evaluate(const std::vector<float>& t, const tensor& theta, const tensor* slot, const tensor& x,
                    const tensor* features = nullptr) {
        ad::tape<float> tp;
        ad::var<float> f;
        if (features) f = tp.constant(*features);
        return velocity(tp, t, tp.constant(theta), slot, x, false, f).value();
    }

    /// Encoder features as a plain tensor, for reuse across Euler steps.
    tensor features(const tensor& x) {
        ad::tape<float> tp;
        return encode(tp, x, false).value();
    }
};

/// One minibatch of CFM training tuples.
struct path_batch {
    std::vector<float> t;
    tensor theta_t, u, x;
    tensor theta1;  // kept for one-step estimates and controls
};

/// Draws rows, times and noise for a batch. With the independent coupling,
/// theta0 is another training row (the prior marginal).
inline path_batch draw_path_batch(const tensor& theta, const tensor& x, std::size_t batch, rng& r,
                                  const path_config& path, prediction mode = prediction::velocity) {
    const std::size_t n = theta.rows(), d = theta.cols();
    if (n == 0 || x.rows() != n) throw std::invalid_argument("draw_path_batch: empty or misaligned dataset");
    std::vector<std::size_t> idx(batch);
    for (auto& i : idx) i = r.index(n);
    path_batch b;
    b.theta1 = take_rows(theta, idx);
    b.x = take_rows(x, idx);
    b.theta_t = tensor({batch, d});
    b.u = tensor({batch, d});
    b.t.resize(batch);
    param_vector th1(d), th0(d), z(d);
    for (std::size_t k = 0; k < batch; ++k) {
        double t = sample_time(path.alpha, r.uniform_open());
        if (mode == prediction::x_prediction) t = std::min(t, x_prediction_t_max);
        for (std::size_t j = 0; j < d; ++j) {
            th1[j] = b.theta1[k * d + j];
            z[j] = r.normal();
        }
        path_sample s;
        if (path.kind == path_kind::conditional_ot) {
            s = sample_ot_path(th1, t, z, path.sigma_min);
        } else {
            const std::size_t o = r.index(n);
            for (std::size_t j = 0; j < d; ++j) th0[j] = theta[o * d + j];
            s = sample_ic_path(th0, th1, t, z, path.sigma);
        }
        b.t[k] = static_cast<float>(t);
        for (std::size_t j = 0; j < d; ++j) {
            b.theta_t[k * d + j] = static_cast<float>(s.theta_t[j]);
            b.u[k * d + j] = static_cast<float>(s.u[j]);
        }
    }
    return b;
}

/// Mean over the batch of the squared velocity error (summed over
/// coordinates); x-prediction terms carry the extra weight 1 / (1 - t).
inline ad::var<float> cfm_loss(velocity_model& m, ad::tape<float>& tp, const path_batch& b, bool trainable = true,
                               const tensor* slot = nullptr) {
    if (b.t.empty()) throw std::invalid_argument("cfm_loss: empty batch");
    auto v = m.velocity(tp, b.t, tp.constant(b.theta_t), slot, b.x, trainable);
    auto sq = ad::row_sum(ad::square(ad::sub(v, tp.constant(b.u))));
    if (m.mode == prediction::x_prediction) {
        std::vector<float> w(b.t.size());
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = 1.0f / (1.0f - b.t[i]);
        sq = ad::mul(sq, tp.constant(column(w)));
    }
    auto loss = ad::mean(sq);
    if (!std::isfinite(loss.value()[0])) throw numerical_error("cfm_loss: non-finite loss");
    return loss;
}

struct train_config {
    std::size_t steps = 1000;
    std::size_t batch = 64;
    ad::adam_config adam;
    path_config path;
    std::uint64_t seed = 0;
    std::size_t eval_every = 100;
    double divergence_factor = 10.0;
};

struct loss_record {
    std::size_t step = 0;
    double train_loss = 0;  // mean since the previous record
    double val_loss = 0;
};

struct train_state {
    ad::adam_state<float> opt;
    std::size_t step = 0;
    double initial_val = std::numeric_limits<double>::quiet_NaN();
    std::vector<loss_record> history;
    double loss_sum = 0;  // train losses since the last record
    std::size_t loss_count = 0;
};

using batch_fn = std::function<path_batch(rng&)>;
using loss_fn = std::function<ad::var<float>(ad::tape<float>&, const path_batch&, rng&)>;
using eval_fn = std::function<double()>;

/// Generic minibatch loop. The RNG of step k is derived from (seed, k) alone,
/// so a run resumed from a saved state reproduces an uninterrupted one.
/// Aborts with numerical_error when the validation loss exceeds
/// divergence_factor times its initial value.
inline void run_training(std::vector<ad::parameter<float>>& params, train_state& st, const train_config& cfg,
                         const batch_fn& next_batch, const loss_fn& loss, const eval_fn& validate,
                         std::size_t stop_at = 0, const std::function<void(const loss_record&)>& on_record = {}) {
    if (stop_at == 0 || stop_at > cfg.steps) stop_at = cfg.steps;
    if (std::isnan(st.initial_val)) st.initial_val = validate();
    while (st.step < stop_at) {
        rng r(derive_seed(cfg.seed, stream::train, st.step));
        auto b = next_batch(r);
        for (auto& p : params) p.grad = tensor(p.value.shape());
        ad::tape<float> tp;
        auto l = loss(tp, b, r);
        tp.backward(l);
        ad::adam_step(params, st.opt, cfg.adam);
        st.loss_sum += l.value()[0];
        ++st.loss_count;
        ++st.step;
        if (st.step % cfg.eval_every == 0 || st.step == cfg.steps) {
            loss_record rec{st.step, st.loss_sum / static_cast<double>(st.loss_count), validate()};
            st.loss_sum = 0;
            st.loss_count = 0;
            st.history.push_back(rec);
            if (on_record) on_record(rec);
            if (!(rec.val_loss <= cfg.divergence_factor * st.initial_val))
                throw numerical_error("training diverged at step " + std::to_string(st.step) + ": validation loss " +
                                      std::to_string(rec.val_loss) + " vs initial " + std::to_string(st.initial_val));
        }
    }
}

/// Plain CFM training of `m` on (theta, x) rows in network space.
inline void train_cfm(velocity_model& m, const tensor& theta, const tensor& x, const tensor& val_theta,
                      const tensor& val_x, const train_config& cfg, train_state& st, std::size_t stop_at = 0,
                      const std::function<void(const loss_record&)>& on_record = {}) {
    m.check();
    rng vr(derive_seed(cfg.seed, stream::train, ~0ULL));
    const auto val = draw_path_batch(val_theta, val_x, std::min<std::size_t>(val_theta.rows(), 1024), vr, cfg.path, m.mode);
    run_training(
        m.net.params(), st, cfg,
        [&](rng& r) { return draw_path_batch(theta, x, cfg.batch, r, cfg.path, m.mode); },
        [&](ad::tape<float>& tp, const path_batch& b, rng&) { return cfm_loss(m, tp, b); },
        [&] {
            ad::tape<float> tp;
            return static_cast<double>(cfm_loss(m, tp, val, false).value()[0]);
        },
        stop_at, on_record);
}

} // namespace simflow::flow
