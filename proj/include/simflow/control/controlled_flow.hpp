#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "simflow/ad/adam.hpp"
#include "simflow/ad/network.hpp"
#include "simflow/control/signal.hpp"
#include "simflow/flow/sampler.hpp"
#include "simflow/flow/velocity_model.hpp"
#include "simflow/random.hpp"

namespace simflow::control {

using ad::tensor;

inline constexpr double default_t_gate = 0.8;

/// Control net v^C(t, v, c): residual MLP with GLU time conditioning and a
/// zero-initialized output layer. Input columns [t, v, c].
inline ad::network_spec control_net_spec(std::size_t theta_dim, std::size_t payload_dim,
                                         const std::vector<std::size_t>& widths, std::size_t time_embed_dim = 16) {
    return ad::residual_mlp(1 + theta_dim + payload_dim, theta_dim, widths, ad::activation::elu, time_embed_dim, true);
}

inline ad::network_spec control_net_spec(std::size_t theta_dim, std::size_t payload_dim, std::size_t width = 64,
                                         std::size_t blocks = 3, std::size_t time_embed_dim = 16) {
    return control_net_spec(theta_dim, payload_dim, std::vector<std::size_t>(blocks, width), time_embed_dim);
}

/// Encoder for the learned variant: [S(theta_hat), x_o] -> features, zero head.
inline ad::network_spec learned_encoder_spec(std::size_t x_dim, std::size_t feature_dim, std::size_t width = 64) {
    return ad::residual_mlp(2 * x_dim, feature_dim, {width, width}, ad::activation::elu, 0, true);
}

/// Residual combination: base velocity below the gate, v + v^C above it.
inline tensor controlled_velocity(const tensor& v, const tensor& c, double t, ad::model<float>& control_net,
                                  double t_gate) {
    if (t < t_gate) return v;
    const std::size_t n = v.rows();
    ad::tape<float> tp;
    auto in = ad::concat_cols<float>({tp.constant(tensor({n, 1}, static_cast<float>(t))), tp.constant(v), tp.constant(c)});
    auto dv = control_net.forward(tp, in, false).value();
    tensor out = v;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += dv[i];
    return out;
}

struct call_counter {
    std::size_t calls = 0;
    std::size_t failures = 0;
};

/// Frozen base flow plus control components.
struct controlled_flow {
    flow::velocity_model* base = nullptr;
    flow::standardizer theta_space;  // base network space <-> native theta
    variant kind = variant::gradient;
    ad::model<float> control_net;
    ad::model<float> encoder;  // learned variant only
    double t_gate = default_t_gate;
    signal_config signal;

    std::size_t theta_dim() const { return base->theta_dim; }

    std::size_t payload_dim() const {
        if (kind == variant::learned) return encoder.spec().output_dim;
        return 1 + theta_dim();
    }

    static controlled_flow make(flow::velocity_model& base, flow::standardizer theta_space, variant kind,
                                std::uint64_t seed, const simulator_handle* sim = nullptr, std::size_t width = 64,
                                std::size_t blocks = 3) {
        return make(base, std::move(theta_space), kind, seed, sim, std::vector<std::size_t>(blocks, width));
    }

    static controlled_flow make(flow::velocity_model& base, flow::standardizer theta_space, variant kind,
                                std::uint64_t seed, const simulator_handle* sim, const std::vector<std::size_t>& widths,
                                std::size_t time_embed_dim = 16) {
        controlled_flow cf;
        cf.base = &base;
        cf.theta_space = std::move(theta_space);
        cf.kind = kind;
        const std::size_t d = base.theta_dim;
        if (kind == variant::learned) {
            if (!sim) throw std::invalid_argument("learned control needs a simulator handle for its encoder size");
            cf.encoder = ad::model<float>::build(learned_encoder_spec(sim->x_dim, 1 + d),
                                                 derive_seed(seed, stream::init, 2));
        }
        cf.control_net = ad::model<float>::build(control_net_spec(d, cf.payload_dim(), widths, time_embed_dim),
                                                 derive_seed(seed, stream::init, 1));
        return cf;
    }

    std::vector<ad::parameter<float>*> trainable() {
        std::vector<ad::parameter<float>*> out;
        for (auto& p : control_net.params()) out.push_back(&p);
        if (kind == variant::learned)
            for (auto& p : encoder.params()) out.push_back(&p);
        return out;
    }
};

/// Learned-variant features Enc(stopgrad(S(theta_hat)), x_o) on `tp`. The
/// simulator output enters as a constant, so no gradient reaches theta_hat.
inline ad::var<float> learned_features(ad::tape<float>& tp, ad::model<float>& encoder, const tensor& sim_x,
                                       const tensor& x_o, bool trainable) {
    auto in = ad::concat_cols<float>({tp.constant(sim_x), tp.constant(x_o)});
    return encoder.forward(tp, in, trainable);
}

/// Base velocity at (t, theta_t) for a batch with per-row times. With
/// self-conditioning the slot comes from a first pass with an empty slot.
inline tensor base_velocity(flow::velocity_model& m, const std::vector<float>& t, const tensor& theta, const tensor& x) {
    if (!m.self_conditioning) return m.evaluate(t, theta, nullptr, x);
    auto v0 = m.evaluate(t, theta, nullptr, x);
    tensor slot = theta;
    const std::size_t d = m.theta_dim;
    for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += (1.0f - t[i / d]) * v0[i];
    return m.evaluate(t, theta, &slot, x);
}

/// Per-row simulator payloads for one-step estimates `theta_hat` (network
/// space). Rows whose simulation fails get the zero payload.
struct payload_inputs {
    tensor payload;    // gradient / zero variants
    tensor sim_x;      // learned variant: simulated observation, network space
    std::vector<bool> failed;
};

inline payload_inputs compute_payloads(const controlled_flow& cf, const simulator_handle& sim, const tensor& theta_hat,
                                       const std::vector<param_vector>& x_o_native,
                                       const std::vector<std::vector<double>>& z, call_counter& counter) {
    const std::size_t n = theta_hat.rows(), d = theta_hat.cols();
    payload_inputs out;
    out.failed.assign(n, false);
    if (cf.kind == variant::learned) {
        out.sim_x = tensor({n, sim.x_dim});
    } else {
        out.payload = tensor({n, cf.payload_dim()});
    }
    if (cf.kind == variant::zero || cf.kind == variant::none) return out;
    for (std::size_t r = 0; r < n; ++r) {
        const auto& xo = x_o_native.size() == 1 ? x_o_native[0] : x_o_native[r];
        ++counter.calls;
        try {
            const auto th = to_native(cf.theta_space, theta_hat.data().data() + r * d);
            for (double v : th)
                if (!std::isfinite(v)) throw simulator_failure("non-finite one-step estimate");
            if (cf.kind == variant::gradient) {
                const auto cg = gradient_control(sim, th, xo, z[r]);
                const auto p = gradient_payload(cg, th, cf.theta_space, cf.signal);
                std::copy(p.begin(), p.end(), out.payload.data().begin() + r * p.size());
            } else {
                const auto xs = sim.simulate(th, z[r]);
                sim.x_to_network(xs, out.sim_x.data().data() + r * sim.x_dim);
            }
        } catch (const simulator_failure&) {
            ++counter.failures;
            out.failed[r] = true;
            if (cf.kind == variant::learned)
                std::fill_n(out.sim_x.data().begin() + r * sim.x_dim, sim.x_dim, 0.0f);
        }
    }
    return out;
}

/// Training pairs for finetuning: network-space theta and x plus native
/// observations for the cost.
struct control_dataset {
    tensor theta;
    tensor x;
    std::vector<param_vector> x_native;
};

struct finetune_config {
    std::size_t steps = 1000;
    std::size_t batch = 64;
    ad::adam_config adam;
    double sigma_min = 1e-4;
    std::uint64_t seed = 0;
    std::size_t record_every = 50;
};

struct finetune_record {
    std::size_t step = 0;
    double loss = 0;
};

struct finetune_result {
    std::vector<finetune_record> history;
    call_counter counter;
    std::uint64_t base_checksum = 0;
};

/// Trains the control components with the base frozen: t ~ U(t_gate, 1), OT
/// path sample, stop-gradient base velocity, one-step estimate, simulator
/// payload with fresh noise per sample, loss ||v + v^C - u||^2.
inline finetune_result finetune_with_controls(controlled_flow& cf, const simulator_handle& sim,
                                              const control_dataset& data, const finetune_config& cfg,
                                              ad::adam_state<float>& opt) {
    auto& base = *cf.base;
    const std::size_t n = data.theta.rows(), d = base.theta_dim;
    if (n == 0 || data.x.rows() != n || data.x_native.size() != n)
        throw std::invalid_argument("finetune: empty or misaligned dataset");
    if (sim.theta_dim != d) throw std::invalid_argument("finetune: simulator/base theta dimension mismatch");
    if (cf.kind == variant::gradient && !sim.differentiable)
        throw std::invalid_argument("finetune: gradient controls need a differentiable simulator");
    finetune_result res;
    res.base_checksum = base.net.checksum();
    auto params = cf.trainable();
    std::vector<ad::parameter<float>> view;
    double acc = 0;
    std::size_t acc_n = 0;
    for (std::size_t step = opt.step; step < cfg.steps; ++step) {
        rng r(derive_seed(cfg.seed, stream::finetune, step));
        const std::size_t b = cfg.batch;
        std::vector<std::size_t> idx(b);
        for (auto& i : idx) i = r.index(n);
        const tensor th1 = flow::take_rows(data.theta, idx);
        const tensor x = flow::take_rows(data.x, idx);
        std::vector<param_vector> xo(b);
        for (std::size_t k = 0; k < b; ++k) xo[k] = data.x_native[idx[k]];
        std::vector<float> t(b);
        tensor theta_t({b, d}), u({b, d});
        std::vector<std::vector<double>> zsim(b);
        for (std::size_t k = 0; k < b; ++k) {
            const double tk = cf.t_gate + (1.0 - cf.t_gate) * r.uniform();
            t[k] = static_cast<float>(tk);
            for (std::size_t j = 0; j < d; ++j) {
                const double z = r.normal(), x1 = th1[k * d + j];
                theta_t[k * d + j] = static_cast<float>(tk * x1 + (1.0 - (1.0 - cfg.sigma_min) * tk) * z);
                u[k * d + j] = static_cast<float>(x1 - (1.0 - cfg.sigma_min) * z);
            }
            zsim[k] = r.normals(sim.noise_dim);
        }
        const tensor v = base_velocity(base, t, theta_t, x);
        tensor theta_hat = theta_t;
        for (std::size_t i = 0; i < theta_hat.size(); ++i) theta_hat[i] += (1.0f - t[i / d]) * v[i];
        auto pin = compute_payloads(cf, sim, theta_hat, xo, zsim, res.counter);

        for (auto* p : params) p->grad = tensor(p->value.shape());
        ad::tape<float> tp;
        ad::var<float> c;
        if (cf.kind == variant::learned)
            c = learned_features(tp, cf.encoder, pin.sim_x, x, true);
        else
            c = tp.constant(pin.payload);
        auto vin = tp.constant(v);
        auto in = ad::concat_cols<float>({tp.constant(flow::column(t)), vin, c});
        auto vt = ad::add(vin, cf.control_net.forward(tp, in, true));
        auto loss = ad::mean(ad::row_sum(ad::square(ad::sub(vt, tp.constant(u)))));
        tp.backward(loss);
        view.clear();
        for (auto* p : params) view.push_back(*p);
        ad::adam_step(view, opt, cfg.adam);
        for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = view[i].value;
        acc += loss.value()[0];
        ++acc_n;
        if ((step + 1) % cfg.record_every == 0 || step + 1 == cfg.steps) {
            res.history.push_back({step + 1, acc / static_cast<double>(acc_n)});
            acc = 0;
            acc_n = 0;
        }
    }
    if (base.net.checksum() != res.base_checksum) throw std::logic_error("finetune: base flow parameters changed");
    return res;
}

/// Euler sampling of the controlled field for one observation. Each
/// trajectory draws one simulator noise block and keeps it for all steps;
/// below the gate the base field is used and the simulator is not called.
inline tensor sample_with_controls(controlled_flow& cf, const simulator_handle& sim, const tensor& x_o,
                                   const param_vector& x_o_native, std::size_t n, std::size_t n_steps, rng& r,
                                   call_counter& counter, const tensor* theta0 = nullptr) {
    auto& base = *cf.base;
    const std::size_t d = base.theta_dim;
    tensor theta = theta0 ? *theta0 : flow::source_samples(n, d, r);
    std::vector<std::vector<double>> zsim(n);
    for (auto& z : zsim) z = r.normals(sim.noise_dim);
    tensor feats;
    const bool enc = base.has_encoder();
    if (enc) feats = base.features(x_o);
    tensor slot({n, d});
    const std::vector<param_vector> xo{x_o_native};
    const double h = 1.0 / static_cast<double>(n_steps);
    for (std::size_t k = 0; k < n_steps; ++k) {
        const double t = static_cast<double>(k) * h;
        std::vector<float> tt(n, static_cast<float>(t));
        tensor v = base.evaluate(tt, theta, base.self_conditioning ? &slot : nullptr, x_o, enc ? &feats : nullptr);
        tensor theta_hat = theta;
        for (std::size_t i = 0; i < theta_hat.size(); ++i) theta_hat[i] += static_cast<float>(1.0 - t) * v[i];
        if (base.self_conditioning) slot = theta_hat;
        tensor vt = v;
        if (cf.kind != variant::none && t >= cf.t_gate) {
            auto pin = compute_payloads(cf, sim, theta_hat, xo, zsim, counter);
            tensor c;
            if (cf.kind == variant::learned) {
                ad::tape<float> tp;
                c = learned_features(tp, cf.encoder, pin.sim_x, flow::repeat_rows(x_o, n), false).value();
            } else {
                c = std::move(pin.payload);
            }
            vt = controlled_velocity(v, c, t, cf.control_net, cf.t_gate);
        }
        for (std::size_t i = 0; i < theta.size(); ++i) theta[i] += static_cast<float>(h * vt[i]);
        if (!theta.all_finite()) throw numerical_error("sample_with_controls: non-finite state at step " + std::to_string(k));
    }
    return theta;
}

/// Number of grid points t_k = k / n_steps with t_k >= t_gate.
inline std::size_t gated_steps(std::size_t n_steps, double t_gate) {
    std::size_t c = 0;
    for (std::size_t k = 0; k < n_steps; ++k)
        if (static_cast<double>(k) / static_cast<double>(n_steps) >= t_gate) ++c;
    return c;
}

struct self_conditioning_config {
    bool force_zero_slot = false;  // degenerate run equal to plain CFM
    double probability = 0.5;
};

/// Self-conditioned CFM: a stop-gradient first pass with an empty slot gives
/// the one-step estimate; with probability 1/2 (s > 0.5) it fills the slot for
/// the trained pass.
inline void train_self_conditioned(flow::velocity_model& m, const tensor& theta, const tensor& x,
                                   const tensor& val_theta, const tensor& val_x, const flow::train_config& cfg,
                                   flow::train_state& st, const self_conditioning_config& sc = {},
                                   std::size_t stop_at = 0,
                                   const std::function<void(const flow::loss_record&)>& on_record = {},
                                   std::vector<bool>* slot_used = nullptr) {
    if (!m.self_conditioning) throw std::invalid_argument("train_self_conditioned: model has no self-conditioning slot");
    m.check();
    rng vr(derive_seed(cfg.seed, stream::train, ~0ULL));
    const auto val =
        flow::draw_path_batch(val_theta, val_x, std::min<std::size_t>(val_theta.rows(), 1024), vr, cfg.path, m.mode);
    const std::size_t d = m.theta_dim;
    flow::run_training(
        m.net.params(), st, cfg,
        [&](rng& r) { return flow::draw_path_batch(theta, x, cfg.batch, r, cfg.path, m.mode); },
        [&](ad::tape<float>& tp, const flow::path_batch& b, rng& r) {
            const double s = r.uniform();
            const bool fill = !sc.force_zero_slot && s > 1.0 - sc.probability;
            if (slot_used) slot_used->push_back(fill);
            if (!fill) return flow::cfm_loss(m, tp, b);
            ad::tape<float> first;
            auto v0 = m.velocity(first, b.t, first.constant(b.theta_t), nullptr, b.x, false);
            const auto vv = ad::stop_gradient(v0).value();
            tensor slot = b.theta_t;
            for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += (1.0f - b.t[i / d]) * vv[i];
            return flow::cfm_loss(m, tp, b, true, &slot);
        },
        [&] {
            ad::tape<float> tp;
            return static_cast<double>(flow::cfm_loss(m, tp, val, false).value()[0]);
        },
        stop_at, on_record);
}

} // namespace simflow::control
