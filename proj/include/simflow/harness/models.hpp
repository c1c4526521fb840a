#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "simflow/ad/checkpoint.hpp"
#include "simflow/control/controlled_flow.hpp"
#include "simflow/flow/sampler.hpp"
#include "simflow/flow/transform.hpp"
#include "simflow/harness/config.hpp"
#include "simflow/lens/lens_task.hpp"
#include "simflow/tasks/task.hpp"

namespace simflow::harness {

using tasks::param_vector;

/// Observation -> network space: z-scoring (after optional logs) for vector
/// observations, asinh(x / background) / 4 for lensing images.
struct obs_transform {
    std::string kind = "standardize";
    flow::standardizer st;
    double background = 1.0;
    std::size_t dim = 0;

    static obs_transform fit(const tasks::task& t, const ad::tensor& x_raw) {
        obs_transform o;
        o.dim = t.info().x_dim;
        if (const auto* lt = dynamic_cast<const lens::lens_task*>(&t)) {
            o.kind = "asinh";
            o.background = lt->inst().background_rms;
        } else {
            o.st = flow::standardizer::fit(x_raw, t.info().x_log);
        }
        return o;
    }

    /// Throws simulator_failure when a value leaves the transform's domain.
    void forward(const param_vector& x, float* out) const {
        if (x.size() != dim) throw std::invalid_argument("obs_transform: observation width mismatch");
        for (std::size_t j = 0; j < dim; ++j) {
            const double v = kind == "asinh" ? static_cast<double>(lens::network_pixel(x[j], background)) : st.forward1(j, x[j]);
            if (!std::isfinite(v)) throw tasks::simulator_failure("observation outside the transform domain");
            out[j] = static_cast<float>(v);
        }
    }

    ad::tensor forward(const ad::tensor& raw) const {
        if (raw.cols() != dim) throw std::invalid_argument("obs_transform: column count mismatch");
        ad::tensor out({raw.rows(), dim});
        param_vector row(dim);
        for (std::size_t r = 0; r < raw.rows(); ++r) {
            for (std::size_t j = 0; j < dim; ++j) row[j] = raw[r * dim + j];
            try {
                forward(row, out.data().data() + r * dim);
            } catch (const tasks::simulator_failure&) {
                throw numerical_error("obs_transform: row " + std::to_string(r) + " outside the transform domain");
            }
        }
        return out;
    }

    ad::tensor row(const param_vector& x) const {
        ad::tensor out({1, dim});
        forward(x, out.data().data());
        return out;
    }

    json to_json() const {
        json j{{"kind", kind}, {"dim", dim}};
        if (kind == "asinh") j["background"] = background;
        else j["standardizer"] = st.to_json();
        return j;
    }

    static obs_transform from_json(const json& j) {
        obs_transform o;
        o.kind = j.at("kind");
        o.dim = j.at("dim");
        if (o.kind == "asinh") o.background = j.at("background");
        else o.st = flow::standardizer::from_json(j.at("standardizer"));
        return o;
    }
};

/// Base velocity network for a task. Image tasks get a strided conv encoder
/// whose features (one per parameter) join [t, theta_t, slot] in the head.
inline ad::network_spec base_network_spec(const network_section& n, const tasks::task& t) {
    const std::size_t d = t.info().theta_dim;
    if (const auto* lt = dynamic_cast<const lens::lens_task*>(&t)) {
        const std::size_t in = flow::velocity_model::input_dim(d, 0, n.self_conditioning);
        auto s = ad::residual_mlp(in + d, d, n.widths, ad::activation::elu, n.time_embed_dim);
        s.input_dim = in;
        s.image_h = s.image_w = lt->inst().size;
        s.image_c = 1;
        std::size_t side = lt->inst().size, ch = 1;
        for (std::size_t k = 0; k < n.conv_blocks; ++k) {
            s.encoder.push_back(ad::conv(ch, n.conv_channels, 2, n.groups));
            ch = n.conv_channels;
            side = (side - 1) / 2 + 1;
        }
        s.encoder.push_back(ad::dense(side * side * ch, d));
        return s;
    }
    const std::size_t in = flow::velocity_model::input_dim(d, t.info().x_dim, n.self_conditioning);
    return ad::residual_mlp(in, d, n.widths, ad::activation::elu, n.time_embed_dim);
}

/// Native-space simulator handle whose observations pass through `x_space`.
inline control::simulator_handle make_handle(const tasks::task& t, const obs_transform& x_space) {
    const auto& info = t.info();
    control::simulator_handle h;
    h.theta_dim = info.theta_dim;
    h.x_dim = info.x_dim;
    h.noise_dim = info.noise_dim;
    h.differentiable = info.differentiable;
    h.simulate = [&t](const param_vector& th, const std::vector<double>& z) { return t.simulate(th, z); };
    h.cost_and_gradient = [&t](const param_vector& th, const std::vector<double>& z, const param_vector& x_o) {
        return t.cost_and_gradient(th, z, x_o);
    };
    h.x_to_network = [x_space](const param_vector& x, float* out) { x_space.forward(x, out); };
    return h;
}

/// Trained base flow with its coordinate maps, as stored in a checkpoint.
struct flow_bundle {
    flow::velocity_model model;
    flow::standardizer theta_space;
    obs_transform x_space;
    std::string task;
    json meta = json::object();  // training progress and provenance

    ad::checkpoint to_checkpoint(std::uint64_t seed) const {
        ad::checkpoint ck;
        ck.net = model.net;
        ck.seed = seed;
        ck.meta = meta;
        ck.meta["task"] = task;
        ck.meta["theta_dim"] = model.theta_dim;
        ck.meta["obs_dim"] = model.obs_dim;
        ck.meta["prediction"] = model.mode == flow::prediction::x_prediction ? "x_prediction" : "velocity";
        ck.meta["self_conditioning"] = model.self_conditioning;
        ck.meta["theta_space"] = theta_space.to_json();
        ck.meta["x_space"] = x_space.to_json();
        return ck;
    }

    static flow_bundle from_checkpoint(ad::checkpoint ck) {
        flow_bundle b;
        try {
            b.task = ck.meta.at("task");
            b.model.theta_dim = ck.meta.at("theta_dim");
            b.model.obs_dim = ck.meta.at("obs_dim");
            b.model.mode = ck.meta.at("prediction") == "x_prediction" ? flow::prediction::x_prediction
                                                                       : flow::prediction::velocity;
            b.model.self_conditioning = ck.meta.at("self_conditioning");
            b.theta_space = flow::standardizer::from_json(ck.meta.at("theta_space"));
            b.x_space = obs_transform::from_json(ck.meta.at("x_space"));
        } catch (const json::exception& e) {
            throw artifact_error(std::string("checkpoint metadata incomplete: ") + e.what());
        }
        b.model.net = std::move(ck.net);
        b.meta = std::move(ck.meta);
        b.model.check();
        return b;
    }

    static flow_bundle load(const std::string& path) {
        try {
            return from_checkpoint(ad::checkpoint::load(path));
        } catch (const artifact_error&) {
            throw;
        } catch (const std::runtime_error& e) {
            throw artifact_error(e.what());
        }
    }

    std::string checksum() const { return ad::hex64(model.net.checksum()); }
};

/// Draws native-space posterior samples from a base flow, optionally with a
/// trained control network. Holds the base by pointer-stable storage since the
/// controlled flow refers to it.
class posterior_sampler {
public:
    posterior_sampler(std::unique_ptr<flow_bundle> base, const tasks::task& task)
        : base_(std::move(base)), task_(&task), sim_(make_handle(task, base_->x_space)) {
        if (base_->model.theta_dim != task.info().theta_dim || base_->x_space.dim != task.info().x_dim)
            throw config_error("checkpoint dimensions do not match task " + task.info().name);
    }

    /// Attaches a control checkpoint trained against this base.
    void attach_control(const std::string& control_path) {
        ad::checkpoint ck;
        try {
            ck = ad::checkpoint::load(control_path);
        } catch (const std::runtime_error& e) {
            throw artifact_error(e.what());
        }
        if (ck.base_hash != base_->checksum())
            throw artifact_error("control checkpoint " + control_path + " was trained against base " + ck.base_hash +
                                 ", loaded base is " + base_->checksum());
        const auto kind = control::parse_variant(ck.meta.at("variant"));
        control::controlled_flow cf;
        cf.base = &base_->model;
        cf.theta_space = base_->theta_space;
        cf.kind = kind;
        cf.t_gate = ck.meta.at("t_gate");
        cf.signal.compress = ck.meta.value("compress_cost", true);
        cf.signal.grad_clip = ck.meta.value("grad_clip", 1e3);
        cf.control_net = std::move(ck.net);
        if (kind == control::variant::learned) {
            const std::string enc = control_path.substr(0, control_path.size() - 5) + "_encoder.ckpt";
            try {
                cf.encoder = ad::checkpoint::load(enc).net;
            } catch (const std::runtime_error& e) {
                throw artifact_error(e.what());
            }
        }
        const std::size_t d = base_->model.theta_dim;
        if (cf.control_net.spec().output_dim != d || cf.control_net.spec().input_dim != 1 + d + cf.payload_dim())
            throw config_error("control network dimensions do not match the base flow");
        control_ = std::move(cf);
    }

    bool controlled() const { return control_.has_value(); }
    const control::controlled_flow& control() const { return *control_; }
    flow_bundle& base() { return *base_; }
    const control::simulator_handle& handle() const { return sim_; }

    std::vector<param_vector> sample(const param_vector& x_native, std::size_t n, std::size_t steps, rng& r,
                                     control::call_counter& counter) {
        const ad::tensor x = base_->x_space.row(x_native);
        ad::tensor theta = control_ ? control::sample_with_controls(*control_, sim_, x, x_native, n, steps, r, counter)
                                    : flow::sample_posterior(base_->model, x, n, steps, r);
        const ad::tensor native = base_->theta_space.inverse(theta);
        const std::size_t d = native.cols();
        std::vector<param_vector> out(n, param_vector(d));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) out[i][j] = native[i * d + j];
        return out;
    }

private:
    std::unique_ptr<flow_bundle> base_;
    const tasks::task* task_;
    control::simulator_handle sim_;
    std::optional<control::controlled_flow> control_;
};

} // namespace simflow::harness
