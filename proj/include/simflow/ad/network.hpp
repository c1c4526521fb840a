#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "simflow/ad/tape.hpp"
#include "simflow/random.hpp"

namespace simflow::ad {

enum class layer_kind { dense, residual_block, conv_block, glu_time_conditioning };
enum class activation { none, elu, silu };

struct layer_spec {
    layer_kind kind = layer_kind::dense;
    std::size_t in = 0;
    std::size_t out = 0;
    activation act = activation::elu;
    bool time_conditioned = false;  // residual blocks: GLU gate driven by the time embedding
    std::size_t stride = 2;         // conv blocks
    std::size_t groups = 4;         // conv blocks: group-norm groups

    friend bool operator==(const layer_spec&, const layer_spec&) = default;
};

/// Column 0 of the flat input is always t. When `image_h > 0` the last
/// image_h*image_w*image_c input columns are an NHWC image that runs through
/// `encoder` first; its output is appended to the remaining columns before
/// `layers`.
struct network_spec {
    std::size_t input_dim = 0;  // flat columns excluding the image
    std::size_t output_dim = 0;
    std::size_t time_embed_dim = 0;
    std::size_t image_h = 0, image_w = 0, image_c = 0;
    std::vector<layer_spec> encoder;
    std::vector<layer_spec> layers;
    bool zero_init_output = false;

    std::size_t image_size() const { return image_h * image_w * image_c; }
    std::size_t total_input() const { return input_dim + image_size(); }

    friend bool operator==(const network_spec&, const network_spec&) = default;
};

inline layer_spec dense(std::size_t in, std::size_t out, activation act = activation::none) {
    return layer_spec{layer_kind::dense, in, out, act};
}

inline layer_spec residual(std::size_t width, activation act = activation::elu, bool time_conditioned = false) {
    return layer_spec{layer_kind::residual_block, width, width, act, time_conditioned};
}

inline layer_spec conv(std::size_t in_ch, std::size_t out_ch, std::size_t stride = 2, std::size_t groups = 4) {
    return layer_spec{layer_kind::conv_block, in_ch, out_ch, activation::silu, false, stride, groups};
}

/// Residual MLP: dense into the first width, residual blocks, dense resizes
/// between differing widths, dense to the output.
inline network_spec residual_mlp(std::size_t input_dim, std::size_t output_dim, const std::vector<std::size_t>& widths,
                                 activation act = activation::elu, std::size_t time_embed_dim = 0,
                                 bool zero_init_output = false) {
    if (widths.empty()) throw std::invalid_argument("residual_mlp: no widths");
    network_spec s;
    s.input_dim = input_dim;
    s.output_dim = output_dim;
    s.time_embed_dim = time_embed_dim;
    s.zero_init_output = zero_init_output;
    s.layers.push_back(dense(input_dim, widths.front()));
    for (std::size_t i = 0; i < widths.size(); ++i) {
        if (i > 0 && widths[i] != widths[i - 1]) s.layers.push_back(dense(widths[i - 1], widths[i]));
        s.layers.push_back(residual(widths[i], act, time_embed_dim > 0));
    }
    s.layers.push_back(dense(widths.back(), output_dim));
    return s;
}

/// Sinusoidal embedding of t, geometric frequencies from 1 to 1000.
template <class Real>
basic_tensor<Real> time_embedding(const basic_tensor<Real>& input, std::size_t dim) {
    const std::size_t n = input.rows(), c = input.cols();
    basic_tensor<Real> out({n, dim});
    const std::size_t half = dim / 2;
    for (std::size_t r = 0; r < n; ++r) {
        const double t = input[r * c];
        for (std::size_t k = 0; k < half; ++k) {
            const double w = half > 1 ? std::exp(std::log(1000.0) * static_cast<double>(k) / (half - 1)) : 1.0;
            out[r * dim + k] = static_cast<Real>(std::sin(w * t));
            out[r * dim + half + k] = static_cast<Real>(std::cos(w * t));
        }
        if (dim % 2) out[r * dim + dim - 1] = static_cast<Real>(t);
    }
    return out;
}

template <class Real>
class model {
public:
    using tensor_type = basic_tensor<Real>;

    model() = default;
    model(const model& o) : spec_(o.spec_), params_(o.params_), layout_(o.layout_) {}
    model& operator=(const model& o) {
        spec_ = o.spec_;
        params_ = o.params_;
        layout_ = o.layout_;
        return *this;
    }
    model(model&&) noexcept = default;
    model& operator=(model&&) noexcept = default;

    /// Builds and initializes: weights U(-b, b) with b = sqrt(3 / fan_in),
    /// biases 0, group-norm scale 1 / shift 0.
    static model build(const network_spec& spec, std::uint64_t seed) {
        model m;
        m.spec_ = spec;
        m.validate_and_layout();
        rng gen(derive_seed(seed, stream::init));
        for (auto& p : m.params_) {
            const auto& sh = p.value.shape();
            if (p.name.ends_with(".gamma")) {
                p.value.fill(Real(1));
            } else if (sh.size() == 2) {
                const double bound = std::sqrt(3.0 / static_cast<double>(sh[0]));
                for (auto& v : p.value.data()) v = static_cast<Real>(gen.uniform(-bound, bound));
            }
        }
        if (spec.zero_init_output) {
            for (auto idx : m.layout_.back().params) m.params_[idx].value.fill(Real(0));
        }
        return m;
    }

    /// Wraps existing parameter values (checkpoint load); shapes must match.
    static model from_values(const network_spec& spec, const std::vector<Real>& flat) {
        model m;
        m.spec_ = spec;
        m.validate_and_layout();
        if (flat.size() != m.parameter_count())
            throw std::invalid_argument("model: expected " + std::to_string(m.parameter_count()) +
                                        " parameter values, got " + std::to_string(flat.size()));
        std::size_t off = 0;
        for (auto& p : m.params_) {
            std::copy_n(flat.begin() + off, p.value.size(), p.value.data().begin());
            off += p.value.size();
        }
        return m;
    }

    const network_spec& spec() const { return spec_; }
    std::vector<parameter<Real>>& params() { return params_; }
    const std::vector<parameter<Real>>& params() const { return params_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

    std::vector<Real> flat_values() const {
        std::vector<Real> out;
        out.reserve(parameter_count());
        for (const auto& p : params_) out.insert(out.end(), p.value.data().begin(), p.value.data().end());
        return out;
    }

    void zero_grad() {
        for (auto& p : params_) p.grad = tensor_type(p.value.shape(), Real(0));
    }

    /// FNV-1a over the raw parameter bytes in declaration order.
    std::uint64_t checksum() const {
        std::uint64_t h = 1469598103934665603ULL;
        for (const auto& p : params_) {
            const auto* bytes = reinterpret_cast<const unsigned char*>(p.value.data().data());
            for (std::size_t i = 0; i < p.value.size() * sizeof(Real); ++i) {
                h ^= bytes[i];
                h *= 1099511628211ULL;
            }
        }
        return h;
    }

    template <class Other>
    model<Other> cast() const {
        std::vector<Other> flat;
        for (const auto& p : params_)
            for (auto v : p.value.data()) flat.push_back(static_cast<Other>(v));
        return model<Other>::from_values(spec_, flat);
    }

    /// Records the network on `t`. With `trainable` false the weights enter as
    /// constants, so only gradients with respect to the input are tracked.
    var<Real> forward(tape<Real>& t, var<Real> input, bool trainable = true) {
        const auto& iv = input.value();
        if (iv.cols() != spec_.total_input())
            throw std::invalid_argument("model: input has " + std::to_string(iv.cols()) + " columns, expected " +
                                        std::to_string(spec_.total_input()));
        if (spec_.image_h == 0) return head(t, input, var<Real>{}, trainable);
        auto features = encode(t, slice_cols(input, spec_.input_dim, spec_.image_size()), trainable);
        return head(t, slice_cols(input, 0, spec_.input_dim), features, trainable);
    }

    /// Image encoder alone: [n, H*W*C] -> [n, features].
    var<Real> encode(tape<Real>& t, var<Real> image, bool trainable = true) {
        const std::size_t n = image.value().rows();
        auto P = param_fn(t, trainable);
        auto img = reshape(image, {n, spec_.image_h, spec_.image_w, spec_.image_c});
        var<Real> none;
        for (std::size_t k = 0; k < spec_.encoder.size(); ++k) img = apply(t, layout_[k], img, none, P);
        return reshape(img, {n, img.value().size() / n});
    }

    std::size_t feature_dim() const {
        return spec_.encoder.empty() ? 0 : spec_.encoder.back().out;
    }

    /// Dense part on the flat columns plus (optionally) precomputed encoder
    /// features, which may be a single row broadcast to all inputs.
    var<Real> head(tape<Real>& t, var<Real> flat, var<Real> features, bool trainable = true) {
        const auto& fv = flat.value();
        if (fv.cols() != spec_.input_dim)
            throw std::invalid_argument("model: flat input has " + std::to_string(fv.cols()) + " columns, expected " +
                                        std::to_string(spec_.input_dim));
        const std::size_t n = fv.rows();
        auto P = param_fn(t, trainable);
        var<Real> emb;
        if (spec_.time_embed_dim > 0) emb = t.constant(time_embedding(fv, spec_.time_embed_dim));
        var<Real> h = flat;
        if (features.valid()) {
            if (features.value().rows() == 1 && n > 1) features = repeat_rows(features, n);
            h = concat_cols<Real>({flat, features});
        }
        for (std::size_t k = spec_.encoder.size(); k < layout_.size(); ++k) h = apply(t, layout_[k], h, emb, P);
        return h;
    }

    /// Inference without gradients.
    tensor_type evaluate(const tensor_type& input) {
        tape<Real> t;
        auto out = forward(t, t.constant(input), false);
        return out.value();
    }

private:
    auto param_fn(tape<Real>& t, bool trainable) {
        return [this, &t, trainable](std::size_t idx) {
            return trainable ? t.param(params_[idx]) : t.constant_ref(params_[idx].value);
        };
    }

    struct layer_slot {
        layer_spec spec;
        std::vector<std::size_t> params;
    };

    template <class ParamFn>
    var<Real> apply(tape<Real>& t, const layer_slot& L, var<Real> x, var<Real> emb, ParamFn& P) {
        const auto& s = L.spec;
        auto act = [&](var<Real> v) {
            switch (s.act) {
            case activation::elu: return elu(v);
            case activation::silu: return silu(v);
            case activation::none: break;
            }
            return v;
        };
        switch (s.kind) {
        case layer_kind::dense: {
            auto y = linear(x, P(L.params[0]), P(L.params[1]));
            return act(y);
        }
        case layer_kind::residual_block: {
            auto h = linear(act(x), P(L.params[0]), P(L.params[1]));
            h = linear(act(h), P(L.params[2]), P(L.params[3]));
            if (s.time_conditioned) h = mul(h, sigmoid(linear(emb, P(L.params[4]), P(L.params[5]))));
            return add(x, h);
        }
        case layer_kind::glu_time_conditioning:
            return mul(x, sigmoid(linear(emb, P(L.params[0]), P(L.params[1]))));
        case layer_kind::conv_block: {
            auto y = conv2d(x, P(L.params[0]), P(L.params[1]), s.stride);
            y = group_norm(y, P(L.params[2]), P(L.params[3]), s.groups);
            return act(y);
        }
        }
        throw std::logic_error("model: unknown layer kind");
    }

    void add_param(layer_slot& slot, std::string name, shape_t shape) {
        slot.params.push_back(params_.size());
        params_.push_back(parameter<Real>{std::move(name), tensor_type(std::move(shape)), {}});
    }

    void validate_and_layout() {
        const auto& s = spec_;
        auto fail = [](const std::string& msg) { throw std::invalid_argument("network_spec: " + msg); };
        if (s.input_dim == 0 || s.output_dim == 0) fail("input and output dims must be positive");
        if (s.layers.empty()) fail("no layers");
        const bool has_image = s.image_h > 0;
        if (has_image != !s.encoder.empty()) fail("image dims and encoder layers must be given together");
        std::size_t li = 0;
        std::size_t H = s.image_h, W = s.image_w, C = s.image_c;
        std::size_t width = 0;
        bool spatial = has_image;
        auto check_time = [&](const layer_spec& l) {
            if ((l.time_conditioned || l.kind == layer_kind::glu_time_conditioning) && s.time_embed_dim == 0)
                fail("time conditioning requested but time_embed_dim is 0");
        };
        auto build_layer = [&](const layer_spec& l, const std::string& prefix) {
            layer_slot slot{l, {}};
            check_time(l);
            switch (l.kind) {
            case layer_kind::conv_block:
                if (!spatial) fail(prefix + ": conv block after flattening");
                if (l.in != C) fail(prefix + ": conv expects " + std::to_string(l.in) + " channels, got " + std::to_string(C));
                if (l.stride == 0 || l.groups == 0 || l.out % l.groups) fail(prefix + ": bad stride/groups");
                add_param(slot, prefix + ".w", {9 * l.in, l.out});
                add_param(slot, prefix + ".b", {l.out});
                add_param(slot, prefix + ".gamma", {l.out});
                add_param(slot, prefix + ".beta", {l.out});
                H = (H - 1) / l.stride + 1;
                W = (W - 1) / l.stride + 1;
                C = l.out;
                break;
            case layer_kind::dense: {
                const std::size_t cur = spatial ? H * W * C : width;
                if (l.in != cur) fail(prefix + ": dense expects " + std::to_string(l.in) + " inputs, got " + std::to_string(cur));
                add_param(slot, prefix + ".w", {l.in, l.out});
                add_param(slot, prefix + ".b", {l.out});
                spatial = false;
                width = l.out;
                break;
            }
            case layer_kind::residual_block:
                if (spatial || l.in != width || l.out != width)
                    fail(prefix + ": residual block width " + std::to_string(l.in) + "->" + std::to_string(l.out) +
                         " on input width " + std::to_string(width));
                add_param(slot, prefix + ".w", {width, width});
                add_param(slot, prefix + ".b", {width});
                add_param(slot, prefix + ".w2", {width, width});
                add_param(slot, prefix + ".b2", {width});
                if (l.time_conditioned) {
                    add_param(slot, prefix + ".g", {s.time_embed_dim, width});
                    add_param(slot, prefix + ".gb", {width});
                }
                break;
            case layer_kind::glu_time_conditioning:
                if (spatial || l.in != width || l.out != width) fail(prefix + ": gate width mismatch");
                add_param(slot, prefix + ".g", {s.time_embed_dim, width});
                add_param(slot, prefix + ".gb", {width});
                break;
            }
            layout_.push_back(std::move(slot));
            ++li;
        };
        for (std::size_t k = 0; k < s.encoder.size(); ++k) build_layer(s.encoder[k], "encoder." + std::to_string(k));
        if (has_image) {
            if (spatial) fail("encoder must end with a dense layer");
            width += s.input_dim;
        } else {
            width = s.input_dim;
        }
        spatial = false;
        for (std::size_t k = 0; k < s.layers.size(); ++k) build_layer(s.layers[k], "layers." + std::to_string(k));
        if (width != s.output_dim) fail("final width " + std::to_string(width) + " != output dim " + std::to_string(s.output_dim));
        if (s.zero_init_output && s.layers.back().kind != layer_kind::dense) fail("zero_init_output needs a dense head");
    }

    network_spec spec_;
    std::vector<parameter<Real>> params_;
    std::vector<layer_slot> layout_;
};

template <class Real = float>
model<Real> build_network(const network_spec& spec, std::uint64_t seed) {
    return model<Real>::build(spec, seed);
}

} // namespace simflow::ad
