#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "simflow/ad/adam.hpp"
#include "simflow/ad/checkpoint.hpp"
#include "simflow/ad/gradient_check.hpp"
#include "simflow/ad/network.hpp"

using namespace simflow;
using namespace simflow::ad;

namespace {

basic_tensor<double> random_tensor(shape_t shape, rng& g, double lo = -1, double hi = 1) {
    basic_tensor<double> t(std::move(shape));
    for (auto& v : t.data()) v = g.uniform(lo, hi);
    return t;
}

parameter<double> random_param(const std::string& name, shape_t shape, rng& g, double lo = -1, double hi = 1) {
    return {name, random_tensor(std::move(shape), g, lo, hi), {}};
}

template <class Real>
basic_tensor<Real> random_input(std::size_t n, std::size_t d, std::uint64_t seed) {
    rng g(seed);
    basic_tensor<Real> t({n, d});
    for (auto& v : t.data()) v = static_cast<Real>(g.uniform(0.0, 1.0));
    return t;
}

} // namespace

TEST(Activation, EluValues) {
    tape<float> t;
    auto x = t.constant(basic_tensor<float>({2}, {1.0f, -1.0f}));
    auto y = elu(x);
    EXPECT_EQ(y.value()[0], 1.0f);
    EXPECT_NEAR(y.value()[1], std::exp(-1.0) - 1.0, 1e-7);
}

TEST(Network, DenseParameterCount) {
    network_spec s;
    s.input_dim = 2;
    s.output_dim = 3;
    s.layers = {dense(2, 3)};
    auto m = build_network(s, 1);
    EXPECT_EQ(m.parameter_count(), 9u);
}

TEST(Network, SameSeedSameParameters) {
    auto s = residual_mlp(5, 2, {16, 16, 8});
    auto a = build_network(s, 42);
    auto b = build_network(s, 42);
    EXPECT_EQ(a.flat_values(), b.flat_values());
    auto c = build_network(s, 43);
    EXPECT_NE(a.flat_values(), c.flat_values());
}

TEST(Network, ZeroInitHeadOutputsZero) {
    auto s = residual_mlp(6, 3, {8, 8}, activation::elu, 16, true);
    auto m = build_network(s, 3);
    auto out = m.evaluate(random_input<float>(7, 6, 5));
    for (auto v : out.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Network, LotkaVolterraBaseFlowBuilds) {
    auto s = residual_mlp(1 + 4 + 20, 4, std::vector<std::size_t>(8, 128));
    auto m = build_network(s, 7);
    auto out = m.evaluate(random_input<float>(4, 25, 1));
    EXPECT_EQ(out.shape(), (shape_t{4, 4}));
    EXPECT_TRUE(out.all_finite());
}

TEST(Network, SpecErrors) {
    network_spec s;
    s.input_dim = 3;
    s.output_dim = 2;
    s.layers = {dense(4, 2)};
    EXPECT_THROW(build_network(s, 0), std::invalid_argument);
    s.layers = {dense(3, 5), residual(4)};
    EXPECT_THROW(build_network(s, 0), std::invalid_argument);
    s.layers = {dense(3, 4), residual(4, activation::elu, true), dense(4, 2)};
    EXPECT_THROW(build_network(s, 0), std::invalid_argument);  // no time embedding
}

TEST(Network, InputShapeMismatchThrows) {
    auto m = build_network(residual_mlp(3, 1, {4}), 0);
    EXPECT_THROW(m.evaluate(random_input<float>(2, 4, 0)), std::invalid_argument);
}

TEST(Tape, NonFiniteActivationIsAnError) {
    tape<float> t;
    auto x = t.constant(basic_tensor<float>({1}, {-1.0f}));
    EXPECT_THROW(log(x), numerical_error);
}

TEST(Backward, LinearMapWeightGradIsOuterProduct) {
    tape<double> t;
    rng g(1);
    parameter<double> W = random_param("w", {3, 2}, g);
    parameter<double> b{"b", basic_tensor<double>({2}), {}};
    auto xv = basic_tensor<double>::matrix(1, 3, {0.5, -2.0, 3.0});
    auto y = linear(t.constant(xv), t.param(W), t.param(b));
    t.backward(sum(y));
    for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t m = 0; m < 2; ++m) EXPECT_DOUBLE_EQ(W.grad[k * 2 + m], xv[k]);
}

TEST(Backward, StopGradientZeroesUpstream) {
    tape<float> t;
    parameter<float> a{"a", basic_tensor<float>({1, 2}, {1.5f, -0.5f}), {}};
    parameter<float> b{"b", basic_tensor<float>({1, 2}, {2.0f, 3.0f}), {}};
    auto h = exp(t.param(a));
    auto y = mul(stop_gradient(h), t.param(b));
    t.backward(sum(y));
    ASSERT_EQ(a.grad.size(), 0u);  // never reached
    EXPECT_FLOAT_EQ(b.grad[0], std::exp(1.5f));
}

TEST(Backward, ConsumedTwiceThrows) {
    tape<float> t;
    parameter<float> a{"a", basic_tensor<float>({1}, {2.0f}), {}};
    auto y = square(t.param(a));
    t.backward(y);
    EXPECT_THROW(t.backward(y), std::logic_error);
}

TEST(Backward, RetainAllowsRepeatedSweeps) {
    tape<double> t;
    auto x = t.input(basic_tensor<double>({1, 2}, {1.0, 2.0}));
    auto y = mul(x, x);
    basic_tensor<double> e0({1, 2}, {1.0, 0.0}), e1({1, 2}, {0.0, 1.0});
    t.backward(y, &e0, true);
    EXPECT_DOUBLE_EQ(t.gradient(x)[0], 2.0);
    EXPECT_DOUBLE_EQ(t.gradient(x)[1], 0.0);
    t.backward(y, &e1, true);
    EXPECT_DOUBLE_EQ(t.gradient(x)[0], 0.0);
    EXPECT_DOUBLE_EQ(t.gradient(x)[1], 4.0);
}

// Each op kind against central differences, across many random instances.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
    const int seed = GetParam();
    rng g(1000 + seed);
    std::vector<parameter<double>> P;
    P.push_back(random_param("a", {4, 3}, g));
    P.push_back(random_param("row", {1, 3}, g));
    P.push_back(random_param("col", {4, 1}, g, 0.5, 1.5));
    P.push_back(random_param("w", {3, 5}, g));
    P.push_back(random_param("b", {5}, g));
    P.push_back(random_param("pos", {4, 3}, g, 0.5, 2.0));
    auto loss = [&](tape<double>& t) {
        auto a = t.param(P[0]), row = t.param(P[1]), col = t.param(P[2]);
        auto w = t.param(P[3]), b = t.param(P[4]), pos = t.param(P[5]);
        auto h = add(a, row);
        h = sub(h, col);
        h = mul(h, div(row, col));
        h = add(h, mul(log(pos), tanh(a)));
        auto z = linear(h, w, b);
        auto parts = concat_cols<double>({elu(z), silu(slice_cols(z, 1, 3)), sigmoid(h), exp(scale(a, 0.3))});
        auto r = row_sum(square(parts));
        auto m2 = matmul(a, w);
        auto rr = repeat_rows(row, 4);
        return add(add(sum(add_scalar(r, 0.1)), mean(m2)), sum(mul(rr, a)));
    };
    auto res = check_parameter_gradients(P, loss, 1e-5);
    EXPECT_LT(res.max_rel_error, 1e-4) << "seed " << seed;
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradient, ::testing::Range(0, 100));

TEST(OpGradientExtra, BceAndGroupNormAndConv) {
    rng g(77);
    std::vector<parameter<double>> P;
    P.push_back(random_param("x", {2, 5, 4, 2}, g));
    P.push_back(random_param("cw", {18, 4}, g));
    P.push_back(random_param("cb", {4}, g));
    P.push_back(random_param("gamma", {4}, g, 0.5, 1.5));
    P.push_back(random_param("beta", {4}, g));
    P.push_back(random_param("hw", {3 * 2 * 4, 1}, g));
    P.push_back(random_param("hb", {1}, g));
    std::vector<double> labels{1.0, 0.0};
    auto loss = [&](tape<double>& t) {
        auto y = conv2d(t.param(P[0]), t.param(P[1]), t.param(P[2]), 2);
        y = silu(group_norm(y, t.param(P[3]), t.param(P[4]), 2));
        auto logits = linear(reshape(y, {2, 24}), t.param(P[5]), t.param(P[6]));
        return bce_with_logits(logits, labels);
    };
    auto res = check_parameter_gradients(P, loss, 1e-5);
    EXPECT_LT(res.max_rel_error, 1e-4);
}

TEST(Conv, StrideOneIdentityKernelCopiesInput) {
    tape<float> t;
    basic_tensor<float> x({1, 3, 3, 1});
    for (std::size_t i = 0; i < 9; ++i) x[i] = static_cast<float>(i);
    basic_tensor<float> w({9, 1});
    w[4] = 1.0f;  // center tap
    auto y = conv2d(t.constant(x), t.constant(w), t.constant(basic_tensor<float>({1})), 1);
    EXPECT_EQ(y.value(), x);
}

namespace {

double check_layer(const network_spec& s, std::uint64_t seed) {
    auto m = build_network<double>(s, seed);
    // perturb zero biases so every path is exercised
    rng g(seed + 17);
    for (auto& p : m.params())
        for (auto& v : p.value.data()) v += 0.1 * g.uniform(-1.0, 1.0);
    auto in = random_input<double>(3, s.total_input(), seed + 3);
    return gradient_check(m, in, 1e-5);
}

} // namespace

class LayerGradient : public ::testing::TestWithParam<int> {};

TEST_P(LayerGradient, EveryLayerKindMatchesFiniteDifferences) {
    const auto seed = static_cast<std::uint64_t>(GetParam());
    network_spec d;
    d.input_dim = 4;
    d.output_dim = 3;
    d.layers = {dense(4, 6, activation::elu), dense(6, 5, activation::silu), dense(5, 3)};
    EXPECT_LT(check_layer(d, seed), 1e-4) << "dense";

    EXPECT_LT(check_layer(residual_mlp(4, 2, {6, 6}), seed), 1e-4) << "residual";
    EXPECT_LT(check_layer(residual_mlp(4, 2, {6, 5}, activation::elu, 8), seed), 1e-4) << "residual+glu";

    network_spec glu;
    glu.input_dim = 3;
    glu.output_dim = 2;
    glu.time_embed_dim = 6;
    glu.layers = {dense(3, 5, activation::elu), layer_spec{layer_kind::glu_time_conditioning, 5, 5}, dense(5, 2)};
    EXPECT_LT(check_layer(glu, seed), 1e-4) << "glu";

    network_spec c;
    c.input_dim = 2;
    c.output_dim = 2;
    c.image_h = 6;
    c.image_w = 5;
    c.image_c = 1;
    c.encoder = {conv(1, 4, 2, 2), conv(4, 4, 2, 4), dense(2 * 2 * 4, 3, activation::elu)};
    c.layers = {dense(5, 4, activation::elu), dense(4, 2)};
    EXPECT_LT(check_layer(c, seed), 1e-4) << "conv";
}

INSTANTIATE_TEST_SUITE_P(Seeds, LayerGradient, ::testing::Range(0, 100));

TEST(GradientCheck, LinearModelIsExact) {
    network_spec s;
    s.input_dim = 3;
    s.output_dim = 2;
    s.layers = {dense(3, 2)};
    auto m = build_network(s, 5);
    EXPECT_LT(gradient_check(m, random_input<float>(4, 3, 2)), 1e-6);
}

TEST(GradientCheck, ThreeBlockResidualMlp) {
    auto m = build_network(residual_mlp(5, 3, {32, 32, 32}), 9);
    EXPECT_LT(gradient_check(m, random_input<float>(8, 5, 4)), 1e-4);
}

TEST(GradientCheck, StopGradientPathsCarryNoSensitivity) {
    rng g(3);
    std::vector<parameter<double>> P;
    P.push_back(random_param("w1", {3, 3}, g));
    P.push_back(random_param("w2", {3, 2}, g));
    auto x = random_tensor({4, 3}, g);
    parameter<double> zb{"zb3", basic_tensor<double>({3}), {}};
    parameter<double> zb2{"zb2", basic_tensor<double>({2}), {}};
    auto full = [&](tape<double>& t) {
        auto h = elu(linear(t.constant(x), t.param(P[0]), t.param(zb)));
        auto y = linear(stop_gradient(h), t.param(P[1]), t.param(zb2));
        return add(sum(square(y)), sum(h));
    };
    // w1 reaches the loss through the blocked path and through sum(h); its
    // gradient must equal the finite-difference sensitivity of sum(h) alone.
    for (auto& p : P) p.grad = basic_tensor<double>(p.value.shape());
    {
        tape<double> t;
        t.backward(full(t));
    }
    auto analytic = P[0].grad;
    const double eps = 1e-5;
    for (std::size_t k = 0; k < P[0].value.size(); ++k) {
        const double x0 = P[0].value[k];
        auto eval_h_only = [&] {
            tape<double> t;
            auto h = elu(linear(t.constant(x), t.param(P[0]), t.param(zb)));
            return sum(h).value()[0];
        };
        P[0].value[k] = x0 + eps;
        const double fp = eval_h_only();
        P[0].value[k] = x0 - eps;
        const double fm = eval_h_only();
        P[0].value[k] = x0;
        EXPECT_NEAR(analytic[k], (fp - fm) / (2 * eps), 1e-7);
    }
    // w2 sits after the stop-gradient and is fully differentiable.
    const auto analytic2 = P[1].grad;
    for (std::size_t k = 0; k < P[1].value.size(); ++k) {
        const double x0 = P[1].value[k];
        auto eval = [&] {
            tape<double> t;
            return full(t).value()[0];
        };
        P[1].value[k] = x0 + eps;
        const double fp = eval();
        P[1].value[k] = x0 - eps;
        const double fm = eval();
        P[1].value[k] = x0;
        EXPECT_NEAR(analytic2[k], (fp - fm) / (2 * eps), 1e-6);
    }
}

TEST(Adam, ZeroGradientIsFixedPoint) {
    std::vector<parameter<float>> P{{"p", basic_tensor<float>({3}, {1.0f, -2.0f, 0.5f}), {}}};
    P[0].grad = basic_tensor<float>({3});
    adam_state<float> st;
    adam_step(P, st, adam_config{1e-2, 0.9, 0.999, 1e-8, 0.0});
    EXPECT_EQ(P[0].value.to_vector(), (std::vector<float>{1.0f, -2.0f, 0.5f}));
    EXPECT_EQ(st.step, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    std::vector<parameter<double>> P{{"p", basic_tensor<double>({2}, {1.0, 1.0}), {}}};
    P[0].grad = basic_tensor<double>({2}, {0.37, -25.0});
    adam_state<double> st;
    adam_step(P, st, adam_config{1e-3, 0.9, 0.999, 1e-8, 0.0});
    EXPECT_NEAR(P[0].value[0], 1.0 - 1e-3, 1e-10);
    EXPECT_NEAR(P[0].value[1], 1.0 + 1e-3, 1e-10);
}

TEST(Adam, DecoupledWeightDecayShrinksGeometrically) {
    std::vector<parameter<double>> P{{"p", basic_tensor<double>({1}, {2.0}), {}}};
    adam_state<double> st;
    const adam_config cfg{1e-2, 0.9, 0.999, 1e-8, 0.5};
    for (int k = 0; k < 10; ++k) {
        P[0].grad = basic_tensor<double>({1});
        adam_step(P, st, cfg);
    }
    EXPECT_NEAR(P[0].value[0], 2.0 * std::pow(1.0 - 1e-2 * 0.5, 10), 1e-12);
}

TEST(Adam, NonFiniteGradientRejected) {
    std::vector<parameter<float>> P{{"p", basic_tensor<float>({1}, {1.0f}), {}}};
    P[0].grad = basic_tensor<float>({1}, {std::nanf("")});
    adam_state<float> st;
    EXPECT_THROW(adam_step(P, st, adam_config{}), numerical_error);
    EXPECT_EQ(P[0].value[0], 1.0f);
}

namespace {

std::vector<float> train_steps(std::uint64_t seed, int steps) {
    auto m = build_network(residual_mlp(3, 2, {16, 16}), seed);
    adam_state<float> st;
    for (int k = 0; k < steps; ++k) {
        auto in = random_input<float>(8, 3, derive_seed(seed, 99, k));
        m.zero_grad();
        tape<float> t;
        auto out = m.forward(t, t.constant(in));
        t.backward(mean(square(out)));
        adam_step(m.params(), st, adam_config{1e-3});
    }
    return m.flat_values();
}

} // namespace

TEST(Determinism, TrainingIsBitExact) {
    EXPECT_EQ(train_steps(11, 20), train_steps(11, 20));
}

TEST(Checkpoint, RoundTripWithOptimizerState) {
    auto m = build_network(residual_mlp(3, 2, {8}, activation::elu, 4, true), 4);
    checkpoint ck;
    ck.net = m;
    ck.seed = 4;
    ck.base_hash = "abc";
    ck.meta = {{"task", "toy"}};
    ck.optimizer.reset(ck.net.params());
    ck.optimizer.step = 3;
    ck.optimizer.m[0][0] = 0.25f;
    const auto path = (std::filesystem::temp_directory_path() / "simflow_ck_test.bin").string();
    ck.save(path);
    auto back = checkpoint::load(path);
    std::remove(path.c_str());
    EXPECT_EQ(back.net.spec(), m.spec());
    EXPECT_EQ(back.net.flat_values(), m.flat_values());
    EXPECT_EQ(back.net.checksum(), m.checksum());
    EXPECT_EQ(back.base_hash, "abc");
    EXPECT_EQ(back.optimizer.step, 3u);
    EXPECT_EQ(back.optimizer.m[0][0], 0.25f);
    EXPECT_EQ(back.meta["task"], "toy");
}
