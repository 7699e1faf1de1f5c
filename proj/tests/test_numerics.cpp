// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>

#include "pcolab/checkpoint.hpp"
#include "pcolab/gradcheck.hpp"
#include "pcolab/ops.hpp"
#include "pcolab/optim.hpp"

using namespace pcolab;
using T64 = Tensor<double>;

namespace {

T64 random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
    std::vector<double> d(shape_numel(shape));
    for (auto& v : d) v = rng.normal() * scale;
    return T64::from_data(std::move(shape), std::move(d));
}

// Weighted sum so every output coordinate gets a distinct upstream gradient.
T64 probe(const T64& y, Rng rng) {
    auto w = random_tensor(rng, y.shape());
    return ops::sum(ops::mul(y, w));
}

}  // namespace

TEST(Ops, SoftmaxOfEqualLogitsIsUniform) {
    auto y = ops::softmax(T64::from_data({2}, {0.0, 0.0}));
    EXPECT_DOUBLE_EQ(y[0], 0.5);
    EXPECT_DOUBLE_EQ(y[1], 0.5);
}

TEST(Ops, TopkOnSortedInput) {
    auto r = ops::topk(T64::from_data({5}, {5, 4, 3, 2, 1}), 2);
    EXPECT_EQ(r.indices, (std::vector<std::int32_t>{0, 1}));
    EXPECT_EQ(r.values.to_vector(), (std::vector<double>{5, 4}));
}

TEST(Ops, TopkBreaksTiesByLowerIndex) {
    auto r = ops::topk(T64::from_data({6}, {1, 3, 2, 3, 2, 3}), 4);
    EXPECT_EQ(r.indices, (std::vector<std::int32_t>{1, 3, 5, 2}));
}

TEST(Ops, TopkGradientOnlyReachesSelectedValues) {
    auto x = T64::from_data({4}, {0.5, 2.0, -1.0, 1.0}, true);
    auto r = ops::topk(x, 2);
    ops::sum(r.values).backward();
    EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{0, 1, 0, 1}));
}

TEST(Ops, SigmoidDerivativeAtZero) {
    auto x = T64::from_data({1}, {0.0}, true);
    ops::sum(ops::sigmoid(x)).backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);
}

TEST(Ops, BroadcastRowAdd) {
    auto a = T64::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    auto b = T64::from_data({3}, {10, 20, 30}, true);
    auto y = ops::add(a, b);
    EXPECT_EQ(y.to_vector(), (std::vector<double>{11, 22, 33, 14, 25, 36}));
    ops::sum(y).backward();
    EXPECT_EQ(std::vector<double>(b.grad().begin(), b.grad().end()), (std::vector<double>{2, 2, 2}));
}

TEST(Ops, BroadcastColumnTimesRow) {
    auto a = T64::from_data({2, 1}, {2, 3});
    auto b = T64::from_data({1, 3}, {1, 10, 100});
    EXPECT_EQ(ops::mul(a, b).to_vector(), (std::vector<double>{2, 20, 200, 3, 30, 300}));
}

TEST(Ops, ShapeMismatchNamesOpAndShapes) {
    auto a = T64::zeros({2, 3});
    auto b = T64::zeros({4, 5});
    try {
        ops::matmul(a, b);
        FAIL() << "expected a shape error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::shape);
        std::string msg = e.what();
        EXPECT_NE(msg.find("matmul"), std::string::npos);
        EXPECT_NE(msg.find("[2x3]"), std::string::npos);
        EXPECT_NE(msg.find("[4x5]"), std::string::npos);
    }
    EXPECT_THROW(ops::add(T64::zeros({2, 3}), T64::zeros({2, 2})), Error);
}

TEST(Ops, NonFiniteForwardNamesOp) {
    try {
        ops::log(T64::from_data({2}, {1.0, -1.0}));
        FAIL() << "expected a numeric error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::numeric);
        EXPECT_NE(std::string(e.what()).find("'log'"), std::string::npos);
    }
}

TEST(Ops, MaskedMeanIgnoresInvalidAndHandlesEmptyMask) {
    auto x = T64::from_data({4}, {1, 2, 3, 100});
    std::vector<std::uint8_t> m{1, 1, 1, 0};
    EXPECT_DOUBLE_EQ(ops::masked_mean(x, m).item(), 2.0);
    std::vector<std::uint8_t> none{0, 0, 0, 0};
    EXPECT_DOUBLE_EQ(ops::masked_mean(x, none).item(), 0.0);
}

TEST(Tape, BackwardTwiceAccumulatesExactlyTwice) {
    Rng rng(3);
    auto x = random_tensor(rng, {3, 4});
    x.set_requires_grad(true);
    auto w = random_tensor(rng, {4, 2});
    auto loss = probe(ops::gelu(ops::matmul(x, w)), rng.derive("w"));
    loss.backward();
    std::vector<double> once(x.grad().begin(), x.grad().end());
    loss.backward();
    for (std::size_t i = 0; i < once.size(); ++i) {
        EXPECT_EQ(x.grad()[i], 2.0 * once[i]);
    }
}

TEST(Tape, NodesOffThePathGetNoGradient) {
    auto a = T64::from_data({2}, {1, 2}, true);
    auto unused = T64::from_data({2}, {3, 4}, true);
    auto side = ops::mul(unused, unused);  // built but not on the loss path
    auto loss = ops::sum(ops::exp(a));
    loss.backward();
    EXPECT_TRUE(a.has_grad());
    EXPECT_FALSE(unused.has_grad());
    EXPECT_FALSE(side.has_grad());
}

TEST(Tape, NoGradGuardSkipsRecording) {
    auto a = T64::from_data({2}, {1, 2}, true);
    NoGradGuard guard;
    auto y = ops::exp(a);
    EXPECT_FALSE(y.requires_grad());
}

TEST(Gradcheck, SumOfSquaresClosedForm) {
    auto x = T64::from_data({3}, {1, 2, 3});
    ParamList<double> params{{"x", x.clone(true)}};
    auto in = params[0].tensor;
    auto res = gradcheck_params([&] { return ops::sum(ops::mul(in, in)); }, params);
    EXPECT_EQ(std::vector<double>(in.grad().begin(), in.grad().end()), (std::vector<double>{2, 4, 6}));
    EXPECT_LT(res.max_rel_error, 1e-7);
}

TEST(Gradcheck, ConstantFunction) {
    auto x = T64::from_data({3}, {1, 2, 3});
    double err = gradcheck([](const T64& v) { return ops::scale(ops::sum(ops::detach(v)), 0.0); }, x);
    EXPECT_LT(err, 1e-12);
}

TEST(Gradcheck, RejectsNonScalarOutput) {
    auto x = T64::from_data({3}, {1, 2, 3});
    EXPECT_THROW(gradcheck([](const T64& v) { return ops::exp(v); }, x), Error);
}

// Every differentiable op passes a finite-difference check on 20 random inputs.
struct OpCase {
    const char* name;
    std::function<T64(const T64&, Rng&)> f;
    Shape shape;
};

class OpGradcheck : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradcheck, TwentyRandomInputs) {
    const auto& c = GetParam();
    for (int trial = 0; trial < 20; ++trial) {
        Rng rng = Rng(1234).derive(c.name, {static_cast<std::uint64_t>(trial)});
        auto x = random_tensor(rng, c.shape);
        Rng aux = rng.derive("aux");
        double err = gradcheck(
            [&](const T64& v) {
                Rng local = aux;
                return probe(c.f(v, local), aux.derive("probe"));
            },
            x);
        EXPECT_LT(err, 1e-4) << c.name << " trial " << trial;
    }
}

INSTANTIATE_TEST_SUITE_P(
    AllOps, OpGradcheck,
    ::testing::Values(
        OpCase{"add_broadcast", [](const T64& x, Rng& r) { return ops::add(x, random_tensor(r, {4})); }, {3, 4}},
        OpCase{"sub", [](const T64& x, Rng& r) { return ops::sub(random_tensor(r, {3, 4}), x); }, {3, 4}},
        OpCase{"mul_broadcast", [](const T64& x, Rng& r) { return ops::mul(random_tensor(r, {3, 1}), x); }, {3, 4}},
        OpCase{"div",
               [](const T64& x, Rng& r) {
                   return ops::div(random_tensor(r, {3, 4}), ops::add_scalar(ops::mul(x, x), 1.0));
               },
               {3, 4}},
        OpCase{"matmul_left", [](const T64& x, Rng& r) { return ops::matmul(x, random_tensor(r, {4, 2})); }, {3, 4}},
        OpCase{"matmul_right", [](const T64& x, Rng& r) { return ops::matmul(random_tensor(r, {2, 3}), x); }, {3, 4}},
        OpCase{"embedding",
               [](const T64& x, Rng&) {
                   std::vector<std::int32_t> idx{2, 0, 2, 1};
                   return ops::embedding(x, idx);
               },
               {3, 4}},
        OpCase{"layer_norm_input",
               [](const T64& x, Rng& r) {
                   return ops::layer_norm(x, random_tensor(r, {5}), random_tensor(r, {5}));
               },
               {3, 5}},
        OpCase{"layer_norm_affine",
               [](const T64& g, Rng& r) { return ops::layer_norm(random_tensor(r, {3, 5}), g, g); },
               {5}},
        OpCase{"gelu", [](const T64& x, Rng&) { return ops::gelu(x); }, {3, 4}},
        OpCase{"softmax", [](const T64& x, Rng&) { return ops::softmax(x); }, {3, 4}},
        OpCase{"log_softmax", [](const T64& x, Rng&) { return ops::log_softmax(x); }, {3, 4}},
        OpCase{"gather_last",
               [](const T64& x, Rng&) {
                   std::vector<std::int32_t> idx{3, 0, 1};
                   return ops::gather_last(x, idx);
               },
               {3, 4}},
        OpCase{"masked_mean",
               [](const T64& x, Rng&) {
                   std::vector<std::uint8_t> m{1, 0, 1, 1, 0, 1, 1, 1, 0, 1, 0, 1};
                   return ops::masked_mean(x, m);
               },
               {3, 4}},
        OpCase{"sigmoid", [](const T64& x, Rng&) { return ops::sigmoid(x); }, {3, 4}},
        OpCase{"softplus", [](const T64& x, Rng&) { return ops::softplus(ops::scale(x, 3.0)); }, {3, 4}},
        OpCase{"exp", [](const T64& x, Rng&) { return ops::exp(x); }, {3, 4}},
        OpCase{"log", [](const T64& x, Rng&) { return ops::log(ops::add_scalar(ops::mul(x, x), 0.5)); }, {3, 4}},
        OpCase{"topk_values", [](const T64& x, Rng&) { return ops::topk(x, 2).values; }, {3, 4}},
        OpCase{"slice_rows", [](const T64& x, Rng&) { return ops::slice_rows(x, 1, 3); }, {3, 4}},
        OpCase{"causal_attention", [](const T64& x, Rng&) { return ops::causal_self_attention(x, 2); }, {5, 12}},
        OpCase{"dropout",
               [](const T64& x, Rng& r) { return ops::dropout(x, 0.3, r); },
               {3, 4}}),
    [](const ::testing::TestParamInfo<OpCase>& info) { return std::string(info.param.name); });

TEST(Ops, CausalAttentionIgnoresLaterRows) {
    Rng rng(9);
    auto x = random_tensor(rng, {4, 12});
    auto y = ops::causal_self_attention(x, 2);
    auto x2 = T64::from_data(x.shape(), x.to_vector());
    for (std::size_t c = 0; c < 12; ++c) x2.mutable_data()[3 * 12 + c] += 5.0;
    auto y2 = ops::causal_self_attention(x2, 2);
    for (std::size_t i = 0; i < 3 * 4; ++i) EXPECT_EQ(y[i], y2[i]);
}

TEST(AdamW, ZeroGradientZeroDecayLeavesParamsUnchanged) {
    ParamList<double> params{{"w", T64::from_data({3}, {1, -2, 3}, true)}};
    params[0].tensor.mutable_grad();
    OptimState<double> st;
    st.lr = 0.1;
    adamw_step(params, st);
    EXPECT_EQ(params[0].tensor.to_vector(), (std::vector<double>{1, -2, 3}));
    EXPECT_EQ(st.step, 1);
}

TEST(AdamW, FirstStepHandComputed) {
    // g = 1: m = 0.1, v = 0.05; bias-corrected mhat = vhat = 1 -> update lr / (1 + eps).
    ParamList<double> params{{"w", T64::from_data({1}, {0.5}, true)}};
    params[0].tensor.mutable_grad()[0] = 1.0;
    OptimState<double> st;
    st.lr = 0.1;
    adamw_step(params, st);
    EXPECT_NEAR(params[0].tensor[0], 0.5 - 0.1 / (1.0 + 1e-8), 1e-15);
    EXPECT_NEAR(0.5 - params[0].tensor[0], 0.1, 1e-8);
}

TEST(AdamW, DecoupledWeightDecay) {
    ParamList<double> params{{"w", T64::from_data({1}, {2.0}, true)}};
    params[0].tensor.mutable_grad();
    OptimState<double> st;
    st.lr = 0.1;
    st.weight_decay = 0.5;
    adamw_step(params, st);
    EXPECT_DOUBLE_EQ(params[0].tensor[0], 2.0 - 0.1 * 0.5 * 2.0);
}

TEST(AdamW, IdenticalParamsGetIdenticalUpdates) {
    ParamList<double> params{{"a", T64::from_data({2}, {0.3, -0.7}, true)},
                             {"b", T64::from_data({2}, {0.3, -0.7}, true)}};
    OptimState<double> st;
    st.lr = 0.01;
    for (int s = 0; s < 5; ++s) {
        for (auto& p : params) {
            p.tensor.mutable_grad()[0] = 0.1 * s - 0.2;
            p.tensor.mutable_grad()[1] = 0.05;
        }
        adamw_step(params, st);
    }
    EXPECT_EQ(params[0].tensor.to_vector(), params[1].tensor.to_vector());
}

TEST(AdamW, MissingGradientNamesParameter) {
    ParamList<double> params{{"head.w", T64::from_data({1}, {1.0}, true)}};
    OptimState<double> st;
    try {
        adamw_step(params, st);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("head.w"), std::string::npos);
    }
}

TEST(AdamW, RejectsInvalidHyperparameters) {
    ParamList<double> params{{"w", T64::from_data({1}, {1.0}, true)}};
    params[0].tensor.mutable_grad();
    OptimState<double> st;
    st.beta2 = 1.0;
    EXPECT_THROW(adamw_step(params, st), Error);
}

TEST(Checkpoint, RoundTripAndByteStability) {
    ParamList<double> params{{"a", T64::from_data({2, 2}, {1.5, -2.25, 3e-7, 4}, true)},
                             {"b", T64::from_data({3}, {0.1, 0.2, 0.3}, true)}};
    Rng rng(77);
    rng.next_u64();
    const std::string path = ::testing::TempDir() + "/ck_roundtrip.bin";
    save_checkpoint(path, params, 77, rng.state(), {{"note", "x"}});
    auto ck = load_checkpoint(path);
    EXPECT_EQ(ck.dtype, "f64");
    EXPECT_EQ(ck.seed, 77u);
    EXPECT_EQ(ck.entries.size(), 2u);
    EXPECT_EQ(ck.at("a").shape, (Shape{2, 2}));
    EXPECT_EQ(ck.at("a").values, params[0].tensor.to_vector());
    EXPECT_EQ(ck.meta.at("note"), "x");
    Rng restored(0);
    restored.set_state(ck.rng_state);
    EXPECT_EQ(restored.next_u64(), rng.next_u64());
    EXPECT_EQ(checkpoint_bytes(params, 77, "s", {}), checkpoint_bytes(params, 77, "s", {}));
    std::remove(path.c_str());
}

TEST(Checkpoint, MissingFileIsMissingArtifact) {
    try {
        load_checkpoint("/nonexistent/ck.bin");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::missing_artifact);
    }
}

TEST(Rng, DerivedStreamsAreReproducibleAndDistinct) {
    Rng root(42);
    EXPECT_EQ(root.derive("a", {1, 2}).next_u64(), root.derive("a", {1, 2}).next_u64());
    EXPECT_NE(root.derive("a", {1, 2}).next_u64(), root.derive("a", {2, 1}).next_u64());
    EXPECT_NE(root.derive("a").next_u64(), root.derive("b").next_u64());
}
