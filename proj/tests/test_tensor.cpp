#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "pseg/gradcheck.hpp"
#include "pseg/ops.hpp"
#include "test_util.hpp"

using namespace pseg;
using T = Tensor<double>;

TEST(Primitives, AddElementwise) {
    auto a = T::constant({2}, {1, 2});
    auto b = T::constant({2}, {3, 4});
    auto y = add(a, b);
    EXPECT_EQ(y[0], 4);
    EXPECT_EQ(y[1], 6);
}

TEST(Primitives, MeanAndRelu) {
    EXPECT_EQ(mean(T::constant({3}, {2, 4, 6})).item(), 4);
    auto r = relu(T::constant({3}, {-1, 0, 2}));
    EXPECT_EQ(std::vector<double>(r.data().begin(), r.data().end()), (std::vector<double>{0, 0, 2}));
}

TEST(Primitives, DispatchMatchesDirectCalls) {
    std::vector<T> ops{T::constant({2}, {1, 2}), T::constant({2}, {3, 4})};
    EXPECT_EQ(apply_primitive<double>(Primitive::add, ops)[1], 6);
    std::vector<T> one{T::constant({3}, {2, 4, 6})};
    EXPECT_EQ(apply_primitive<double>(Primitive::mean, one).item(), 4);
    EXPECT_THROW(apply_primitive<double>(Primitive::add, one), ShapeError);
}

TEST(Primitives, BroadcastRowAgainstMatrix) {
    auto m = T::constant({2, 3}, {1, 2, 3, 4, 5, 6});
    auto r = T::constant({3}, {10, 20, 30});
    auto y = add(m, r);
    EXPECT_EQ(y.shape(), (Shape{2, 3}));
    EXPECT_EQ(y[5], 36);
    auto c = T::constant({2, 1}, {100, 200});
    EXPECT_EQ(mul(m, c)[4], 1000);
}

TEST(Primitives, ShapeMismatchNamesPrimitive) {
    auto a = T::constant({2}, {1, 2});
    auto b = T::constant({3}, {1, 2, 3});
    try {
        add(a, b);
        FAIL();
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("add"), std::string::npos);
    }
}

TEST(Primitives, LogOfNonPositiveRejected) {
    try {
        pseg::log(T::constant({2}, {1.0, 0.0}));
        FAIL();
    } catch (const DomainError& e) {
        EXPECT_NE(std::string(e.what()).find("log"), std::string::npos);
    }
    EXPECT_THROW(pseg::sqrt(T::constant({1}, {-1.0})), DomainError);
}

TEST(Structured, SoftmaxSymmetricLogits) {
    auto y = softmax_channel(T::constant({1, 2, 1, 1}, {0, 0}));
    EXPECT_DOUBLE_EQ(y[0], 0.5);
    EXPECT_DOUBLE_EQ(y[1], 0.5);
}

TEST(Structured, ConvScalingKernel) {
    auto x = T::full({1, 1, 2, 2}, 1.0);
    auto w = T::constant({1, 1, 1, 1}, {3});
    auto y = conv2d(x, w, T{}, {1, 0});
    EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
    for (double v : y.data()) EXPECT_EQ(v, 3);
}

TEST(Structured, MatmulIdentity) {
    auto a = T::constant({2, 2}, {1, 2, 3, 4});
    auto id = T::constant({2, 2}, {1, 0, 0, 1});
    auto y = matmul(a, id);
    EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Structured, ConvMatchesDirectLoop) {
    std::mt19937_64 rng(3);
    const std::size_t N = 2, C = 3, H = 7, W = 6, O = 4, K = 3;
    for (std::size_t stride : {1u, 2u})
        for (std::size_t pad : {0u, 1u}) {
            auto x = testutil::random_tensor<double>({N, C, H, W}, rng);
            auto w = testutil::random_tensor<double>({O, C, K, K}, rng);
            auto b = testutil::random_tensor<double>({O}, rng);
            auto y = conv2d(x, w, b, {stride, pad});
            const std::size_t Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
            ASSERT_EQ(y.shape(), (Shape{N, O, Ho, Wo}));
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < O; ++o)
                    for (std::size_t i = 0; i < Ho; ++i)
                        for (std::size_t j = 0; j < Wo; ++j) {
                            double acc = b[o];
                            for (std::size_t c = 0; c < C; ++c)
                                for (std::size_t ki = 0; ki < K; ++ki)
                                    for (std::size_t kj = 0; kj < K; ++kj) {
                                        const long ih = long(i * stride + ki) - long(pad);
                                        const long iw = long(j * stride + kj) - long(pad);
                                        if (ih < 0 || iw < 0 || ih >= long(H) || iw >= long(W)) continue;
                                        acc += x[((n * C + c) * H + ih) * W + iw] *
                                               w[((o * C + c) * K + ki) * K + kj];
                                    }
                            EXPECT_NEAR(y[((n * O + o) * Ho + i) * Wo + j], acc, 1e-12);
                        }
        }
}

TEST(Structured, RankAndChannelMismatchRejected) {
    EXPECT_THROW(conv2d(T::full({1, 2, 4}, 1.0), T::full({1, 2, 1, 1}, 1.0)), ShapeError);
    EXPECT_THROW(conv2d(T::full({1, 2, 4, 4}, 1.0), T::full({1, 3, 1, 1}, 1.0)), ShapeError);
    EXPECT_THROW(softmax_channel(T::full({2, 3}, 1.0)), ShapeError);
}

TEST(Backward, Square) {
    auto x = T::parameter("x", {}, {3.0});
    auto g = backward(mul(x, x));
    EXPECT_EQ(g.at("x")[0], 6.0);
    EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Backward, MeanSpreadsEvenly) {
    auto x = T::parameter("x", {4}, {1, 2, 3, 4});
    backward(mean(x));
    for (double v : x.grad()) EXPECT_EQ(v, 0.25);
}

TEST(Backward, RepeatedUseAccumulates) {
    auto x = T::parameter("x", {}, {2.0});
    // y = x*x + x -> dy/dx = 2x + 1
    backward(add(mul(x, x), x));
    EXPECT_EQ(x.grad()[0], 5.0);
    // a second backward starts from scratch
    backward(mul(x, x));
    EXPECT_EQ(x.grad()[0], 4.0);
}

TEST(Backward, NonScalarRejected) {
    auto x = T::parameter("x", {2}, {1, 2});
    EXPECT_THROW(backward(mul(x, x)), ShapeError);
}

TEST(Backward, CycleDetected) {
    auto x = T::parameter("x", {}, {1.0});
    auto y = mul(x, x);
    auto z = add(y, x);
    // Splice a back edge by hand; ops never create one.
    y.node()->parents.push_back(z.node());
    EXPECT_THROW(backward(z), GraphError);
    y.node()->parents.pop_back();
}

TEST(Backward, CosineChainMatchesFiniteDifferences) {
    std::mt19937_64 rng(11);
    auto u = testutil::random_tensor<double>({8}, rng, true, "u");
    auto v = testutil::random_tensor<double>({8}, rng, true, "v");
    std::function<T(const std::vector<T>&)> f = [](const std::vector<T>& p) {
        auto dot = sum(mul(p[0], p[1]));
        auto nu = pseg::sqrt(sum(mul(p[0], p[0])));
        auto nv = pseg::sqrt(sum(mul(p[1], p[1])));
        return div(dot, mul(nu, nv));
    };
    auto rep = finite_difference_check<double>(f, {u, v}, 1e-4);
    EXPECT_LE(rep.max_rel_error, 1e-5);
}

TEST(FiniteDifference, QuadraticIsExact) {
    auto x = T::parameter("x", {}, {3.0});
    std::function<T(const std::vector<T>&)> f = [](const std::vector<T>& p) { return mul(p[0], p[0]); };
    EXPECT_LE(finite_difference_check<double>(f, {x}, 1e-4).max_rel_error, 1e-6);
}

TEST(FiniteDifference, NonFiniteRejected) {
    auto x = T::parameter("x", {}, {1.0});
    std::function<T(const std::vector<T>&)> f = [](const std::vector<T>& p) {
        return div(p[0], T::scalar(std::numeric_limits<double>::infinity()) * p[0] * 0.0 + 1e-320);
    };
    EXPECT_THROW(finite_difference_check<double>(f, {x}, 1e-4), DomainError);
}

// Every differentiable primitive against central differences on 20 random
// small inputs.
class PrimitiveGradient : public ::testing::TestWithParam<std::string> {};

TEST_P(PrimitiveGradient, MatchesFiniteDifferences) {
    const std::string op = GetParam();
    std::mt19937_64 rng(std::hash<std::string>{}(op));
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<T> params;
        std::function<T(const std::vector<T>&)> f;
        auto weights = testutil::random_tensor<double>({2, 3, 4, 4}, rng);
        // A fixed random projection turns any output into a scalar.
        auto project = [weights](const T& y) {
            std::vector<double> w(y.numel());
            for (std::size_t i = 0; i < w.size(); ++i) w[i] = weights[i % weights.numel()];
            return sum(mul(y, T::constant(y.shape(), w)));
        };
        auto p1 = [&](Shape s, bool positive = false) {
            auto t = testutil::random_tensor<double>(s, rng, true, "a", positive);
            params.push_back(t);
        };
        if (op == "add" || op == "sub" || op == "mul" || op == "div") {
            p1({3, 4});
            params.push_back(testutil::random_tensor<double>({4}, rng, true, "b", op == "div"));
            f = [op, project](const std::vector<T>& p) {
                if (op == "add") return project(add(p[0], p[1]));
                if (op == "sub") return project(sub(p[0], p[1]));
                if (op == "mul") return project(mul(p[0], p[1]));
                return project(div(p[0], p[1]));
            };
        } else if (op == "conv2d" || op == "conv2d_stride") {
            p1({2, 3, 6, 6});
            params.push_back(testutil::random_tensor<double>({2, 3, 3, 3}, rng, true, "w"));
            params.push_back(testutil::random_tensor<double>({2}, rng, true, "b"));
            const std::size_t stride = op == "conv2d" ? 1 : 2;
            f = [stride, project](const std::vector<T>& p) { return project(conv2d(p[0], p[1], p[2], {stride, 1})); };
        } else if (op == "matmul") {
            p1({3, 4});
            params.push_back(testutil::random_tensor<double>({4, 2}, rng, true, "b"));
            f = [project](const std::vector<T>& p) { return project(matmul(p[0], p[1])); };
        } else if (op == "concat_channel") {
            p1({1, 2, 3, 3});
            params.push_back(testutil::random_tensor<double>({1, 1, 3, 3}, rng, true, "b"));
            f = [project](const std::vector<T>& p) { return project(concat_channel<double>({p[0], p[1]})); };
        } else {
            const bool positive = op == "log" || op == "sqrt";
            p1({1, 3, 4, 4}, positive);
            f = [op, project](const std::vector<T>& p) {
                const T& x = p[0];
                if (op == "neg") return project(neg(x));
                if (op == "exp") return project(pseg::exp(x));
                if (op == "log") return project(pseg::log(x));
                if (op == "sqrt") return project(pseg::sqrt(x));
                if (op == "abs") return project(pseg::abs(x));
                if (op == "relu") return project(relu(x));
                if (op == "leaky_relu") return project(leaky_relu(x));
                if (op == "tanh") return project(pseg::tanh(x));
                if (op == "sum") return project(sum(x, 1));
                if (op == "mean") return project(mean(x, 2));
                if (op == "max_reduce") return project(max_reduce(x, 1));
                if (op == "broadcast") return project(broadcast_to(x, Shape{2, 3, 4, 4}));
                if (op == "upsample_nearest") return project(upsample_nearest(x, 2));
                if (op == "softmax_channel") return project(softmax_channel(x));
                if (op == "log_softmax_channel") return project(log_softmax_channel(x));
                if (op == "pad") return project(pad2d(x, 1));
                if (op == "slice") return project(slice(x, 2, 1, 3));
                if (op == "gather") return project(gather(x, 3, {3, 0, 0}));
                if (op == "transpose") return project(transpose(reshape(x, Shape{3, 16})));
                throw std::logic_error("unknown op " + op);
            };
        }
        auto rep = finite_difference_check<double>(f, params, 1e-5);
        ASSERT_LE(rep.max_rel_error, 1e-4) << op << " trial " << trial << " analytic " << rep.analytic
                                           << " numeric " << rep.numeric;
    }
}

INSTANTIATE_TEST_SUITE_P(AllOps, PrimitiveGradient,
                         ::testing::Values("add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "abs",
                                           "relu", "leaky_relu", "tanh", "sum", "mean", "max_reduce",
                                           "broadcast", "matmul", "conv2d", "conv2d_stride",
                                           "upsample_nearest", "softmax_channel", "log_softmax_channel",
                                           "concat_channel", "pad", "slice", "gather", "transpose"));

TEST(Determinism, ForwardIsBitIdentical) {
    auto run = [] {
        std::mt19937_64 rng(5);
        auto x = testutil::random_tensor<float>({2, 3, 8, 8}, rng);
        auto w = testutil::random_tensor<float>({4, 3, 3, 3}, rng);
        auto y = softmax_channel(conv2d(x, w, Tensor<float>{}, {2, 1}));
        return std::vector<float>(y.data().begin(), y.data().end());
    };
    EXPECT_EQ(run(), run());
}
