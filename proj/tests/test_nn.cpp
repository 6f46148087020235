#include <gtest/gtest.h>

#include <random>

#include "dpflow/nn/ops.hpp"
#include "gradcheck.hpp"

using namespace dpflow::nn;
using testutil::grad_check;
using testutil::random_tensor;

namespace {

constexpr double kTol = 1e-4;

class OpGrad : public ::testing::TestWithParam<int> {
protected:
    std::mt19937_64 rng{static_cast<std::uint64_t>(GetParam()) * 7919 + 1};
    Var<double> param(std::vector<int> shape, double lo = -1, double hi = 1) {
        return parameter(random_tensor(std::move(shape), rng, lo, hi));
    }
};

}  // namespace

TEST_P(OpGrad, Conv2dStrideAndPad) {
    auto x = param({3, 7, 6});
    auto w = param({4, 3, 3, 3});
    auto b = param({4});
    auto r2 = random_tensor({4, 4, 3}, rng);
    auto r1 = random_tensor({4, 7, 6}, rng);
    EXPECT_LT(grad_check({x, w, b}, [&] { return dot(conv2d(x, w, b, 2), r2); }).max_rel_error, kTol);
    EXPECT_LT(grad_check({x, w, b}, [&] { return dot(conv2d(x, w, b, 1), r1); }).max_rel_error, kTol);
}

TEST_P(OpGrad, PointwiseConv) {
    auto x = param({5, 4, 3});
    auto w = param({2, 5, 1, 1});
    auto r = random_tensor({2, 4, 3}, rng);
    EXPECT_LT(grad_check({x, w}, [&] { return dot(conv2d(x, w, Var<double>{}), r); }).max_rel_error, kTol);
}

TEST_P(OpGrad, Depthwise) {
    auto x = param({3, 6, 5});
    auto w = param({3, 5, 5});
    auto b = param({3});
    auto r = random_tensor({3, 6, 5}, rng);
    EXPECT_LT(grad_check({x, w, b}, [&] { return dot(depthwise_conv2d(x, w, b), r); }).max_rel_error, kTol);
}

TEST_P(OpGrad, Elementwise) {
    auto a = param({2, 3, 4});
    auto b = param({2, 3, 4});
    auto lam = param({2});
    auto r = random_tensor({2, 3, 4}, rng);
    auto f = [&] {
        auto y = add(mul(sigmoid(a), tanh(b)), sub(gelu(a), scale(softplus(b), 0.3)));
        y = mul_channel(add_scalar(y, 0.25), lam);
        return dot(scale_channels(y, {2.0, -0.5}), r);
    };
    EXPECT_LT(grad_check({a, b, lam}, f).max_rel_error, kTol);
}

TEST_P(OpGrad, ConcatSlicePool) {
    auto a = param({2, 5, 5});
    auto b = param({3, 5, 5});
    auto r = random_tensor({2, 3, 3}, rng);
    auto f = [&] { return dot(avg_pool2(slice_channels(concat<double>({a, b}), 2, 4)), r); };
    EXPECT_LT(grad_check({a, b}, f).max_rel_error, kTol);
}

TEST_P(OpGrad, InstanceNorm) {
    auto x = param({3, 4, 5});
    auto r = random_tensor({3, 4, 5}, rng);
    EXPECT_LT(grad_check({x}, [&] { return dot(instance_norm(x), r); }).max_rel_error, kTol);
}

TEST_P(OpGrad, ResizeBilinear) {
    auto x = param({2, 4, 5});
    auto r = random_tensor({2, 9, 7}, rng);
    EXPECT_LT(grad_check({x}, [&] { return dot(resize_bilinear(x, 9, 7, ResampleBorder::Clamp), r); }).max_rel_error,
              kTol);
    EXPECT_LT(
        grad_check({x}, [&] { return dot(resize_bilinear(x, 9, 7, ResampleBorder::Extrapolate), r); }).max_rel_error,
        kTol);
}

TEST_P(OpGrad, WarpAndCorrelation) {
    auto f1 = param({3, 6, 6});
    auto f2 = param({3, 6, 6});
    auto flow = random_tensor({2, 6, 6}, rng, -1.3, 1.3);
    auto r = random_tensor({9, 6, 6}, rng);
    auto f = [&] { return dot(local_correlation(f1, warp(f2, flow), 1), r); };
    EXPECT_LT(grad_check({f1, f2}, f).max_rel_error, kTol);
}

TEST_P(OpGrad, ConvexUpsample) {
    auto flow = param({2, 3, 4});
    auto mask = param({9 * 4, 3, 4}, -2, 2);
    auto r = random_tensor({2, 5, 7}, rng);
    EXPECT_LT(grad_check({flow, mask}, [&] { return dot(convex_upsample(flow, mask, 2, 5, 7), r); }).max_rel_error,
              kTol);
}

TEST_P(OpGrad, SumAndWeightedSum) {
    auto a = param({2, 2, 2});
    auto b = param({1, 3, 3});
    auto f = [&] { return weighted_sum<double>({sum(a), sum(mul(b, b))}, {0.7, -1.3}); };
    EXPECT_LT(grad_check({a, b}, f).max_rel_error, kTol);
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGrad, ::testing::Range(0, 5));

TEST(Ops, ConvMatchesDirectLoop) {
    std::mt19937_64 rng(3);
    auto x = random_tensor({2, 5, 6}, rng);
    auto w = random_tensor({3, 2, 3, 3}, rng);
    auto b = random_tensor({3}, rng);
    auto y = conv2d(constant(x), constant(w), constant(b), 2)->value;
    ASSERT_EQ(y.shape(), (std::vector<int>{3, 3, 3}));
    for (int o = 0; o < 3; ++o)
        for (int oy = 0; oy < 3; ++oy)
            for (int ox = 0; ox < 3; ++ox) {
                double s = b[o];
                for (int c = 0; c < 2; ++c)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
                            if (iy < 0 || iy >= 5 || ix < 0 || ix >= 6) continue;
                            s += w[((o * 2 + c) * 3 + ky) * 3 + kx] * x.at(c, iy, ix);
                        }
                EXPECT_NEAR(y.at(o, oy, ox), s, 1e-12);
            }
}

TEST(Ops, CorrelationSelfPeaksAtZero) {
    std::mt19937_64 rng(5);
    auto f = constant(random_tensor({8, 7, 7}, rng));
    const auto c = local_correlation(f, f, 2)->value;
    ASSERT_EQ(c.channels(), 25);
    for (int y = 2; y < 5; ++y)
        for (int x = 2; x < 5; ++x) {
            int best = 0;
            for (int k = 1; k < 25; ++k)
                if (c.at(k, y, x) > c.at(best, y, x)) best = k;
            EXPECT_EQ(best, 12);
        }
}

TEST(Ops, AvgPoolCeilEdges) {
    Tensor<double> t({1, 3, 3});
    for (int i = 0; i < 9; ++i) t[i] = i;
    const auto p = avg_pool2(constant(t))->value;
    ASSERT_EQ(p.shape(), (std::vector<int>{1, 2, 2}));
    EXPECT_DOUBLE_EQ(p.at(0, 0, 0), (0 + 1 + 3 + 4) / 4.0);
    EXPECT_DOUBLE_EQ(p.at(0, 0, 1), (2 + 5) / 2.0);
    EXPECT_DOUBLE_EQ(p.at(0, 1, 1), 8.0);
}

TEST(Ops, InstanceNormStandardisesEachChannel) {
    Tensor<double> t({2, 3, 4});
    for (int i = 0; i < 24; ++i) t[i] = (i < 12 ? 5.0 : -2.0) + 0.3 * i * i;
    const auto y = instance_norm(constant(t), 1e-12)->value;
    for (int c = 0; c < 2; ++c) {
        double m = 0, v = 0;
        for (int i = 0; i < 12; ++i) m += y[c * 12 + i] / 12;
        for (int i = 0; i < 12; ++i) v += (y[c * 12 + i] - m) * (y[c * 12 + i] - m) / 12;
        EXPECT_NEAR(m, 0.0, 1e-12);
        EXPECT_NEAR(v, 1.0, 1e-9);
    }
    // affine changes of a channel leave the output unchanged
    Tensor<double> u = t;
    for (int i = 0; i < 12; ++i) u[i] = 3.0 * t[i] - 7.0;
    const auto z = instance_norm(constant(u), 1e-12)->value;
    for (int i = 0; i < 24; ++i) EXPECT_NEAR(z[i], y[i], 1e-9);
}

TEST(Ops, ConvexUpsampleOfConstantFlowScales) {
    Tensor<double> flow({2, 3, 3});
    for (int i = 0; i < 9; ++i) {
        flow[i] = 1.5;
        flow[9 + i] = -0.5;
    }
    std::mt19937_64 rng(9);
    auto up = convex_upsample(constant(flow), constant(random_tensor({36, 3, 3}, rng)), 2, 6, 6)->value;
    for (int i = 0; i < 36; ++i) {
        EXPECT_NEAR(up[i], 3.0, 1e-12);
        EXPECT_NEAR(up[36 + i], -1.0, 1e-12);
    }
}

TEST(Ops, ShapeErrors) {
    auto a = constant(Tensor<double>({2, 3, 3}));
    auto b = constant(Tensor<double>({2, 3, 4}));
    EXPECT_THROW(add(a, b), std::invalid_argument);
    EXPECT_THROW(local_correlation(a, b, 1), std::invalid_argument);
    EXPECT_THROW(conv2d(a, constant(Tensor<double>({1, 3, 3, 3})), Var<double>{}), std::invalid_argument);
}

TEST(Autograd, NoGradGuardSkipsRecording) {
    auto p = parameter(Tensor<double>({1}, 2.0));
    {
        NoGradGuard g;
        auto y = mul(p, p);
        EXPECT_FALSE(y->requires_grad);
    }
    auto y = mul(p, p);
    backward(y);
    EXPECT_DOUBLE_EQ(p->grad[0], 4.0);
}

TEST(Autograd, LeafGradientsAccumulate) {
    auto p = parameter(Tensor<double>({1}, 3.0));
    backward(scale(p, 2.0));
    backward(scale(p, 2.0));
    EXPECT_DOUBLE_EQ(p->grad[0], 4.0);
}
