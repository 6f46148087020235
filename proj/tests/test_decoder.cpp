#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "dpflow/decoder.hpp"
#include "dpflow/loss.hpp"
#include "dpflow/model.hpp"
#include "gradcheck.hpp"

using namespace dpflow;
using testutil::grad_check;
using testutil::random_tensor;

namespace {

Image noise_image(int h, int w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    Image img(3, h, w);
    for (auto& v : img.data()) v = d(rng);
    return img;
}

int argmax_channel(const nn::Tensor<double>& t, int y, int x) {
    int best = 0;
    for (int k = 1; k < t.channels(); ++k)
        if (t.at(k, y, x) > t.at(best, y, x)) best = k;
    return best;
}

}  // namespace

TEST(Correlation, ChannelCountForRadiusFour) {
    std::mt19937_64 rng(1);
    auto f = nn::constant(random_tensor({4, 10, 10}, rng));
    EXPECT_EQ(correlation_volume(f, f, nn::Tensor<double>({2, 10, 10}), 4)->value.channels(), 81);
}

TEST(Correlation, SelfSimilarityPeaksAtZeroDisplacement) {
    std::mt19937_64 rng(2);
    auto f = nn::constant(random_tensor({16, 9, 9}, rng));
    const auto c = correlation_volume(f, f, nn::Tensor<double>({2, 9, 9}), 2)->value;
    for (int y = 2; y < 7; ++y)
        for (int x = 2; x < 7; ++x) EXPECT_EQ(argmax_channel(c, y, x), 12);
}

TEST(Correlation, ShiftedFeaturesPeakAtShift) {
    std::mt19937_64 rng(3);
    auto t1 = random_tensor({16, 9, 11}, rng);
    nn::Tensor<double> t2({16, 9, 11});
    // f2(p + (1,0)) = f1(p)
    for (int c = 0; c < 16; ++c)
        for (int y = 0; y < 9; ++y)
            for (int x = 0; x < 11; ++x) t2.at(c, y, x) = t1.at(c, y, std::max(0, x - 1));
    const auto c = correlation_volume(nn::constant(t1), nn::constant(t2), nn::Tensor<double>({2, 9, 11}), 1)->value;
    // brute-force argmax over displacements
    for (int y = 1; y < 8; ++y)
        for (int x = 1; x < 9; ++x) {
            int best_dx = 0, best_dy = 0;
            double best = -1e300;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    double s = 0;
                    for (int ch = 0; ch < 16; ++ch) s += t1.at(ch, y, x) * t2.at(ch, y + dy, x + dx);
                    if (s > best) {
                        best = s;
                        best_dx = dx;
                        best_dy = dy;
                    }
                }
            EXPECT_EQ(best_dx, 1);
            EXPECT_EQ(best_dy, 0);
            EXPECT_EQ(argmax_channel(c, y, x), (best_dy + 1) * 3 + (best_dx + 1));
        }
}

TEST(Correlation, WarpByFlowUndoesShift) {
    std::mt19937_64 rng(4);
    auto t1 = random_tensor({8, 8, 12}, rng);
    nn::Tensor<double> t2({8, 8, 12});
    for (int c = 0; c < 8; ++c)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 12; ++x) t2.at(c, y, x) = t1.at(c, y, std::max(0, x - 2));
    nn::Tensor<double> flow({2, 8, 12});
    for (std::size_t i = 0; i < 96; ++i) flow[i] = 2.0;
    const auto c = correlation_volume(nn::constant(t1), nn::constant(t2), flow, 1)->value;
    const auto self = nn::local_correlation(nn::constant(t1), nn::constant(t1), 1)->value;
    for (int k = 0; k < 9; ++k)
        for (int y = 1; y < 7; ++y)
            for (int x = 1; x < 9; ++x) EXPECT_NEAR(c.at(k, y, x), self.at(k, y, x), 1e-12);
}

TEST(Correlation, ShapeMismatchThrows) {
    auto a = nn::constant(nn::Tensor<double>({4, 5, 5}));
    auto b = nn::constant(nn::Tensor<double>({4, 5, 6}));
    EXPECT_THROW(correlation_volume(a, b, nn::Tensor<double>({2, 5, 5}), 1), std::invalid_argument);
}

class RefineFixture : public ::testing::Test {
protected:
    static constexpr int C = 4, R = 1, H = 6, W = 6;
    std::mt19937_64 rng{11};
    Initializer init{11};
    DecoderParams<double> params = DecoderParams<double>::make(init, C, R, 2);
    RefinementState<double> state() {
        return {nn::constant(random_tensor({C, H, W}, rng)), nn::constant(random_tensor({2, H, W}, rng)), 1, 0};
    }
};

TEST_F(RefineFixture, ZeroFlowHeadLeavesFlowUnchanged) {
    params.flow_head.weight->value.fill(0.0);
    params.flow_head.bias->value.fill(0.0);
    auto s = state();
    auto corr = nn::constant(random_tensor({9, H, W}, rng));
    auto ctx = nn::constant(random_tensor({C, H, W}, rng));
    auto [next, out] = refine_step(params, s, corr, ctx);
    for (std::size_t i = 0; i < s.flow->value.numel(); ++i) EXPECT_EQ(out.flow->value[i], s.flow->value[i]);
    EXPECT_EQ(next.iteration, 1);
    EXPECT_EQ(out.flow->value.shape(), s.flow->value.shape());
}

TEST_F(RefineFixture, MixtureParametersRespectBounds) {
    auto s = state();
    auto corr = nn::constant(random_tensor({9, H, W}, rng, -50, 50));
    auto ctx = nn::constant(random_tensor({C, H, W}, rng, -50, 50));
    auto [next, out] = refine_step(params, s, corr, ctx);
    const auto& m = out.mixture->value;
    const std::size_t n = m.plane();
    for (std::size_t i = 0; i < n; ++i) {
        EXPECT_GE(m[i], 0.0);
        EXPECT_LE(m[i], 1.0);
        EXPECT_GE(m[n + i], kScaleFloor);
        EXPECT_GE(m[2 * n + i], kScaleFloor);
    }
}

TEST_F(RefineFixture, IsolatedMixtureOnlyTrainsItsHead) {
    auto s = state();
    auto corr = nn::constant(random_tensor({9, H, W}, rng));
    auto ctx = nn::constant(random_tensor({C, H, W}, rng));
    const auto r = random_tensor({3, H, W}, rng);
    for (bool isolate : {false, true}) {
        for (const auto& p : {params.head.weight, params.mixture_head.weight}) p->grad = nn::Tensor<double>();
        auto [next, out] = refine_step(params, s, corr, ctx, isolate);
        nn::backward(nn::dot(out.mixture, r));
        EXPECT_TRUE(params.mixture_head.weight->has_grad());
        EXPECT_EQ(params.head.weight->has_grad(), !isolate);
        auto [n2, plain] = refine_step(params, s, corr, ctx);
        for (std::size_t i = 0; i < plain.mixture->value.numel(); ++i)
            EXPECT_EQ(plain.mixture->value[i], out.mixture->value[i]);
    }
}

TEST_F(RefineFixture, ShapeMismatchThrows) {
    auto s = state();
    auto corr = nn::constant(random_tensor({9, H, W + 1}, rng));
    auto ctx = nn::constant(random_tensor({C, H, W}, rng));
    EXPECT_THROW(refine_step(params, s, corr, ctx), std::invalid_argument);
}

class RefineGrad : public ::testing::TestWithParam<int> {};

TEST_P(RefineGrad, MolLossMatchesFiniteDifferences) {
    const auto seed = static_cast<std::uint64_t>(GetParam());
    constexpr int C = 4, H = 6, W = 6;
    Initializer init(seed + 31);
    auto params = DecoderParams<double>::make(init, C, 1, 2);
    std::mt19937_64 rng(seed);
    RefinementState<double> s{nn::parameter(random_tensor({C, H, W}, rng)),
                              nn::parameter(random_tensor({2, H, W}, rng)), 1, 0};
    auto corr = nn::parameter(random_tensor({9, H, W}, rng));
    auto ctx = nn::parameter(random_tensor({C, H, W}, rng));
    const auto gt = random_tensor({2, H, W}, rng, -2, 2);
    ValidityMask mask(H, W);
    std::vector<nn::Var<double>> inputs{s.hidden, s.flow, corr, ctx};
    // parameters used inside refine_step
    for (const Conv<double>* c : {&params.motion1, &params.motion2, &params.gru_zr, &params.gru_q, &params.head,
                                  &params.flow_head, &params.mixture_head}) {
        inputs.push_back(c->weight);
        inputs.push_back(c->bias);
    }
    params.gru_cgu.visit("cgu", [&](const std::string&, const nn::Var<double>& v) { inputs.push_back(v); });
    auto loss = [&] {
        auto [next, out] = refine_step(params, s, corr, ctx);
        ScalePrediction<double> p{1, 1, out.flow, out.mixture};
        return mol_nll(p, gt, mask);
    };
    const auto res = grad_check(inputs, loss);
    EXPECT_LT(res.max_rel_error, 1e-4) << "checked " << res.checked;
}

INSTANTIATE_TEST_SUITE_P(Seeds, RefineGrad, ::testing::Range(0, 20));

namespace {

struct DecodeCase {
    int levels;
    int iters;
    int height;
    int width;
};

}  // namespace

class DecodeShapes : public ::testing::TestWithParam<DecodeCase> {};

TEST_P(DecodeShapes, PredictionCountAndResolution) {
    const auto c = GetParam();
    ModelConfig cfg;
    cfg.width = 8;
    cfg.iters = c.iters;
    auto m = DPFlowModel<float>::make(cfg, 3);
    const auto pair = ImagePair::make(noise_image(c.height, c.width, 1), noise_image(c.height, c.width, 2));
    DecodeOptions o;
    o.iters = c.iters;
    const auto preds = m.forward(pair, c.levels, o);
    ASSERT_EQ(static_cast<int>(preds.size()), c.levels * c.iters);
    std::set<std::pair<int, int>> seen;
    for (const auto& p : preds) {
        seen.insert({p.level, p.iteration});
        EXPECT_EQ(p.flow->value.height(), c.height);
        EXPECT_EQ(p.flow->value.width(), c.width);
        EXPECT_EQ(p.mixture->value.channels(), 3);
        for (std::size_t i = 0; i < p.flow->value.numel(); ++i) ASSERT_TRUE(std::isfinite(p.flow->value[i]));
        for (std::size_t i = 0; i < p.mixture->value.numel(); ++i) ASSERT_TRUE(std::isfinite(p.mixture->value[i]));
    }
    EXPECT_EQ(static_cast<int>(seen.size()), c.levels * c.iters);
    EXPECT_EQ(preds.back().level, 1);
    EXPECT_EQ(preds.back().iteration, c.iters);
}

INSTANTIATE_TEST_SUITE_P(Cases, DecodeShapes,
                         ::testing::Values(DecodeCase{3, 4, 64, 64}, DecodeCase{1, 1, 16, 16},
                                           DecodeCase{2, 2, 37, 45}, DecodeCase{3, 2, 50, 70}));

TEST(Decode, ZeroRefinementWeightsGiveZeroFlow) {
    ModelConfig cfg;
    cfg.width = 8;
    auto m = DPFlowModel<double>::make(cfg, 5);
    m.decoder.flow_head.weight->value.fill(0.0);
    m.decoder.flow_head.bias->value.fill(0.0);
    const auto pair = ImagePair::make(noise_image(48, 40, 3), noise_image(48, 40, 4));
    DecodeOptions o;
    o.iters = 3;
    for (const auto& p : m.forward(pair, 3, o))
        for (std::size_t i = 0; i < p.flow->value.numel(); ++i) ASSERT_EQ(p.flow->value[i], 0.0);
}

TEST(Decode, LevelCountMismatchThrows) {
    ModelConfig cfg;
    cfg.width = 8;
    auto m = DPFlowModel<float>::make(cfg, 5);
    const auto img = noise_image(64, 64, 5);
    const auto a = encode(m.encoder, img, 3);
    const auto b = encode(m.encoder, img, 2);
    EXPECT_THROW(decode(m.decoder, a, b, 64, 64), std::invalid_argument);
}

TEST(Decode, FinalOnlyMatchesLastOfAll) {
    ModelConfig cfg;
    cfg.width = 8;
    auto m = DPFlowModel<float>::make(cfg, 6);
    const auto pair = ImagePair::make(noise_image(32, 48, 7), noise_image(32, 48, 8));
    DecodeOptions all, last;
    all.iters = last.iters = 2;
    last.all_predictions = false;
    const auto a = m.forward(pair, 2, all);
    const auto b = m.forward(pair, 2, last);
    ASSERT_EQ(b.size(), 1u);
    for (std::size_t i = 0; i < a.back().flow->value.numel(); ++i)
        EXPECT_EQ(a.back().flow->value[i], b.back().flow->value[i]);
}
