#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "dpflow/loss.hpp"
#include "gradcheck.hpp"

using namespace dpflow;
using testutil::grad_check;
using testutil::random_tensor;

namespace {

MixturePrediction uniform_pred(int h, int w, double u, double v, double alpha, double b1, double b2, int s = 1,
                               int k = 1) {
    MixturePrediction p;
    p.level = s;
    p.iteration = k;
    p.flow = FlowField(h, w, u, v);
    const std::size_t n = static_cast<std::size_t>(h) * w;
    p.alpha.assign(n, alpha);
    p.b1.assign(n, b1);
    p.b2.assign(n, b2);
    return p;
}

// Independent per-axis mixture NLL.
double oracle_nll(double r, double alpha, double b1, double b2) {
    const double d1 = std::exp(-std::abs(r) / b1) / (2 * b1);
    const double d2 = std::exp(-std::abs(r) / b2) / (2 * b2);
    return -std::log(alpha * d1 + (1 - alpha) * d2);
}

MixturePrediction random_pred(int h, int w, std::mt19937_64& rng, int s, int k) {
    std::uniform_real_distribution<double> flow(-3, 3), a(0.0, 1.0), b(0.05, 3.0);
    MixturePrediction p = uniform_pred(h, w, 0, 0, 0.5, 1, 1, s, k);
    for (std::size_t i = 0; i < p.flow.size(); ++i) {
        p.flow.u_plane()[i] = flow(rng);
        p.flow.v_plane()[i] = flow(rng);
        p.alpha[i] = a(rng);
        p.b1[i] = b(rng);
        p.b2[i] = b(rng);
    }
    return p;
}

}  // namespace

TEST(MolNll, PerfectPredictionWithUnitScale) {
    const auto p = uniform_pred(3, 3, 0, 0, 1.0, 1.0, 5.0);
    const auto l = mol_nll(p, FlowField(3, 3), ValidityMask(3, 3));
    EXPECT_NEAR(l.value, std::numbers::ln2, 1e-12);
    EXPECT_FALSE(l.empty_mask);
}

TEST(MolNll, ResidualThreeWithUnitScale) {
    const auto p = uniform_pred(2, 4, 3.0, -3.0, 1.0, 1.0, 0.5);
    const auto l = mol_nll(p, FlowField(2, 4), ValidityMask(2, 4));
    EXPECT_NEAR(l.value, 3.0 + std::numbers::ln2, 1e-12);
}

TEST(MolNll, EmptyMaskIsZeroWithFlag) {
    const auto p = uniform_pred(2, 2, 3.0, 1.0, 0.5, 1.0, 2.0);
    const auto l = mol_nll(p, FlowField(2, 2), ValidityMask(2, 2, false));
    EXPECT_EQ(l.value, 0.0);
    EXPECT_TRUE(l.empty_mask);
}

TEST(MolNll, MatchesScalarOracleOnRandomInputs) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        const auto p = random_pred(4, 5, rng, 1, 1);
        FlowField gt(4, 5);
        ValidityMask mask(4, 5);
        std::uniform_real_distribution<double> g(-3, 3);
        std::bernoulli_distribution keep(0.7);
        for (std::size_t i = 0; i < gt.size(); ++i) {
            gt.u_plane()[i] = g(rng);
            gt.v_plane()[i] = g(rng);
            mask.set(static_cast<int>(i / 5), static_cast<int>(i % 5), keep(rng));
        }
        if (mask.count() == 0) continue;
        double sum = 0;
        for (std::size_t i = 0; i < gt.size(); ++i) {
            if (!mask.at(i)) continue;
            sum += oracle_nll(p.flow.u_plane()[i] - gt.u_plane()[i], p.alpha[i], p.b1[i], p.b2[i]);
            sum += oracle_nll(p.flow.v_plane()[i] - gt.v_plane()[i], p.alpha[i], p.b1[i], p.b2[i]);
        }
        EXPECT_NEAR(mol_nll(p, gt, mask).value, sum / (2.0 * mask.count()), 1e-10);
    }
}

TEST(MolNll, LowerBoundFromScaleFloor) {
    std::mt19937_64 rng(5);
    const double bound = std::log(2 * kScaleFloor);
    std::uniform_real_distribution<double> a(0, 1), r(-1e-3, 1e-3);
    for (int trial = 0; trial < 200; ++trial) {
        auto p = uniform_pred(2, 2, r(rng), r(rng), a(rng), kScaleFloor, kScaleFloor + a(rng));
        EXPECT_GE(mol_nll(p, FlowField(2, 2), ValidityMask(2, 2)).value, bound);
    }
}

TEST(MolNll, UnitAlphaOrderingEqualsL1Ordering) {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> d(-5, 5);
    FlowField gt(3, 3, 0.7, -1.2);
    ValidityMask mask(3, 3);
    std::vector<std::pair<double, double>> scores;
    for (int c = 0; c < 20; ++c) {
        auto p = uniform_pred(3, 3, d(rng), d(rng), 1.0, 1.3, 0.2);
        const double l1 = std::abs(p.flow.u(0, 0) - 0.7) + std::abs(p.flow.v(0, 0) + 1.2);
        scores.emplace_back(l1, mol_nll(p, gt, mask).value);
    }
    std::sort(scores.begin(), scores.end());
    for (std::size_t i = 1; i < scores.size(); ++i) EXPECT_LE(scores[i - 1].second, scores[i].second);
}

TEST(MolNll, AmbiguityDampingBeyondCrossover) {
    // pure L1-like: r + ln 2. Mixture with alpha=0.5, b2 large: grows like |r|/b2.
    const double b2 = 10.0;
    auto l1_like = [](double r) { return oracle_nll(r, 1.0, 1.0, 1.0); };
    auto mixed = [&](double r) { return oracle_nll(r, 0.5, 1.0, b2); };
    // crossover by bisection on the closed forms
    double lo = 0.0, hi = 100.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (mixed(mid) < l1_like(mid) ? hi : lo) = mid;
    }
    const double crossover = hi;
    for (double r : {crossover + 0.01, crossover + 1.0, 20.0, 50.0}) {
        const auto a = mol_nll(uniform_pred(2, 2, r, -r, 0.5, 1.0, b2), FlowField(2, 2), ValidityMask(2, 2)).value;
        const auto b = mol_nll(uniform_pred(2, 2, r, -r, 1.0, 1.0, b2), FlowField(2, 2), ValidityMask(2, 2)).value;
        EXPECT_LT(a, b) << "r=" << r;
    }
}

TEST(LossConfig, WeightsFollowExponent) {
    LossConfig cfg;
    EXPECT_EQ(cfg.weight(1, 4), 1.0);
    EXPECT_NEAR(cfg.weight(3, 4), 0.16777216, 1e-12);
    EXPECT_NEAR(cfg.weight(2, 1), std::pow(0.8, 7), 1e-15);
    EXPECT_THROW((LossConfig{1.0, 3, 4}.validate()), std::invalid_argument);
    EXPECT_THROW((LossConfig{0.0, 3, 4}.validate()), std::invalid_argument);
}

TEST(MultiscaleLoss, EqualTermsMatchBruteForceSum) {
    LossConfig cfg;
    std::vector<MixturePrediction> preds;
    for (int s = 1; s <= 3; ++s)
        for (int k = 1; k <= 4; ++k) preds.push_back(uniform_pred(2, 3, 3.0, 0.0, 1.0, 1.0, 1.0, s, k));
    const double term = mol_nll(preds[0], FlowField(2, 3), ValidityMask(2, 3)).value;
    double weights = 0;
    for (int s = 1; s <= 3; ++s)
        for (int k = 1; k <= 4; ++k) weights += std::pow(0.8, 4 * s - k);
    const auto total = multiscale_loss(preds, FlowField(2, 3), ValidityMask(2, 3), cfg);
    EXPECT_NEAR(total.value, term * weights, 1e-12);
}

TEST(MultiscaleLoss, OrderInvariant) {
    std::mt19937_64 rng(8);
    LossConfig cfg;
    std::vector<MixturePrediction> preds;
    for (int s = 1; s <= 3; ++s)
        for (int k = 1; k <= 4; ++k) preds.push_back(random_pred(3, 3, rng, s, k));
    FlowField gt(3, 3, 0.5, -0.5);
    const double a = multiscale_loss(preds, gt, ValidityMask(3, 3), cfg).value;
    for (int trial = 0; trial < 5; ++trial) {
        std::shuffle(preds.begin(), preds.end(), rng);
        EXPECT_EQ(multiscale_loss(preds, gt, ValidityMask(3, 3), cfg).value, a);
    }
}

TEST(MultiscaleLoss, MissingOrDuplicateEntryThrows) {
    LossConfig cfg;
    std::vector<MixturePrediction> preds;
    for (int s = 1; s <= 3; ++s)
        for (int k = 1; k <= 4; ++k) preds.push_back(uniform_pred(2, 2, 0, 0, 0.5, 1, 1, s, k));
    auto missing = preds;
    missing.erase(missing.begin() + 5);
    EXPECT_THROW(multiscale_loss(missing, FlowField(2, 2), ValidityMask(2, 2), cfg), std::invalid_argument);
    auto dup = missing;
    dup.push_back(preds[0]);
    EXPECT_THROW(multiscale_loss(dup, FlowField(2, 2), ValidityMask(2, 2), cfg), std::invalid_argument);
    auto extra = preds;
    extra.push_back(uniform_pred(2, 2, 0, 0, 0.5, 1, 1, 4, 1));
    EXPECT_THROW(multiscale_loss(extra, FlowField(2, 2), ValidityMask(2, 2), cfg), std::invalid_argument);
}

class LossGrad : public ::testing::TestWithParam<int> {};

TEST_P(LossGrad, MolNllMatchesFiniteDifferences) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(GetParam()) + 50);
    auto flow = nn::parameter(random_tensor({2, 4, 4}, rng, -2, 2));
    auto mixture = nn::parameter(random_tensor({3, 4, 4}, rng, 0.1, 2.0));
    for (int i = 0; i < 16; ++i) mixture->value[i] = 0.05 + 0.9 * (mixture->value[i] - 0.1) / 1.9;
    const auto gt = random_tensor({2, 4, 4}, rng, -2, 2);
    ValidityMask mask(4, 4);
    mask.set(1, 2, false);
    auto f = [&] { return mol_nll(ScalePrediction<double>{1, 1, flow, mixture}, gt, mask); };
    EXPECT_LT(grad_check({flow, mixture}, f).max_rel_error, 1e-4);
}

TEST_P(LossGrad, MultiscaleLossMatchesFiniteDifferences) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(GetParam()) + 90);
    LossConfig cfg{0.8, 2, 3};
    std::vector<ScalePrediction<double>> preds;
    std::vector<nn::Var<double>> inputs;
    for (int s = 1; s <= 2; ++s)
        for (int k = 1; k <= 3; ++k) {
            auto mixture = random_tensor({3, 4, 4}, rng, 0.1, 2.0);
            for (int i = 0; i < 16; ++i) mixture[i] = 0.05 + 0.9 * (mixture[i] - 0.1) / 1.9;
            preds.push_back({s, k, nn::parameter(random_tensor({2, 4, 4}, rng, -2, 2)), nn::parameter(mixture)});
            inputs.push_back(preds.back().flow);
            inputs.push_back(preds.back().mixture);
        }
    FlowField gt(4, 4, 0.3, -0.6);
    ValidityMask mask(4, 4);
    auto f = [&] { return multiscale_loss(preds, gt, mask, cfg); };
    EXPECT_LT(grad_check(inputs, f).max_rel_error, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Seeds, LossGrad, ::testing::Range(0, 20));
