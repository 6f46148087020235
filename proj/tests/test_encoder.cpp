#include <gtest/gtest.h>

#include <random>

#include "dpflow/encoder.hpp"
#include "dpflow/model.hpp"

using namespace dpflow;

namespace {

Image noise_image(int h, int w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    Image img(3, h, w);
    for (auto& v : img.data()) v = d(rng);
    return img;
}

}  // namespace

TEST(Encoder, PyramidDimsHalveWithCeil) {
    const auto dims = pyramid_dims(100, 70, 3);
    ASSERT_EQ(dims.size(), 3u);
    EXPECT_EQ(dims[0], std::make_pair(25, 18));
    EXPECT_EQ(dims[1], std::make_pair(13, 9));
    EXPECT_EQ(dims[2], std::make_pair(7, 5));
}

TEST(Encoder, LevelShapesFollowPyramidDims) {
    Initializer init(1);
    auto p = EncoderParams<float>::make(init, 8);
    const auto img = noise_image(64, 96, 1);
    const auto pyr = encode(p, img, 3);
    ASSERT_EQ(pyr.count(), 3);
    const auto dims = pyramid_dims(64, 96, 3);
    for (int s = 1; s <= 3; ++s) {
        const auto& v = pyr.level(s)->value;
        EXPECT_EQ(v.channels(), 8);
        EXPECT_EQ(v.height(), dims[static_cast<std::size_t>(s - 1)].first);
        EXPECT_EQ(v.width(), dims[static_cast<std::size_t>(s - 1)].second);
    }
}

TEST(Encoder, RejectsInputsBelowMinimum) {
    Initializer init(1);
    auto p = EncoderParams<float>::make(init, 4);
    EXPECT_EQ(encoder_min_side(3), 16);
    EXPECT_THROW(encode(p, noise_image(15, 40, 1), 3), std::invalid_argument);
    EXPECT_NO_THROW(encode(p, noise_image(16, 16, 1), 3));
    EXPECT_THROW(stem_forward(p, noise_image(3, 8, 1)), std::invalid_argument);
    try {
        stem_forward(p, noise_image(3, 8, 1));
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("4x4"), std::string::npos);
    }
}

TEST(Encoder, NormalizationIsInvariantToAffineIntensity) {
    Initializer init(2);
    auto p = EncoderParams<double>::make(init, 4);
    auto a = noise_image(32, 32, 3);
    Image b = a;
    for (auto& v : b.data()) v = 0.1f + 0.5f * v;
    const auto fa = encode(p, a, 2).level(1)->value;
    const auto fb = encode(p, b, 2).level(1)->value;
    for (std::size_t i = 0; i < fa.numel(); ++i) EXPECT_NEAR(fa[i], fb[i], 1e-5);
}

TEST(Encoder, ParameterCountIndependentOfDepth) {
    auto m = DPFlowModel<float>::make({}, 1);
    const auto before = m.parameter_count();
    const auto img = noise_image(128, 128, 4);
    encode(m.encoder, img, 3);
    encode(m.encoder, img, 6);
    EXPECT_EQ(m.parameter_count(), before);
}

TEST(Encoder, DeepPerturbationReachesFinestLevel) {
    Initializer init(3);
    auto p = EncoderParams<float>::make(init, 8);
    const auto img = noise_image(128, 128, 5);
    for (int n = 2; n <= 6; ++n) EXPECT_TRUE(perturbation_reach(p, img, n)) << "N=" << n;
}

TEST(Encoder, AblatedBackwardPassBlocksPerturbation) {
    Initializer init(3);
    auto p = EncoderParams<float>::make(init, 8);
    const auto img = noise_image(64, 64, 6);
    EXPECT_FALSE(perturbation_reach(p, img, 3, true));
}

TEST(Encoder, ForwardPassFeedsDeeperLevels) {
    // changing only the stem output changes every level
    Initializer init(4);
    auto p = EncoderParams<double>::make(init, 4);
    auto a = noise_image(32, 32, 7);
    Image b = a;
    b.at(0, 0, 0) = 1.0f - b.at(0, 0, 0);
    const auto pa = encode(p, a, 3);
    const auto pb = encode(p, b, 3);
    for (int s = 1; s <= 3; ++s) {
        const auto& x = pa.level(s)->value;
        const auto& y = pb.level(s)->value;
        double diff = 0.0;
        for (std::size_t i = 0; i < x.numel(); ++i) diff += std::abs(x[i] - y[i]);
        EXPECT_GT(diff, 0.0) << "level " << s;
    }
}
