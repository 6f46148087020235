#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "dpflow/io.hpp"

using namespace dpflow;
namespace fs = std::filesystem;

namespace {

std::string tmp(const std::string& name) { return (fs::temp_directory_path() / ("dpflow_io_" + name)).string(); }

FlowField random_flow(int h, int w, std::uint64_t seed, double scale) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> d(-scale, scale);
    FlowField f(h, w);
    for (std::size_t i = 0; i < f.size(); ++i) {
        f.u_plane()[i] = static_cast<float>(d(rng));
        f.v_plane()[i] = static_cast<float>(d(rng));
    }
    return f;
}

std::vector<char> bytes_of(const std::string& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::string& p, const std::vector<char>& b) {
    std::ofstream os(p, std::ios::binary);
    os.write(b.data(), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST(Flo, RoundTripIsBitwise) {
    const auto f = random_flow(13, 17, 1, 300.0);
    const auto p = tmp("a.flo");
    write_flo(p, f);
    EXPECT_EQ(read_flo(p), f);
    const auto b = bytes_of(p);
    ASSERT_EQ(b.size(), 12u + 8u * 13 * 17);
    EXPECT_EQ(std::string(b.data(), 4), "PIEH");
    std::int32_t w;
    std::memcpy(&w, b.data() + 4, 4);
    EXPECT_EQ(w, 17);
    fs::remove(p);
}

TEST(Flo, RejectsEmptyAndNonFinite) {
    EXPECT_THROW(write_flo(tmp("e.flo"), FlowField()), std::invalid_argument);
    FlowField f(2, 2);
    f.u(0, 0) = std::nan("");
    EXPECT_THROW(write_flo(tmp("e.flo"), f), std::invalid_argument);
}

TEST(Flo, CorruptionReportsOffset) {
    const auto p = tmp("c.flo");
    write_flo(p, random_flow(4, 4, 2, 5.0));
    auto b = bytes_of(p);
    auto bad = b;
    bad[0] = 'X';
    write_bytes(p, bad);
    try {
        read_flo(p);
        FAIL() << "bad magic accepted";
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 0u);
    }
    b.resize(50);
    write_bytes(p, b);
    try {
        read_flo(p);
        FAIL() << "truncated file accepted";
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 50u);
        EXPECT_NE(std::string(e.what()).find("50"), std::string::npos);
    }
    fs::remove(p);
    EXPECT_THROW(read_flo(tmp("missing.flo")), std::runtime_error);
}

TEST(Kitti, ZeroFlowStoresMidpoint) {
    const auto p = tmp("z.png");
    write_kitti_png(p, FlowField(3, 5), ValidityMask(3, 5));
    const auto raw = read_png(p);
    for (int c = 0; c < 2; ++c) EXPECT_NEAR(raw.at(c, 1, 2) * 65535.0, 32768.0, 1e-2);
    EXPECT_NEAR(raw.at(2, 1, 2) * 65535.0, 1.0, 1e-2);
    fs::remove(p);
}

TEST(Kitti, QuantizationWithinOne128th) {
    const auto f = random_flow(20, 30, 3, 200.0);
    ValidityMask m(20, 30);
    const auto p = tmp("q.png");
    write_kitti_png(p, f, m);
    const auto [g, gm] = read_kitti_png(p);
    EXPECT_EQ(gm, m);
    for (std::size_t i = 0; i < f.size(); ++i) {
        EXPECT_LE(std::abs(g.u_plane()[i] - f.u_plane()[i]), 1.0 / 128 + 1e-9);
        EXPECT_LE(std::abs(g.v_plane()[i] - f.v_plane()[i]), 1.0 / 128 + 1e-9);
    }
    fs::remove(p);
}

TEST(Kitti, InvalidPixelsReadAsZero) {
    FlowField f(4, 4, 7.0, -3.0);
    ValidityMask m(4, 4);
    m.set(2, 1, false);
    const auto p = tmp("i.png");
    write_kitti_png(p, f, m);
    const auto [g, gm] = read_kitti_png(p);
    EXPECT_FALSE(gm(2, 1));
    EXPECT_EQ(g.u(2, 1), 0.0);
    EXPECT_EQ(g.v(2, 1), 0.0);
    EXPECT_EQ(g.u(0, 0), 7.0);
    fs::remove(p);
}

TEST(Kitti, OutOfRangeListsPixelCount) {
    FlowField f(4, 4);
    f.u(0, 0) = 600;
    f.v(1, 1) = -700;
    f.u(2, 2) = 900;
    ValidityMask m(4, 4);
    m.set(2, 2, false);
    try {
        write_kitti_png(tmp("r.png"), f, m);
        FAIL() << "out-of-range flow accepted";
    } catch (const std::out_of_range& e) {
        EXPECT_NE(std::string(e.what()).find("2 valid pixels"), std::string::npos) << e.what();
    }
}

TEST(Png, RoundTripQuantizesTo8Bit) {
    Image img(3, 5, 6);
    std::mt19937 rng(4);
    std::uniform_real_distribution<float> d(0, 1);
    for (auto& v : img.data()) v = d(rng);
    const auto p = tmp("img.png");
    write_png(p, img);
    const auto back = read_png(p);
    ASSERT_TRUE(back.same_shape(img));
    for (std::size_t i = 0; i < img.data().size(); ++i) EXPECT_NEAR(back.data()[i], img.data()[i], 0.5 / 255 + 1e-6);
    Image grey(1, 2, 2, 0.5f);
    write_png(p, grey);
    const auto g = read_png(p);
    EXPECT_EQ(g.channels(), 3);
    EXPECT_EQ(g.at(0, 1, 1), g.at(2, 1, 1));
    fs::remove(p);
    EXPECT_THROW(read_png(tmp("nothing.png")), std::runtime_error);
}

TEST(Png, MaskRoundTrip) {
    ValidityMask m(3, 4);
    m.set(0, 3, false);
    m.set(2, 0, false);
    const auto p = tmp("m.png");
    write_mask_png(p, m);
    EXPECT_EQ(read_mask_png(p), m);
    fs::remove(p);
}

TEST(Png, GarbageIsFormatError) {
    const auto p = tmp("junk.png");
    write_bytes(p, std::vector<char>(40, 'x'));
    EXPECT_THROW(read_png(p), std::runtime_error);
    fs::remove(p);
}

TEST(Color, ZeroFlowIsWhite) {
    const auto img = flow_to_color(FlowField(4, 4));
    for (float v : img.data()) EXPECT_EQ(v, 1.0f);
}

TEST(Color, DirectionSetsHueMagnitudeSetsSaturation) {
    FlowField f(1, 4);
    f.u(0, 0) = 1;   // right: red
    f.v(0, 1) = 1;   // hue 1/4
    f.u(0, 2) = -1;  // left: cyan
    f.u(0, 3) = 0.5;
    const auto img = flow_to_color(f, 1.0);
    EXPECT_NEAR(img.at(0, 0, 0), 1.0, 1e-6);
    EXPECT_NEAR(img.at(1, 0, 0), 0.0, 1e-6);
    EXPECT_NEAR(img.at(2, 0, 0), 0.0, 1e-6);
    EXPECT_NEAR(img.at(0, 0, 2), 0.0, 1e-6);
    EXPECT_NEAR(img.at(1, 0, 2), 1.0, 1e-6);
    EXPECT_NEAR(img.at(2, 0, 2), 1.0, 1e-6);
    EXPECT_NEAR(img.at(1, 0, 3), 0.5, 1e-6);
    for (float v : img.data()) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
    }
}
