#include "dpflow/io.hpp"

#include <png.h>

#include <csetjmp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <numbers>
#include <vector>

namespace dpflow {

static_assert(std::endian::native == std::endian::little, "file I/O assumes a little-endian host");

FormatError::FormatError(const std::string& path, std::size_t offset, const std::string& what)
    : std::runtime_error(path + ": " + what + " at byte " + std::to_string(offset)), offset_(offset) {}

void write_flo(const std::string& path, const FlowField& flow) {
    if (flow.empty()) throw std::invalid_argument("write_flo: refusing to write an empty flow field");
    if (!flow.all_finite()) throw std::invalid_argument("write_flo: flow has non-finite values");
    std::vector<float> buf(2 * flow.size());
    for (std::size_t i = 0; i < flow.size(); ++i) {
        buf[2 * i] = static_cast<float>(flow.u_plane()[i]);
        buf[2 * i + 1] = static_cast<float>(flow.v_plane()[i]);
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    const std::int32_t w = flow.width(), h = flow.height();
    os.write(reinterpret_cast<const char*>(&kFloMagic), 4);
    os.write(reinterpret_cast<const char*>(&w), 4);
    os.write(reinterpret_cast<const char*>(&h), 4);
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    if (!os) throw std::runtime_error("failed writing " + path);
}

FlowField read_flo(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (bytes.size() < 4) throw FormatError(path, bytes.size(), "truncated magic");
    float magic;
    std::memcpy(&magic, bytes.data(), 4);
    if (magic != kFloMagic) throw FormatError(path, 0, "bad .flo magic");
    if (bytes.size() < 12) throw FormatError(path, bytes.size(), "truncated header");
    std::int32_t w, h;
    std::memcpy(&w, bytes.data() + 4, 4);
    std::memcpy(&h, bytes.data() + 8, 4);
    if (w < 1 || h < 1 || w > (1 << 16) || h > (1 << 16)) throw FormatError(path, 4, "implausible dimensions");
    const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
    if (bytes.size() < 12 + 8 * n) throw FormatError(path, bytes.size(), "truncated payload");
    FlowField flow(h, w);
    for (std::size_t i = 0; i < n; ++i) {
        float u, v;
        std::memcpy(&u, bytes.data() + 12 + 8 * i, 4);
        std::memcpy(&v, bytes.data() + 16 + 8 * i, 4);
        flow.u_plane()[i] = u;
        flow.v_plane()[i] = v;
    }
    return flow;
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

void png_warn(png_structp, png_const_charp) {}

// rows of 8- or 16-bit samples; 16-bit values are stored in native order and swapped on write
void write_png_rows(const std::string& path, int width, int height, int channels, int depth,
                    const std::vector<std::uint8_t>& pixels) {
    File f(std::fopen(path.c_str(), "wb"));
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warn);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) throw std::runtime_error("png: out of memory");
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("png: failed writing " + path);
    }
    png_init_io(png, f.get());
    const int color = channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), depth, color,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    if (depth == 16) png_set_swap(png);
    const std::size_t stride = static_cast<std::size_t>(width) * channels * (depth / 8);
    for (int y = 0; y < height; ++y)
        png_write_row(png, const_cast<png_bytep>(pixels.data() + stride * static_cast<std::size_t>(y)));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

struct PngData {
    int width = 0;
    int height = 0;
    int channels = 0;  // after expansion: 1, 2, 3 or 4
    int depth = 8;
    std::vector<std::uint8_t> pixels;

    unsigned sample(int y, int x, int c) const {
        const std::size_t i = (static_cast<std::size_t>(y) * width + x) * channels + c;
        if (depth == 16) {
            std::uint16_t v;
            std::memcpy(&v, pixels.data() + 2 * i, 2);
            return v;
        }
        return pixels[i];
    }
};

PngData read_png_rows(const std::string& path) {
    File f(std::fopen(path.c_str(), "rb"));
    if (!f) throw std::runtime_error("cannot open " + path);
    unsigned char sig[8];
    const std::size_t got = std::fread(sig, 1, 8, f.get());
    if (got != 8 || png_sig_cmp(sig, 0, 8) != 0) throw FormatError(path, 0, "not a PNG file");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, png_warn);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) throw std::runtime_error("png: out of memory");
    PngData d;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError(path, static_cast<std::size_t>(std::ftell(f.get())), "corrupt PNG data");
    }
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    d.depth = png_get_bit_depth(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && d.depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (d.depth == 16) png_set_swap(png);
    png_read_update_info(png, info);
    d.width = static_cast<int>(png_get_image_width(png, info));
    d.height = static_cast<int>(png_get_image_height(png, info));
    d.channels = png_get_channels(png, info);
    d.depth = png_get_bit_depth(png, info);
    d.pixels.resize(png_get_rowbytes(png, info) * static_cast<std::size_t>(d.height));
    for (int y = 0; y < d.height; ++y)
        png_read_row(png, d.pixels.data() + png_get_rowbytes(png, info) * static_cast<std::size_t>(y), nullptr);
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return d;
}

void put16(std::vector<std::uint8_t>& buf, std::size_t i, std::uint16_t v) { std::memcpy(buf.data() + 2 * i, &v, 2); }

}  // namespace

void write_kitti_png(const std::string& path, const FlowField& flow, const ValidityMask& mask) {
    if (flow.empty()) throw std::invalid_argument("write_kitti_png: empty flow field");
    if (!mask.matches(flow)) throw std::invalid_argument("write_kitti_png: mask does not match the flow");
    constexpr double kLimit = 512.0;
    std::size_t bad = 0;
    for (std::size_t i = 0; i < flow.size(); ++i) {
        if (!mask.at(i)) continue;
        const double u = flow.u_plane()[i], v = flow.v_plane()[i];
        if (!(std::abs(u) < kLimit && std::abs(v) < kLimit)) ++bad;
    }
    if (bad > 0) {
        throw std::out_of_range("write_kitti_png: " + std::to_string(bad) +
                                " valid pixels exceed the encodable range of +-512 px");
    }
    std::vector<std::uint8_t> buf(flow.size() * 3 * 2);
    auto encode = [](double x) {
        return static_cast<std::uint16_t>(std::clamp(std::lround(x * 64.0 + 32768.0), 0L, 65535L));
    };
    for (std::size_t i = 0; i < flow.size(); ++i) {
        const bool valid = mask.at(i);
        put16(buf, 3 * i, valid ? encode(flow.u_plane()[i]) : 32768);
        put16(buf, 3 * i + 1, valid ? encode(flow.v_plane()[i]) : 32768);
        put16(buf, 3 * i + 2, valid ? 1 : 0);
    }
    write_png_rows(path, flow.width(), flow.height(), 3, 16, buf);
}

std::pair<FlowField, ValidityMask> read_kitti_png(const std::string& path) {
    const auto d = read_png_rows(path);
    if (d.depth != 16 || d.channels != 3) throw FormatError(path, 0, "expected a 16-bit RGB flow PNG");
    FlowField flow(d.height, d.width);
    ValidityMask mask(d.height, d.width, false);
    for (int y = 0; y < d.height; ++y) {
        for (int x = 0; x < d.width; ++x) {
            if (d.sample(y, x, 2) == 0) continue;
            mask.set(y, x, true);
            flow.u(y, x) = (static_cast<double>(d.sample(y, x, 0)) - 32768.0) / 64.0;
            flow.v(y, x) = (static_cast<double>(d.sample(y, x, 1)) - 32768.0) / 64.0;
        }
    }
    return {std::move(flow), std::move(mask)};
}

void write_png(const std::string& path, const Image& image) {
    const int C = image.channels();
    if (C != 1 && C != 3) throw std::invalid_argument("write_png: expected 1 or 3 channels");
    if (image.height() < 1 || image.width() < 1) throw std::invalid_argument("write_png: empty image");
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(image.height()) * image.width() * C);
    std::size_t i = 0;
    for (int y = 0; y < image.height(); ++y)
        for (int x = 0; x < image.width(); ++x)
            for (int c = 0; c < C; ++c)
                buf[i++] = static_cast<std::uint8_t>(std::lround(std::clamp(image.at(c, y, x), 0.0f, 1.0f) * 255.0f));
    write_png_rows(path, image.width(), image.height(), C, 8, buf);
}

Image read_png(const std::string& path) {
    const auto d = read_png_rows(path);
    const double scale = d.depth == 16 ? 65535.0 : 255.0;
    const bool grey = d.channels <= 2;
    Image img(3, d.height, d.width);
    for (int y = 0; y < d.height; ++y)
        for (int x = 0; x < d.width; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) = static_cast<float>(d.sample(y, x, grey ? 0 : c) / scale);
    return img;
}

void write_mask_png(const std::string& path, const ValidityMask& mask) {
    Image img(1, mask.height(), mask.width());
    for (int y = 0; y < mask.height(); ++y)
        for (int x = 0; x < mask.width(); ++x) img.at(0, y, x) = mask(y, x) ? 1.0f : 0.0f;
    write_png(path, img);
}

ValidityMask read_mask_png(const std::string& path) {
    const auto d = read_png_rows(path);
    ValidityMask mask(d.height, d.width, false);
    for (int y = 0; y < d.height; ++y)
        for (int x = 0; x < d.width; ++x) mask.set(y, x, d.sample(y, x, 0) != 0);
    return mask;
}

Image flow_to_color(const FlowField& flow, std::optional<double> max_magnitude) {
    if (!flow.all_finite()) throw std::invalid_argument("flow_to_color: flow has non-finite values");
    double max_mag = 0.0;
    if (max_magnitude) {
        max_mag = *max_magnitude;
    } else if (!flow.empty()) {
        std::vector<double> mags(flow.size());
        for (std::size_t i = 0; i < flow.size(); ++i) mags[i] = std::hypot(flow.u_plane()[i], flow.v_plane()[i]);
        const auto k = static_cast<std::size_t>(std::floor(0.99 * static_cast<double>(mags.size() - 1)));
        std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(k), mags.end());
        max_mag = mags[k];
    }
    Image img(3, flow.height(), flow.width(), 1.0f);
    if (!(max_mag > 0.0)) return img;
    for (int y = 0; y < flow.height(); ++y) {
        for (int x = 0; x < flow.width(); ++x) {
            const double u = flow.u(y, x), v = flow.v(y, x);
            const double sat = std::min(1.0, std::hypot(u, v) / max_mag);
            double hue = std::atan2(v, u) / (2.0 * std::numbers::pi);
            if (hue < 0) hue += 1.0;
            // HSV with V = 1
            const double h6 = hue * 6.0;
            const int sector = static_cast<int>(std::floor(h6)) % 6;
            const double frac = h6 - std::floor(h6);
            const double p = 1.0 - sat, q = 1.0 - sat * frac, t = 1.0 - sat * (1.0 - frac);
            double rgb[3];
            switch (sector) {
                case 0: rgb[0] = 1; rgb[1] = t; rgb[2] = p; break;
                case 1: rgb[0] = q; rgb[1] = 1; rgb[2] = p; break;
                case 2: rgb[0] = p; rgb[1] = 1; rgb[2] = t; break;
                case 3: rgb[0] = p; rgb[1] = q; rgb[2] = 1; break;
                case 4: rgb[0] = t; rgb[1] = p; rgb[2] = 1; break;
                default: rgb[0] = 1; rgb[1] = p; rgb[2] = q; break;
            }
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(rgb[c]);
        }
    }
    return img;
}

}  // namespace dpflow
