#include "dpflow/core.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <thread>

#include "resample.hpp"

namespace dpflow {

using detail::Border;

Resolution Resolution::make(int width, int height) {
    if (width < kMinSide || height < kMinSide) {
        throw std::invalid_argument("resolution " + std::to_string(width) + "x" + std::to_string(height) +
                                    " is below the minimum of " + std::to_string(kMinSide) + " px per side");
    }
    return {width, height};
}

Resolution Resolution::parse(const std::string& text) {
    auto sep = text.find_first_of("xX");
    int w = 0, h = 0;
    auto bad = [&] { return std::invalid_argument("expected WxH, got '" + text + "'"); };
    if (sep == std::string::npos) throw bad();
    const char* b = text.data();
    auto r1 = std::from_chars(b, b + sep, w);
    auto r2 = std::from_chars(b + sep + 1, b + text.size(), h);
    if (r1.ec != std::errc{} || r1.ptr != b + sep || r2.ec != std::errc{} || r2.ptr != b + text.size()) throw bad();
    return make(w, h);
}

double Resolution::diagonal() const {
    return std::sqrt(static_cast<double>(width) * width + static_cast<double>(height) * height);
}

FlowField::FlowField(int height, int width) : FlowField(height, width, 0.0, 0.0) {}

FlowField::FlowField(int height, int width, double u, double v) : height_(height), width_(width) {
    if (height < 0 || width < 0) throw std::invalid_argument("negative flow dimensions");
    auto n = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
    u_.assign(n, u);
    v_.assign(n, v);
}

FlowField FlowField::from_planes(int height, int width, std::vector<double> u, std::vector<double> v) {
    auto n = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
    if (height < 0 || width < 0 || u.size() != n || v.size() != n) {
        throw std::invalid_argument("flow planes do not match " + std::to_string(height) + "x" +
                                    std::to_string(width));
    }
    FlowField f;
    f.height_ = height;
    f.width_ = width;
    f.u_ = std::move(u);
    f.v_ = std::move(v);
    if (!f.all_finite()) throw std::invalid_argument("flow contains non-finite values");
    return f;
}

bool FlowField::all_finite() const {
    auto finite = [](double x) { return std::isfinite(x); };
    return std::all_of(u_.begin(), u_.end(), finite) && std::all_of(v_.begin(), v_.end(), finite);
}

ValidityMask::ValidityMask(int height, int width, bool fill)
    : height_(height), width_(width),
      valid_(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), fill ? 1 : 0) {}

std::size_t ValidityMask::count() const {
    return static_cast<std::size_t>(std::count(valid_.begin(), valid_.end(), std::uint8_t{1}));
}

Image::Image(int channels, int height, int width, float fill)
    : channels_(channels), height_(height), width_(width),
      data_(static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) * static_cast<std::size_t>(width),
            fill) {}

ImagePair ImagePair::make(Image first, Image second) {
    if (first.channels() != 3) throw std::invalid_argument("image pair must be RGB");
    if (!first.same_shape(second)) throw std::invalid_argument("image pair shapes differ");
    auto in_range = [](const Image& im) {
        return std::all_of(im.data().begin(), im.data().end(), [](float x) { return x >= 0.0f && x <= 1.0f; });
    };
    if (!in_range(first) || !in_range(second)) throw std::invalid_argument("image values must lie in [0,1]");
    return {std::move(first), std::move(second)};
}

namespace {

std::vector<double> resample_plane(std::span<const double> src, int h, int w, int oh, int ow) {
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    std::vector<detail::LinearTap> xt(ow);
    for (int x = 0; x < ow; ++x) xt[x] = detail::linear_tap(detail::source_coord(x, w, ow), w, Border::Extrapolate);
    for (int y = 0; y < oh; ++y) {
        auto ty = detail::linear_tap(detail::source_coord(y, h, oh), h, Border::Extrapolate);
        const double* r0 = src.data() + static_cast<std::size_t>(ty.i0) * w;
        const double* r1 = src.data() + static_cast<std::size_t>(ty.i1) * w;
        for (int x = 0; x < ow; ++x) {
            const auto& t = xt[x];
            double top = t.w0 * r0[t.i0] + t.w1 * r0[t.i1];
            double bot = t.w0 * r1[t.i0] + t.w1 * r1[t.i1];
            out[static_cast<std::size_t>(y) * ow + x] = ty.w0 * top + ty.w1 * bot;
        }
    }
    return out;
}

}  // namespace

FlowField resize_flow(const FlowField& flow, int height, int width) {
    if (height < 1 || width < 1) throw std::invalid_argument("resize_flow target must be at least 1x1");
    if (flow.empty()) throw std::invalid_argument("resize_flow on an empty field");
    if (height == flow.height() && width == flow.width()) return flow;
    auto u = resample_plane(flow.u_plane(), flow.height(), flow.width(), height, width);
    auto v = resample_plane(flow.v_plane(), flow.height(), flow.width(), height, width);
    const double sx = static_cast<double>(width) / flow.width();
    const double sy = static_cast<double>(height) / flow.height();
    for (auto& x : u) x *= sx;
    for (auto& x : v) x *= sy;
    return FlowField::from_planes(height, width, std::move(u), std::move(v));
}

FlowField scale_flow(const FlowField& flow, double factor) {
    if (!(factor > 0.0) || !std::isfinite(factor)) {
        throw std::invalid_argument("scale_flow factor must be positive, got " + std::to_string(factor));
    }
    if (factor == 1.0) return flow;
    const int oh = static_cast<int>(std::lround(factor * flow.height()));
    const int ow = static_cast<int>(std::lround(factor * flow.width()));
    if (oh < 1 || ow < 1) throw std::invalid_argument("scale_flow factor collapses the field below 1x1");
    auto u = resample_plane(flow.u_plane(), flow.height(), flow.width(), oh, ow);
    auto v = resample_plane(flow.v_plane(), flow.height(), flow.width(), oh, ow);
    for (auto& x : u) x *= factor;
    for (auto& x : v) x *= factor;
    return FlowField::from_planes(oh, ow, std::move(u), std::move(v));
}

Image resize_image(const Image& image, Resolution target, ResizeMode mode) {
    target = Resolution::make(target.width, target.height);
    if (image.width() == target.width && image.height() == target.height) return image;
    const int h = image.height(), w = image.width();
    const int oh = target.height, ow = target.width;
    Image out(image.channels(), oh, ow);
    if (mode == ResizeMode::Bilinear) {
        std::vector<detail::LinearTap> xt(ow);
        for (int x = 0; x < ow; ++x) xt[x] = detail::linear_tap(detail::source_coord(x, w, ow), w, Border::Clamp);
        for (int c = 0; c < image.channels(); ++c) {
            for (int y = 0; y < oh; ++y) {
                auto ty = detail::linear_tap(detail::source_coord(y, h, oh), h, Border::Clamp);
                for (int x = 0; x < ow; ++x) {
                    const auto& t = xt[x];
                    double top = t.w0 * image.at(c, ty.i0, t.i0) + t.w1 * image.at(c, ty.i0, t.i1);
                    double bot = t.w0 * image.at(c, ty.i1, t.i0) + t.w1 * image.at(c, ty.i1, t.i1);
                    out.at(c, y, x) = static_cast<float>(std::clamp(ty.w0 * top + ty.w1 * bot, 0.0, 1.0));
                }
            }
        }
        return out;
    }
    std::vector<detail::CubicTap> xt(ow);
    for (int x = 0; x < ow; ++x) xt[x] = detail::cubic_tap(detail::source_coord(x, w, ow), w);
    for (int c = 0; c < image.channels(); ++c) {
        for (int y = 0; y < oh; ++y) {
            auto ty = detail::cubic_tap(detail::source_coord(y, h, oh), h);
            for (int x = 0; x < ow; ++x) {
                double acc = 0.0;
                for (int j = 0; j < 4; ++j) {
                    double row = 0.0;
                    for (int i = 0; i < 4; ++i) row += xt[x].w[i] * image.at(c, ty.idx[j], xt[x].idx[i]);
                    acc += ty.w[j] * row;
                }
                out.at(c, y, x) = static_cast<float>(std::clamp(acc, 0.0, 1.0));
            }
        }
    }
    return out;
}

ImagePair resize_image(const ImagePair& pair, Resolution target, ResizeMode mode) {
    return {resize_image(pair.first, target, mode), resize_image(pair.second, target, mode)};
}

Image warp_backward(const Image& image, const FlowField& flow) {
    if (image.height() != flow.height() || image.width() != flow.width()) {
        throw std::invalid_argument("warp_backward: image and flow shapes differ");
    }
    const int h = image.height(), w = image.width();
    Image out(image.channels(), h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            auto tx = detail::linear_tap(x + flow.u(y, x), w, Border::Clamp);
            auto ty = detail::linear_tap(y + flow.v(y, x), h, Border::Clamp);
            for (int c = 0; c < image.channels(); ++c) {
                double top = tx.w0 * image.at(c, ty.i0, tx.i0) + tx.w1 * image.at(c, ty.i0, tx.i1);
                double bot = tx.w0 * image.at(c, ty.i1, tx.i0) + tx.w1 * image.at(c, ty.i1, tx.i1);
                out.at(c, y, x) = static_cast<float>(ty.w0 * top + ty.w1 * bot);
            }
        }
    }
    return out;
}

int worker_threads() {
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (const char* env = std::getenv("DPFLOWKIT_THREADS")) {
        const int cap = std::atoi(env);
        if (cap > 0) n = cap;
    }
    return std::max(1, n);
}

}  // namespace dpflow
