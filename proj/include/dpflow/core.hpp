#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dpflow {

/// Frame size in pixels. Both sides must be at least 8.
struct Resolution {
    int width = 0;
    int height = 0;

    static constexpr int kMinSide = 8;

    /// Throws std::invalid_argument when either side is below kMinSide.
    static Resolution make(int width, int height);

    /// Parses "WxH" (e.g. "192x108").
    static Resolution parse(const std::string& text);

    double diagonal() const;
    bool operator==(const Resolution&) const = default;
};

/// Dense displacement map: u is the x-displacement, v the y-displacement, in pixels.
class FlowField {
public:
    FlowField() = default;
    FlowField(int height, int width);
    FlowField(int height, int width, double u, double v);

    /// Validated constructor: shapes must match height*width and entries be finite.
    static FlowField from_planes(int height, int width, std::vector<double> u, std::vector<double> v);

    int height() const { return height_; }
    int width() const { return width_; }
    std::size_t size() const { return u_.size(); }
    bool empty() const { return u_.empty(); }

    double& u(int y, int x) { return u_[index(y, x)]; }
    double& v(int y, int x) { return v_[index(y, x)]; }
    double u(int y, int x) const { return u_[index(y, x)]; }
    double v(int y, int x) const { return v_[index(y, x)]; }

    std::span<double> u_plane() { return u_; }
    std::span<double> v_plane() { return v_; }
    std::span<const double> u_plane() const { return u_; }
    std::span<const double> v_plane() const { return v_; }

    bool all_finite() const;
    bool same_shape(const FlowField& other) const {
        return height_ == other.height_ && width_ == other.width_;
    }

    bool operator==(const FlowField&) const = default;

private:
    std::size_t index(int y, int x) const {
        return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
    }

    int height_ = 0;
    int width_ = 0;
    std::vector<double> u_;
    std::vector<double> v_;
};

class ValidityMask {
public:
    ValidityMask() = default;
    ValidityMask(int height, int width, bool fill = true);

    int height() const { return height_; }
    int width() const { return width_; }
    std::size_t size() const { return valid_.size(); }

    bool operator()(int y, int x) const { return valid_[index(y, x)] != 0; }
    void set(int y, int x, bool valid) { valid_[index(y, x)] = valid ? 1 : 0; }
    bool at(std::size_t i) const { return valid_[i] != 0; }

    std::size_t count() const;
    bool matches(const FlowField& flow) const {
        return height_ == flow.height() && width_ == flow.width();
    }
    std::span<const std::uint8_t> data() const { return valid_; }

    bool operator==(const ValidityMask&) const = default;

private:
    std::size_t index(int y, int x) const {
        return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
    }

    int height_ = 0;
    int width_ = 0;
    std::vector<std::uint8_t> valid_;
};

/// Planar C x H x W float image.
class Image {
public:
    Image() = default;
    Image(int channels, int height, int width, float fill = 0.0f);

    int channels() const { return channels_; }
    int height() const { return height_; }
    int width() const { return width_; }
    Resolution resolution() const { return {width_, height_}; }

    float& at(int c, int y, int x) { return data_[index(c, y, x)]; }
    float at(int c, int y, int x) const { return data_[index(c, y, x)]; }

    std::span<float> data() { return data_; }
    std::span<const float> data() const { return data_; }

    bool same_shape(const Image& other) const {
        return channels_ == other.channels_ && height_ == other.height_ && width_ == other.width_;
    }
    bool operator==(const Image&) const = default;

private:
    std::size_t index(int c, int y, int x) const {
        return (static_cast<std::size_t>(c) * static_cast<std::size_t>(height_) + static_cast<std::size_t>(y)) *
                   static_cast<std::size_t>(width_) +
               static_cast<std::size_t>(x);
    }

    int channels_ = 0;
    int height_ = 0;
    int width_ = 0;
    std::vector<float> data_;
};

/// Two RGB frames of identical shape with values in [0,1].
struct ImagePair {
    Image first;
    Image second;

    /// Throws std::invalid_argument unless both images are 3-channel, share a shape and lie in [0,1].
    static ImagePair make(Image first, Image second);

    Resolution resolution() const { return first.resolution(); }
};

enum class ResizeMode { Bilinear, Bicubic };

/// Bilinear resample of u and v followed by multiplication with `factor`.
/// Output is round(factor*H) x round(factor*W).
FlowField scale_flow(const FlowField& flow, double factor);

/// Resample to an explicit size; u is multiplied by W'/W and v by H'/H.
FlowField resize_flow(const FlowField& flow, int height, int width);

Image resize_image(const Image& image, Resolution target, ResizeMode mode);
ImagePair resize_image(const ImagePair& pair, Resolution target, ResizeMode mode);

/// output(x,y) = image sampled bilinearly at (x+u, y+v), coordinates clamped to the border.
Image warp_backward(const Image& image, const FlowField& flow);

/// Worker thread count: DPFLOWKIT_THREADS when set, else hardware concurrency (at least 1).
int worker_threads();

}  // namespace dpflow
