#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>

#include "dpflow/core.hpp"

namespace dpflow {

/// Malformed file contents; offset is the byte position where parsing failed.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& path, std::size_t offset, const std::string& what);
    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};

constexpr float kFloMagic = 202021.25f;

void write_flo(const std::string& path, const FlowField& flow);
FlowField read_flo(const std::string& path);

/// 16-bit RGB PNG holding u*64 + 2^15, v*64 + 2^15 and validity. Throws std::out_of_range when
/// any valid pixel has |u| or |v| outside the encodable range.
void write_kitti_png(const std::string& path, const FlowField& flow, const ValidityMask& mask);
/// Invalid pixels come back with zero flow.
std::pair<FlowField, ValidityMask> read_kitti_png(const std::string& path);

/// 8-bit PNG: 1 channel is grey, 3 channels RGB. Values are clamped to [0,1].
void write_png(const std::string& path, const Image& image);
/// Returns RGB in [0,1]; grey inputs are replicated, alpha is dropped, 16-bit is kept exact.
Image read_png(const std::string& path);

void write_mask_png(const std::string& path, const ValidityMask& mask);
ValidityMask read_mask_png(const std::string& path);

/// Colour wheel: hue from the flow direction, saturation from magnitude / max_magnitude
/// (99th percentile of magnitudes when absent), full value. Zero flow is white.
Image flow_to_color(const FlowField& flow, std::optional<double> max_magnitude = std::nullopt);

}  // namespace dpflow
