#pragma once

#include "evflow/flow.hpp"
#include "evflow/geometry.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace evflow {

// 16-bit flow images: channels (u, v, valid), u_px = (raw - 2^15) / 128.
inline constexpr double kFlowCodecScale = 128.0;
inline constexpr double kFlowCodecOffset = 32768.0;
/// Smallest and largest encodable components.
inline constexpr double kFlowCodecMin = -kFlowCodecOffset / kFlowCodecScale;
inline constexpr double kFlowCodecMax = (65535.0 - kFlowCodecOffset) / kFlowCodecScale;

std::uint16_t encode_flow_component(double value);
double decode_flow_component(std::uint16_t raw);

void write_flow_png(const std::filesystem::path &path, const FlowField<double> &flow);
FlowField<double> read_flow_png(const std::filesystem::path &path);

// Lossless raw-float container (Middlebury .flo). Invalid pixels hold 1e10.
void write_flo(const std::filesystem::path &path, const FlowField<double> &flow);
FlowField<double> read_flo(const std::filesystem::path &path);

/// Reads either container by extension (.png or .flo).
FlowField<double> read_flow(const std::filesystem::path &path);

// 16-bit single channel, value / 256 = disparity, 0 = invalid.
void write_disparity_png(const std::filesystem::path &path, const DisparityMap &disp);
DisparityMap read_disparity_png(const std::filesystem::path &path);

/// 8-bit RGB, rgb holds height*width*3 bytes row-major.
void write_rgb_png(const std::filesystem::path &path, int height, int width, const std::vector<std::uint8_t> &rgb);
std::vector<std::uint8_t> read_rgb_png(const std::filesystem::path &path, int *height, int *width);

} // namespace evflow
