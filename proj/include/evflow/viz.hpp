#pragma once

#include "evflow/flow.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace evflow {

struct VizOptions
{
  /// Magnitude mapped to full saturation; <= 0 normalizes by the largest valid magnitude.
  double max_magnitude = 0;
};

/// Middlebury color wheel; returns the RGB for a flow vector already divided by the scale.
std::array<std::uint8_t, 3> flow_color(double fu, double fv);

/// Hue encodes direction, saturation magnitude; invalid pixels are black.
std::vector<std::uint8_t> flow_to_rgb(const FlowField<double> &flow, const VizOptions &options = {},
                                      double *used_scale = nullptr);

} // namespace evflow
