#include "evflow/viz.hpp"

#include <algorithm>
#include <cmath>

namespace evflow {

namespace {

// RY, YG, GC, CB, BM, MR segment lengths of the Middlebury wheel.
std::vector<std::array<double, 3>> make_wheel()
{
  const int RY = 15, YG = 6, GC = 4, CB = 11, BM = 13, MR = 6;
  std::vector<std::array<double, 3>> w;
  for (int i = 0; i < RY; ++i) { w.push_back({255, 255.0 * i / RY, 0}); }
  for (int i = 0; i < YG; ++i) { w.push_back({255 - 255.0 * i / YG, 255, 0}); }
  for (int i = 0; i < GC; ++i) { w.push_back({0, 255, 255.0 * i / GC}); }
  for (int i = 0; i < CB; ++i) { w.push_back({0, 255 - 255.0 * i / CB, 255}); }
  for (int i = 0; i < BM; ++i) { w.push_back({255.0 * i / BM, 0, 255}); }
  for (int i = 0; i < MR; ++i) { w.push_back({255, 0, 255 - 255.0 * i / MR}); }
  return w;
}

const std::vector<std::array<double, 3>> &wheel()
{
  static const auto w = make_wheel();
  return w;
}

} // namespace

std::array<std::uint8_t, 3> flow_color(double fu, double fv)
{
  const auto &w = wheel();
  const int n = int(w.size());
  const double rad = std::min(1.0, std::hypot(fu, fv));
  const double a = std::atan2(-fv, -fu) / M_PI;
  const double fk = (a + 1) / 2 * (n - 1);
  const int k0 = int(std::floor(fk)) % n;
  const int k1 = (k0 + 1) % n;
  const double f = fk - std::floor(fk);
  std::array<std::uint8_t, 3> rgb{};
  for (int c = 0; c < 3; ++c) {
    const double col = ((1 - f) * w[k0][c] + f * w[k1][c]) / 255.0;
    const double v = 1 - rad * (1 - col);
    rgb[c] = std::uint8_t(std::lround(255.0 * v));
  }
  return rgb;
}

std::vector<std::uint8_t> flow_to_rgb(const FlowField<double> &flow, const VizOptions &options, double *used_scale)
{
  double scale = options.max_magnitude;
  if (!(scale > 0)) {
    scale = 0;
    for (int y = 0; y < flow.height(); ++y) {
      for (int x = 0; x < flow.width(); ++x) {
        if (flow.valid(y, x)) { scale = std::max(scale, std::hypot(flow.u(y, x), flow.v(y, x))); }
      }
    }
    if (!(scale > 0)) { scale = 1; }
  }
  if (used_scale) { *used_scale = scale; }
  std::vector<std::uint8_t> rgb(std::size_t(flow.height()) * flow.width() * 3, 0);
  for (int y = 0; y < flow.height(); ++y) {
    for (int x = 0; x < flow.width(); ++x) {
      if (!flow.valid(y, x)) { continue; }
      const auto c = flow_color(flow.u(y, x) / scale, flow.v(y, x) / scale);
      std::copy(c.begin(), c.end(), rgb.begin() + (std::ptrdiff_t(y) * flow.width() + x) * 3);
    }
  }
  return rgb;
}

} // namespace evflow
