#pragma once

// Forward warping of a flow field onto the next timestep by bilinear average
// splatting. Each source pixel x carries its flow f(x) to g(x) = x + f(x); the
// value at a target pixel is the kernel-weighted mean of everything that
// landed on it. The displacement that moves a pixel is the previous flow
// itself, i.e. g is evaluated with F_{i-1 -> i}.

#include "evflow/autodiff.hpp"
#include "evflow/flow.hpp"

namespace evflow {

inline constexpr double kSplatEpsilon = 1e-6;

/// max(0, 1-|ax|) * max(0, 1-|ay|)
template <typename Scalar>
Scalar bilinear_kernel(Scalar ax, Scalar ay)
{
  using std::abs;
  using std::max;
  return max(Scalar(0), Scalar(1) - abs(ax)) * max(Scalar(0), Scalar(1) - abs(ay));
}

template <typename Scalar>
struct SplatAccumulator
{
  Tensor<Scalar> numerator;   // (2, H, W) weighted flow sum
  Tensor<Scalar> denominator; // (1, H, W) weight sum
};

struct WarpOptions
{
  double epsilon = kSplatEpsilon;
  /// Treat the splat positions as constants in the backward pass.
  bool detach_coordinates = false;
};

/// Scatters every source pixel with mask != 0 (all pixels if mask is empty).
/// Taps falling outside the frame are dropped.
template <typename Scalar>
SplatAccumulator<Scalar> splat_flow(const Tensor<Scalar> &flow, const Tensor<Scalar> &source_mask = {});

template <typename Scalar>
struct WarpResult
{
  Var<Scalar> flow;     // (2, H, W); 0 where the support is below epsilon
  Tensor<Scalar> valid; // (1, H, W), 1 where the support exceeds epsilon
};

/// Differentiable forward warp inside a graph.
template <typename Scalar>
WarpResult<Scalar> forward_warp(Var<Scalar> flow, const WarpOptions &options = {});

/// Out-of-graph version on flow fields; invalid input pixels do not splat.
/// Throws a numeric error naming the first non-finite valid pixel.
template <typename Scalar>
FlowField<Scalar> forward_warp_flow(const FlowField<Scalar> &prev, const WarpOptions &options = {});

/// enabled: forward_warp_flow(prev); disabled: zero field, all valid.
template <typename Scalar>
FlowField<Scalar> warm_start(const FlowField<Scalar> &prev, bool enabled, const WarpOptions &options = {});

} // namespace evflow
