#pragma once

#include "evflow/autodiff.hpp"
#include "evflow/events.hpp"
#include "evflow/flow.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace evflow {

enum class UpsampleMode { Convex, Bilinear };

std::string to_string(UpsampleMode mode);
UpsampleMode parse_upsample_mode(const std::string &s);

struct ModelConfig
{
  int voxel_bins = 15;
  bool split_polarity = false;
  int feature_dim = 128;
  int hidden_dim = 96;
  int context_dim = 64;
  int pyramid_levels = 4;
  int lookup_radius = 4;
  int iterations = 12;
  UpsampleMode upsample = UpsampleMode::Convex;
  int encoder_base = 32; // width of the first encoder stage
  int motion_dim = 80;   // width of the motion features fed to the GRU
  /// Stop gradients through the running flow between iterations.
  bool detach_iteration_flow = false;

  int input_channels() const { return split_polarity ? 2 * voxel_bins : voxel_bins; }
  int lookup_channels() const { return pyramid_levels * (2 * lookup_radius + 1) * (2 * lookup_radius + 1); }
  void validate() const;

  /// Scaled-down preset for CPU experiments on small sensors.
  static ModelConfig desk();

  bool operator==(const ModelConfig &) const = default;
};

inline constexpr int kFeatureStride = 8;

/// D x (H/8) x (W/8) features of a padded voxel grid.
template <typename Scalar>
struct FeatureMap
{
  Tensor<Scalar> data;
  int stride = kFeatureStride;
};

template <typename Scalar>
struct CorrelationPyramid
{
  /// Level l: one channel per source cell, each a (h/2^l) x (w/2^l) target plane.
  std::vector<Tensor<Scalar>> levels;
  Scalar scale = 1; // 1/sqrt(D)
};

/// Padding applied to reach a multiple of 8; outputs are cropped back.
struct Padding
{
  int top = 0, bottom = 0, left = 0, right = 0;

  static Padding to_multiple(int height, int width, int multiple = kFeatureStride);
  int padded_height(int h) const { return h + top + bottom; }
  int padded_width(int w) const { return w + left + right; }
  bool none() const { return top == 0 && bottom == 0 && left == 0 && right == 0; }
};

struct ConvLayer
{
  int weight = -1;
  int bias = -1;
  ConvSpec spec;
};

/// Residual CNN reducing resolution by 8 through three 2x2 stride-2 stages.
class Encoder
{
public:
  Encoder() = default;
  template <typename Scalar, typename Rng>
  Encoder(ParameterSet<Scalar> &params, const std::string &prefix, int in_channels, int base, int out_channels,
          Rng &rng);

  template <typename Scalar>
  Var<Scalar> forward(Graph<Scalar> &g, const ParameterSet<Scalar> &params, Var<Scalar> x) const;

  /// Half-width, in input pixels, of the region that can influence one output cell.
  int receptive_radius() const;
  std::vector<int> parameter_indices() const;

private:
  std::vector<ConvLayer> layers() const;
  ConvLayer stem_, down1_, conv1_, down2_, conv2_, down3_, res_a_, res_b_, head_;
};

/// Motion encoder, separable convolutional GRU and the flow/mask heads.
class UpdateBlock
{
public:
  UpdateBlock() = default;
  template <typename Scalar, typename Rng>
  UpdateBlock(ParameterSet<Scalar> &params, const ModelConfig &cfg, Rng &rng);

  template <typename Scalar>
  struct Output
  {
    Var<Scalar> hidden;
    Var<Scalar> delta;
    Var<Scalar> mask; // invalid in bilinear mode
  };

  template <typename Scalar>
  Output<Scalar> step(Graph<Scalar> &g, const ParameterSet<Scalar> &params, Var<Scalar> hidden, Var<Scalar> context,
                      Var<Scalar> corr, Var<Scalar> flow) const;

  std::vector<int> parameter_indices() const;

private:
  bool convex_ = true;
  ConvLayer corr1_, corr2_, flow1_, flow2_, merge_;
  ConvLayer z1_, r1_, q1_, z2_, r2_, q2_;
  ConvLayer head1_, head2_, mask1_, mask2_;
};

template <typename Scalar>
struct ContextState
{
  Var<Scalar> context;
  Var<Scalar> hidden;
};

template <typename Scalar>
struct Unrolled
{
  std::vector<Var<Scalar>> predictions; // full resolution (cropped), one per iteration
  std::vector<Var<Scalar>> low;         // 1/8-resolution running flow after each iteration
};

template <typename Scalar>
struct FlowEstimate
{
  std::vector<FlowField<Scalar>> predictions; // full resolution, one per iteration
  FlowField<Scalar> final_low;                // 1/8-resolution state after the last iteration
  Padding padding;
};

/// Two-subsequence recurrent flow network. Parameters live in one ParameterSet;
/// the modules hold indices into it, so the model is an ordinary value type.
template <typename Scalar>
class FlowModel
{
public:
  FlowModel(const ModelConfig &cfg, std::uint64_t seed);

  const ModelConfig &config() const { return cfg_; }
  ParameterSet<Scalar> &parameters() { return params_; }
  const ParameterSet<Scalar> &parameters() const { return params_; }
  const Encoder &feature_encoder() const { return fnet_; }
  const Encoder &context_encoder() const { return cnet_; }
  const UpdateBlock &update_block() const { return update_; }

  // Graph-level building blocks. Inputs are padded grids (multiple of 8).
  Var<Scalar> encode_features(Graph<Scalar> &g, Var<Scalar> grid) const;
  ContextState<Scalar> encode_context(Graph<Scalar> &g, Var<Scalar> grid) const;
  std::vector<Var<Scalar>> pyramid(Graph<Scalar> &g, Var<Scalar> f1, Var<Scalar> f2) const;
  /// init_low may be invalid (zero start). Predictions are cropped by `pad`.
  Unrolled<Scalar> unroll(Graph<Scalar> &g, const std::vector<Var<Scalar>> &pyr, const ContextState<Scalar> &ctx,
                          Var<Scalar> init_low, int iterations, const Padding &pad) const;

  /// Padded grid tensor for a voxel grid; throws on channel mismatch.
  Tensor<Scalar> prepare_input(const VoxelGrid<Scalar> &grid, Padding *pad = nullptr) const;

  // Convenience entry points without gradient tracking.
  FeatureMap<Scalar> encode_features(const VoxelGrid<Scalar> &grid) const;
  std::pair<Tensor<Scalar>, Tensor<Scalar>> encode_context(const VoxelGrid<Scalar> &grid) const;

  /// init: full- or 1/8-resolution field (by its tag), or nullptr for zero.
  /// iterations <= 0 uses the configured count.
  FlowEstimate<Scalar> estimate(const VoxelGrid<Scalar> &prev, const VoxelGrid<Scalar> &next,
                                const FlowField<Scalar> *init = nullptr, int iterations = 0) const;
  std::vector<FlowField<Scalar>> estimate_flow(const VoxelGrid<Scalar> &prev, const VoxelGrid<Scalar> &next,
                                               const FlowField<Scalar> *init = nullptr, int iterations = 0) const;

  /// Converts an initial flow field to the padded 1/8-resolution state.
  Tensor<Scalar> initial_state(const FlowField<Scalar> &init, const Padding &pad, int low_h, int low_w) const;

private:
  ModelConfig cfg_;
  ParameterSet<Scalar> params_;
  Encoder fnet_;
  Encoder cnet_;
  UpdateBlock update_;
};

/// All-pairs correlation of two feature maps plus L-1 levels of 2x2 pooling over the target dims.
template <typename Scalar>
CorrelationPyramid<Scalar> correlation_volume(const FeatureMap<Scalar> &f1, const FeatureMap<Scalar> &f2, int levels);

/// Windowed bilinear lookup (see ops::lookup) on a prebuilt pyramid; flow is (2, h, w).
template <typename Scalar>
Tensor<Scalar> lookup(const CorrelationPyramid<Scalar> &pyr, const Tensor<Scalar> &flow, int radius);

extern template class FlowModel<float>;
extern template class FlowModel<double>;

} // namespace evflow
