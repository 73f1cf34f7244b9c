#pragma once

#include "evflow/autodiff.hpp"
#include "evflow/events.hpp"
#include "evflow/flow.hpp"
#include "evflow/model.hpp"
#include "evflow/warmstart.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace evflow {

/// N+1 abutting voxel grids and the N flows between consecutive window boundaries.
/// gts[i] is the flow over grids[i+1]'s window, estimated from (grids[i], grids[i+1]).
template <typename Scalar>
struct TrainSample
{
  std::vector<VoxelGrid<Scalar>> grids;
  std::vector<FlowField<Scalar>> gts;

  void validate() const;
  int timesteps() const { return int(gts.size()); }
};

struct TrainConfig
{
  double gamma = 0.8;
  int seq_len = 1;
  int iters = 12;
  double lr = 1e-4;
  int epochs = 40;
  int crop_height = 288; // 0 disables cropping
  int crop_width = 384;
  double hflip_prob = 0.5;
  bool warmstart_in_training = false;
  double clip_norm = 1.0;
  int batch_size = 1;
  std::uint64_t seed = 0;
  /// Warp the full-resolution prediction instead of the 1/8 state.
  bool warm_full_resolution = false;
  WarpOptions warp;

  void validate() const;
};

template <typename Scalar>
struct LossResult
{
  Scalar value = 0;
  int empty_timesteps = 0; // timesteps whose ground truth had no valid pixel
};

/// sum_i sum_k gamma^(N_k - k) * mean over valid pixels of |du| + |dv|.
template <typename Scalar>
LossResult<Scalar> sequence_loss(const std::vector<std::vector<FlowField<Scalar>>> &preds,
                                 const std::vector<FlowField<Scalar>> &gts, Scalar gamma);

/// Graph version; preds[i][k] are (2, H, W) nodes.
template <typename Scalar>
Var<Scalar> sequence_loss(Graph<Scalar> &g, const std::vector<std::vector<Var<Scalar>>> &preds,
                          const std::vector<FlowField<Scalar>> &gts, Scalar gamma, int *empty_timesteps = nullptr);

/// Forward pass of a whole sample in one graph.
template <typename Scalar>
struct SequenceGraph
{
  std::vector<std::vector<Var<Scalar>>> predictions; // [timestep][iteration], full resolution
  /// handoffs[i]: identity copy of timestep i's final state; it only reaches the
  /// rest of the graph through the warm start of timestep i+1.
  std::vector<Var<Scalar>> handoffs;
  Var<Scalar> loss;
  int empty_timesteps = 0;
};

template <typename Scalar>
SequenceGraph<Scalar> build_sequence_graph(Graph<Scalar> &g, const FlowModel<Scalar> &model,
                                           const TrainSample<Scalar> &sample, const TrainConfig &cfg,
                                           const Tensor<Scalar> *handoff_perturbation = nullptr);

template <typename Scalar>
struct StepResult
{
  Scalar loss = 0;
  Gradients<Scalar> grads;
  int empty_timesteps = 0;
  /// d loss / d handoff for every timestep but the last.
  std::vector<Tensor<Scalar>> cross_gradients;
};

/// Loss and parameter gradients of one sample. Throws a numeric error naming
/// the first timestep/iteration that produced a non-finite value.
template <typename Scalar>
StepResult<Scalar> train_sequence_step(const FlowModel<Scalar> &model, const TrainSample<Scalar> &sample,
                                       const TrainConfig &cfg);

/// Random horizontal flip and crop applied identically to every grid and flow.
template <typename Scalar, typename Rng>
TrainSample<Scalar> augment(const TrainSample<Scalar> &sample, const TrainConfig &cfg, Rng &rng);

template <typename Scalar>
TrainSample<Scalar> flip_sample(const TrainSample<Scalar> &sample);
template <typename Scalar>
TrainSample<Scalar> crop_sample(const TrainSample<Scalar> &sample, int top, int left, int h, int w);

template <typename Scalar>
Scalar clip_gradients(Gradients<Scalar> &grads, Scalar max_norm);

template <typename Scalar>
class Adam
{
public:
  Adam() = default;
  explicit Adam(const ParameterSet<Scalar> &params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step(ParameterSet<Scalar> &params, const Gradients<Scalar> &grads, double lr);
  long steps() const { return t_; }

  // State for checkpoints.
  std::vector<Tensor<Scalar>> &first_moments() { return m_; }
  std::vector<Tensor<Scalar>> &second_moments() { return v_; }
  void set_steps(long t) { t_ = t; }

private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
  std::vector<Tensor<Scalar>> m_, v_;
};

struct TrainingPhase
{
  std::string name;
  double lr = 1e-4;
  int seq_len = 1;
  bool warm_start = false;
  int epochs = 1;
  bool full_resolution = false; // no cropping
};

/// "dsec": cold 40 epochs, warm-start seq-3 6 epochs, lr/10 full-resolution fine-tune.
/// "mvsec": warm-start training with seq 2 for 10 epochs, then seq 5.
/// Epoch counts are scaled by `epoch_scale` as max(1, round(scale * epochs)).
/// base_lr replaces the 1e-4 starting rate when given.
std::vector<TrainingPhase> schedule(const std::string &preset, double epoch_scale = 1.0,
                                    std::optional<double> base_lr = std::nullopt);

extern template class Adam<float>;
extern template class Adam<double>;

} // namespace evflow
