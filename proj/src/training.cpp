#include "evflow/training.hpp"

#include "evflow/error.hpp"

#include <cmath>
#include <sstream>

namespace evflow {

template <typename Scalar>
void TrainSample<Scalar>::validate() const
{
  if (grids.size() != gts.size() + 1) {
    throw validation_error("train sample needs one more grid than ground-truth flows");
  }
  for (std::size_t i = 1; i < grids.size(); ++i) {
    if (grids[i].t_start != grids[i - 1].t_end) {
      throw validation_error("train sample windows " + std::to_string(i - 1) + " and " + std::to_string(i) +
                             " do not abut");
    }
  }
}

void TrainConfig::validate() const
{
  if (!(gamma > 0 && gamma <= 1)) { throw validation_error("gamma must lie in (0, 1]"); }
  if (seq_len < 1) { throw validation_error("seq_len must be >= 1"); }
  if (iters < 1) { throw validation_error("iters must be >= 1"); }
  if (!(lr > 0)) { throw validation_error("lr must be positive"); }
  if (epochs < 0) { throw validation_error("epochs must be >= 0"); }
  if (crop_height < 0 || crop_width < 0) { throw validation_error("crop size must be >= 0"); }
  if (hflip_prob < 0 || hflip_prob > 1) { throw validation_error("hflip_prob must lie in [0, 1]"); }
  if (batch_size < 1) { throw validation_error("batch_size must be >= 1"); }
}

template <typename Scalar>
Var<Scalar> sequence_loss(Graph<Scalar> &g, const std::vector<std::vector<Var<Scalar>>> &preds,
                          const std::vector<FlowField<Scalar>> &gts, Scalar gamma, int *empty_timesteps)
{
  if (preds.size() != gts.size()) { throw validation_error("sequence_loss: prediction and ground-truth counts differ"); }
  Var<Scalar> total = g.constant(Tensor<Scalar>(1, 1, 1));
  int empty = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const Tensor<Scalar> target = gts[i].to_tensor();
    const Tensor<Scalar> mask = gts[i].mask_tensor();
    if (gts[i].valid_count() == 0) {
      ++empty;
      continue;
    }
    const int n = int(preds[i].size());
    for (int k = 0; k < n; ++k) {
      // Iterations are 1-based in the weighting: the last one gets gamma^0.
      const Scalar w = std::pow(gamma, Scalar(n - 1 - k));
      total = ops::add(total, ops::scale(ops::masked_l1_mean(preds[i][k], target, mask), w));
    }
  }
  if (empty_timesteps) { *empty_timesteps += empty; }
  return total;
}

template <typename Scalar>
LossResult<Scalar> sequence_loss(const std::vector<std::vector<FlowField<Scalar>>> &preds,
                                 const std::vector<FlowField<Scalar>> &gts, Scalar gamma)
{
  Graph<Scalar> g(false);
  std::vector<std::vector<Var<Scalar>>> nodes(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    for (const auto &p : preds[i]) { nodes[i].push_back(g.constant(p.to_tensor())); }
  }
  LossResult<Scalar> r;
  r.value = sequence_loss(g, nodes, gts, gamma, &r.empty_timesteps).value().data[0];
  return r;
}

template <typename Scalar>
SequenceGraph<Scalar> build_sequence_graph(Graph<Scalar> &g, const FlowModel<Scalar> &model,
                                           const TrainSample<Scalar> &sample, const TrainConfig &cfg,
                                           const Tensor<Scalar> *handoff_perturbation)
{
  sample.validate();
  SequenceGraph<Scalar> out;
  Padding pad;
  std::vector<Var<Scalar>> inputs, feats;
  for (std::size_t j = 0; j < sample.grids.size(); ++j) {
    Padding p;
    inputs.push_back(g.constant(model.prepare_input(sample.grids[j], &p)));
    if (j == 0) { pad = p; }
    feats.push_back(model.encode_features(g, inputs.back()));
  }
  Var<Scalar> init;
  const int n = sample.timesteps();
  for (int i = 0; i < n; ++i) {
    const ContextState<Scalar> ctx = model.encode_context(g, inputs[i + 1]);
    const auto pyr = model.pyramid(g, feats[i], feats[i + 1]);
    const Unrolled<Scalar> u = model.unroll(g, pyr, ctx, init, cfg.iters, pad);
    out.predictions.push_back(u.predictions);
    init = Var<Scalar>{};
    if (i + 1 == n) { break; }

    const Var<Scalar> source = cfg.warm_full_resolution ? u.predictions.back() : u.low.back();
    Var<Scalar> handoff = ops::scale(source, Scalar(1));
    out.handoffs.push_back(handoff);
    if (!cfg.warmstart_in_training) { continue; }
    if (handoff_perturbation && i == 0) { handoff = ops::add(handoff, g.constant(*handoff_perturbation)); }
    if (cfg.warm_full_resolution) {
      Var<Scalar> warped = forward_warp(handoff, cfg.warp).flow;
      warped = ops::pad_replicate(warped, pad.top, pad.bottom, pad.left, pad.right);
      init = ops::scale(ops::avg_pool(warped, kFeatureStride), Scalar(1) / kFeatureStride);
    } else {
      init = forward_warp(handoff, cfg.warp).flow;
    }
  }
  out.loss = sequence_loss(g, out.predictions, sample.gts, Scalar(cfg.gamma), &out.empty_timesteps);
  return out;
}

namespace {

template <typename Scalar>
std::string first_non_finite(const SequenceGraph<Scalar> &sg)
{
  for (std::size_t i = 0; i < sg.predictions.size(); ++i) {
    for (std::size_t k = 0; k < sg.predictions[i].size(); ++k) {
      if (!sg.predictions[i][k].value().data.allFinite()) {
        return "timestep " + std::to_string(i) + ", iteration " + std::to_string(k);
      }
    }
  }
  return "loss reduction";
}

} // namespace

template <typename Scalar>
StepResult<Scalar> train_sequence_step(const FlowModel<Scalar> &model, const TrainSample<Scalar> &sample,
                                       const TrainConfig &cfg)
{
  Graph<Scalar> g(true);
  const SequenceGraph<Scalar> sg = build_sequence_graph(g, model, sample, cfg);
  StepResult<Scalar> r;
  r.loss = sg.loss.value().data[0];
  r.empty_timesteps = sg.empty_timesteps;
  if (!std::isfinite(double(r.loss))) {
    throw numeric_error("non-finite loss; first non-finite value at " + first_non_finite(sg));
  }
  g.backward(sg.loss);
  r.grads = g.parameter_gradients();
  for (const auto &gr : r.grads) {
    if (!gr.data.allFinite()) { throw numeric_error("non-finite gradient after " + first_non_finite(sg)); }
  }
  for (const auto &h : sg.handoffs) {
    const auto &v = h.value();
    r.cross_gradients.push_back(g.has_grad(h) ? g.grad(h) : Tensor<Scalar>(v.channels, v.height, v.width));
  }
  return r;
}

template <typename Scalar>
TrainSample<Scalar> flip_sample(const TrainSample<Scalar> &sample)
{
  TrainSample<Scalar> out = sample;
  for (auto &grid : out.grids) { grid.data = flip_horizontal(grid.data); }
  for (auto &gt : out.gts) { gt = flip_horizontal(gt); }
  return out;
}

template <typename Scalar>
TrainSample<Scalar> crop_sample(const TrainSample<Scalar> &sample, int top, int left, int h, int w)
{
  TrainSample<Scalar> out = sample;
  for (auto &grid : out.grids) { grid.data = crop(grid.data, top, left, h, w); }
  for (auto &gt : out.gts) { gt = crop(gt, top, left, h, w); }
  return out;
}

template <typename Scalar, typename Rng>
TrainSample<Scalar> augment(const TrainSample<Scalar> &sample, const TrainConfig &cfg, Rng &rng)
{
  const int h = sample.grids.front().data.height, w = sample.grids.front().data.width;
  const int ch = cfg.crop_height > 0 ? cfg.crop_height : h;
  const int cw = cfg.crop_width > 0 ? cfg.crop_width : w;
  if (ch > h || cw > w) {
    throw validation_error("crop " + std::to_string(ch) + "x" + std::to_string(cw) + " larger than frame " +
                           std::to_string(h) + "x" + std::to_string(w));
  }
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const bool flip = coin(rng) < cfg.hflip_prob;
  const int top = int(std::uniform_int_distribution<int>(0, h - ch)(rng));
  const int left = int(std::uniform_int_distribution<int>(0, w - cw)(rng));
  TrainSample<Scalar> out = flip ? flip_sample(sample) : sample;
  if (ch != h || cw != w) { out = crop_sample(out, top, left, ch, cw); }
  return out;
}

template <typename Scalar>
Scalar clip_gradients(Gradients<Scalar> &grads, Scalar max_norm)
{
  double sq = 0;
  for (const auto &g : grads) { sq += g.data.template cast<double>().square().sum(); }
  const Scalar norm = Scalar(std::sqrt(sq));
  if (max_norm > 0 && norm > max_norm) {
    const Scalar s = max_norm / norm;
    for (auto &g : grads) { g.data *= s; }
  }
  return norm;
}

template <typename Scalar>
Adam<Scalar>::Adam(const ParameterSet<Scalar> &params, double beta1, double beta2, double eps)
  : beta1_(beta1), beta2_(beta2), eps_(eps)
{
  for (const auto &p : params) {
    m_.emplace_back(p.value.channels, p.value.height, p.value.width);
    v_.emplace_back(p.value.channels, p.value.height, p.value.width);
  }
}

template <typename Scalar>
void Adam<Scalar>::step(ParameterSet<Scalar> &params, const Gradients<Scalar> &grads, double lr)
{
  if (int(grads.size()) != params.size() || int(m_.size()) != params.size()) {
    throw validation_error("optimizer state does not match the parameter set");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, double(t_));
  const double c2 = 1.0 - std::pow(beta2_, double(t_));
  const Scalar step = Scalar(lr * std::sqrt(c2) / c1);
  for (int i = 0; i < params.size(); ++i) {
    auto &m = m_[i].data;
    auto &v = v_[i].data;
    const auto &g = grads[i].data;
    m = Scalar(beta1_) * m + Scalar(1 - beta1_) * g;
    v = Scalar(beta2_) * v + Scalar(1 - beta2_) * g.square();
    params[i].value.data -= step * m / (v.sqrt() + Scalar(eps_ * std::sqrt(c2)));
  }
}

std::vector<TrainingPhase> schedule(const std::string &preset, double epoch_scale, std::optional<double> base_lr)
{
  if (!(epoch_scale > 0)) { throw validation_error("epoch scale must be positive"); }
  auto scaled = [epoch_scale](int epochs) { return std::max(1, int(std::lround(epoch_scale * epochs))); };
  const double lr = base_lr.value_or(1e-4);
  if (preset == "dsec") {
    return {
      {"cold", lr, 1, false, scaled(40), false},
      {"warm", lr, 3, true, scaled(6), false},
      {"finetune", lr / 10, 3, true, scaled(2), true},
    };
  }
  if (preset == "mvsec") {
    return {
      {"seq2", lr, 2, true, scaled(10), false},
      {"seq5", lr, 5, true, scaled(30), false},
    };
  }
  throw validation_error("unknown schedule preset '" + preset + "' (expected dsec or mvsec)");
}

#define EVFLOW_INSTANTIATE_TRAINING(S)                                                                     \
  template struct TrainSample<S>;                                                                          \
  template class Adam<S>;                                                                                  \
  template LossResult<S> sequence_loss(const std::vector<std::vector<FlowField<S>>> &,                     \
                                       const std::vector<FlowField<S>> &, S);                              \
  template Var<S> sequence_loss(Graph<S> &, const std::vector<std::vector<Var<S>>> &,                      \
                                const std::vector<FlowField<S>> &, S, int *);                              \
  template SequenceGraph<S> build_sequence_graph(Graph<S> &, const FlowModel<S> &, const TrainSample<S> &, \
                                                 const TrainConfig &, const Tensor<S> *);                  \
  template StepResult<S> train_sequence_step(const FlowModel<S> &, const TrainSample<S> &,                 \
                                             const TrainConfig &);                                         \
  template TrainSample<S> augment(const TrainSample<S> &, const TrainConfig &, std::mt19937_64 &);         \
  template TrainSample<S> flip_sample(const TrainSample<S> &);                                             \
  template TrainSample<S> crop_sample(const TrainSample<S> &, int, int, int, int);                         \
  template S clip_gradients(Gradients<S> &, S);

EVFLOW_INSTANTIATE_TRAINING(float)
EVFLOW_INSTANTIATE_TRAINING(double)

} // namespace evflow
