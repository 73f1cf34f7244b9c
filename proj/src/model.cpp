#include "evflow/model.hpp"

#include "evflow/error.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace evflow {

std::string to_string(UpsampleMode mode) { return mode == UpsampleMode::Convex ? "convex" : "bilinear"; }

UpsampleMode parse_upsample_mode(const std::string &s)
{
  if (s == "convex" || s == "learned-convex") { return UpsampleMode::Convex; }
  if (s == "bilinear") { return UpsampleMode::Bilinear; }
  throw validation_error("unknown upsample mode '" + s + "' (expected convex or bilinear)");
}

void ModelConfig::validate() const
{
  auto positive = [](int v, const char *name) {
    if (v < 1) { throw validation_error(std::string("model config: ") + name + " must be >= 1"); }
  };
  positive(voxel_bins, "voxel_bins");
  positive(feature_dim, "feature_dim");
  positive(hidden_dim, "hidden_dim");
  positive(context_dim, "context_dim");
  positive(pyramid_levels, "pyramid_levels");
  positive(lookup_radius, "lookup_radius");
  positive(iterations, "iterations");
  positive(encoder_base, "encoder_base");
  if (motion_dim < 8) { throw validation_error("model config: motion_dim must be >= 8"); }
}

ModelConfig ModelConfig::desk()
{
  ModelConfig c;
  c.voxel_bins = 5;
  c.feature_dim = 32;
  c.hidden_dim = 32;
  c.context_dim = 32;
  c.pyramid_levels = 3;
  c.lookup_radius = 3;
  c.iterations = 4;
  c.encoder_base = 16;
  c.motion_dim = 48;
  return c;
}

Padding Padding::to_multiple(int height, int width, int multiple)
{
  const int ph = (multiple - height % multiple) % multiple;
  const int pw = (multiple - width % multiple) % multiple;
  return {ph / 2, ph - ph / 2, pw / 2, pw - pw / 2};
}

namespace {

using Rng = std::mt19937_64;

template <typename Scalar>
ConvLayer make_conv(ParameterSet<Scalar> &ps, const std::string &name, int cin, int cout, ConvSpec spec, Rng &rng,
                    double gain)
{
  const int kk = spec.kernel_h * spec.kernel_w;
  const double bound = gain / std::sqrt(double(cin * kk));
  std::uniform_real_distribution<double> uni(-bound, bound);
  Tensor<Scalar> w(cout, cin, kk);
  for (Eigen::Index i = 0; i < w.size(); ++i) { w.data[i] = Scalar(uni(rng)); }
  ConvLayer layer;
  layer.spec = spec;
  layer.weight = ps.add(name + ".weight", {cout, cin, spec.kernel_h, spec.kernel_w}, std::move(w));
  layer.bias = ps.add(name + ".bias", {cout}, Tensor<Scalar>(cout, 1, 1));
  return layer;
}

// He-uniform for layers followed by ReLU, the default fan-in bound otherwise.
const double kReluGain = std::sqrt(6.0);
constexpr double kLinearGain = 1.0;

template <typename Scalar>
Var<Scalar> apply(Graph<Scalar> &g, const ParameterSet<Scalar> &ps, const ConvLayer &l, Var<Scalar> x)
{
  const Var<Scalar> b = l.bias >= 0 ? g.parameter(ps, l.bias) : Var<Scalar>{};
  return ops::conv2d(x, g.parameter(ps, l.weight), b, l.spec);
}

template <typename Scalar>
Tensor<Scalar> pad_tensor(const Tensor<Scalar> &t, const Padding &p)
{
  if (p.none()) { return t; }
  Tensor<Scalar> out(t.channels, p.padded_height(t.height), p.padded_width(t.width));
  for (int c = 0; c < t.channels; ++c) {
    for (int y = 0; y < out.height; ++y) {
      const int sy = std::clamp(y - p.top, 0, t.height - 1);
      for (int x = 0; x < out.width; ++x) { out(c, y, x) = t(c, sy, std::clamp(x - p.left, 0, t.width - 1)); }
    }
  }
  return out;
}

} // namespace

template <typename Scalar, typename R>
Encoder::Encoder(ParameterSet<Scalar> &ps, const std::string &prefix, int in_channels, int base, int out_channels,
                 R &rng)
{
  const int c1 = base, c2 = base * 3 / 2, c3 = base * 2;
  stem_ = make_conv(ps, prefix + ".stem", in_channels, c1, ConvSpec::same(3), rng, kReluGain);
  down1_ = make_conv(ps, prefix + ".down1", c1, c1, ConvSpec::down(2), rng, kReluGain);
  conv1_ = make_conv(ps, prefix + ".conv1", c1, c2, ConvSpec::same(3), rng, kReluGain);
  down2_ = make_conv(ps, prefix + ".down2", c2, c2, ConvSpec::down(2), rng, kReluGain);
  conv2_ = make_conv(ps, prefix + ".conv2", c2, c3, ConvSpec::same(3), rng, kReluGain);
  down3_ = make_conv(ps, prefix + ".down3", c3, c3, ConvSpec::down(2), rng, kReluGain);
  res_a_ = make_conv(ps, prefix + ".res.a", c3, c3, ConvSpec::same(3), rng, kReluGain);
  res_b_ = make_conv(ps, prefix + ".res.b", c3, c3, ConvSpec::same(3), rng, kLinearGain);
  head_ = make_conv(ps, prefix + ".head", c3, out_channels, ConvSpec::same(1), rng, kLinearGain);
}

template <typename Scalar>
Var<Scalar> Encoder::forward(Graph<Scalar> &g, const ParameterSet<Scalar> &ps, Var<Scalar> x) const
{
  using namespace ops;
  x = relu(apply(g, ps, stem_, x));
  x = relu(apply(g, ps, down1_, x));
  x = relu(apply(g, ps, conv1_, x));
  x = relu(apply(g, ps, down2_, x));
  x = relu(apply(g, ps, conv2_, x));
  x = relu(apply(g, ps, down3_, x));
  Var<Scalar> r = relu(apply(g, ps, res_a_, x));
  r = apply(g, ps, res_b_, r);
  x = relu(add(x, r));
  return apply(g, ps, head_, x);
}

std::vector<ConvLayer> Encoder::layers() const
{
  return {stem_, down1_, conv1_, down2_, conv2_, down3_, res_a_, res_b_, head_};
}

int Encoder::receptive_radius() const
{
  // Walk an output cell's input interval back through the main path.
  long lo = 0, hi = 0;
  const auto ls = layers();
  for (auto it = ls.rbegin(); it != ls.rend(); ++it) {
    const ConvSpec &s = it->spec;
    lo = lo * s.stride - s.pad_w;
    hi = hi * s.stride - s.pad_w + s.kernel_w - 1;
  }
  // Cell 0 is centred at (stride - 1) / 2 = 3.5 input pixels.
  const double centre = 0.5 * (kFeatureStride - 1);
  return int(std::ceil(std::max(centre - double(lo), double(hi) - centre)));
}

std::vector<int> Encoder::parameter_indices() const
{
  std::vector<int> out;
  for (const auto &l : layers()) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  return out;
}

template <typename Scalar, typename R>
UpdateBlock::UpdateBlock(ParameterSet<Scalar> &ps, const ModelConfig &cfg, R &rng)
{
  convex_ = cfg.upsample == UpsampleMode::Convex;
  const int m = cfg.motion_dim;
  const int cm1 = m, cm2 = m * 3 / 4, cf1 = m / 2, cf2 = m / 4;
  const int h = cfg.hidden_dim;
  const int x_dim = cfg.context_dim + m;
  corr1_ = make_conv(ps, "update.motion.corr1", cfg.lookup_channels(), cm1, ConvSpec::same(1), rng, kReluGain);
  corr2_ = make_conv(ps, "update.motion.corr2", cm1, cm2, ConvSpec::same(3), rng, kReluGain);
  flow1_ = make_conv(ps, "update.motion.flow1", 2, cf1, ConvSpec::same(3), rng, kReluGain);
  flow2_ = make_conv(ps, "update.motion.flow2", cf1, cf2, ConvSpec::same(3), rng, kReluGain);
  merge_ = make_conv(ps, "update.motion.merge", cm2 + cf2, m - 2, ConvSpec::same(3), rng, kReluGain);
  z1_ = make_conv(ps, "update.gru.z1", h + x_dim, h, ConvSpec::rect(1, 5), rng, kLinearGain);
  r1_ = make_conv(ps, "update.gru.r1", h + x_dim, h, ConvSpec::rect(1, 5), rng, kLinearGain);
  q1_ = make_conv(ps, "update.gru.q1", h + x_dim, h, ConvSpec::rect(1, 5), rng, kLinearGain);
  z2_ = make_conv(ps, "update.gru.z2", h + x_dim, h, ConvSpec::rect(5, 1), rng, kLinearGain);
  r2_ = make_conv(ps, "update.gru.r2", h + x_dim, h, ConvSpec::rect(5, 1), rng, kLinearGain);
  q2_ = make_conv(ps, "update.gru.q2", h + x_dim, h, ConvSpec::rect(5, 1), rng, kLinearGain);
  head1_ = make_conv(ps, "update.flow_head.conv1", h, 2 * h, ConvSpec::same(3), rng, kReluGain);
  head2_ = make_conv(ps, "update.flow_head.conv2", 2 * h, 2, ConvSpec::same(3), rng, 0.1);
  if (convex_) {
    mask1_ = make_conv(ps, "update.mask.conv1", h, 2 * h, ConvSpec::same(3), rng, kReluGain);
    mask2_ = make_conv(ps, "update.mask.conv2", 2 * h, 9 * kFeatureStride * kFeatureStride, ConvSpec::same(1), rng,
                       kLinearGain);
  }
}

template <typename Scalar>
UpdateBlock::Output<Scalar> UpdateBlock::step(Graph<Scalar> &g, const ParameterSet<Scalar> &ps, Var<Scalar> hidden,
                                              Var<Scalar> context, Var<Scalar> corr, Var<Scalar> flow) const
{
  using namespace ops;
  Var<Scalar> c = relu(apply(g, ps, corr1_, corr));
  c = relu(apply(g, ps, corr2_, c));
  Var<Scalar> f = relu(apply(g, ps, flow1_, flow));
  f = relu(apply(g, ps, flow2_, f));
  Var<Scalar> motion = relu(apply(g, ps, merge_, concat<Scalar>({c, f})));
  const Var<Scalar> x = concat<Scalar>({context, motion, flow});

  auto gru = [&](Var<Scalar> h, const ConvLayer &zl, const ConvLayer &rl, const ConvLayer &ql) {
    const Var<Scalar> hx = concat<Scalar>({h, x});
    const Var<Scalar> z = sigmoid(apply(g, ps, zl, hx));
    const Var<Scalar> r = sigmoid(apply(g, ps, rl, hx));
    const Var<Scalar> q = ops::tanh(apply(g, ps, ql, concat<Scalar>({mul(r, h), x})));
    return add(h, mul(z, sub(q, h)));
  };
  hidden = gru(hidden, z1_, r1_, q1_);
  hidden = gru(hidden, z2_, r2_, q2_);

  Output<Scalar> out;
  out.hidden = hidden;
  out.delta = apply(g, ps, head2_, relu(apply(g, ps, head1_, hidden)));
  if (convex_) { out.mask = scale(apply(g, ps, mask2_, relu(apply(g, ps, mask1_, hidden))), Scalar(0.25)); }
  return out;
}

std::vector<int> UpdateBlock::parameter_indices() const
{
  std::vector<int> out;
  for (const ConvLayer *l : {&corr1_, &corr2_, &flow1_, &flow2_, &merge_, &z1_, &r1_, &q1_, &z2_, &r2_, &q2_, &head1_,
                             &head2_, &mask1_, &mask2_}) {
    if (l->weight >= 0) {
      out.push_back(l->weight);
      out.push_back(l->bias);
    }
  }
  return out;
}

template <typename Scalar>
FlowModel<Scalar>::FlowModel(const ModelConfig &cfg, std::uint64_t seed) : cfg_(cfg)
{
  cfg_.validate();
  Rng rng(seed);
  fnet_ = Encoder(params_, "fnet", cfg_.input_channels(), cfg_.encoder_base, cfg_.feature_dim, rng);
  cnet_ = Encoder(params_, "cnet", cfg_.input_channels(), cfg_.encoder_base, cfg_.hidden_dim + cfg_.context_dim, rng);
  update_ = UpdateBlock(params_, cfg_, rng);
}

template <typename Scalar>
Var<Scalar> FlowModel<Scalar>::encode_features(Graph<Scalar> &g, Var<Scalar> grid) const
{
  return fnet_.forward(g, params_, grid);
}

template <typename Scalar>
ContextState<Scalar> FlowModel<Scalar>::encode_context(Graph<Scalar> &g, Var<Scalar> grid) const
{
  const Var<Scalar> out = cnet_.forward(g, params_, grid);
  ContextState<Scalar> s;
  s.hidden = ops::tanh(ops::slice_channels(out, 0, cfg_.hidden_dim));
  s.context = ops::relu(ops::slice_channels(out, cfg_.hidden_dim, cfg_.context_dim));
  return s;
}

template <typename Scalar>
std::vector<Var<Scalar>> FlowModel<Scalar>::pyramid(Graph<Scalar> &, Var<Scalar> f1, Var<Scalar> f2) const
{
  std::vector<Var<Scalar>> levels{ops::correlation(f1, f2)};
  for (int l = 1; l < cfg_.pyramid_levels; ++l) { levels.push_back(ops::avg_pool(levels.back(), 2)); }
  return levels;
}

template <typename Scalar>
Unrolled<Scalar> FlowModel<Scalar>::unroll(Graph<Scalar> &g, const std::vector<Var<Scalar>> &pyr,
                                           const ContextState<Scalar> &ctx, Var<Scalar> init_low, int iterations,
                                           const Padding &pad) const
{
  const auto &hv = ctx.hidden.value();
  Var<Scalar> flow = init_low.valid() ? init_low : g.constant(Tensor<Scalar>(2, hv.height, hv.width));
  if (flow.value().height != hv.height || flow.value().width != hv.width) {
    throw validation_error("initial flow " + flow.value().shape_string() + " does not match feature grid");
  }
  const int out_h = hv.height * kFeatureStride - pad.top - pad.bottom;
  const int out_w = hv.width * kFeatureStride - pad.left - pad.right;
  Var<Scalar> hidden = ctx.hidden;
  Unrolled<Scalar> out;
  for (int k = 0; k < iterations; ++k) {
    if (cfg_.detach_iteration_flow) { flow = g.constant(flow.value()); }
    const Var<Scalar> corr = ops::lookup(pyr, flow, cfg_.lookup_radius);
    const auto step = update_.step(g, params_, hidden, ctx.context, corr, flow);
    hidden = step.hidden;
    flow = ops::add(flow, step.delta);
    Var<Scalar> up = step.mask.valid() ? ops::upsample_flow_convex(flow, step.mask, kFeatureStride)
                                       : ops::upsample_flow_bilinear(flow, kFeatureStride);
    out.predictions.push_back(ops::crop(up, pad.top, pad.left, out_h, out_w));
    out.low.push_back(flow);
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> FlowModel<Scalar>::prepare_input(const VoxelGrid<Scalar> &grid, Padding *pad) const
{
  if (grid.data.channels != cfg_.input_channels()) {
    throw validation_error("voxel grid has " + std::to_string(grid.data.channels) + " channels, model expects " +
                           std::to_string(cfg_.input_channels()));
  }
  const Padding p = Padding::to_multiple(grid.data.height, grid.data.width);
  const int coarsest = kFeatureStride << (cfg_.pyramid_levels - 1);
  if (p.padded_height(grid.data.height) < coarsest || p.padded_width(grid.data.width) < coarsest) {
    throw validation_error("input " + std::to_string(grid.data.height) + "x" + std::to_string(grid.data.width) +
                           " too small for " + std::to_string(cfg_.pyramid_levels) + " pyramid levels (need " +
                           std::to_string(coarsest) + " px per side)");
  }
  if (pad) { *pad = p; }
  return pad_tensor(grid.data, p);
}

template <typename Scalar>
FeatureMap<Scalar> FlowModel<Scalar>::encode_features(const VoxelGrid<Scalar> &grid) const
{
  Graph<Scalar> g(false);
  const Var<Scalar> out = encode_features(g, g.constant(prepare_input(grid)));
  return {out.value(), kFeatureStride};
}

template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> FlowModel<Scalar>::encode_context(const VoxelGrid<Scalar> &grid) const
{
  Graph<Scalar> g(false);
  const auto s = encode_context(g, g.constant(prepare_input(grid)));
  return {s.context.value(), s.hidden.value()};
}

template <typename Scalar>
Tensor<Scalar> FlowModel<Scalar>::initial_state(const FlowField<Scalar> &init, const Padding &pad, int low_h,
                                                int low_w) const
{
  if (init.resolution == FlowResolution::Eighth) {
    if (init.height() != low_h || init.width() != low_w) {
      throw validation_error("1/8-resolution initial flow has the wrong size");
    }
    return init.to_tensor();
  }
  const Tensor<Scalar> padded = pad_tensor(init.to_tensor(), pad);
  if (padded.height != low_h * kFeatureStride || padded.width != low_w * kFeatureStride) {
    throw validation_error("full-resolution initial flow has the wrong size");
  }
  Graph<Scalar> g(false);
  return ops::scale(ops::avg_pool(g.constant(padded), kFeatureStride), Scalar(1) / kFeatureStride).value();
}

template <typename Scalar>
FlowEstimate<Scalar> FlowModel<Scalar>::estimate(const VoxelGrid<Scalar> &prev, const VoxelGrid<Scalar> &next,
                                                 const FlowField<Scalar> *init, int iterations) const
{
  if (prev.data.height != next.data.height || prev.data.width != next.data.width) {
    throw validation_error("voxel grids differ in spatial size");
  }
  Padding pad;
  Graph<Scalar> g(false);
  const Var<Scalar> in1 = g.constant(prepare_input(prev, &pad));
  const Var<Scalar> in2 = g.constant(prepare_input(next));
  const Var<Scalar> f1 = encode_features(g, in1);
  const Var<Scalar> f2 = encode_features(g, in2);
  const ContextState<Scalar> ctx = encode_context(g, in2);
  const auto pyr = pyramid(g, f1, f2);
  const int lh = f1.value().height, lw = f1.value().width;
  Var<Scalar> init_var;
  if (init) { init_var = g.constant(initial_state(*init, pad, lh, lw)); }
  const Unrolled<Scalar> u = unroll(g, pyr, ctx, init_var, iterations > 0 ? iterations : cfg_.iterations, pad);
  FlowEstimate<Scalar> est;
  est.padding = pad;
  for (const auto &p : u.predictions) { est.predictions.push_back(FlowField<Scalar>::from_tensor(p.value())); }
  est.final_low = FlowField<Scalar>::from_tensor(u.low.back().value(), FlowResolution::Eighth);
  return est;
}

template <typename Scalar>
std::vector<FlowField<Scalar>> FlowModel<Scalar>::estimate_flow(const VoxelGrid<Scalar> &prev,
                                                                const VoxelGrid<Scalar> &next,
                                                                const FlowField<Scalar> *init, int iterations) const
{
  return estimate(prev, next, init, iterations).predictions;
}

template <typename Scalar>
CorrelationPyramid<Scalar> correlation_volume(const FeatureMap<Scalar> &f1, const FeatureMap<Scalar> &f2, int levels)
{
  if (!f1.data.same_shape(f2.data)) {
    throw validation_error("correlation_volume: feature maps differ " + f1.data.shape_string() + " vs " +
                           f2.data.shape_string());
  }
  if (levels < 1) { throw validation_error("correlation_volume: need at least one level"); }
  Graph<Scalar> g(false);
  Var<Scalar> level = ops::correlation(g.constant(f1.data), g.constant(f2.data));
  CorrelationPyramid<Scalar> pyr;
  pyr.scale = Scalar(1) / std::sqrt(Scalar(f1.data.channels));
  pyr.levels.push_back(level.value());
  for (int l = 1; l < levels; ++l) {
    level = ops::avg_pool(level, 2);
    pyr.levels.push_back(level.value());
  }
  return pyr;
}

template <typename Scalar>
Tensor<Scalar> lookup(const CorrelationPyramid<Scalar> &pyr, const Tensor<Scalar> &flow, int radius)
{
  Graph<Scalar> g(false);
  std::vector<Var<Scalar>> levels;
  for (const auto &l : pyr.levels) { levels.push_back(g.constant(l)); }
  return ops::lookup(levels, g.constant(flow), radius).value();
}

template class FlowModel<float>;
template class FlowModel<double>;
template CorrelationPyramid<float> correlation_volume(const FeatureMap<float> &, const FeatureMap<float> &, int);
template CorrelationPyramid<double> correlation_volume(const FeatureMap<double> &, const FeatureMap<double> &, int);
template Tensor<float> lookup(const CorrelationPyramid<float> &, const Tensor<float> &, int);
template Tensor<double> lookup(const CorrelationPyramid<double> &, const Tensor<double> &, int);

} // namespace evflow
