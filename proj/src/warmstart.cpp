#include "evflow/warmstart.hpp"

#include "evflow/error.hpp"

#include <cmath>
#include <memory>

namespace evflow {

namespace {

// The four bilinear taps around a splat position, with the partial
// derivatives of each weight along x and y (one-sided at integer positions).
template <typename Scalar>
struct Taps
{
  int x0, y0;
  Scalar w[4];
  Scalar dwx[4];
  Scalar dwy[4];

  Taps(Scalar gx, Scalar gy)
  {
    const Scalar fx = std::floor(gx), fy = std::floor(gy);
    x0 = int(fx);
    y0 = int(fy);
    const Scalar ax = gx - fx, ay = gy - fy;
    // order: (y0,x0) (y0,x0+1) (y0+1,x0) (y0+1,x0+1)
    w[0] = (1 - ax) * (1 - ay);
    w[1] = ax * (1 - ay);
    w[2] = (1 - ax) * ay;
    w[3] = ax * ay;
    dwx[0] = -(1 - ay);
    dwx[1] = (1 - ay);
    dwx[2] = -ay;
    dwx[3] = ay;
    dwy[0] = -(1 - ax);
    dwy[1] = -ax;
    dwy[2] = (1 - ax);
    dwy[3] = ax;
  }

  int tx(int k) const { return x0 + (k & 1); }
  int ty(int k) const { return y0 + (k >> 1); }
};

template <typename Scalar>
void check_finite(const Tensor<Scalar> &flow, const Tensor<Scalar> &mask)
{
  for (int y = 0; y < flow.height; ++y) {
    for (int x = 0; x < flow.width; ++x) {
      if (!mask.empty() && mask(0, y, x) == Scalar(0)) { continue; }
      if (!std::isfinite(double(flow(0, y, x))) || !std::isfinite(double(flow(1, y, x)))) {
        throw numeric_error("forward warp: non-finite flow at pixel (" + std::to_string(x) + ", " +
                            std::to_string(y) + ")");
      }
    }
  }
}

} // namespace

template <typename Scalar>
SplatAccumulator<Scalar> splat_flow(const Tensor<Scalar> &flow, const Tensor<Scalar> &source_mask)
{
  if (flow.channels != 2) { throw validation_error("splat_flow: flow must have two channels"); }
  check_finite(flow, source_mask);
  const int h = flow.height, w = flow.width;
  SplatAccumulator<Scalar> acc{Tensor<Scalar>(2, h, w), Tensor<Scalar>(1, h, w)};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!source_mask.empty() && source_mask(0, y, x) == Scalar(0)) { continue; }
      const Scalar u = flow(0, y, x), v = flow(1, y, x);
      const Taps<Scalar> taps(Scalar(x) + u, Scalar(y) + v);
      for (int k = 0; k < 4; ++k) {
        const int tx = taps.tx(k), ty = taps.ty(k);
        if (tx < 0 || tx >= w || ty < 0 || ty >= h || taps.w[k] == Scalar(0)) { continue; }
        acc.numerator(0, ty, tx) += taps.w[k] * u;
        acc.numerator(1, ty, tx) += taps.w[k] * v;
        acc.denominator(0, ty, tx) += taps.w[k];
      }
    }
  }
  return acc;
}

template <typename Scalar>
WarpResult<Scalar> forward_warp(Var<Scalar> flow, const WarpOptions &options)
{
  const auto &fv = flow.value();
  SplatAccumulator<Scalar> acc = splat_flow(fv);
  const int h = fv.height, w = fv.width;
  const Scalar eps = Scalar(options.epsilon);
  Tensor<Scalar> out(2, h, w);
  Tensor<Scalar> valid(1, h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const Scalar d = acc.denominator(0, y, x);
      if (d > eps) {
        out(0, y, x) = acc.numerator(0, y, x) / d;
        out(1, y, x) = acc.numerator(1, y, x) / d;
        valid(0, y, x) = 1;
      }
    }
  }
  auto den = std::make_shared<Tensor<Scalar>>(std::move(acc.denominator));
  auto warped = std::make_shared<Tensor<Scalar>>(out);
  const bool detach = options.detach_coordinates;
  Var<Scalar> result = flow.graph->record(std::move(out), {flow}, [flow, den, warped, eps, detach, h, w](Graph<Scalar> &g, const Tensor<Scalar> &go) {
    // Gradients with respect to numerator and denominator at each target.
    Tensor<Scalar> gnum(2, h, w), gden(1, h, w);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const Scalar d = (*den)(0, y, x);
        if (!(d > eps)) { continue; }
        gnum(0, y, x) = go(0, y, x) / d;
        gnum(1, y, x) = go(1, y, x) / d;
        gden(0, y, x) = -(go(0, y, x) * (*warped)(0, y, x) + go(1, y, x) * (*warped)(1, y, x)) / d;
      }
    }
    const auto &fv = g.value(flow);
    auto &gf = g.grad(flow);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const Scalar u = fv(0, y, x), v = fv(1, y, x);
        const Taps<Scalar> taps(Scalar(x) + u, Scalar(y) + v);
        Scalar du = 0, dv = 0, dgx = 0, dgy = 0;
        for (int k = 0; k < 4; ++k) {
          const int tx = taps.tx(k), ty = taps.ty(k);
          if (tx < 0 || tx >= w || ty < 0 || ty >= h) { continue; }
          du += taps.w[k] * gnum(0, ty, tx);
          dv += taps.w[k] * gnum(1, ty, tx);
          if (!detach) {
            const Scalar s = gnum(0, ty, tx) * u + gnum(1, ty, tx) * v + gden(0, ty, tx);
            dgx += s * taps.dwx[k];
            dgy += s * taps.dwy[k];
          }
        }
        gf(0, y, x) += du + dgx;
        gf(1, y, x) += dv + dgy;
      }
    }
  });
  return {result, std::move(valid)};
}

template <typename Scalar>
FlowField<Scalar> forward_warp_flow(const FlowField<Scalar> &prev, const WarpOptions &options)
{
  const Tensor<Scalar> flow = prev.to_tensor();
  const Tensor<Scalar> mask = prev.mask_tensor();
  const SplatAccumulator<Scalar> acc = splat_flow(flow, mask);
  FlowField<Scalar> out(prev.height(), prev.width(), prev.resolution);
  for (int y = 0; y < out.height(); ++y) {
    for (int x = 0; x < out.width(); ++x) {
      const Scalar d = acc.denominator(0, y, x);
      if (d > Scalar(options.epsilon)) {
        out.u(y, x) = acc.numerator(0, y, x) / d;
        out.v(y, x) = acc.numerator(1, y, x) / d;
      } else {
        out.valid(y, x) = false;
      }
    }
  }
  return out;
}

template <typename Scalar>
FlowField<Scalar> warm_start(const FlowField<Scalar> &prev, bool enabled, const WarpOptions &options)
{
  if (!enabled) { return FlowField<Scalar>(prev.height(), prev.width(), prev.resolution); }
  return forward_warp_flow(prev, options);
}

#define EVFLOW_INSTANTIATE_WARP(S)                                                               \
  template SplatAccumulator<S> splat_flow(const Tensor<S> &, const Tensor<S> &);                 \
  template WarpResult<S> forward_warp(Var<S>, const WarpOptions &);                              \
  template FlowField<S> forward_warp_flow(const FlowField<S> &, const WarpOptions &);            \
  template FlowField<S> warm_start(const FlowField<S> &, bool, const WarpOptions &);

EVFLOW_INSTANTIATE_WARP(float)
EVFLOW_INSTANTIATE_WARP(double)

} // namespace evflow
