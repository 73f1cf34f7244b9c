#pragma once

#include "evflow/error.hpp"
#include "evflow/tensor.hpp"

#include <Eigen/Core>

#include <cmath>
#include <string>

namespace evflow {

enum class FlowResolution { Full, Eighth };

/// Dense displacement field with per-pixel validity. u is horizontal (columns),
/// v vertical (rows), both in pixels of the tagged resolution.
template <typename Scalar>
struct FlowField
{
  using Plane = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Plane u;
  Plane v;
  Mask valid;
  FlowResolution resolution = FlowResolution::Full;

  FlowField() = default;
  FlowField(int height, int width, FlowResolution res = FlowResolution::Full)
    : u(Plane::Zero(height, width)), v(Plane::Zero(height, width)), valid(Mask::Constant(height, width, true)),
      resolution(res)
  {
  }

  static FlowField constant(int height, int width, Scalar du, Scalar dv, FlowResolution res = FlowResolution::Full)
  {
    FlowField f(height, width, res);
    f.u.setConstant(du);
    f.v.setConstant(dv);
    return f;
  }

  int height() const { return int(u.rows()); }
  int width() const { return int(u.cols()); }
  Eigen::Index valid_count() const { return valid.count(); }

  void validate() const
  {
    if (v.rows() != u.rows() || v.cols() != u.cols() || valid.rows() != u.rows() || valid.cols() != u.cols()) {
      throw validation_error("flow field planes differ in shape");
    }
    for (int y = 0; y < height(); ++y) {
      for (int x = 0; x < width(); ++x) {
        if (valid(y, x) && !(std::isfinite(double(u(y, x))) && std::isfinite(double(v(y, x))))) {
          throw numeric_error("non-finite flow at pixel (" + std::to_string(x) + ", " + std::to_string(y) + ")");
        }
      }
    }
  }

  /// (2, H, W) tensor with u in channel 0.
  Tensor<Scalar> to_tensor() const
  {
    Tensor<Scalar> t(2, height(), width());
    for (int y = 0; y < height(); ++y) {
      for (int x = 0; x < width(); ++x) {
        t(0, y, x) = u(y, x);
        t(1, y, x) = v(y, x);
      }
    }
    return t;
  }

  /// (1, H, W) tensor holding 1 at valid pixels.
  Tensor<Scalar> mask_tensor() const
  {
    Tensor<Scalar> t(1, height(), width());
    for (int y = 0; y < height(); ++y) {
      for (int x = 0; x < width(); ++x) { t(0, y, x) = valid(y, x) ? Scalar(1) : Scalar(0); }
    }
    return t;
  }

  static FlowField from_tensor(const Tensor<Scalar> &t, FlowResolution res = FlowResolution::Full)
  {
    if (t.channels != 2) { throw validation_error("flow tensor must have two channels"); }
    FlowField f(t.height, t.width, res);
    for (int y = 0; y < t.height; ++y) {
      for (int x = 0; x < t.width; ++x) {
        f.u(y, x) = t(0, y, x);
        f.v(y, x) = t(1, y, x);
      }
    }
    return f;
  }

  template <typename Other>
  FlowField<Other> cast() const
  {
    FlowField<Other> f;
    f.u = u.template cast<Other>();
    f.v = v.template cast<Other>();
    f.valid = valid;
    f.resolution = resolution;
    return f;
  }
};

/// Mirror columns and negate u.
template <typename Scalar>
FlowField<Scalar> flip_horizontal(const FlowField<Scalar> &f)
{
  FlowField<Scalar> out = f;
  out.u = -f.u.rowwise().reverse();
  out.v = f.v.rowwise().reverse();
  out.valid = f.valid.rowwise().reverse();
  return out;
}

template <typename Scalar>
FlowField<Scalar> crop(const FlowField<Scalar> &f, int top, int left, int h, int w)
{
  if (top < 0 || left < 0 || top + h > f.height() || left + w > f.width()) {
    throw validation_error("flow crop window outside field");
  }
  FlowField<Scalar> out;
  out.u = f.u.block(top, left, h, w);
  out.v = f.v.block(top, left, h, w);
  out.valid = f.valid.block(top, left, h, w);
  out.resolution = f.resolution;
  return out;
}

/// Mirror every channel plane of a tensor left-right.
template <typename Scalar>
Tensor<Scalar> flip_horizontal(const Tensor<Scalar> &t)
{
  Tensor<Scalar> out(t.channels, t.height, t.width);
  for (int c = 0; c < t.channels; ++c) {
    for (int y = 0; y < t.height; ++y) {
      for (int x = 0; x < t.width; ++x) { out(c, y, t.width - 1 - x) = t(c, y, x); }
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> crop(const Tensor<Scalar> &t, int top, int left, int h, int w)
{
  if (top < 0 || left < 0 || top + h > t.height || left + w > t.width) {
    throw validation_error("tensor crop window outside " + t.shape_string());
  }
  Tensor<Scalar> out(t.channels, h, w);
  for (int c = 0; c < t.channels; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) { out(c, y, x) = t(c, top + y, left + x); }
    }
  }
  return out;
}

} // namespace evflow
