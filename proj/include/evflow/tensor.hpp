#pragma once

#include <Eigen/Core>

#include <cassert>
#include <string>

namespace evflow {

/// Dense channels x height x width array, channel-major and row-major within a plane.
/// Also used for flat parameter blocks (height = width = 1) and all-pairs volumes
/// (one channel per source pixel).
template <typename Scalar>
struct Tensor
{
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  int channels = 0;
  int height = 0;
  int width = 0;
  Array data;

  Tensor() = default;
  Tensor(int c, int h, int w)
    : channels(c), height(h), width(w), data(Array::Zero(Eigen::Index(c) * h * w))
  {
  }

  static Tensor constant(int c, int h, int w, Scalar value)
  {
    Tensor t(c, h, w);
    t.data.setConstant(value);
    return t;
  }

  Eigen::Index size() const { return data.size(); }
  Eigen::Index plane() const { return Eigen::Index(height) * width; }
  bool empty() const { return data.size() == 0; }

  Scalar &operator()(int c, int y, int x)
  {
    assert(c >= 0 && c < channels && y >= 0 && y < height && x >= 0 && x < width);
    return data[(Eigen::Index(c) * height + y) * width + x];
  }
  Scalar operator()(int c, int y, int x) const
  {
    assert(c >= 0 && c < channels && y >= 0 && y < height && x >= 0 && x < width);
    return data[(Eigen::Index(c) * height + y) * width + x];
  }

  Scalar *channel_ptr(int c) { return data.data() + Eigen::Index(c) * plane(); }
  const Scalar *channel_ptr(int c) const { return data.data() + Eigen::Index(c) * plane(); }

  /// channels x (height*width) view.
  MatrixMap matrix() { return MatrixMap(data.data(), channels, plane()); }
  ConstMatrixMap matrix() const { return ConstMatrixMap(data.data(), channels, plane()); }

  bool same_shape(const Tensor &o) const
  {
    return channels == o.channels && height == o.height && width == o.width;
  }

  std::string shape_string() const
  {
    return std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width);
  }

  template <typename Other>
  Tensor<Other> cast() const
  {
    Tensor<Other> out(channels, height, width);
    out.data = data.template cast<Other>();
    return out;
  }
};

} // namespace evflow
