#pragma once

// Minimal reverse-mode differentiation over Tensor values.
//
// A Graph records every operation applied to it together with a closure that
// pushes the output gradient back to the operation's inputs. Nodes are stored
// in creation order, which is a valid topological order, so backward() is a
// single reverse sweep.

#include "evflow/tensor.hpp"

#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace evflow {

template <typename Scalar>
struct Parameter
{
  std::string name;
  std::vector<int> shape; // logical shape, stored in checkpoints
  Tensor<Scalar> value;
};

/// Named, ordered collection of trainable tensors. Modules refer to their
/// parameters by index so copies of a model stay self-consistent.
template <typename Scalar>
class ParameterSet
{
public:
  int add(std::string name, std::vector<int> shape, Tensor<Scalar> value);

  int size() const { return int(params_.size()); }
  Parameter<Scalar> &operator[](int i) { return params_[i]; }
  const Parameter<Scalar> &operator[](int i) const { return params_[i]; }
  int find(const std::string &name) const;
  Eigen::Index scalar_count() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

private:
  std::vector<Parameter<Scalar>> params_;
};

/// One gradient tensor per parameter, aligned with ParameterSet indices.
template <typename Scalar>
using Gradients = std::vector<Tensor<Scalar>>;

template <typename Scalar>
class Graph;

template <typename Scalar>
struct Var
{
  Graph<Scalar> *graph = nullptr;
  int id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  const Tensor<Scalar> &value() const { return graph->value(*this); }
};

template <typename Scalar>
class Graph
{
public:
  using TensorT = Tensor<Scalar>;
  using BackwardFn = std::function<void(Graph &, const TensorT &)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph &) = delete;
  Graph &operator=(const Graph &) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  /// Leaf that never receives a gradient.
  Var<Scalar> constant(TensorT value);
  /// Leaf that accumulates a gradient (probes, test inputs).
  Var<Scalar> variable(TensorT value);
  /// Leaf bound to a parameter; repeated calls for one index return the same node.
  Var<Scalar> parameter(const ParameterSet<Scalar> &set, int index);

  /// Records an operation. `backward` is dropped if no parent needs a gradient.
  Var<Scalar> record(TensorT value, const std::vector<Var<Scalar>> &parents, BackwardFn backward);

  const TensorT &value(Var<Scalar> v) const;
  bool requires_grad(Var<Scalar> v) const { return nodes_[v.id].requires_grad; }
  bool has_grad(Var<Scalar> v) const { return !nodes_[v.id].grad.empty(); }
  /// Gradient buffer for v, zero-initialized on first access.
  TensorT &grad(Var<Scalar> v);

  /// Seeds d(root)/d(root) = 1 and sweeps backwards. Root must hold one element.
  void backward(Var<Scalar> root);

  /// Gradients of every parameter bound to this graph; unused ones are zero.
  Gradients<Scalar> parameter_gradients() const;
  int parameter_leaf_count() const;
  std::optional<Var<Scalar>> parameter_leaf(int index) const;
  std::size_t node_count() const { return nodes_.size(); }

private:
  struct Node
  {
    TensorT owned;
    const TensorT *ref = nullptr;
    TensorT grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var<Scalar> push(Node node);

  bool grad_enabled_;
  std::deque<Node> nodes_;
  const ParameterSet<Scalar> *params_ = nullptr;
  std::vector<int> param_nodes_;
};

struct ConvSpec
{
  int kernel_h = 3;
  int kernel_w = 3;
  int stride = 1;
  int pad_h = 1;
  int pad_w = 1;

  static ConvSpec same(int k) { return {k, k, 1, k / 2, k / 2}; }
  static ConvSpec rect(int kh, int kw) { return {kh, kw, 1, kh / 2, kw / 2}; }
  static ConvSpec down(int k) { return {k, k, k, 0, 0}; }
};

namespace ops {

template <typename Scalar> Var<Scalar> add(Var<Scalar> a, Var<Scalar> b);
template <typename Scalar> Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b);
template <typename Scalar> Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b);
template <typename Scalar> Var<Scalar> scale(Var<Scalar> a, Scalar s);
template <typename Scalar> Var<Scalar> relu(Var<Scalar> a);
template <typename Scalar> Var<Scalar> tanh(Var<Scalar> a);
template <typename Scalar> Var<Scalar> sigmoid(Var<Scalar> a);
template <typename Scalar> Var<Scalar> sum(Var<Scalar> a);

template <typename Scalar> Var<Scalar> concat(const std::vector<Var<Scalar>> &parts);
template <typename Scalar> Var<Scalar> slice_channels(Var<Scalar> a, int start, int count);

/// weight: (Cout, Cin, kh*kw); bias: (Cout, 1, 1) or invalid Var for none. Zero padding.
template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias, const ConvSpec &spec);

/// k x k average pooling with stride k; trailing rows/cols that do not fill a window are dropped.
template <typename Scalar> Var<Scalar> avg_pool(Var<Scalar> a, int k);

/// Replicate padding; amounts per side.
template <typename Scalar>
Var<Scalar> pad_replicate(Var<Scalar> a, int top, int bottom, int left, int right);
template <typename Scalar> Var<Scalar> crop(Var<Scalar> a, int top, int left, int h, int w);

/// All-pairs (source pixel = output channel) dot products scaled by 1/sqrt(D).
template <typename Scalar> Var<Scalar> correlation(Var<Scalar> f1, Var<Scalar> f2);

/// Bilinear (2r+1)^2 window per pyramid level around the flow-displaced source
/// position. Output channel order: level, then dy, then dx. Out-of-range taps read 0.
template <typename Scalar>
Var<Scalar> lookup(const std::vector<Var<Scalar>> &levels, Var<Scalar> flow, int radius);

/// Bilinear (half-pixel-centered, edge-clamped) upsampling of a flow field by
/// `factor`, values multiplied by `factor`.
template <typename Scalar> Var<Scalar> upsample_flow_bilinear(Var<Scalar> flow, int factor);

/// Convex combination of the 3x3 coarse neighbourhood with per-subpixel softmax
/// weights from `mask` (9*factor^2 channels); values multiplied by `factor`.
template <typename Scalar>
Var<Scalar> upsample_flow_convex(Var<Scalar> flow, Var<Scalar> mask, int factor);

/// Mean over pixels with mask != 0 of |pred-target| summed over channels.
/// Returns a constant 0 when the mask is empty.
template <typename Scalar>
Var<Scalar> masked_l1_mean(Var<Scalar> pred, const Tensor<Scalar> &target, const Tensor<Scalar> &mask);

} // namespace ops

template <typename Scalar> Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) { return ops::add(a, b); }
template <typename Scalar> Var<Scalar> operator-(Var<Scalar> a, Var<Scalar> b) { return ops::sub(a, b); }
template <typename Scalar> Var<Scalar> operator*(Var<Scalar> a, Var<Scalar> b) { return ops::mul(a, b); }

extern template class ParameterSet<float>;
extern template class ParameterSet<double>;
extern template class Graph<float>;
extern template class Graph<double>;

} // namespace evflow
