#include "evflow/autodiff.hpp"

#include "evflow/error.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace evflow {

template <typename Scalar>
int ParameterSet<Scalar>::add(std::string name, std::vector<int> shape, Tensor<Scalar> value)
{
  if (find(name) >= 0) { throw validation_error("duplicate parameter name " + name); }
  params_.push_back({std::move(name), std::move(shape), std::move(value)});
  return int(params_.size()) - 1;
}

template <typename Scalar>
int ParameterSet<Scalar>::find(const std::string &name) const
{
  for (int i = 0; i < size(); ++i) {
    if (params_[i].name == name) { return i; }
  }
  return -1;
}

template <typename Scalar>
Eigen::Index ParameterSet<Scalar>::scalar_count() const
{
  Eigen::Index n = 0;
  for (const auto &p : params_) { n += p.value.size(); }
  return n;
}

template <typename Scalar>
Var<Scalar> Graph<Scalar>::push(Node node)
{
  nodes_.push_back(std::move(node));
  return Var<Scalar>{this, int(nodes_.size()) - 1};
}

template <typename Scalar>
Var<Scalar> Graph<Scalar>::constant(TensorT value)
{
  Node n;
  n.owned = std::move(value);
  return push(std::move(n));
}

template <typename Scalar>
Var<Scalar> Graph<Scalar>::variable(TensorT value)
{
  Node n;
  n.owned = std::move(value);
  n.requires_grad = grad_enabled_;
  return push(std::move(n));
}

template <typename Scalar>
Var<Scalar> Graph<Scalar>::parameter(const ParameterSet<Scalar> &set, int index)
{
  if (params_ == nullptr) {
    params_ = &set;
    param_nodes_.assign(set.size(), -1);
  } else if (params_ != &set) {
    throw validation_error("graph is already bound to a different parameter set");
  }
  if (index < 0 || index >= set.size()) { throw validation_error("parameter index out of range"); }
  if (param_nodes_[index] >= 0) { return Var<Scalar>{this, param_nodes_[index]}; }
  Node n;
  n.ref = &set[index].value;
  n.requires_grad = grad_enabled_;
  Var<Scalar> v = push(std::move(n));
  param_nodes_[index] = v.id;
  return v;
}

template <typename Scalar>
Var<Scalar> Graph<Scalar>::record(TensorT value, const std::vector<Var<Scalar>> &parents, BackwardFn backward)
{
  Node n;
  n.owned = std::move(value);
  if (grad_enabled_) {
    for (const auto &p : parents) {
      if (p.valid() && nodes_[p.id].requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
  }
  if (n.requires_grad) { n.backward = std::move(backward); }
  return push(std::move(n));
}

template <typename Scalar>
const Tensor<Scalar> &Graph<Scalar>::value(Var<Scalar> v) const
{
  const Node &n = nodes_[v.id];
  return n.ref ? *n.ref : n.owned;
}

template <typename Scalar>
Tensor<Scalar> &Graph<Scalar>::grad(Var<Scalar> v)
{
  Node &n = nodes_[v.id];
  if (n.grad.empty()) {
    const TensorT &val = value(v);
    n.grad = TensorT(val.channels, val.height, val.width);
  }
  return n.grad;
}

template <typename Scalar>
void Graph<Scalar>::backward(Var<Scalar> root)
{
  if (value(root).size() != 1) { throw validation_error("backward() needs a scalar root"); }
  if (!nodes_[root.id].requires_grad) { return; }
  grad(root).data.setOnes();
  for (int i = root.id; i >= 0; --i) {
    Node &n = nodes_[i];
    if (n.backward && !n.grad.empty()) { n.backward(*this, n.grad); }
  }
}

template <typename Scalar>
Gradients<Scalar> Graph<Scalar>::parameter_gradients() const
{
  Gradients<Scalar> out;
  if (params_ == nullptr) { return out; }
  out.reserve(params_->size());
  for (int i = 0; i < params_->size(); ++i) {
    const auto &v = (*params_)[i].value;
    const int id = param_nodes_[i];
    if (id >= 0 && !nodes_[id].grad.empty()) {
      out.push_back(nodes_[id].grad);
    } else {
      out.emplace_back(v.channels, v.height, v.width);
    }
  }
  return out;
}

template <typename Scalar>
int Graph<Scalar>::parameter_leaf_count() const
{
  int n = 0;
  for (int id : param_nodes_) { n += id >= 0; }
  return n;
}

template <typename Scalar>
std::optional<Var<Scalar>> Graph<Scalar>::parameter_leaf(int index) const
{
  if (index < 0 || index >= int(param_nodes_.size()) || param_nodes_[index] < 0) { return std::nullopt; }
  return Var<Scalar>{const_cast<Graph *>(this), param_nodes_[index]};
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template class Graph<float>;
template class Graph<double>;

namespace ops {

namespace {

template <typename Scalar>
void require_same(const Tensor<Scalar> &a, const Tensor<Scalar> &b, const char *op)
{
  if (!a.same_shape(b)) {
    throw validation_error(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
  }
}

template <typename Scalar>
using RowMatrix = typename Tensor<Scalar>::RowMatrix;

} // namespace

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b)
{
  require_same(a.value(), b.value(), "add");
  Tensor<Scalar> out = a.value();
  out.data += b.value().data;
  return a.graph->record(std::move(out), {a, b}, [a, b](Graph<Scalar> &g, const Tensor<Scalar> &go) {
    if (g.requires_grad(a)) { g.grad(a).data += go.data; }
    if (g.requires_grad(b)) { g.grad(b).data += go.data; }
  });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b)
{
  require_same(a.value(), b.value(), "sub");
  Tensor<Scalar> out = a.value();
  out.data -= b.value().data;
  return a.graph->record(std::move(out), {a, b}, [a, b](Graph<Scalar> &g, const Tensor<Scalar> &go) {
    if (g.requires_grad(a)) { g.grad(a).data += go.data; }
    if (g.requires_grad(b)) { g.grad(b).data -= go.data; }
  });
}

template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b)
{
  require_same(a.value(), b.value(), "mul");
  Tensor<Scalar> out = a.value();
  out.data *= b.value().data;
  return a.graph->record(std::move(out), {a, b}, [a, b](Graph<Scalar> &g, const Tensor<Scalar> &go) {
    if (g.requires_grad(a)) { g.grad(a).data += go.data * g.value(b).data; }
    if (g.requires_grad(b)) { g.grad(b).data += go.data * g.value(a).data; }
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s)
{
  Tensor<Scalar> out = a.value();
  out.data *= s;
  return a.graph->record(std::move(out), {a}, [a, s](Graph<Scalar> &g, const Tensor<Scalar> &go) {
    g.grad(a).data += s * go.data;
  });
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> a)
{
  Tensor<Scalar> out = a.value();
  out.data = out.data.max(Scalar(0));
  auto active = std::make_shared<typename Tensor<Scalar>::Array>((out.data > Scalar(0)).template cast<Scalar>());
  return a.graph->record(std::move(out), {a}, [a, active](Graph<Scalar> &g, const Tensor<Scalar> &go) {
    g.grad(a).data += go.data * (*active);
  });
}

template <typename Scalar>
Var<Scalar> tanh(Var<Scalar> a)
{
  Tensor<Scalar> out = a.value();
  out.data = out.data.tanh();
  auto y = std::make_shared<typename Tensor<Scalar>::Array>(out.data);
  return a.graph->record(std::move(out), {a}, [a, y](Graph<Scalar> &g, const Tensor<Scalar> &go) {
    g.grad(a).data += go.data * (Scalar(1) - y->square());
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> a)
{
  Tensor<Scalar> out = a.value();
  out.data = Scalar(1) / (Scalar(1) + (-out.data).exp());
  auto y = std::make_shared<typename Tensor<Scalar>::Array>(out.data);
  return a.graph->record(std::move(out), {a}, [a, y](Graph<Scalar> &g, const Tensor<Scalar> &go) {
    g.grad(a).data += go.data * (*y) * (Scalar(1) - *y);
  });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a)
{
  Tensor<Scalar> out(1, 1, 1);
  out.data[0] = a.value().data.sum();
  return a.graph->record(std::move(out), {a}, [a](Graph<Scalar> &g, const Tensor<Scalar> &go) {
    g.grad(a).data += go.data[0];
  });
}

template <typename Scalar>
Var<Scalar> concat(const std::vector<Var<Scalar>> &parts)
{
  if (parts.empty()) { throw validation_error("concat of nothing"); }
  const auto &first = parts.front().value();
  int channels = 0;
  for (const auto &p : parts) {
    const auto &v = p.value();
    if (v.height != first.height || v.width != first.width) {
      throw validation_error("concat: spatial mismatch " + v.shape_string() + " vs " + first.shape_string());
    }
    channels += v.channels;
  }
  Tensor<Scalar> out(channels, first.height, first.width);
  Eigen::Index offset = 0;
  for (const auto &p : parts) {
    const auto &v = p.value();
    out.data.segment(offset, v.size()) = v.data;
    offset += v.size();
  }
  return parts.front().graph->record(std::move(out), parts, [parts](Graph<Scalar> &g, const Tensor<Scalar> &go) {
    Eigen::Index off = 0;
    for (const auto &p : parts) {
      const Eigen::Index n = g.value(p).size();
      if (g.requires_grad(p)) { g.grad(p).data += go.data.segment(off, n); }
      off += n;
    }
  });
}

template <typename Scalar>
Var<Scalar> slice_channels(Var<Scalar> a, int start, int count)
{
  const auto &v = a.value();
  if (start < 0 || count < 0 || start + count > v.channels) { throw validation_error("slice_channels out of range"); }
  Tensor<Scalar> out(count, v.height, v.width);
  out.data = v.data.segment(start * v.plane(), count * v.plane());
  return a.graph->record(std::move(out), {a}, [a, start, count](Graph<Scalar> &g, const Tensor<Scalar> &go) {
    auto &ga = g.grad(a);
    ga.data.segment(start * ga.plane(), count * ga.plane()) += go.data;
  });
}

namespace {

template <typename Scalar>
void im2col(const Tensor<Scalar> &x, const ConvSpec &s, int ho, int wo, RowMatrix<Scalar> &cols)
{
  const int kk = s.kernel_h * s.kernel_w;
  cols.setZero(Eigen::Index(x.channels) * kk, Eigen::Index(ho) * wo);
  for (int c = 0; c < x.channels; ++c) {
    const Scalar *src = x.channel_ptr(c);
    for (int ky = 0; ky < s.kernel_h; ++ky) {
      for (int kx = 0; kx < s.kernel_w; ++kx) {
        Scalar *dst = cols.row((Eigen::Index(c) * s.kernel_h + ky) * s.kernel_w + kx).data();
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * s.stride - s.pad_h + ky;
          if (iy < 0 || iy >= x.height) { continue; }
          const Scalar *row = src + Eigen::Index(iy) * x.width;
          Scalar *drow = dst + Eigen::Index(oy) * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * s.stride - s.pad_w + kx;
            if (ix >= 0 && ix < x.width) { drow[ox] = row[ix]; }
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const RowMatrix<Scalar> &cols, const ConvSpec &s, int ho, int wo, Tensor<Scalar> &dx)
{
  for (int c = 0; c < dx.channels; ++c) {
    Scalar *dst = dx.channel_ptr(c);
    for (int ky = 0; ky < s.kernel_h; ++ky) {
      for (int kx = 0; kx < s.kernel_w; ++kx) {
        const Scalar *src = cols.row((Eigen::Index(c) * s.kernel_h + ky) * s.kernel_w + kx).data();
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * s.stride - s.pad_h + ky;
          if (iy < 0 || iy >= dx.height) { continue; }
          Scalar *row = dst + Eigen::Index(iy) * dx.width;
          const Scalar *srow = src + Eigen::Index(oy) * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * s.stride - s.pad_w + kx;
            if (ix >= 0 && ix < dx.width) { row[ix] += srow[ox]; }
          }
        }
      }
    }
  }
}

} // namespace

template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias, const ConvSpec &spec)
{
  const auto &xv = x.value();
  const auto &wv = weight.value();
  const int kk = spec.kernel_h * spec.kernel_w;
  if (wv.height != xv.channels || wv.width != kk) {
    throw validation_error("conv2d: weight " + wv.shape_string() + " does not fit input " + xv.shape_string());
  }
  const int ho = (xv.height + 2 * spec.pad_h - spec.kernel_h) / spec.stride + 1;
  const int wo = (xv.width + 2 * spec.pad_w - spec.kernel_w) / spec.stride + 1;
  if (ho <= 0 || wo <= 0) { throw validation_error("conv2d: input " + xv.shape_string() + " too small"); }
  const bool pointwise = kk == 1 && spec.stride == 1 && spec.pad_h == 0 && spec.pad_w == 0;

  auto cols = std::make_shared<RowMatrix<Scalar>>();
  Tensor<Scalar> out(wv.channels, ho, wo);
  if (pointwise) {
    out.matrix().noalias() = wv.matrix() * xv.matrix();
  } else {
    im2col(xv, spec, ho, wo, *cols);
    out.matrix().noalias() = wv.matrix() * (*cols);
  }
  if (bias.valid()) {
    const auto &bv = bias.value();
    for (int c = 0; c < out.channels; ++c) { out.matrix().row(c).array() += bv.data[c]; }
  }
  std::vector<Var<Scalar>> parents{x, weight};
  if (bias.valid()) { parents.push_back(bias); }
  Var<Scalar> result = x.graph->record(
    std::move(out), parents,
    [=](Graph<Scalar> &g, const Tensor<Scalar> &go) {
      const auto gm = go.matrix();
      if (g.requires_grad(weight)) {
        if (pointwise) {
          g.grad(weight).matrix().noalias() += gm * g.value(x).matrix().transpose();
        } else {
          g.grad(weight).matrix().noalias() += gm * cols->transpose();
        }
      }
      if (bias.valid() && g.requires_grad(bias)) { g.grad(bias).data += gm.rowwise().sum().array(); }
      if (g.requires_grad(x)) {
        if (pointwise) {
          g.grad(x).matrix().noalias() += g.value(weight).matrix().transpose() * gm;
        } else {
          RowMatrix<Scalar> dcols = g.value(weight).matrix().transpose() * gm;
          col2im(dcols, spec, ho, wo, g.grad(x));
        }
      }
    });
  if (!x.graph->requires_grad(result)) { cols.reset(); }
  return result;
}

template <typename Scalar>
Var<Scalar> avg_pool(Var<Scalar> a, int k)
{
  const auto &v = a.value();
  const int ho = v.height / k, wo = v.width / k;
  if (ho <= 0 || wo <= 0) { throw validation_error("avg_pool: input " + v.shape_string() + " smaller than window"); }
  Tensor<Scalar> out(v.channels, ho, wo);
  const Scalar inv = Scalar(1) / Scalar(k * k);
  for (int c = 0; c < v.channels; ++c) {
    const Scalar *src = v.channel_ptr(c);
    Scalar *dst = out.channel_ptr(c);
    for (int y = 0; y < ho; ++y) {
      for (int x = 0; x < wo; ++x) {
        Scalar s = 0;
        for (int dy = 0; dy < k; ++dy) {
          for (int dx = 0; dx < k; ++dx) { s += src[Eigen::Index(y * k + dy) * v.width + x * k + dx]; }
        }
        dst[y * wo + x] = s * inv;
      }
    }
  }
  return a.graph->record(std::move(out), {a}, [a, k, ho, wo, inv](Graph<Scalar> &g, const Tensor<Scalar> &go) {
    auto &ga = g.grad(a);
    for (int c = 0; c < ga.channels; ++c) {
      Scalar *dst = ga.channel_ptr(c);
      const Scalar *src = go.channel_ptr(c);
      for (int y = 0; y < ho; ++y) {
        for (int x = 0; x < wo; ++x) {
          const Scalar gv = src[y * wo + x] * inv;
          for (int dy = 0; dy < k; ++dy) {
            for (int dx = 0; dx < k; ++dx) { dst[Eigen::Index(y * k + dy) * ga.width + x * k + dx] += gv; }
          }
        }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> pad_replicate(Var<Scalar> a, int top, int bottom, int left, int right)
{
  const auto &v = a.value();
  if (top == 0 && bottom == 0 && left == 0 && right == 0) { return a; }
  const int h = v.height + top + bottom, w = v.width + left + right;
  Tensor<Scalar> out(v.channels, h, w);
  auto src_y = [=](int y) { return std::clamp(y - top, 0, v.height - 1); };
  auto src_x = [=](int x) { return std::clamp(x - left, 0, v.width - 1); };
  for (int c = 0; c < v.channels; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) { out(c, y, x) = v(c, src_y(y), src_x(x)); }
    }
  }
  return a.graph->record(std::move(out), {a}, [a, src_y, src_x, h, w](Graph<Scalar> &g, const Tensor<Scalar> &go) {
    auto &ga = g.grad(a);
    for (int c = 0; c < ga.channels; ++c) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) { ga(c, src_y(y), src_x(x)) += go(c, y, x); }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> crop(Var<Scalar> a, int top, int left, int h, int w)
{
  const auto &v = a.value();
  if (top == 0 && left == 0 && h == v.height && w == v.width) { return a; }
  if (top < 0 || left < 0 || top + h > v.height || left + w > v.width) {
    throw validation_error("crop window outside " + v.shape_string());
  }
  Tensor<Scalar> out(v.channels, h, w);
  for (int c = 0; c < v.channels; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) { out(c, y, x) = v(c, top + y, left + x); }
    }
  }
  return a.graph->record(std::move(out), {a}, [a, top, left, h, w](Graph<Scalar> &g, const Tensor<Scalar> &go) {
    auto &ga = g.grad(a);
    for (int c = 0; c < ga.channels; ++c) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) { ga(c, top + y, left + x) += go(c, y, x); }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> correlation(Var<Scalar> f1, Var<Scalar> f2)
{
  const auto &a = f1.value();
  const auto &b = f2.value();
  if (!a.same_shape(b)) {
    throw validation_error("correlation: feature maps differ " + a.shape_string() + " vs " + b.shape_string());
  }
  const int n = int(a.plane());
  const Scalar s = Scalar(1) / std::sqrt(Scalar(a.channels));
  Tensor<Scalar> out(n, a.height, a.width);
  out.matrix().noalias() = s * (a.matrix().transpose() * b.matrix());
  return f1.graph->record(std::move(out), {f1, f2}, [f1, f2, s](Graph<Scalar> &g, const Tensor<Scalar> &go) {
    const auto gm = go.matrix();
    if (g.requires_grad(f1)) { g.grad(f1).matrix().noalias() += s * (g.value(f2).matrix() * gm.transpose()); }
    if (g.requires_grad(f2)) { g.grad(f2).matrix().noalias() += s * (g.value(f1).matrix() * gm); }
  });
}

namespace {

// Bilinear tap with zero outside; also returns d/dx and d/dy of the sample.
template <typename Scalar>
Scalar sample_zero(const Scalar *plane, int h, int w, Scalar px, Scalar py, Scalar *ddx, Scalar *ddy)
{
  const Scalar fx0 = std::floor(px), fy0 = std::floor(py);
  const int x0 = int(fx0), y0 = int(fy0);
  const Scalar ax = px - fx0, ay = py - fy0;
  auto at = [&](int y, int x) -> Scalar {
    return (x >= 0 && x < w && y >= 0 && y < h) ? plane[Eigen::Index(y) * w + x] : Scalar(0);
  };
  const Scalar v00 = at(y0, x0), v01 = at(y0, x0 + 1), v10 = at(y0 + 1, x0), v11 = at(y0 + 1, x0 + 1);
  if (ddx) { *ddx = (1 - ay) * (v01 - v00) + ay * (v11 - v10); }
  if (ddy) { *ddy = (1 - ax) * (v10 - v00) + ax * (v11 - v01); }
  return (1 - ay) * ((1 - ax) * v00 + ax * v01) + ay * ((1 - ax) * v10 + ax * v11);
}

template <typename Scalar>
void scatter_zero(Scalar *plane, int h, int w, Scalar px, Scalar py, Scalar value)
{
  const Scalar fx0 = std::floor(px), fy0 = std::floor(py);
  const int x0 = int(fx0), y0 = int(fy0);
  const Scalar ax = px - fx0, ay = py - fy0;
  auto put = [&](int y, int x, Scalar wgt) {
    if (x >= 0 && x < w && y >= 0 && y < h) { plane[Eigen::Index(y) * w + x] += wgt * value; }
  };
  put(y0, x0, (1 - ay) * (1 - ax));
  put(y0, x0 + 1, (1 - ay) * ax);
  put(y0 + 1, x0, ay * (1 - ax));
  put(y0 + 1, x0 + 1, ay * ax);
}

} // namespace

template <typename Scalar>
Var<Scalar> lookup(const std::vector<Var<Scalar>> &levels, Var<Scalar> flow, int radius)
{
  const auto &fv = flow.value();
  const int h = fv.height, w = fv.width;
  if (fv.channels != 2) { throw validation_error("lookup: flow must have 2 channels"); }
  if (!fv.data.allFinite()) { throw numeric_error("lookup: non-finite flow"); }
  const int side = 2 * radius + 1;
  const int taps = side * side;
  const int nl = int(levels.size());
  for (const auto &l : levels) {
    if (l.value().channels != h * w) { throw validation_error("lookup: pyramid does not match flow grid"); }
  }
  Tensor<Scalar> out(nl * taps, h, w);
  for (int l = 0; l < nl; ++l) {
    const auto &vol = levels[l].value();
    const Scalar inv = Scalar(1) / Scalar(1 << l);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const int s = y * w + x;
        const Scalar cx = (Scalar(x) + fv(0, y, x) + Scalar(0.5)) * inv - Scalar(0.5);
        const Scalar cy = (Scalar(y) + fv(1, y, x) + Scalar(0.5)) * inv - Scalar(0.5);
        const Scalar *plane = vol.channel_ptr(s);
        for (int dy = -radius; dy <= radius; ++dy) {
          for (int dx = -radius; dx <= radius; ++dx) {
            const int ch = l * taps + (dy + radius) * side + (dx + radius);
            out(ch, y, x) = sample_zero(plane, vol.height, vol.width, cx + dx, cy + dy, (Scalar *)nullptr, (Scalar *)nullptr);
          }
        }
      }
    }
  }
  std::vector<Var<Scalar>> parents = levels;
  parents.push_back(flow);
  return flow.graph->record(std::move(out), parents, [levels, flow, radius, h, w, side, taps](Graph<Scalar> &g, const Tensor<Scalar> &go) {
    const auto &fv = g.value(flow);
    const bool want_flow = g.requires_grad(flow);
    Tensor<Scalar> *gf = want_flow ? &g.grad(flow) : nullptr;
    for (int l = 0; l < int(levels.size()); ++l) {
      const auto &vol = g.value(levels[l]);
      Tensor<Scalar> *gv = g.requires_grad(levels[l]) ? &g.grad(levels[l]) : nullptr;
      const Scalar inv = Scalar(1) / Scalar(1 << l);
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const int s = y * w + x;
          const Scalar cx = (Scalar(x) + fv(0, y, x) + Scalar(0.5)) * inv - Scalar(0.5);
          const Scalar cy = (Scalar(y) + fv(1, y, x) + Scalar(0.5)) * inv - Scalar(0.5);
          const Scalar *plane = vol.channel_ptr(s);
          Scalar du = 0, dv = 0;
          for (int dy = -radius; dy <= radius; ++dy) {
            for (int dx = -radius; dx <= radius; ++dx) {
              const int ch = l * taps + (dy + radius) * side + (dx + radius);
              const Scalar gval = go(ch, y, x);
              if (gval == Scalar(0)) { continue; }
              if (gv) { scatter_zero(gv->channel_ptr(s), vol.height, vol.width, cx + dx, cy + dy, gval); }
              if (gf) {
                Scalar sx = 0, sy = 0;
                sample_zero(plane, vol.height, vol.width, cx + dx, cy + dy, &sx, &sy);
                du += gval * sx;
                dv += gval * sy;
              }
            }
          }
          if (gf) {
            (*gf)(0, y, x) += du * inv;
            (*gf)(1, y, x) += dv * inv;
          }
        }
      }
    }
  });
}

namespace {

struct LinearTap
{
  int i0, i1;
  double w1; // weight of i1; i0 gets 1 - w1
};

inline LinearTap upsample_tap(int fine, int factor, int coarse_size)
{
  double src = (fine + 0.5) / factor - 0.5;
  if (src < 0) { src = 0; }
  int i0 = int(std::floor(src));
  if (i0 > coarse_size - 1) { i0 = coarse_size - 1; }
  const int i1 = std::min(i0 + 1, coarse_size - 1);
  return {i0, i1, src - i0};
}

} // namespace

template <typename Scalar>
Var<Scalar> upsample_flow_bilinear(Var<Scalar> flow, int factor)
{
  const auto &fv = flow.value();
  const int h = fv.height * factor, w = fv.width * factor;
  std::vector<LinearTap> ty(h), tx(w);
  for (int y = 0; y < h; ++y) { ty[y] = upsample_tap(y, factor, fv.height); }
  for (int x = 0; x < w; ++x) { tx[x] = upsample_tap(x, factor, fv.width); }
  Tensor<Scalar> out(fv.channels, h, w);
  const Scalar f = Scalar(factor);
  for (int c = 0; c < fv.channels; ++c) {
    for (int y = 0; y < h; ++y) {
      const Scalar wy = Scalar(ty[y].w1);
      for (int x = 0; x < w; ++x) {
        const Scalar wx = Scalar(tx[x].w1);
        const Scalar top = (1 - wx) * fv(c, ty[y].i0, tx[x].i0) + wx * fv(c, ty[y].i0, tx[x].i1);
        const Scalar bot = (1 - wx) * fv(c, ty[y].i1, tx[x].i0) + wx * fv(c, ty[y].i1, tx[x].i1);
        out(c, y, x) = f * ((1 - wy) * top + wy * bot);
      }
    }
  }
  return flow.graph->record(std::move(out), {flow}, [flow, ty, tx, f, h, w](Graph<Scalar> &g, const Tensor<Scalar> &go) {
    auto &gf = g.grad(flow);
    for (int c = 0; c < gf.channels; ++c) {
      for (int y = 0; y < h; ++y) {
        const Scalar wy = Scalar(ty[y].w1);
        for (int x = 0; x < w; ++x) {
          const Scalar wx = Scalar(tx[x].w1);
          const Scalar gv = f * go(c, y, x);
          gf(c, ty[y].i0, tx[x].i0) += gv * (1 - wy) * (1 - wx);
          gf(c, ty[y].i0, tx[x].i1) += gv * (1 - wy) * wx;
          gf(c, ty[y].i1, tx[x].i0) += gv * wy * (1 - wx);
          gf(c, ty[y].i1, tx[x].i1) += gv * wy * wx;
        }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> upsample_flow_convex(Var<Scalar> flow, Var<Scalar> mask, int factor)
{
  const auto &fv = flow.value();
  const auto &mv = mask.value();
  const int ff = factor * factor;
  if (mv.channels != 9 * ff || mv.height != fv.height || mv.width != fv.width) {
    throw validation_error("convex upsampling: mask " + mv.shape_string() + " does not match flow " + fv.shape_string());
  }
  const int h = fv.height, w = fv.width;
  const Scalar f = Scalar(factor);
  // Softmax weights, layout [k][sub][pixel] like the mask.
  auto weights = std::make_shared<Tensor<Scalar>>(9 * ff, h, w);
  for (int sub = 0; sub < ff; ++sub) {
    for (Eigen::Index p = 0; p < mv.plane(); ++p) {
      Scalar mx = mv.data[Eigen::Index(sub) * mv.plane() + p];
      for (int k = 1; k < 9; ++k) { mx = std::max(mx, mv.data[(Eigen::Index(k) * ff + sub) * mv.plane() + p]); }
      Scalar z = 0;
      for (int k = 0; k < 9; ++k) {
        const Eigen::Index idx = (Eigen::Index(k) * ff + sub) * mv.plane() + p;
        weights->data[idx] = std::exp(mv.data[idx] - mx);
        z += weights->data[idx];
      }
      for (int k = 0; k < 9; ++k) { weights->data[(Eigen::Index(k) * ff + sub) * mv.plane() + p] /= z; }
    }
  }
  auto neighbour = [h, w](const Tensor<Scalar> &t, int c, int y, int x) -> Scalar {
    return (y >= 0 && y < h && x >= 0 && x < w) ? t(c, y, x) : Scalar(0);
  };
  Tensor<Scalar> out(2, h * factor, w * factor);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int a = 0; a < factor; ++a) {
        for (int b = 0; b < factor; ++b) {
          const int sub = a * factor + b;
          for (int c = 0; c < 2; ++c) {
            Scalar acc = 0;
            for (int k = 0; k < 9; ++k) {
              acc += (*weights)(k * ff + sub, y, x) * neighbour(fv, c, y + k / 3 - 1, x + k % 3 - 1);
            }
            out(c, y * factor + a, x * factor + b) = f * acc;
          }
        }
      }
    }
  }
  return flow.graph->record(std::move(out), {flow, mask}, [flow, mask, weights, factor, ff, h, w, f, neighbour](Graph<Scalar> &g, const Tensor<Scalar> &go) {
    const auto &fv = g.value(flow);
    Tensor<Scalar> *gf = g.requires_grad(flow) ? &g.grad(flow) : nullptr;
    Tensor<Scalar> *gm = g.requires_grad(mask) ? &g.grad(mask) : nullptr;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int a = 0; a < factor; ++a) {
          for (int b = 0; b < factor; ++b) {
            const int sub = a * factor + b;
            const Scalar g0 = f * go(0, y * factor + a, x * factor + b);
            const Scalar g1 = f * go(1, y * factor + a, x * factor + b);
            Scalar dw[9];
            Scalar dot = 0;
            for (int k = 0; k < 9; ++k) {
              const int ny = y + k / 3 - 1, nx = x + k % 3 - 1;
              const Scalar wk = (*weights)(k * ff + sub, y, x);
              dw[k] = g0 * neighbour(fv, 0, ny, nx) + g1 * neighbour(fv, 1, ny, nx);
              dot += wk * dw[k];
              if (gf && ny >= 0 && ny < h && nx >= 0 && nx < w) {
                (*gf)(0, ny, nx) += wk * g0;
                (*gf)(1, ny, nx) += wk * g1;
              }
            }
            if (gm) {
              for (int k = 0; k < 9; ++k) {
                const Scalar wk = (*weights)(k * ff + sub, y, x);
                (*gm)(k * ff + sub, y, x) += wk * (dw[k] - dot);
              }
            }
          }
        }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> masked_l1_mean(Var<Scalar> pred, const Tensor<Scalar> &target, const Tensor<Scalar> &mask)
{
  const auto &pv = pred.value();
  require_same(pv, target, "masked_l1_mean");
  if (mask.plane() != pv.plane()) { throw validation_error("masked_l1_mean: mask size mismatch"); }
  Eigen::Index count = 0;
  for (Eigen::Index p = 0; p < mask.plane(); ++p) { count += mask.data[p] != Scalar(0); }
  Tensor<Scalar> out(1, 1, 1);
  if (count == 0) { return pred.graph->constant(std::move(out)); }
  const Scalar inv = Scalar(1) / Scalar(count);
  Scalar acc = 0;
  for (int c = 0; c < pv.channels; ++c) {
    for (Eigen::Index p = 0; p < pv.plane(); ++p) {
      if (mask.data[p] != Scalar(0)) { acc += std::abs(pv.data[c * pv.plane() + p] - target.data[c * pv.plane() + p]); }
    }
  }
  out.data[0] = acc * inv;
  auto tgt = std::make_shared<Tensor<Scalar>>(target);
  auto msk = std::make_shared<Tensor<Scalar>>(mask);
  return pred.graph->record(std::move(out), {pred}, [pred, tgt, msk, inv](Graph<Scalar> &g, const Tensor<Scalar> &go) {
    const auto &pv = g.value(pred);
    auto &gp = g.grad(pred);
    const Scalar s = go.data[0] * inv;
    for (int c = 0; c < pv.channels; ++c) {
      for (Eigen::Index p = 0; p < pv.plane(); ++p) {
        if (msk->data[p] == Scalar(0)) { continue; }
        const Eigen::Index i = c * pv.plane() + p;
        const Scalar d = pv.data[i] - tgt->data[i];
        gp.data[i] += s * Scalar((d > 0) - (d < 0));
      }
    }
  });
}

#define EVFLOW_INSTANTIATE_OPS(S)                                                                  \
  template Var<S> add(Var<S>, Var<S>);                                                             \
  template Var<S> sub(Var<S>, Var<S>);                                                             \
  template Var<S> mul(Var<S>, Var<S>);                                                             \
  template Var<S> scale(Var<S>, S);                                                                \
  template Var<S> relu(Var<S>);                                                                    \
  template Var<S> tanh(Var<S>);                                                                    \
  template Var<S> sigmoid(Var<S>);                                                                 \
  template Var<S> sum(Var<S>);                                                                     \
  template Var<S> concat(const std::vector<Var<S>> &);                                             \
  template Var<S> slice_channels(Var<S>, int, int);                                                \
  template Var<S> conv2d(Var<S>, Var<S>, Var<S>, const ConvSpec &);                                \
  template Var<S> avg_pool(Var<S>, int);                                                           \
  template Var<S> pad_replicate(Var<S>, int, int, int, int);                                       \
  template Var<S> crop(Var<S>, int, int, int, int);                                                \
  template Var<S> correlation(Var<S>, Var<S>);                                                     \
  template Var<S> lookup(const std::vector<Var<S>> &, Var<S>, int);                                \
  template Var<S> upsample_flow_bilinear(Var<S>, int);                                             \
  template Var<S> upsample_flow_convex(Var<S>, Var<S>, int);                                       \
  template Var<S> masked_l1_mean(Var<S>, const Tensor<S> &, const Tensor<S> &);

EVFLOW_INSTANTIATE_OPS(float)
EVFLOW_INSTANTIATE_OPS(double)

} // namespace ops
} // namespace evflow
