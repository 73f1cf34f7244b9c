#include "doctest.h"

#include "support.hpp"

#include "evflow/checkpoint.hpp"
#include "evflow/model.hpp"

#include <fstream>
#include <set>

using namespace testing;

namespace {

Tensor<double> random_tensor(int c, int h, int w, Rng &rng, double lo = -1, double hi = 1)
{
  Tensor<double> t(c, h, w);
  for (Eigen::Index i = 0; i < t.size(); ++i) { t.data[i] = uniform(rng, lo, hi); }
  return t;
}

VoxelGrid<double> random_grid(int bins, int h, int w, Rng &rng)
{
  VoxelGrid<double> g;
  g.data = random_tensor(bins, h, w, rng);
  g.bins = bins;
  return g;
}

// Bilinear read with zero outside.
double sample_plane(const Tensor<double> &vol, int ch, double px, double py)
{
  const int x0 = int(std::floor(px)), y0 = int(std::floor(py));
  double out = 0;
  for (int dy = 0; dy < 2; ++dy) {
    for (int dx = 0; dx < 2; ++dx) {
      const int x = x0 + dx, y = y0 + dy;
      if (x < 0 || y < 0 || x >= vol.width || y >= vol.height) { continue; }
      out += (1 - std::abs(px - x)) * (1 - std::abs(py - y)) * vol(ch, y, x);
    }
  }
  return out;
}

ModelConfig small_config()
{
  ModelConfig c = ModelConfig::desk();
  c.iterations = 2;
  return c;
}

} // namespace

TEST_CASE("correlation of an all-zero map")
{
  Rng rng(1);
  const FeatureMap<double> f1{random_tensor(5, 4, 4, rng)}, f2{Tensor<double>(5, 4, 4)};
  const auto pyr = correlation_volume(f1, f2, 3);
  for (const auto &l : pyr.levels) { CHECK((l.data == 0).all()); }
}

TEST_CASE("orthonormal features give a scaled identity")
{
  const int d = 16;
  Tensor<double> f(d, 4, 4);
  for (int i = 0; i < 16; ++i) { f(i, i / 4, i % 4) = 1; }
  const auto pyr = correlation_volume<double>({f}, {f}, 1);
  const auto &v = pyr.levels[0];
  for (int s = 0; s < 16; ++s) {
    for (int t = 0; t < 16; ++t) { CHECK(v(s, t / 4, t % 4) == (s == t ? 1.0 / std::sqrt(double(d)) : 0.0)); }
  }
  CHECK(pyr.scale == doctest::Approx(0.25));

  // Zero flow reads the centre tap.
  const auto taps = lookup(pyr, Tensor<double>(2, 4, 4), 1);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) {
      for (int k = 0; k < 9; ++k) { CHECK(taps(k, y, x) == (k == 4 ? 0.25 : 0.0)); }
    }
  }
}

TEST_CASE("correlation matches the quadruple loop")
{
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const int d = 3;
    const Tensor<double> a = random_tensor(d, 4, 4, rng), b = random_tensor(d, 4, 4, rng);
    const auto pyr = correlation_volume<double>({a}, {b}, 2);
    double worst = 0;
    for (int y1 = 0; y1 < 4; ++y1) {
      for (int x1 = 0; x1 < 4; ++x1) {
        for (int y2 = 0; y2 < 4; ++y2) {
          for (int x2 = 0; x2 < 4; ++x2) {
            double dot = 0;
            for (int c = 0; c < d; ++c) { dot += a(c, y1, x1) * b(c, y2, x2); }
            worst = std::max(worst, std::abs(pyr.levels[0](y1 * 4 + x1, y2, x2) - dot / std::sqrt(3.0)));
          }
        }
        for (int py = 0; py < 2; ++py) {
          for (int px = 0; px < 2; ++px) {
            const auto &l0 = pyr.levels[0];
            const int s = y1 * 4 + x1;
            const double mean = (l0(s, 2 * py, 2 * px) + l0(s, 2 * py, 2 * px + 1) + l0(s, 2 * py + 1, 2 * px) +
                                 l0(s, 2 * py + 1, 2 * px + 1)) /
                                4;
            worst = std::max(worst, std::abs(pyr.levels[1](s, py, px) - mean));
          }
        }
      }
    }
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("pyramid levels are pooled copies")
{
  Rng rng(3);
  const auto pyr = correlation_volume<double>({random_tensor(8, 8, 8, rng)}, {random_tensor(8, 8, 8, rng)}, 4);
  REQUIRE(pyr.levels.size() == 4);
  for (std::size_t l = 1; l < 4; ++l) {
    const auto &fine = pyr.levels[l - 1], &coarse = pyr.levels[l];
    CHECK(coarse.height == fine.height / 2);
    CHECK(coarse.channels == 64);
    for (int s = 0; s < 64; ++s) {
      for (int y = 0; y < coarse.height; ++y) {
        for (int x = 0; x < coarse.width; ++x) {
          const double m = (fine(s, 2 * y, 2 * x) + fine(s, 2 * y, 2 * x + 1) + fine(s, 2 * y + 1, 2 * x) +
                            fine(s, 2 * y + 1, 2 * x + 1)) /
                           4;
          CHECK(std::abs(coarse(s, y, x) - m) < 1e-6);
        }
      }
    }
  }
}

TEST_CASE("correlation shape mismatch")
{
  CHECK_THROWS_AS(correlation_volume<double>({Tensor<double>(3, 4, 4)}, {Tensor<double>(3, 4, 5)}, 1), Error);
  CHECK_THROWS_AS(correlation_volume<double>({Tensor<double>(3, 4, 4)}, {Tensor<double>(2, 4, 4)}, 1), Error);
}

TEST_CASE("lookup matches a bilinear window oracle")
{
  Rng rng(4);
  const int h = 6, w = 8, r = 2;
  const auto pyr = correlation_volume<double>({random_tensor(4, h, w, rng)}, {random_tensor(4, h, w, rng)}, 3);
  const Tensor<double> flow = random_tensor(2, h, w, rng, -4, 4);
  const auto taps = lookup(pyr, flow, r);
  REQUIRE(taps.channels == 3 * 25);
  double worst = 0;
  for (int l = 0; l < 3; ++l) {
    const double s = std::ldexp(1.0, -l);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        // Pixel centres stay aligned across levels.
        const double cx = (x + flow(0, y, x) + 0.5) * s - 0.5, cy = (y + flow(1, y, x) + 0.5) * s - 0.5;
        for (int dy = -r; dy <= r; ++dy) {
          for (int dx = -r; dx <= r; ++dx) {
            const int ch = l * 25 + (dy + r) * 5 + (dx + r);
            const double want = sample_plane(pyr.levels[l], y * w + x, cx + dx, cy + dy);
            worst = std::max(worst, std::abs(taps(ch, y, x) - want));
          }
        }
      }
    }
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("planted match peaks at the centre tap")
{
  Rng rng(5);
  const int h = 6, w = 6, d = 8;
  Tensor<double> f1 = random_tensor(d, h, w, rng, 0, 0.2), f2 = random_tensor(d, h, w, rng, 0, 0.2);
  // Source (2, 1) matches target (4, 3) strongly.
  for (int c = 0; c < d; ++c) { f1(c, 1, 2) = f2(c, 3, 4) = 1.0; }
  const auto pyr = correlation_volume<double>({f1}, {f2}, 1);
  Tensor<double> flow(2, h, w);
  flow(0, 1, 2) = 2;
  flow(1, 1, 2) = 2;
  const auto taps = lookup(pyr, flow, 1);
  double best = -1e9;
  for (int k = 0; k < 9; ++k) { best = std::max(best, taps(k, 1, 2)); }
  CHECK(taps(4, 1, 2) == best);
  CHECK(taps(4, 1, 2) == doctest::Approx(double(d) / std::sqrt(double(d))));
}

TEST_CASE("lookup outside the frame reads zeros")
{
  Rng rng(6);
  const auto pyr = correlation_volume<double>({random_tensor(4, 4, 4, rng)}, {random_tensor(4, 4, 4, rng)}, 2);
  const auto far = Tensor<double>::constant(2, 4, 4, 50.0);
  const auto taps = lookup(pyr, far, 3);
  CHECK((taps.data == 0).all());
  Tensor<double> bad(2, 4, 4);
  bad(1, 2, 2) = std::numeric_limits<double>::infinity();
  try {
    lookup(pyr, bad, 1);
    FAIL("expected a numeric error");
  } catch (const Error &e) {
    CHECK(e.kind() == ErrorKind::Numeric);
  }
}

TEST_CASE("encoders are deterministic")
{
  const FlowModel<double> a(small_config(), 7), b(small_config(), 7), c(small_config(), 8);
  VoxelGrid<double> zero;
  zero.data = Tensor<double>(5, 32, 32);
  const auto fa = a.encode_features(zero), fa2 = a.encode_features(zero), fb = b.encode_features(zero);
  CHECK((fa.data.data == fa2.data.data).all());
  CHECK((fa.data.data == fb.data.data).all());
  CHECK(fa.data.height == 4);
  CHECK(fa.data.channels == 32);
  const auto [ctx_a, hid_a] = a.encode_context(zero);
  const auto [ctx_b, hid_b] = b.encode_context(zero);
  CHECK((ctx_a.data == ctx_b.data).all());
  CHECK((hid_a.data == hid_b.data).all());
  CHECK((hid_a.data.abs() < 1).all());
  CHECK(hid_a.data.allFinite());
  CHECK((ctx_a.data >= 0).all());
  bool differs = false;
  for (int i = 0; i < a.parameters().size(); ++i) {
    differs = differs || !(a.parameters()[i].value.data == c.parameters()[i].value.data).all();
  }
  CHECK(differs);
}

TEST_CASE("hidden state stays inside (-1, 1)")
{
  Rng rng(8);
  const FlowModel<double> m(small_config(), 1);
  VoxelGrid<double> g = random_grid(5, 32, 32, rng);
  g.data.data *= 4;
  const auto [ctx, hid] = m.encode_context(g);
  CHECK((hid.data.abs() < 1).all());
  CHECK(hid.data.allFinite());
}

TEST_CASE("one feature encoder serves both grids")
{
  Rng rng(9);
  const FlowModel<double> m(small_config(), 2);
  Graph<double> g(true);
  const auto a = g.constant(random_tensor(5, 32, 32, rng)), b = g.constant(random_tensor(5, 32, 32, rng));
  const auto fa = m.encode_features(g, a);
  const int after_one = g.parameter_leaf_count();
  const auto fb = m.encode_features(g, b);
  CHECK(g.parameter_leaf_count() == after_one);
  CHECK(after_one == int(m.feature_encoder().parameter_indices().size()));
  g.backward(ops::sum(ops::add(ops::sum(fa), ops::sum(fb))));

  std::set<int> fnet, cnet;
  for (int i : m.feature_encoder().parameter_indices()) { fnet.insert(i); }
  for (int i : m.context_encoder().parameter_indices()) { cnet.insert(i); }
  for (int i : cnet) { CHECK(fnet.count(i) == 0); }
  CHECK(fnet.size() == cnet.size());
}

TEST_CASE("receptive field of the encoder")
{
  const FlowModel<double> m(small_config(), 3);
  // Main path back from one output cell: head 1x1, two 3x3 residual convs,
  // then (2x2 stride 2, 3x3) three times and the 3x3 stem: input span [-23, 30]
  // around the cell's first pixel, centre 3.5 -> 26.5 px, rounded up.
  CHECK(m.feature_encoder().receptive_radius() == 27);
  CHECK(m.context_encoder().receptive_radius() == 27);

  Rng rng(10);
  VoxelGrid<double> a = random_grid(5, 96, 96, rng), b = a;
  // Grids differ only inside the 32x32 block [32, 64)^2.
  for (int c = 0; c < 5; ++c) {
    for (int y = 32; y < 64; ++y) {
      for (int x = 32; x < 64; ++x) { b.data(c, y, x) = uniform(rng, -1, 1); }
    }
  }
  const auto fa = m.encode_features(a), fb = m.encode_features(b);
  const int radius = m.feature_encoder().receptive_radius();
  int far_cells = 0, changed_near = 0;
  for (int cy = 0; cy < 12; ++cy) {
    for (int cx = 0; cx < 12; ++cx) {
      const double py = 8 * cy + 3.5, px = 8 * cx + 3.5;
      const double dy = std::max({0.0, 32 - py, py - 63}), dx = std::max({0.0, 32 - px, px - 63});
      bool same = true;
      for (int c = 0; c < fa.data.channels; ++c) { same = same && fa.data(c, cy, cx) == fb.data(c, cy, cx); }
      if (std::max(dx, dy) > radius) {
        ++far_cells;
        CHECK(same);
      } else if (!same) {
        ++changed_near;
      }
    }
  }
  CHECK(far_cells > 0);
  CHECK(changed_near > 0);
}

TEST_CASE("shifting the input by 8 px shifts the features by one cell")
{
  Rng rng(11);
  const FlowModel<double> m(small_config(), 4);
  VoxelGrid<double> a = random_grid(5, 96, 96, rng), b = a;
  for (int c = 0; c < 5; ++c) {
    for (int y = 0; y < 96; ++y) {
      for (int x = 0; x < 96; ++x) { b.data(c, y, x) = a.data(c, y, std::max(0, x - 8)); }
    }
  }
  const auto fa = m.encode_features(a), fb = m.encode_features(b);
  // Cells whose receptive field avoids the borders and the replicated column.
  double worst = 0;
  for (int c = 0; c < fa.data.channels; ++c) {
    for (int cy = 4; cy < 8; ++cy) {
      for (int cx = 5; cx < 8; ++cx) { worst = std::max(worst, std::abs(fb.data(c, cy, cx + 1) - fa.data(c, cy, cx))); }
    }
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("channel mismatch is a validation error")
{
  const FlowModel<double> m(small_config(), 5);
  VoxelGrid<double> g;
  g.data = Tensor<double>(4, 16, 16);
  try {
    m.encode_features(g);
    FAIL("expected a validation error");
  } catch (const Error &e) {
    CHECK(e.kind() == ErrorKind::Validation);
  }
}

TEST_CASE("prediction count and padding")
{
  Rng rng(12);
  const FlowModel<float> m(ModelConfig::desk(), 6);
  VoxelGrid<float> a, b;
  a.data = random_tensor(5, 44, 52, rng).cast<float>();
  b.data = random_tensor(5, 44, 52, rng).cast<float>();
  for (int n : {1, 2, 7, 100}) {
    const auto est = m.estimate(a, b, nullptr, n);
    REQUIRE(int(est.predictions.size()) == n);
    for (const auto &p : est.predictions) {
      CHECK(p.height() == 44);
      CHECK(p.width() == 52);
      CHECK(p.u.allFinite());
      CHECK(p.v.allFinite());
    }
    CHECK(est.final_low.height() == 6);
    CHECK(est.final_low.width() == 7);
  }
  const auto est = m.estimate(a, b);
  CHECK(est.predictions.size() == 4);
  CHECK(est.padding.top + est.padding.bottom == 4);
  CHECK(est.padding.left + est.padding.right == 4);
  CHECK(est.padding.top == 2);

  VoxelGrid<float> tiny;
  tiny.data = Tensor<float>(5, 16, 16);
  CHECK_THROWS_AS(m.estimate(tiny, tiny), Error);
}

TEST_CASE("first prediction is the upsampled first update")
{
  Rng rng(13);
  for (UpsampleMode mode : {UpsampleMode::Convex, UpsampleMode::Bilinear}) {
    ModelConfig cfg = small_config();
    cfg.upsample = mode;
    const FlowModel<double> m(cfg, 7);
    const VoxelGrid<double> a = random_grid(5, 32, 32, rng), b = random_grid(5, 32, 32, rng);
    const auto est = m.estimate(a, b, nullptr, 3);

    Graph<double> g(false);
    const auto fa = m.encode_features(g, g.constant(a.data));
    const auto fb = m.encode_features(g, g.constant(b.data));
    const auto ctx = m.encode_context(g, g.constant(b.data));
    const auto pyr = m.pyramid(g, fa, fb);
    const auto zero = g.constant(Tensor<double>(2, 4, 4));
    const auto corr = ops::lookup(pyr, zero, cfg.lookup_radius);
    const auto step = m.update_block().step(g, m.parameters(), ctx.hidden, ctx.context, corr, zero);
    const auto up = mode == UpsampleMode::Convex ? ops::upsample_flow_convex(step.delta, step.mask, 8)
                                                 : ops::upsample_flow_bilinear(step.delta, 8);
    const auto want = FlowField<double>::from_tensor(up.value());
    CHECK((est.predictions[0].u - want.u).abs().maxCoeff() < 1e-12);
    CHECK((est.predictions[0].v - want.v).abs().maxCoeff() < 1e-12);
    CHECK_FALSE((est.predictions[0].u == est.predictions[1].u).all());
  }
}

TEST_CASE("model gradients match finite differences")
{
  Rng rng(14);
  ModelConfig cfg = small_config();
  FlowModel<double> m(cfg, 8);
  // Zero-initialized biases would put ReLUs exactly on their kink.
  for (auto &p : m.parameters()) {
    if (p.shape.size() == 1) {
      for (Eigen::Index i = 0; i < p.value.size(); ++i) { p.value.data[i] = uniform(rng, -0.1, 0.1); }
    }
  }
  const VoxelGrid<double> a = random_grid(5, 32, 32, rng), b = random_grid(5, 32, 32, rng);
  const Tensor<double> weights = random_tensor(2, 32, 32, rng);
  auto objective = [&](bool grad, Gradients<double> *out) {
    Graph<double> g(grad);
    const auto fa = m.encode_features(g, g.constant(a.data));
    const auto fb = m.encode_features(g, g.constant(b.data));
    const auto ctx = m.encode_context(g, g.constant(b.data));
    const auto u = m.unroll(g, m.pyramid(g, fa, fb), ctx, {}, cfg.iterations, Padding{});
    const auto loss = ops::sum(ops::mul(u.predictions.back(), g.constant(weights)));
    if (grad) {
      g.backward(loss);
      *out = g.parameter_gradients();
    }
    return loss.value().data[0];
  };
  Gradients<double> grads;
  objective(true, &grads);
  auto &ps = m.parameters();
  auto central = [&](int p, Eigen::Index i, double h) {
    const double keep = ps[p].value.data[i];
    ps[p].value.data[i] = keep + h;
    const double up = objective(false, nullptr);
    ps[p].value.data[i] = keep - h;
    const double down = objective(false, nullptr);
    ps[p].value.data[i] = keep;
    return (up - down) / (2 * h);
  };
  int checked = 0, kinks = 0;
  std::set<int> layers;
  for (int draw = 0; draw < 200 && checked < 24; ++draw) {
    const int p = uniform_int(rng, 0, ps.size() - 1);
    const Eigen::Index i = uniform_int(rng, 0, int(ps[p].value.size()) - 1);
    const double fd = central(p, i, 1e-5), fd_half = central(p, i, 5e-6);
    // Disagreeing step sizes mean a ReLU kink sits inside the stencil.
    if (std::abs(fd - fd_half) > 1e-4 * std::max(std::abs(fd), 1e-6)) {
      ++kinks;
      continue;
    }
    const double an = grads[std::size_t(p)].data[i];
    const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
    CHECK_MESSAGE(rel < 1e-3, ps[p].name << "[" << i << "] analytic " << an << " numeric " << fd);
    ++checked;
    layers.insert(p);
  }
  CHECK(checked >= 20);
  CHECK(layers.size() >= 10);
  CHECK(kinks < 20);
}

namespace {

// Projects parameters so the network commutes with a horizontal mirror.
// Every channel is even (unchanged under the mirror) except the u component of
// the running flow and the u output of the flow head, which are odd.
void make_mirror_symmetric(FlowModel<double> &m)
{
  const ModelConfig &cfg = m.config();
  const int side = 2 * cfg.lookup_radius + 1;
  const int flow_u_in_gru = cfg.hidden_dim + cfg.context_dim + cfg.motion_dim - 2;
  for (auto &p : m.parameters()) {
    const bool is_bias = p.name.size() > 5 && p.name.compare(p.name.size() - 5, 5, ".bias") == 0;
    const std::string layer = p.name.substr(0, p.name.rfind('.'));
    if (is_bias) {
      if (layer == "update.flow_head.conv2") { p.value.data[0] = 0; }
      continue;
    }
    const int cout = p.shape[0], cin = p.shape[1], kh = p.shape[2], kw = p.shape[3];
    auto parity_in = [&](int ci) {
      if (layer == "update.motion.flow1") { return ci == 0 ? -1 : 1; }
      if (layer.rfind("update.gru.", 0) == 0) { return ci == flow_u_in_gru ? -1 : 1; }
      return 1;
    };
    auto parity_out = [&](int co) { return layer == "update.flow_head.conv2" && co == 0 ? -1 : 1; };
    Tensor<double> &w = p.value;
    const Tensor<double> src = w;
    for (int co = 0; co < cout; ++co) {
      for (int ci = 0; ci < cin; ++ci) {
        const int s = parity_in(ci) * parity_out(co);
        // The lookup window mirrors too: tap (level, dy, dx) <-> (level, dy, -dx).
        int cj = ci;
        if (layer == "update.motion.corr1") {
          const int level = ci / (side * side), dy = (ci / side) % side, dx = ci % side;
          cj = level * side * side + dy * side + (side - 1 - dx);
        }
        for (int ky = 0; ky < kh; ++ky) {
          for (int kx = 0; kx < kw; ++kx) {
            w(co, ci, ky * kw + kx) = 0.5 * (src(co, ci, ky * kw + kx) + s * src(co, cj, ky * kw + (kw - 1 - kx)));
          }
        }
      }
    }
  }
}

} // namespace

TEST_CASE("flip equivariance with mirror-symmetric weights")
{
  ModelConfig cfg = small_config();
  cfg.upsample = UpsampleMode::Bilinear;
  cfg.iterations = 3;
  FlowModel<double> m(cfg, 9);
  make_mirror_symmetric(m);
  Rng rng(15);
  const VoxelGrid<double> a = random_grid(5, 64, 64, rng), b = random_grid(5, 64, 64, rng);
  FlowField<double> init(64, 64);
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      init.u(y, x) = 2 * std::sin(0.1 * x + 0.05 * y);
      init.v(y, x) = std::cos(0.07 * y);
    }
  }
  auto flip_grid = [](const VoxelGrid<double> &g) {
    VoxelGrid<double> out = g;
    out.data = flip_horizontal(g.data);
    return out;
  };
  const FlowField<double> init_flipped = flip_horizontal(init);
  for (const FlowField<double> *start : std::vector<const FlowField<double> *>{nullptr, &init}) {
    const auto direct = m.estimate_flow(a, b, start).back();
    const auto mirrored = m.estimate_flow(flip_grid(a), flip_grid(b), start ? &init_flipped : nullptr).back();
    const auto expected = flip_horizontal(direct);
    double worst = 0;
    for (int y = 16; y < 48; ++y) {
      for (int x = 16; x < 48; ++x) {
        worst = std::max({worst, std::abs(mirrored.u(y, x) - expected.u(y, x)),
                          std::abs(mirrored.v(y, x) - expected.v(y, x))});
      }
    }
    CHECK(worst < 1e-4);
    CHECK(direct.u.abs().maxCoeff() > 1e-3);
  }
}

TEST_CASE("checkpoint round trip")
{
  Rng rng(16);
  FlowModel<float> m(ModelConfig::desk(), 10);
  const auto dir = scratch_dir("model_ckpt");
  save_checkpoint(dir / "m.bin", m);
  const Checkpoint ck = load_checkpoint(dir / "m.bin");
  CHECK(ck.kind == "network");
  CHECK(ck.config == m.config());
  CHECK_FALSE(ck.train.has_value());
  const FlowModel<float> back = model_from_checkpoint(ck);
  for (int i = 0; i < m.parameters().size(); ++i) {
    CHECK(back.parameters()[i].name == m.parameters()[i].name);
    CHECK((back.parameters()[i].value.data == m.parameters()[i].value.data).all());
  }
  VoxelGrid<float> a, b;
  a.data = random_tensor(5, 32, 32, rng).cast<float>();
  b.data = random_tensor(5, 32, 32, rng).cast<float>();
  CHECK((m.estimate_flow(a, b).back().u == back.estimate_flow(a, b).back().u).all());

  CHECK(model_config_from_json(model_config_json(m.config())) == m.config());
  {
    std::ofstream out(dir / "bad.bin", std::ios::binary);
    out << "EVFC garbage";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.bin"), Error);
  save_oracle_checkpoint(dir / "oracle.bin", ModelConfig::desk());
  const Checkpoint oracle = load_checkpoint(dir / "oracle.bin");
  CHECK(oracle.kind == "oracle");
  CHECK_THROWS_AS(model_from_checkpoint(oracle), Error);
}

TEST_CASE("config validation")
{
  ModelConfig c = ModelConfig::desk();
  CHECK_NOTHROW(c.validate());
  c.iterations = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = ModelConfig::desk();
  c.feature_dim = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  CHECK(parse_upsample_mode("bilinear") == UpsampleMode::Bilinear);
  CHECK(to_string(UpsampleMode::Convex) == "convex");
  CHECK_THROWS_AS(parse_upsample_mode("nearest"), Error);
  const ModelConfig d;
  CHECK(d.feature_dim == 128);
  CHECK(d.iterations == 12);
  CHECK(d.pyramid_levels == 4);
  CHECK(d.lookup_radius == 4);
  CHECK(ModelConfig::desk().feature_dim == 32);
}
