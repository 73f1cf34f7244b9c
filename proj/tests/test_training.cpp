#include "doctest.h"

#include "support.hpp"

#include "evflow/checkpoint.hpp"
#include "evflow/evaluation.hpp"
#include "evflow/trainer.hpp"

using namespace testing;

namespace {

// Literal nest: timesteps, iterations, pixels.
double loss_reference(const std::vector<std::vector<FlowField<double>>> &preds, const std::vector<FlowField<double>> &gts,
                      double gamma)
{
  double total = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int nk = int(preds[i].size());
    for (int k = 1; k <= nk; ++k) {
      const auto &p = preds[i][std::size_t(k - 1)];
      double sum = 0;
      long n = 0;
      for (int y = 0; y < gts[i].height(); ++y) {
        for (int x = 0; x < gts[i].width(); ++x) {
          if (!gts[i].valid(y, x)) { continue; }
          sum += std::abs(p.u(y, x) - gts[i].u(y, x)) + std::abs(p.v(y, x) - gts[i].v(y, x));
          ++n;
        }
      }
      if (n > 0) { total += std::pow(gamma, nk - k) * sum / double(n); }
    }
  }
  return total;
}

double mean_l1(const FlowField<double> &p, const FlowField<double> &g)
{
  return ((p.u - g.u).abs() + (p.v - g.v).abs()).sum() / double(g.height() * g.width());
}

ModelConfig tiny_model()
{
  ModelConfig c = ModelConfig::desk();
  c.iterations = 2;
  return c;
}

TrainConfig bptt_config(bool warm)
{
  TrainConfig cfg;
  cfg.seq_len = 2;
  cfg.iters = 2;
  cfg.crop_height = cfg.crop_width = 0;
  cfg.warmstart_in_training = warm;
  return cfg;
}

double graph_loss(const FlowModel<double> &m, const TrainSample<double> &s, const TrainConfig &cfg,
                  const Tensor<double> *perturb, std::vector<std::vector<Tensor<double>>> *preds = nullptr)
{
  Graph<double> g(false);
  const auto sg = build_sequence_graph(g, m, s, cfg, perturb);
  if (preds) {
    preds->clear();
    for (const auto &t : sg.predictions) {
      preds->emplace_back();
      for (const auto &p : t) { preds->back().push_back(p.value()); }
    }
  }
  return sg.loss.value().data[0];
}

} // namespace

TEST_CASE("loss matches the loop-nest reference")
{
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::vector<FlowField<double>>> preds(2);
    std::vector<FlowField<double>> gts;
    for (int i = 0; i < 2; ++i) {
      FlowField<double> gt = random_flow(5, 5, -3, 3, rng);
      for (int y = 0; y < 5; ++y) {
        for (int x = 0; x < 5; ++x) { gt.valid(y, x) = uniform(rng, 0, 1) < 0.7; }
      }
      gts.push_back(gt);
      for (int k = 0; k < 3; ++k) { preds[std::size_t(i)].push_back(random_flow(5, 5, -3, 3, rng)); }
    }
    const auto r = sequence_loss(preds, gts, 0.8);
    CHECK(std::abs(r.value - loss_reference(preds, gts, 0.8)) < 1e-6);
    CHECK(r.empty_timesteps == 0);
  }
}

TEST_CASE("two iterations weigh 0.8 and 1")
{
  Rng rng(2);
  const FlowField<double> gt = random_flow(6, 6, -2, 2, rng);
  const FlowField<double> p1 = random_flow(6, 6, -2, 2, rng), p2 = random_flow(6, 6, -2, 2, rng);
  const double a = mean_l1(p1, gt), b = mean_l1(p2, gt);
  const auto r = sequence_loss<double>({{p1, p2}}, {gt}, 0.8);
  CHECK(r.value == doctest::Approx(0.8 * a + b).epsilon(1e-12));
  CHECK(TrainConfig{}.gamma == 0.8);
}

TEST_CASE("perfect predictions cost nothing")
{
  Rng rng(3);
  const FlowField<double> gt = random_flow(7, 9, -4, 4, rng);
  CHECK(sequence_loss<double>({{gt, gt, gt}}, {gt}, 0.8).value == 0.0);
  // Residuals only on invalid pixels do not count.
  FlowField<double> masked = gt, off = gt;
  masked.valid(2, 3) = false;
  off.u(2, 3) += 10;
  CHECK(sequence_loss<double>({{off}}, {masked}, 0.8).value == 0.0);
  CHECK(sequence_loss<double>({{off}}, {gt}, 0.8).value > 0.0);
}

TEST_CASE("empty ground truth contributes zero and is counted")
{
  Rng rng(4);
  FlowField<double> empty = random_flow(4, 4, -1, 1, rng);
  empty.valid.setConstant(false);
  const FlowField<double> full = random_flow(4, 4, -1, 1, rng);
  const FlowField<double> p = random_flow(4, 4, -1, 1, rng);
  const auto r = sequence_loss<double>({{p}, {p}}, {empty, full}, 0.8);
  CHECK(r.empty_timesteps == 1);
  CHECK(r.value == doctest::Approx(mean_l1(p, full)).epsilon(1e-12));
}

TEST_CASE("loss is non-negative and non-decreasing in gamma")
{
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const int nk = uniform_int(rng, 1, 6);
    std::vector<std::vector<FlowField<double>>> preds(1);
    const FlowField<double> gt = random_flow(4, 5, -2, 2, rng);
    for (int k = 0; k < nk; ++k) { preds[0].push_back(random_flow(4, 5, -2, 2, rng)); }
    double last = -1;
    for (double gamma : {0.05, 0.3, 0.5, 0.8, 0.95, 1.0}) {
      const double v = sequence_loss(preds, {gt}, gamma).value;
      CHECK(v >= 0);
      CHECK(v >= last - 1e-12);
      last = v;
    }
  }
}

TEST_CASE("gamma and other settings are validated")
{
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.gamma = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.gamma = 1.2;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = TrainConfig{};
  cfg.seq_len = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = TrainConfig{};
  cfg.hflip_prob = 2;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("samples must abut")
{
  TrainSample<double> s = to_double(scene_sample(translating_scene(10, 0, 32), 2));
  CHECK(s.timesteps() == 2);
  CHECK_NOTHROW(s.validate());
  s.grids[2].t_start += 1;
  CHECK_THROWS_AS(s.validate(), Error);
  s = to_double(scene_sample(translating_scene(10, 0, 32), 2));
  s.gts.pop_back();
  CHECK_THROWS_AS(s.validate(), Error);
}

TEST_CASE("cold timesteps are severed")
{
  const FlowModel<double> m(tiny_model(), 3);
  const TrainSample<double> s = to_double(scene_sample(translating_scene(12, 6, 32), 2));
  const TrainConfig cfg = bptt_config(false);
  const auto r = train_sequence_step(m, s, cfg);
  REQUIRE(r.cross_gradients.size() == 1);
  CHECK((r.cross_gradients[0].data == 0).all());

  Rng rng(6);
  Tensor<double> bump(r.cross_gradients[0].channels, r.cross_gradients[0].height, r.cross_gradients[0].width);
  for (Eigen::Index i = 0; i < bump.size(); ++i) { bump.data[i] = uniform(rng, -0.5, 0.5); }
  CHECK(graph_loss(m, s, cfg, &bump) == graph_loss(m, s, cfg, nullptr));
  CHECK(r.loss == doctest::Approx(graph_loss(m, s, cfg, nullptr)).epsilon(1e-12));
}

TEST_CASE("warm-started timesteps are connected")
{
  const FlowModel<double> m(tiny_model(), 3);
  const TrainSample<double> s = to_double(scene_sample(translating_scene(12, 6, 32), 2));
  for (bool full : {false, true}) {
    TrainConfig cfg = bptt_config(true);
    cfg.warm_full_resolution = full;
    const auto r = train_sequence_step(m, s, cfg);
    REQUIRE(r.cross_gradients.size() == 1);
    const Tensor<double> &cg = r.cross_gradients[0];
    CHECK(cg.data.abs().maxCoeff() > 0);

    // Perturbing timestep 0's handoff changes timestep 1's first prediction.
    Tensor<double> bump(cg.channels, cg.height, cg.width);
    bump.data.setConstant(0.25);
    std::vector<std::vector<Tensor<double>>> base, moved;
    graph_loss(m, s, cfg, nullptr, &base);
    graph_loss(m, s, cfg, &bump, &moved);
    CHECK((base[0][1].data == moved[0][1].data).all());
    CHECK((base[1][0].data - moved[1][0].data).abs().maxCoeff() > 1e-6);

    // Central differences along single handoff entries.
    int compared = 0;
    for (Eigen::Index i = 0; i < cg.size() && compared < 6; i += std::max<Eigen::Index>(1, cg.size() / 7)) {
      const double h = 1e-6;
      Tensor<double> e(cg.channels, cg.height, cg.width);
      e.data[i] = h;
      const double up = graph_loss(m, s, cfg, &e);
      e.data[i] = -h;
      const double down = graph_loss(m, s, cfg, &e);
      const double fd = (up - down) / (2 * h);
      CHECK_MESSAGE(std::abs(fd - cg.data[i]) < 1e-4 * std::max(1.0, std::abs(fd)),
                    "entry " << i << " analytic " << cg.data[i] << " numeric " << fd);
      ++compared;
    }
    CHECK(compared >= 5);
  }
}

TEST_CASE("one sample can be overfit")
{
  const TrainSample<float> s = scene_sample(translating_scene(15, 5, 32, 7), 2);
  ModelConfig mc = ModelConfig::desk();
  mc.iterations = 4;
  FlowModel<float> m(mc, 11);
  TrainConfig cfg;
  cfg.seq_len = 2;
  cfg.iters = 4;
  cfg.crop_height = cfg.crop_width = 0;
  cfg.warmstart_in_training = true;
  Adam<float> adam(m.parameters());
  double initial = -1, last = 0;
  int reached = -1;
  for (int step = 0; step < 500; ++step) {
    auto r = train_sequence_step(m, s, cfg);
    if (initial < 0) { initial = r.loss; }
    last = r.loss;
    if (reached < 0 && last < 0.1 * initial) { reached = step; }
    clip_gradients(r.grads, 1.0f);
    adam.step(m.parameters(), r.grads, 1e-3);
  }
  MESSAGE("overfit: loss " << initial << " -> " << last << ", below 10% at step " << reached);
  CHECK(reached >= 0);
  CHECK(last < 0.1 * initial);
  Graph<float> g(false);
  const auto sg = build_sequence_graph(g, m, s, cfg);
  for (int i = 0; i < 2; ++i) {
    REQUIRE(sg.predictions[std::size_t(i)].size() == 4);
    FlowField<float> pred(32, 32);
    const auto &t = sg.predictions[std::size_t(i)].back().value();
    for (int y = 0; y < 32; ++y) {
      for (int x = 0; x < 32; ++x) {
        pred.u(y, x) = t(0, y, x);
        pred.v(y, x) = t(1, y, x);
      }
    }
    const double e = epe(pred, s.gts[std::size_t(i)]);
    MESSAGE("timestep " << i << " final-iteration EPE " << e);
    CHECK(e < 0.5);
  }
}

TEST_CASE("flip is an involution with mirrored flow")
{
  TrainSample<double> s;
  VoxelGrid<double> g;
  g.data = Tensor<double>(3, 4, 6);
  Rng rng(7);
  for (Eigen::Index i = 0; i < g.data.size(); ++i) { g.data.data[i] = uniform(rng, -1, 1); }
  s.grids = {g, g};
  s.grids[1].t_start = s.grids[0].t_end;
  FlowField<double> gt(4, 6);
  gt.u(1, 2) = 3;
  gt.v(1, 2) = 2;
  gt.valid(0, 0) = false;
  s.gts = {gt};
  const auto f = flip_sample(s);
  CHECK(f.gts[0].u(1, 6 - 1 - 2) == -3);
  CHECK(f.gts[0].v(1, 6 - 1 - 2) == 2);
  CHECK_FALSE(f.gts[0].valid(0, 5));
  CHECK(f.grids[0].data(2, 3, 5) == g.data(2, 3, 0));
  const auto ff = flip_sample(f);
  CHECK((ff.grids[0].data.data == s.grids[0].data.data).all());
  CHECK((ff.gts[0].u == gt.u).all());
  CHECK((ff.gts[0].v == gt.v).all());
  CHECK((ff.gts[0].valid == gt.valid).all());
}

TEST_CASE("crop to the training window")
{
  TrainSample<float> s;
  VoxelGrid<float> g;
  g.data = Tensor<float>(2, 480, 640);
  s.grids = {g, g, g};
  s.gts = {FlowField<float>(480, 640), FlowField<float>(480, 640)};
  TrainConfig cfg;
  CHECK(cfg.crop_height == 288);
  CHECK(cfg.crop_width == 384);
  Rng rng(8);
  const auto out = augment(s, cfg, rng);
  for (const auto &grid : out.grids) {
    CHECK(grid.data.height == 288);
    CHECK(grid.data.width == 384);
  }
  for (const auto &gt : out.gts) {
    CHECK(gt.height() == 288);
    CHECK(gt.width() == 384);
  }
  cfg.crop_height = 500;
  CHECK_THROWS_AS(augment(s, cfg, rng), Error);
}

TEST_CASE("augmentation keeps grids and flow aligned")
{
  Rng rng(9);
  TrainSample<double> s;
  VoxelGrid<double> g;
  g.data = Tensor<double>(1, 20, 30);
  s.grids = {g, g};
  FlowField<double> gt(20, 30), pred(20, 30);
  for (int y = 0; y < 20; ++y) {
    for (int x = 0; x < 30; ++x) {
      s.grids[0].data(0, y, x) = 1000 * y + x;
      gt.u(y, x) = x;
      gt.v(y, x) = y;
      gt.valid(y, x) = (x + y) % 5 != 0;
      pred.u(y, x) = uniform(rng, -3, 3);
      pred.v(y, x) = uniform(rng, -3, 3);
    }
  }
  s.gts = {gt};
  TrainConfig cfg;
  cfg.crop_height = 11;
  cfg.crop_width = 13;
  for (int trial = 0; trial < 20; ++trial) {
    const auto out = augment(s, cfg, rng);
    const auto &og = out.grids[0].data;
    const auto &of = out.gts[0];
    const int y0 = int(og(0, 0, 0)) / 1000;
    const bool flipped = of.u(0, 0) < 0 || (of.u(0, 0) == 0 && of.width() > 1 && of.u(0, 1) < 0);
    for (int y = 0; y < 11; ++y) {
      for (int x = 0; x < 13; ++x) {
        const int sy = int(og(0, y, x)) / 1000, sx = int(og(0, y, x)) % 1000;
        CHECK(sy == y0 + y);
        CHECK(of.v(y, x) == sy);
        CHECK(of.u(y, x) == (flipped ? -sx : sx));
        CHECK(of.valid(y, x) == gt.valid(sy, sx));
      }
    }
  }
  // EPE is unchanged by flipping both prediction and ground truth.
  CHECK(epe(flip_horizontal(pred), flip_horizontal(gt)) == doctest::Approx(epe(pred, gt)).epsilon(1e-12));
  const auto cp = crop(pred, 3, 4, 11, 13), cg = crop(gt, 3, 4, 11, 13);
  double sum = 0;
  long n = 0;
  for (int y = 3; y < 14; ++y) {
    for (int x = 4; x < 17; ++x) {
      if (!gt.valid(y, x)) { continue; }
      sum += std::hypot(pred.u(y, x) - gt.u(y, x), pred.v(y, x) - gt.v(y, x));
      ++n;
    }
  }
  CHECK(epe(cp, cg) == doctest::Approx(sum / double(n)).epsilon(1e-12));
}

TEST_CASE("dsec schedule")
{
  const auto p = schedule("dsec");
  REQUIRE(p.size() == 3);
  CHECK(p[0].lr == 1e-4);
  CHECK(p[0].epochs == 40);
  CHECK(p[0].seq_len == 1);
  CHECK_FALSE(p[0].warm_start);
  CHECK_FALSE(p[0].full_resolution);
  CHECK(p[1].lr == 1e-4);
  CHECK(p[1].seq_len == 3);
  CHECK(p[1].epochs == 6);
  CHECK(p[1].warm_start);
  CHECK(p[2].lr == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(p[2].warm_start);
  CHECK(p[2].full_resolution);
}

TEST_CASE("mvsec schedule")
{
  const auto p = schedule("mvsec");
  REQUIRE(p.size() == 2);
  CHECK(p[0].seq_len == 2);
  CHECK(p[0].epochs == 10);
  CHECK(p[1].seq_len == 5);
  CHECK(p[0].warm_start);
  CHECK(p[1].warm_start);
  CHECK(p[0].lr == 1e-4);
  CHECK_THROWS_AS(schedule("kitti"), Error);
}

TEST_CASE("scaled schedules")
{
  for (const std::string preset : {"dsec", "mvsec"}) {
    const auto full = schedule(preset);
    for (double scale : {0.01, 0.1, 0.25, 2.0}) {
      const auto p = schedule(preset, scale);
      REQUIRE(p.size() == full.size());
      for (std::size_t i = 0; i < p.size(); ++i) {
        CHECK(p[i].epochs == std::max(1, int(std::lround(scale * full[i].epochs))));
        CHECK(p[i].seq_len == full[i].seq_len);
      }
    }
  }
  for (const auto &ph : schedule("dsec", 0.01)) { CHECK(ph.epochs == 1); }
  CHECK(schedule("dsec", 1.0, 3e-4)[2].lr == doctest::Approx(3e-5));
  CHECK_THROWS_AS(schedule("dsec", 0.0), Error);
}

TEST_CASE("gradient clipping")
{
  Gradients<double> g(2);
  g[0] = Tensor<double>(1, 1, 2);
  g[1] = Tensor<double>(1, 1, 1);
  g[0].data << 3, 0;
  g[1].data << 4;
  CHECK(clip_gradients(g, 1.0) == doctest::Approx(5.0));
  CHECK(g[0].data[0] == doctest::Approx(0.6));
  CHECK(g[1].data[0] == doctest::Approx(0.8));
  CHECK(clip_gradients(g, 1.0) == doctest::Approx(1.0));
  g[0].data << 0.1, 0;
  g[1].data << 0;
  clip_gradients(g, 1.0);
  CHECK(g[0].data[0] == 0.1);
}

TEST_CASE("adam follows the bias-corrected update")
{
  ParameterSet<double> ps;
  Tensor<double> init(1, 1, 3);
  init.data << 1.0, -2.0, 0.5;
  ps.add("w", {3}, init);
  Adam<double> adam(ps);
  Rng rng(10);
  std::vector<double> w{1.0, -2.0, 0.5}, m(3, 0), v(3, 0);
  for (int t = 1; t <= 25; ++t) {
    Gradients<double> g{Tensor<double>(1, 1, 3)};
    for (int i = 0; i < 3; ++i) { g[0].data[i] = uniform(rng, -2, 2); }
    adam.step(ps, g, 1e-2);
    for (int i = 0; i < 3; ++i) {
      m[std::size_t(i)] = 0.9 * m[std::size_t(i)] + 0.1 * g[0].data[i];
      v[std::size_t(i)] = 0.999 * v[std::size_t(i)] + 0.001 * g[0].data[i] * g[0].data[i];
      const double mh = m[std::size_t(i)] / (1 - std::pow(0.9, t)), vh = v[std::size_t(i)] / (1 - std::pow(0.999, t));
      w[std::size_t(i)] -= 1e-2 * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  CHECK(adam.steps() == 25);
  for (int i = 0; i < 3; ++i) { CHECK(std::abs(ps[0].value.data[i] - w[std::size_t(i)]) < 1e-9); }
}

TEST_CASE("epoch order is a seeded permutation")
{
  const auto a = epoch_order(50, 7, 0, 0);
  CHECK(a == epoch_order(50, 7, 0, 0));
  CHECK(a != epoch_order(50, 7, 0, 1));
  CHECK(a != epoch_order(50, 7, 1, 0));
  CHECK(a != epoch_order(50, 8, 0, 0));
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 50; ++i) { CHECK(sorted[i] == i); }
}

TEST_CASE("resumed training continues the same run")
{
  std::vector<SequenceData> split;
  for (int i = 0; i < 2; ++i) {
    split.push_back(synthesize_sequence(translating_scene(20 - 5 * i, 10, 40, std::uint64_t(40 + i)), "s" + std::to_string(i)));
  }
  ModelConfig mc = ModelConfig::desk();
  mc.iterations = 2;
  RunOptions opt;
  opt.train.iters = 2;
  opt.train.crop_height = 32;
  opt.train.crop_width = 32;
  opt.train.seed = 5;
  opt.phases = {{"cold", 2e-4, 1, false, 2, false}, {"warm", 1e-4, 2, true, 1, false}};

  std::vector<double> straight;
  FlowModel<float> a(mc, 1);
  {
    RunOptions o = opt;
    o.on_step = [&](const StepLog &l) { straight.push_back(l.loss); };
    Trainer(a, split, o).run();
  }
  REQUIRE(straight.size() > 8);

  const auto dir = scratch_dir("resume");
  std::vector<double> resumed;
  FlowModel<float> b(mc, 1);
  {
    RunOptions o = opt;
    o.out_dir = dir;
    o.max_steps = 7;
    o.on_step = [&](const StepLog &l) { resumed.push_back(l.loss); };
    const auto st = Trainer(b, split, o).run();
    CHECK(st.step == 7);
  }
  CHECK(std::filesystem::exists(dir / "metrics.csv"));
  const Checkpoint ck = load_checkpoint(dir / "checkpoint.bin");
  REQUIRE(ck.train.has_value());
  CHECK(ck.train->step == 7);
  CHECK(ck.train->sensor_height == 40);
  FlowModel<float> c = model_from_checkpoint(ck);
  {
    RunOptions o = opt;
    o.on_step = [&](const StepLog &l) {
      CHECK(l.step == long(resumed.size()) + 1);
      resumed.push_back(l.loss);
    };
    Trainer t(c, split, o);
    t.resume(*ck.train);
    t.run();
  }
  REQUIRE(resumed.size() == straight.size());
  for (std::size_t i = 0; i < straight.size(); ++i) {
    CHECK(std::abs(resumed[i] - straight[i]) <= 0.1 * straight[i]);
  }
  CHECK(resumed.back() == doctest::Approx(straight.back()).epsilon(1e-5));
  for (int p = 0; p < a.parameters().size(); ++p) {
    CHECK((a.parameters()[p].value.data - c.parameters()[p].value.data).abs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("phase checkpoints and linear decay")
{
  std::vector<SequenceData> split{synthesize_sequence(translating_scene(10, 0, 32, 3), "only")};
  ModelConfig mc = ModelConfig::desk();
  mc.iterations = 1;
  RunOptions opt;
  opt.train.iters = 1;
  opt.train.crop_height = opt.train.crop_width = 0;
  opt.phases = {{"cold", 1e-4, 1, false, 2, false}};
  opt.linear_decay = true;
  const auto dir = scratch_dir("phases");
  opt.out_dir = dir;
  std::vector<double> rates;
  opt.on_step = [&](const StepLog &l) { rates.push_back(l.lr); };
  FlowModel<float> m(mc, 2);
  Trainer(m, split, opt).run();
  CHECK(std::filesystem::exists(dir / "checkpoint_cold.bin"));
  REQUIRE(rates.size() >= 4);
  CHECK(rates.front() == doctest::Approx(1e-4));
  for (std::size_t i = 1; i < rates.size(); ++i) { CHECK(rates[i] < rates[i - 1]); }
  CHECK(rates.back() > 0);
}
