#pragma once

// Shared fixtures and brute-force reference implementations for the tests.

#include "evflow/commands.hpp"
#include "evflow/dataset.hpp"
#include "evflow/events.hpp"
#include "evflow/flow.hpp"
#include "evflow/synthetic.hpp"
#include "evflow/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace testing {

using namespace evflow;
using Rng = std::mt19937_64;

inline double uniform(Rng &rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
inline int uniform_int(Rng &rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

inline FlowField<double> random_flow(int h, int w, double lo, double hi, Rng &rng)
{
  FlowField<double> f(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      f.u(y, x) = uniform(rng, lo, hi);
      f.v(y, x) = uniform(rng, lo, hi);
    }
  }
  return f;
}

// Average splatting by visiting every (source, target) pair.
struct SplatReference
{
  Eigen::ArrayXXd u, v, den;
  Eigen::ArrayXXd umin, umax, vmin, vmax; // range of the contributing components
};

inline SplatReference splat_reference(const FlowField<double> &f)
{
  const int h = f.height(), w = f.width();
  SplatReference r;
  r.u = r.v = r.den = Eigen::ArrayXXd::Zero(h, w);
  r.umin = r.vmin = Eigen::ArrayXXd::Constant(h, w, 1e300);
  r.umax = r.vmax = Eigen::ArrayXXd::Constant(h, w, -1e300);
  for (int sy = 0; sy < h; ++sy) {
    for (int sx = 0; sx < w; ++sx) {
      if (!f.valid(sy, sx)) { continue; }
      const double gx = sx + f.u(sy, sx), gy = sy + f.v(sy, sx);
      for (int ty = 0; ty < h; ++ty) {
        for (int tx = 0; tx < w; ++tx) {
          const double k = std::max(0.0, 1 - std::abs(tx - gx)) * std::max(0.0, 1 - std::abs(ty - gy));
          if (k <= 0) { continue; }
          r.u(ty, tx) += k * f.u(sy, sx);
          r.v(ty, tx) += k * f.v(sy, sx);
          r.den(ty, tx) += k;
          r.umin(ty, tx) = std::min(r.umin(ty, tx), f.u(sy, sx));
          r.umax(ty, tx) = std::max(r.umax(ty, tx), f.u(sy, sx));
          r.vmin(ty, tx) = std::min(r.vmin(ty, tx), f.v(sy, sx));
          r.vmax(ty, tx) = std::max(r.vmax(ty, tx), f.v(sy, sx));
        }
      }
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (r.den(y, x) > 1e-6) {
        r.u(y, x) /= r.den(y, x);
        r.v(y, x) /= r.den(y, x);
      } else {
        r.u(y, x) = r.v(y, x) = 0;
      }
    }
  }
  return r;
}

// p * (1 - |tau - b|) into every bin within distance 1.
inline Tensor<double> voxel_reference(const EventSequence &seq, int bins)
{
  Tensor<double> g(bins, seq.sensor.height, seq.sensor.width);
  const double span = double(seq.t_end - seq.t_start);
  for (const Event &e : seq.events) {
    const double tau = span > 0 ? double(e.t - seq.t_start) / span * (bins - 1) : 0.0;
    for (int b = 0; b < bins; ++b) {
      const double wgt = 1 - std::abs(tau - b);
      if (wgt > 0) { g(b, e.y, e.x) += e.p * wgt; }
    }
  }
  return g;
}

inline EventSequence random_events(Rng &rng, int count, SensorSize sensor, Timestamp t0, Timestamp t1)
{
  EventSequence s;
  s.sensor = sensor;
  s.t_start = t0;
  s.t_end = t1;
  for (int i = 0; i < count; ++i) {
    Event e;
    e.x = std::uint16_t(uniform_int(rng, 0, sensor.width - 1));
    e.y = std::uint16_t(uniform_int(rng, 0, sensor.height - 1));
    e.t = std::uniform_int_distribution<Timestamp>(t0, t1)(rng);
    e.p = uniform(rng, 0, 1) < 0.5 ? -1 : 1;
    s.events.push_back(e);
  }
  std::stable_sort(s.events.begin(), s.events.end(), [](const Event &a, const Event &b) { return a.t < b.t; });
  return s;
}

inline SceneSpec translating_scene(double vx, double vy, int size = 64, std::uint64_t seed = 1)
{
  SceneSpec s;
  s.pattern = Pattern::Dots;
  s.density = 0.04;
  s.motion.vx = vx;
  s.motion.vy = vy;
  s.sensor = {size, size};
  s.duration = 0.5;
  s.gt_dt = 0.1;
  s.seed = seed;
  return s;
}

template <typename Scalar>
TrainSample<double> to_double(const TrainSample<Scalar> &s)
{
  TrainSample<double> out;
  for (const auto &g : s.grids) {
    VoxelGrid<double> d;
    d.data = g.data.template cast<double>();
    d.bins = g.bins;
    d.t_start = g.t_start;
    d.t_end = g.t_end;
    out.grids.push_back(std::move(d));
  }
  for (const auto &f : s.gts) { out.gts.push_back(f.template cast<double>()); }
  return out;
}

// Small-sensor sample of `seq_len` frames from a translating scene.
inline TrainSample<float> scene_sample(const SceneSpec &spec, int seq_len, int bins = 5)
{
  const SequenceData seq = synthesize_sequence(spec, "fixture");
  const GridCache cache(seq, VoxelOptions{bins, false});
  return make_sample(seq, cache, 0, seq_len);
}

inline std::filesystem::path scratch_dir(const std::string &name)
{
  const auto dir = std::filesystem::temp_directory_path() / ("evflow_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

} // namespace testing
