#include "evflow/synthetic.hpp"

#include "evflow/error.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <tuple>

namespace evflow {

std::string to_string(Pattern p)
{
  switch (p) {
  case Pattern::Dots: return "dots";
  case Pattern::Grating: return "grating";
  case Pattern::Polygon: return "polygon";
  }
  return "dots";
}

Pattern parse_pattern(const std::string &s)
{
  if (s == "dots") { return Pattern::Dots; }
  if (s == "grating") { return Pattern::Grating; }
  if (s == "polygon") { return Pattern::Polygon; }
  throw validation_error("field 'pattern': unknown pattern '" + s + "' (expected dots, grating or polygon)");
}

void SceneSpec::validate() const
{
  auto bad = [](const std::string &field, const std::string &why) {
    throw validation_error("scene spec field '" + field + "' " + why);
  };
  if (!(duration > 0)) { bad("duration", "must be positive"); }
  if (sensor.height <= 0 || sensor.width <= 0 || sensor.height > 65535 || sensor.width > 65535) {
    bad(sensor.height <= 0 ? "height" : "width", "must lie in [1, 65535]");
  }
  if (!(threshold > 0)) { bad("threshold", "must be positive"); }
  if (!(contrast > 0)) { bad("contrast", "must be positive"); }
  if (!(background > 0)) { bad("background", "must be positive"); }
  if (!(density > 0)) { bad("density", "must be positive"); }
  if (!(period > 0)) { bad("period", "must be positive"); }
  if (polygon_sides < 3) { bad("polygon_sides", "must be >= 3"); }
  if (substeps < 1) { bad("substeps", "must be >= 1"); }
  if (!(gt_dt > 0)) { bad("gt_dt", "must be positive"); }
  if (2 * gt_dt_us() > duration_us()) { bad("gt_dt", "leaves no ground-truth frame inside the duration"); }
  const double diag = std::hypot(double(sensor.height), double(sensor.width));
  if (std::hypot(motion.vx, motion.vy) * duration > 2 * diag) { bad("vx", "moves the pattern more than twice the sensor diagonal"); }
  for (double v : {motion.vx, motion.vy, motion.omega, motion.scale_rate, angle}) {
    if (!std::isfinite(v)) { bad("motion", "must be finite"); }
  }
}

Timestamp SceneSpec::gt_dt_us() const { return Timestamp(std::llround(gt_dt * 1e6)); }
Timestamp SceneSpec::duration_us() const { return Timestamp(std::llround(duration * 1e6)); }

std::vector<Timestamp> SceneSpec::frame_starts() const
{
  std::vector<Timestamp> out;
  const Timestamp dt = gt_dt_us();
  if (dt <= 0) { return out; }
  for (Timestamp t = dt; t + dt <= duration_us(); t += dt) { out.push_back(t); }
  return out;
}

const std::vector<std::string> &scene_spec_keys()
{
  static const std::vector<std::string> keys{
    "pattern", "density", "contrast", "background", "period", "angle", "polygon_sides", "vx", "vy", "omega",
    "scale_rate", "duration", "height", "width", "threshold", "seed", "gt_dt", "substeps"};
  return keys;
}

SceneSpec SceneSpec::from_kv(const KeyValues &kv)
{
  SceneSpec s;
  s.pattern = parse_pattern(kv.get_string("pattern", to_string(s.pattern)));
  s.density = kv.get_double("density", s.density);
  s.contrast = kv.get_double("contrast", s.contrast);
  s.background = kv.get_double("background", s.background);
  s.period = kv.get_double("period", s.period);
  s.angle = kv.get_double("angle", s.angle);
  s.polygon_sides = int(kv.get_int("polygon_sides", s.polygon_sides));
  s.motion.vx = kv.get_double("vx", 0);
  s.motion.vy = kv.get_double("vy", 0);
  s.motion.omega = kv.get_double("omega", 0);
  s.motion.scale_rate = kv.get_double("scale_rate", 0);
  s.duration = kv.get_double("duration", s.duration);
  s.sensor.height = int(kv.get_int("height", s.sensor.height));
  s.sensor.width = int(kv.get_int("width", s.sensor.width));
  s.threshold = kv.get_double("threshold", s.threshold);
  s.seed = std::uint64_t(kv.get_int("seed", 0));
  s.gt_dt = kv.get_double("gt_dt", s.gt_dt);
  s.substeps = int(kv.get_int("substeps", s.substeps));
  return s;
}

KeyValues SceneSpec::to_kv() const
{
  KeyValues kv;
  auto num = [](double v) {
    std::ostringstream o;
    o.precision(17);
    o << v;
    return o.str();
  };
  kv.set("pattern", to_string(pattern));
  kv.set("density", num(density));
  kv.set("contrast", num(contrast));
  kv.set("background", num(background));
  kv.set("period", num(period));
  kv.set("angle", num(angle));
  kv.set("polygon_sides", std::to_string(polygon_sides));
  kv.set("vx", num(motion.vx));
  kv.set("vy", num(motion.vy));
  kv.set("omega", num(motion.omega));
  kv.set("scale_rate", num(motion.scale_rate));
  kv.set("duration", num(duration));
  kv.set("height", std::to_string(sensor.height));
  kv.set("width", std::to_string(sensor.width));
  kv.set("threshold", num(threshold));
  kv.set("seed", std::to_string(seed));
  kv.set("gt_dt", num(gt_dt));
  kv.set("substeps", std::to_string(substeps));
  return kv;
}

namespace {

int texture_size(const SensorSize &s)
{
  int n = 256;
  while (n < 2 * std::max(s.height, s.width)) { n *= 2; }
  return n;
}

double wrap(double v, int n)
{
  const double r = std::fmod(v, double(n));
  return r < 0 ? r + n : r;
}

} // namespace

SceneRenderer::SceneRenderer(const SceneSpec &spec) : spec_(spec)
{
  spec_.validate();
  size_ = texture_size(spec.sensor);
  const int n = size_;
  texture_.setZero(n, n);
  std::mt19937_64 rng(spec.seed);
  switch (spec.pattern) {
  case Pattern::Dots: {
    std::uniform_real_distribution<double> pos(0.0, double(n));
    std::uniform_real_distribution<double> rad(1.0, 2.5);
    const long count = std::max(1L, std::lround(spec.density * n * n));
    Eigen::ArrayXXd keep = Eigen::ArrayXXd::Ones(n, n);
    for (long i = 0; i < count; ++i) {
      const double cx = pos(rng), cy = pos(rng), sigma = rad(rng);
      const int reach = int(std::ceil(3 * sigma));
      for (int dy = -reach; dy <= reach; ++dy) {
        for (int dx = -reach; dx <= reach; ++dx) {
          const int x = int(std::floor(cx)) + dx, y = int(std::floor(cy)) + dy;
          const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
          const double g = std::exp(-d2 / (2 * sigma * sigma));
          const int wx = ((x % n) + n) % n, wy = ((y % n) + n) % n;
          keep(wy, wx) *= 1 - g;
        }
      }
    }
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) { texture_(y, x) = float(1 - keep(y, x)); }
    }
    break;
  }
  case Pattern::Grating: {
    // Snap the frequency so the grating tiles the texture.
    const double c = std::cos(spec.angle), s = std::sin(spec.angle);
    const double kx = std::round(n * c / spec.period), ky = std::round(n * s / spec.period);
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        texture_(y, x) = float(0.5 + 0.5 * std::sin(2 * M_PI * (kx * x + ky * y) / n));
      }
    }
    break;
  }
  case Pattern::Polygon: {
    const double r = 0.35 * std::min(spec.sensor.height, spec.sensor.width);
    const double c0 = n / 2.0;
    std::uniform_real_distribution<double> phase(0.0, 2 * M_PI);
    const double rot = phase(rng);
    const int k = spec.polygon_sides;
    // A point is inside when it lies left of every edge.
    auto inside = [&](double x, double y) {
      for (int i = 0; i < k; ++i) {
        const double a0 = rot + 2 * M_PI * i / k, a1 = rot + 2 * M_PI * (i + 1) / k;
        const double x0 = c0 + r * std::cos(a0), y0 = c0 + r * std::sin(a0);
        const double x1 = c0 + r * std::cos(a1), y1 = c0 + r * std::sin(a1);
        if ((x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) < 0) { return false; }
      }
      return true;
    };
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        int hits = 0;
        for (int sy = 0; sy < 4; ++sy) {
          for (int sx = 0; sx < 4; ++sx) { hits += inside(x + (sx + 0.5) / 4, y + (sy + 0.5) / 4); }
        }
        const double tex = 0.5 + 0.5 * std::sin(2 * M_PI * x / 8.0) * std::sin(2 * M_PI * y / 8.0);
        texture_(y, x) = float(hits / 16.0 * (0.3 + 0.7 * tex));
      }
    }
    break;
  }
  }
}

Eigen::Vector2d SceneRenderer::texture_coord(double t, double px, double py) const
{
  const double cx = (spec_.sensor.width - 1) / 2.0, cy = (spec_.sensor.height - 1) / 2.0;
  const auto &m = spec_.motion;
  const double th = m.omega * t, s = std::exp(m.scale_rate * t);
  const double rx = px - cx - m.vx * t, ry = py - cy - m.vy * t;
  const double c = std::cos(th), sn = std::sin(th);
  // Inverse similarity back to the reference pose; texture center sits under the sensor center.
  const double qx = (c * rx + sn * ry) / s, qy = (-sn * rx + c * ry) / s;
  return {qx + size_ / 2.0, qy + size_ / 2.0};
}

double SceneRenderer::sample(double tx, double ty) const
{
  const double x = wrap(tx, size_), y = wrap(ty, size_);
  const int x0 = std::min(int(x), size_ - 1), y0 = std::min(int(y), size_ - 1);
  const int x1 = (x0 + 1) % size_, y1 = (y0 + 1) % size_;
  const double ax = x - x0, ay = y - y0;
  return (1 - ax) * (1 - ay) * texture_(y0, x0) + ax * (1 - ay) * texture_(y0, x1) + (1 - ax) * ay * texture_(y1, x0) +
         ax * ay * texture_(y1, x1);
}

double SceneRenderer::intensity(double t, double px, double py) const
{
  const Eigen::Vector2d q = texture_coord(t, px, py);
  return spec_.background + spec_.contrast * sample(q.x(), q.y());
}

Frame SceneRenderer::intensity_frame(double t) const
{
  Frame f(spec_.sensor.height, spec_.sensor.width);
  for (int y = 0; y < f.rows(); ++y) {
    for (int x = 0; x < f.cols(); ++x) { f(y, x) = intensity(t, x, y); }
  }
  return f;
}

Frame SceneRenderer::log_frame(double t) const { return intensity_frame(t).log(); }

FlowField<double> analytic_flow(const SceneSpec &spec, double t_i, double dt)
{
  spec.validate();
  const double tol = 1e-9;
  if (dt < 0 || t_i < -tol || t_i + dt > spec.duration + tol) {
    throw validation_error("analytic_flow: interval [" + std::to_string(t_i) + ", " + std::to_string(t_i + dt) +
                           "] s outside the scene duration [0, " + std::to_string(spec.duration) + "]");
  }
  const int h = spec.sensor.height, w = spec.sensor.width;
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  const auto &m = spec.motion;
  const double th = m.omega * dt, k = std::exp(m.scale_rate * dt);
  const double c = std::cos(th), sn = std::sin(th);
  FlowField<double> flow(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double rx = x - cx - m.vx * t_i, ry = y - cy - m.vy * t_i;
      const double xp = cx + k * (c * rx - sn * ry) + m.vx * (t_i + dt);
      const double yp = cy + k * (sn * rx + c * ry) + m.vy * (t_i + dt);
      flow.u(y, x) = xp - x;
      flow.v(y, x) = yp - y;
      flow.valid(y, x) = xp >= 0 && xp <= w - 1 && yp >= 0 && yp <= h - 1;
    }
  }
  return flow;
}

EventSequence generate_events(const SceneSpec &spec)
{
  const SceneRenderer renderer(spec);
  const int h = spec.sensor.height, w = spec.sensor.width;
  const double step = spec.gt_dt / spec.substeps;
  const long steps = std::max(1L, long(std::ceil(spec.duration / step - 1e-9)));
  EventSequence seq;
  seq.sensor = spec.sensor;
  seq.t_start = 0;
  seq.t_end = spec.duration_us();
  Frame ref = renderer.log_frame(0.0);
  Frame prev = ref;
  const double th = spec.threshold;
  const Timestamp t_end = seq.t_end;
  for (long k = 1; k <= steps; ++k) {
    const double t0 = (k - 1) * step, t1 = std::min(spec.duration, k * step);
    const Frame cur = renderer.log_frame(t1);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double a = prev(y, x), b = cur(y, x);
        double &r = ref(y, x);
        while (b - r >= th || r - b >= th) {
          const int p = b > r ? 1 : -1;
          const double level = r + p * th;
          const double frac = std::clamp((level - a) / (b - a), 0.0, 1.0);
          const Timestamp t = std::min(t_end, Timestamp(std::llround((t0 + frac * (t1 - t0)) * 1e6)));
          seq.events.push_back({std::uint16_t(x), std::uint16_t(y), t, std::int8_t(p)});
          r = level;
        }
      }
    }
    prev = cur;
  }
  std::stable_sort(seq.events.begin(), seq.events.end(), [](const Event &l, const Event &r) { return l.t < r.t; });
  return seq;
}

namespace {

void rodrigues(const double axis[3], double angle, double R[3][3])
{
  const double n = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
  const double k[3] = {axis[0] / n, axis[1] / n, axis[2] / n};
  const double c = std::cos(angle), s = std::sin(angle), v = 1 - c;
  R[0][0] = c + k[0] * k[0] * v;
  R[0][1] = k[0] * k[1] * v - k[2] * s;
  R[0][2] = k[0] * k[2] * v + k[1] * s;
  R[1][0] = k[1] * k[0] * v + k[2] * s;
  R[1][1] = c + k[1] * k[1] * v;
  R[1][2] = k[1] * k[2] * v - k[0] * s;
  R[2][0] = k[2] * k[0] * v - k[1] * s;
  R[2][1] = k[2] * k[1] * v + k[0] * s;
  R[2][2] = c + k[2] * k[2] * v;
}

RigidTransform to_transform(const double R[3][3], const double t[3])
{
  RigidTransform T;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) { T.rotation(i, j) = R[i][j]; }
    T.translation[i] = t[i];
  }
  return T;
}

} // namespace

FlowField<double> reprojection_flow(const DisparityMap &disp, const CameraModel &cam, const double R[3][3],
                                    const double t[3])
{
  FlowField<double> flow(disp.height(), disp.width());
  for (int y = 0; y < disp.height(); ++y) {
    for (int x = 0; x < disp.width(); ++x) {
      const double d = disp.d(y, x);
      if (!disp.valid(y, x) || !(d > 0)) {
        flow.valid(y, x) = false;
        continue;
      }
      const double z = cam.fx * cam.baseline / d;
      const double P[3] = {(x - cam.cx) * z / cam.fx, (y - cam.cy) * z / cam.fy, z};
      double Q[3];
      for (int i = 0; i < 3; ++i) { Q[i] = R[i][0] * P[0] + R[i][1] * P[1] + R[i][2] * P[2] + t[i]; }
      if (z < kMinDepth || Q[2] < kMinDepth) {
        flow.valid(y, x) = false;
        continue;
      }
      const double xp = cam.fx * Q[0] / Q[2] + cam.cx;
      const double yp = cam.fy * Q[1] / Q[2] + cam.cy;
      if (!(xp >= 0 && xp <= cam.width - 1 && yp >= 0 && yp <= cam.height - 1)) {
        flow.valid(y, x) = false;
        continue;
      }
      flow.u(y, x) = xp - x;
      flow.v(y, x) = yp - y;
    }
  }
  return flow;
}

GeometryFixture generate_geometry_fixture(std::uint64_t seed, const GeometryFixtureOptions &o)
{
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  GeometryFixture fx;
  fx.camera.height = o.height;
  fx.camera.width = o.width;
  fx.camera.fx = fx.camera.fy = 0.9 * o.width;
  fx.camera.cx = (o.width - 1) / 2.0 + 0.5 * uni(rng);
  fx.camera.cy = (o.height - 1) / 2.0 + 0.5 * uni(rng);
  fx.camera.baseline = 0.5;
  fx.dt = o.dt;
  fx.t_i = 2 * o.dt + 1000;

  // Smooth depth surface from a few low-frequency sinusoids.
  DisparityMap::Plane d(o.height, o.width);
  double amp[3], fxq[3], fyq[3], ph[3];
  for (int i = 0; i < 3; ++i) {
    amp[i] = 1.0 + uni(rng);
    fxq[i] = (1.5 + uni(rng)) * 2 * M_PI / o.width;
    fyq[i] = (1.5 + uni(rng)) * 2 * M_PI / o.height;
    ph[i] = M_PI * uni(rng);
  }
  for (int y = 0; y < o.height; ++y) {
    for (int x = 0; x < o.width; ++x) {
      double z = o.depth;
      if (!o.constant_depth) {
        for (int i = 0; i < 3; ++i) { z += amp[i] * std::sin(fxq[i] * x + fyq[i] * y + ph[i]); }
      }
      d(y, x) = fx.camera.fx * fx.camera.baseline / z;
    }
  }
  fx.disparity = DisparityMap(std::move(d));

  // Camera motion over one interval, expressed as the point transform frame_{i+1} <- frame_i.
  double R[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  double t[3] = {0, 0, 0};
  if (o.axis_translation) {
    for (int i = 0; i < 3; ++i) { t[i] = o.translation[i]; }
  } else if (!o.zero_motion) {
    const double axis[3] = {uni(rng), uni(rng), uni(rng)};
    rodrigues(axis, o.max_rotation_deg * M_PI / 180 * uni(rng), R);
    for (double &ti : t) { ti = o.max_translation * uni(rng); }
  }
  const RigidTransform step = to_transform(R, t);

  // world <- camera(t_i + k dt) = P0 * step^-k, so relative(t_i, t_i + dt) = step.
  const Eigen::Vector3d axis0(uni(rng), uni(rng), uni(rng));
  RigidTransform P0;
  P0.rotation = Eigen::AngleAxisd(0.3 * uni(rng), axis0.normalized()).toRotationMatrix();
  P0.translation = {uni(rng), uni(rng), uni(rng)};
  const RigidTransform inv = step.inverse();
  std::vector<Pose> poses;
  for (int k = -2; k <= 2; ++k) {
    RigidTransform T = P0;
    for (int j = 0; j < std::abs(k); ++j) { T = T * (k > 0 ? inv : step); }
    poses.push_back({fx.t_i + k * o.dt, T});
  }
  fx.trajectory = PoseTrajectory(std::move(poses));

  fx.forward = reprojection_flow(fx.disparity, fx.camera, R, t);
  // Backward: inverse of the step, R^T and -R^T t.
  double Rb[3][3], tb[3];
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) { Rb[i][j] = R[j][i]; }
  }
  for (int i = 0; i < 3; ++i) { tb[i] = -(Rb[i][0] * t[0] + Rb[i][1] * t[1] + Rb[i][2] * t[2]); }
  fx.backward = reprojection_flow(fx.disparity, fx.camera, Rb, tb);
  return fx;
}

} // namespace evflow
