#include "doctest.h"

#include "support.hpp"

#include "evflow/geometry.hpp"
#include "evflow/synthetic.hpp"

#include <map>

using namespace testing;

namespace {

double max_gap(const FlowField<double> &a, const FlowField<double> &b)
{
  double worst = 0;
  for (int y = 0; y < a.height(); ++y) {
    for (int x = 0; x < a.width(); ++x) {
      if (a.valid(y, x) != b.valid(y, x)) { return std::numeric_limits<double>::infinity(); }
      if (a.valid(y, x)) { worst = std::max({worst, std::abs(a.u(y, x) - b.u(y, x)), std::abs(a.v(y, x) - b.v(y, x))}); }
    }
  }
  return worst;
}

double bilinear(const Frame &f, double x, double y)
{
  const int x0 = int(std::floor(x)), y0 = int(std::floor(y));
  const int x1 = std::min(x0 + 1, int(f.cols()) - 1), y1 = std::min(y0 + 1, int(f.rows()) - 1);
  const double ax = x - x0, ay = y - y0;
  return (1 - ax) * (1 - ay) * f(y0, x0) + ax * (1 - ay) * f(y0, x1) + (1 - ax) * ay * f(y1, x0) + ax * ay * f(y1, x1);
}

std::map<std::pair<int, int>, long> counts_per_pixel(const EventSequence &s)
{
  std::map<std::pair<int, int>, long> m;
  for (const auto &e : s.events) { ++m[{e.x, e.y}]; }
  return m;
}

} // namespace

TEST_CASE("pure translation flow")
{
  SceneSpec s = translating_scene(10, 0);
  const auto f = analytic_flow(s, 0.2, 0.1);
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      CHECK(std::abs(f.u(y, x) - 1) < 1e-12);
      CHECK(std::abs(f.v(y, x)) < 1e-12);
      CHECK(f.valid(y, x) == (x <= 62));
    }
  }
}

TEST_CASE("rotation follows the chord formula")
{
  SceneSpec s = translating_scene(0, 0);
  s.motion.omega = 0.8;
  const double dt = 0.1;
  const auto f = analytic_flow(s, 0.15, dt);
  const double c = 31.5;
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      const double r = std::hypot(x - c, y - c);
      CHECK(std::abs(std::hypot(f.u(y, x), f.v(y, x)) - 2 * r * std::sin(0.8 * dt / 2)) < 1e-9);
    }
  }
}

TEST_CASE("zero motion and duration limits")
{
  const SceneSpec s = translating_scene(0, 0);
  const auto f = analytic_flow(s, 0.1, 0.1);
  CHECK((f.u == 0).all());
  CHECK((f.v == 0).all());
  CHECK(f.valid.all());
  CHECK_THROWS_AS(analytic_flow(s, 0.45, 0.1), Error);
  CHECK_THROWS_AS(analytic_flow(s, -0.1, 0.1), Error);
}

TEST_CASE("scene validation names the field")
{
  SceneSpec s = translating_scene(1, 1);
  s.duration = 0;
  try {
    s.validate();
    FAIL("expected a validation error");
  } catch (const Error &e) {
    CHECK(e.kind() == ErrorKind::Validation);
    CHECK(std::string(e.what()).find("duration") != std::string::npos);
  }
  s = translating_scene(1000, 0);
  CHECK_THROWS_AS(s.validate(), Error); // 500 px in 0.5 s exceeds twice the diagonal
  s = translating_scene(1, 1);
  s.threshold = -1;
  CHECK_THROWS_AS(s.validate(), Error);
  CHECK_THROWS_AS(parse_pattern("stripes"), Error);
}

TEST_CASE("a static scene emits nothing")
{
  for (Pattern p : {Pattern::Dots, Pattern::Grating, Pattern::Polygon}) {
    SceneSpec s = translating_scene(0, 0, 32);
    s.pattern = p;
    const EventSequence e = generate_events(s);
    CHECK(e.events.empty());
    CHECK(e.t_end == 500000);
  }
}

TEST_CASE("a passing dot fires positive then negative")
{
  SceneSpec s = translating_scene(20, 0, 48, 3);
  s.density = 0.01;
  s.threshold = 0.1;
  const EventSequence ev = generate_events(s);
  CHECK_NOTHROW(ev.validate());
  const SceneRenderer r(s);
  const int steps = 5 * s.substeps;
  int checked = 0;
  for (int y = 0; y < 48; ++y) {
    for (int x = 0; x < 48; ++x) {
      std::vector<double> trace;
      for (int k = 0; k <= steps; ++k) { trace.push_back(std::log(r.intensity(s.duration * k / steps, x, y))); }
      const auto peak = std::max_element(trace.begin(), trace.end());
      const double lowest_before = *std::min_element(trace.begin(), peak + 1);
      const double lowest_after = *std::min_element(peak, trace.end());
      // Rises from its starting level, never dips before the peak, then falls well below the peak.
      if (trace.front() - lowest_before > 1e-12 || *peak - trace.front() < 1.5 * s.threshold ||
          *peak - lowest_after < 2.5 * s.threshold) {
        continue;
      }
      std::vector<int> pol;
      for (const auto &e : ev.events) {
        if (e.x == x && e.y == y) { pol.push_back(e.p); }
      }
      REQUIRE(!pol.empty());
      CHECK(pol.front() == 1);
      CHECK(std::find(pol.begin(), pol.end(), -1) != pol.end());
      ++checked;
    }
  }
  CHECK(checked > 5);
}

TEST_CASE("a coarser threshold never adds events")
{
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    SceneSpec s = translating_scene(25, -10, 32, seed);
    s.motion.omega = 0.3;
    const auto fine = counts_per_pixel(generate_events(s));
    s.threshold *= 2;
    const auto coarse = counts_per_pixel(generate_events(s));
    long total_fine = 0, total_coarse = 0;
    for (const auto &[px, n] : coarse) {
      const auto it = fine.find(px);
      CHECK((it != fine.end() && it->second >= n));
      total_coarse += n;
    }
    for (const auto &[px, n] : fine) { total_fine += n; }
    CHECK(total_coarse < total_fine);
  }
}

TEST_CASE("generation is deterministic")
{
  SceneSpec s = translating_scene(12, 7, 32, 21);
  s.motion.scale_rate = 0.2;
  const auto a = generate_events(s), b = generate_events(s);
  CHECK(a.events == b.events);
  CHECK(!a.events.empty());
  const auto fa = analytic_flow(s, 0.1, 0.1), fb = analytic_flow(s, 0.1, 0.1);
  CHECK((fa.u == fb.u).all());
  CHECK((fa.v == fb.v).all());
  s.seed = 22;
  CHECK(generate_events(s).events != a.events);
}

TEST_CASE("warping a frame by the analytic flow reproduces the next frame")
{
  for (Pattern p : {Pattern::Dots, Pattern::Grating, Pattern::Polygon}) {
    SceneSpec s = translating_scene(17, -9, 64, 5);
    s.pattern = p;
    s.motion.omega = 0.4;
    s.motion.scale_rate = 0.1;
    const SceneRenderer r(s);
    const double t = 0.2, dt = 0.1;
    const Frame a = r.intensity_frame(t), b = r.intensity_frame(t + dt);
    const auto f = analytic_flow(s, t, dt);
    double sum = 0;
    long n = 0;
    for (int y = 8; y < 56; ++y) {
      for (int x = 8; x < 56; ++x) {
        if (!f.valid(y, x)) { continue; }
        sum += std::abs(bilinear(b, x + f.u(y, x), y + f.v(y, x)) - a(y, x));
        ++n;
      }
    }
    const double mean = sum / double(n);
    MESSAGE(to_string(p) << ": mean warp residual " << mean);
    CHECK(mean < 0.02 * s.contrast);
  }
}

TEST_CASE("gratings balance their polarities")
{
  SceneSpec s;
  s.pattern = Pattern::Grating;
  s.period = 16;
  s.motion.vx = 32; // two periods over the run
  s.duration = 1.0;
  s.sensor = {32, 32};
  s.seed = 1;
  const auto ev = generate_events(s);
  long pos = 0, neg = 0;
  for (const auto &e : ev.events) { (e.p > 0 ? pos : neg) += 1; }
  REQUIRE(pos + neg > 1000);
  CHECK(std::abs(double(pos - neg)) < 0.05 * double(pos + neg));
}

TEST_CASE("geometry fixtures")
{
  GeometryFixtureOptions still;
  still.zero_motion = true;
  const auto z = generate_geometry_fixture(1, still);
  // The oracle projects back through fx and cx, so zero is reached up to rounding.
  CHECK(z.forward.u.abs().maxCoeff() < 1e-12);
  CHECK(z.forward.v.abs().maxCoeff() < 1e-12);
  CHECK(z.backward.u.abs().maxCoeff() < 1e-12);
  CHECK(z.trajectory.poses().size() == 5);

  GeometryFixtureOptions axis;
  axis.constant_depth = true;
  axis.depth = 5;
  axis.axis_translation = true;
  axis.translation = {0.2, 0, 0};
  const auto a = generate_geometry_fixture(2, axis);
  // The fixture motion moves points by +0.2 m, i.e. the camera by -0.2 m along x.
  const double expect = -a.camera.fx * -0.2 / 5;
  long valid = 0;
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      if (!a.forward.valid(y, x)) { continue; }
      ++valid;
      CHECK(a.forward.u(y, x) == doctest::Approx(expect).epsilon(1e-12));
      CHECK(std::abs(a.forward.v(y, x)) < 1e-12);
    }
  }
  CHECK(valid > 2000);
  CHECK(max_gap(flow_from_geometry(a.disparity, a.camera, a.trajectory.relative(a.t_i, a.t_i + a.dt)), a.forward) <
        1e-9);

  double worst = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto f = generate_geometry_fixture(500 + seed);
    worst = std::max(worst, max_gap(flow_from_geometry(f.disparity, f.camera, f.trajectory.relative(f.t_i, f.t_i + f.dt)),
                                    f.forward));
    worst = std::max(worst, max_gap(flow_from_geometry(f.disparity, f.camera, f.trajectory.relative(f.t_i, f.t_i - f.dt)),
                                    f.backward));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("scene specs round trip through key-value text")
{
  SceneSpec s = translating_scene(12.5, -3.25, 40, 77);
  s.pattern = Pattern::Polygon;
  s.motion.omega = 0.1;
  s.period = 9;
  s.polygon_sides = 7;
  const SceneSpec back = SceneSpec::from_kv(s.to_kv());
  CHECK(back.to_kv().to_string() == s.to_kv().to_string());
  CHECK(back.pattern == Pattern::Polygon);
  CHECK(back.motion.vy == -3.25);
  CHECK(back.sensor == SensorSize{40, 40});
  CHECK(back.seed == 77);
  CHECK(s.frame_starts() == std::vector<Timestamp>{100000, 200000, 300000, 400000});
}
