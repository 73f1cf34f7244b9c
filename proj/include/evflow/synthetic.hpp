#pragma once

// Event streams with exactly known flow: a periodic texture moved by a 2D
// similarity transform about the sensor center.

#include "evflow/events.hpp"
#include "evflow/flow.hpp"
#include "evflow/geometry.hpp"
#include "evflow/kv_config.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace evflow {

enum class Pattern { Dots, Grating, Polygon };

std::string to_string(Pattern p);
Pattern parse_pattern(const std::string &s);

struct SimilarityMotion
{
  double vx = 0, vy = 0;  // px/s
  double omega = 0;       // rad/s, about the sensor center
  double scale_rate = 0;  // 1/s, scale factor exp(scale_rate * t)
};

struct SceneSpec
{
  Pattern pattern = Pattern::Dots;
  double density = 0.02;  // dots per texture pixel
  double contrast = 0.8;  // pattern amplitude over the background level
  double background = 0.2;
  double period = 16;     // grating period, px
  double angle = 0;       // grating direction, rad
  int polygon_sides = 5;
  SimilarityMotion motion;
  double duration = 1.0;  // s
  SensorSize sensor{64, 64};
  double threshold = 0.2; // log-intensity contrast threshold
  std::uint64_t seed = 0;
  double gt_dt = 0.1;     // s between ground-truth frames
  int substeps = 32;      // rendering steps per ground-truth interval

  void validate() const;
  /// Ground-truth frame starts dt, 2dt, ... that leave a full window on both sides.
  std::vector<Timestamp> frame_starts() const;
  Timestamp gt_dt_us() const;
  Timestamp duration_us() const;

  static SceneSpec from_kv(const KeyValues &kv);
  KeyValues to_kv() const;
};

/// Keys accepted by SceneSpec::from_kv.
const std::vector<std::string> &scene_spec_keys();

using Frame = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Periodic texture of the scene, sampled bilinearly through the motion.
class SceneRenderer
{
public:
  explicit SceneRenderer(const SceneSpec &spec);

  /// Texture coordinate seen by sensor position (px, py) at time t (s).
  Eigen::Vector2d texture_coord(double t, double px, double py) const;
  /// background + contrast * pattern at a continuous sensor position.
  double intensity(double t, double px, double py) const;
  Frame intensity_frame(double t) const;
  Frame log_frame(double t) const;

private:
  double sample(double tx, double ty) const;

  SceneSpec spec_;
  int size_ = 0;
  Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> texture_;
};

/// Exact displacement of every pixel over [t_i, t_i + dt] (seconds); pixels leaving the frame are invalid.
FlowField<double> analytic_flow(const SceneSpec &spec, double t_i, double dt);

/// Per-pixel log-intensity threshold crossings with interpolated timestamps, sorted by time.
EventSequence generate_events(const SceneSpec &spec);

struct GeometryFixtureOptions
{
  double max_rotation_deg = 5;
  double max_translation = 0.3; // meters per interval
  bool zero_motion = false;
  bool constant_depth = false;
  double depth = 8;             // used with constant_depth
  /// Overrides the random motion with a pure camera-frame translation.
  bool axis_translation = false;
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  int height = 64, width = 64;
  Timestamp dt = 100000;
};

struct GeometryFixture
{
  DisparityMap disparity;
  CameraModel camera;
  PoseTrajectory trajectory; // poses at t_i + k dt, k = -2..2
  Timestamp t_i = 0;
  Timestamp dt = 0;
  FlowField<double> forward;  // t_i -> t_i + dt
  FlowField<double> backward; // t_i -> t_i - dt
};

GeometryFixture generate_geometry_fixture(std::uint64_t seed, const GeometryFixtureOptions &options = {});

/// Scalar reprojection of one disparity map under the fixture's motion model;
/// shares no code with flow_from_geometry.
FlowField<double> reprojection_flow(const DisparityMap &disp, const CameraModel &cam, const double rotation[3][3],
                                    const double translation[3]);

} // namespace evflow
