#pragma once

// Ground-truth flow from disparity, calibration and camera poses under the
// static-scene assumption.

#include "evflow/events.hpp"
#include "evflow/flow.hpp"

#include <Eigen/Geometry>

#include <filesystem>
#include <utility>
#include <vector>

namespace evflow {

struct CameraModel
{
  double fx = 0, fy = 0;
  double cx = 0, cy = 0;
  double baseline = 0; // meters
  int height = 0, width = 0;

  void validate() const;
};

/// x_target = R * x_source + t
struct RigidTransform
{
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static RigidTransform identity() { return {}; }
  Eigen::Vector3d apply(const Eigen::Vector3d &p) const { return rotation * p + translation; }
  RigidTransform inverse() const;
  RigidTransform operator*(const RigidTransform &o) const;
  /// Orthonormal with determinant +1 within tol.
  bool is_proper(double tol = 1e-9) const;
};

struct Pose
{
  Timestamp t = 0;
  RigidTransform world_from_camera;
};

class PoseTrajectory
{
public:
  PoseTrajectory() = default;
  explicit PoseTrajectory(std::vector<Pose> poses);

  const std::vector<Pose> &poses() const { return poses_; }
  bool covers(Timestamp t) const;
  /// Geodesic rotation and linear translation between the bracketing poses.
  /// Throws a data error naming the requested time and the covered span.
  RigidTransform at(Timestamp t) const;
  /// True when t coincides with a stored pose (no interpolation needed).
  bool has_sample(Timestamp t) const;
  /// Transform taking camera-frame points at t_i to the camera frame at t_j.
  RigidTransform relative(Timestamp t_i, Timestamp t_j) const;

private:
  std::vector<Pose> poses_;
};

struct DisparityMap
{
  using Plane = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Plane d;
  Mask valid;

  DisparityMap() = default;
  /// Pixels with d <= 0 (or non-finite) are invalid.
  explicit DisparityMap(Plane disparity);
  int height() const { return int(d.rows()); }
  int width() const { return int(d.cols()); }
};

inline constexpr double kMinDepth = 0.1; // meters

/// z = fx * baseline / d; returns NaN for d <= 0.
double disparity_to_depth(double d, const CameraModel &cam);

struct DepthMap
{
  DisparityMap::Plane z;
  DisparityMap::Mask valid;
};
DepthMap disparity_to_depth(const DisparityMap &disp, const CameraModel &cam);

struct GeometryStats
{
  long degenerate_depth = 0; // z < kMinDepth before or after the motion
  long out_of_frame = 0;
};

/// Back-project valid pixels, move them by T (frame_j <- frame_i), project.
FlowField<double> flow_from_geometry(const DisparityMap &disp, const CameraModel &cam, const RigidTransform &T,
                                     GeometryStats *stats = nullptr);

struct FlowPair
{
  FlowField<double> forward;  // t_i -> t_i + dt
  FlowField<double> backward; // t_i -> t_i - dt
};

FlowPair flow_pair_at_rate(const DisparityMap &disp, const CameraModel &cam, const PoseTrajectory &traj,
                           Timestamp t_i, Timestamp dt, GeometryStats *stats = nullptr);

/// Invalidates pixels x where |f(x) + b(x + f(x))| exceeds the threshold;
/// b is sampled bilinearly and counts as infinitely wrong where it cannot be.
template <typename Scalar>
FlowField<Scalar> consistency_filter(const FlowField<Scalar> &forward, const FlowField<Scalar> &backward_next,
                                     double threshold);

// Calibration: "key = value" lines with fx, fy, cx, cy, baseline, height, width.
CameraModel read_calibration(const std::filesystem::path &path);
void write_calibration(const std::filesystem::path &path, const CameraModel &cam);

// Trajectory: "t_us tx ty tz qx qy qz qw" per line (world <- camera), '#' comments.
PoseTrajectory read_trajectory(const std::filesystem::path &path);
void write_trajectory(const std::filesystem::path &path, const PoseTrajectory &traj);

} // namespace evflow
