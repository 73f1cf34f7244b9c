#include "evflow/geometry.hpp"

#include "evflow/error.hpp"
#include "evflow/kv_config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace evflow {

void CameraModel::validate() const
{
  if (!(fx > 0) || !(fy > 0)) { throw validation_error("camera focal lengths must be positive"); }
  if (!(baseline > 0)) { throw validation_error("camera baseline must be positive"); }
  if (height <= 0 || width <= 0) { throw validation_error("camera size must be positive"); }
}

RigidTransform RigidTransform::inverse() const
{
  RigidTransform r;
  r.rotation = rotation.transpose();
  r.translation = -(r.rotation * translation);
  return r;
}

RigidTransform RigidTransform::operator*(const RigidTransform &o) const
{
  RigidTransform r;
  r.rotation = rotation * o.rotation;
  r.translation = rotation * o.translation + translation;
  return r;
}

bool RigidTransform::is_proper(double tol) const
{
  const double orth = (rotation * rotation.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  return orth <= tol && std::abs(rotation.determinant() - 1.0) <= tol && translation.allFinite();
}

PoseTrajectory::PoseTrajectory(std::vector<Pose> poses) : poses_(std::move(poses))
{
  for (std::size_t i = 0; i < poses_.size(); ++i) {
    if (i > 0 && poses_[i].t <= poses_[i - 1].t) {
      throw data_error("trajectory timestamps must increase strictly (pose " + std::to_string(i) + " at " +
                       std::to_string(poses_[i].t) + ")");
    }
    if (!poses_[i].world_from_camera.is_proper()) {
      throw data_error("trajectory pose " + std::to_string(i) + " is not a proper rigid motion");
    }
  }
}

bool PoseTrajectory::covers(Timestamp t) const
{
  return !poses_.empty() && t >= poses_.front().t && t <= poses_.back().t;
}

bool PoseTrajectory::has_sample(Timestamp t) const
{
  const auto it = std::lower_bound(poses_.begin(), poses_.end(), t, [](const Pose &p, Timestamp v) { return p.t < v; });
  return it != poses_.end() && it->t == t;
}

RigidTransform PoseTrajectory::at(Timestamp t) const
{
  if (!covers(t)) {
    const std::string span = poses_.empty() ? "nothing"
                                            : "[" + std::to_string(poses_.front().t) + ", " +
                                                std::to_string(poses_.back().t) + "]";
    throw data_error("trajectory gap: no pose for t = " + std::to_string(t) + " us (covered: " + span + ")");
  }
  auto hi = std::lower_bound(poses_.begin(), poses_.end(), t, [](const Pose &p, Timestamp v) { return p.t < v; });
  if (hi->t == t) { return hi->world_from_camera; }
  const auto lo = hi - 1;
  const double a = double(t - lo->t) / double(hi->t - lo->t);
  const Eigen::Quaterniond q0(lo->world_from_camera.rotation), q1(hi->world_from_camera.rotation);
  RigidTransform r;
  r.rotation = q0.slerp(a, q1).normalized().toRotationMatrix();
  r.translation = (1 - a) * lo->world_from_camera.translation + a * hi->world_from_camera.translation;
  return r;
}

RigidTransform PoseTrajectory::relative(Timestamp t_i, Timestamp t_j) const
{
  return at(t_j).inverse() * at(t_i);
}

DisparityMap::DisparityMap(Plane disparity) : d(std::move(disparity))
{
  valid = d.unaryExpr([](double v) { return std::isfinite(v) && v > 0; });
}

double disparity_to_depth(double d, const CameraModel &cam)
{
  if (!(d > 0)) { return std::numeric_limits<double>::quiet_NaN(); }
  return cam.fx * cam.baseline / d;
}

DepthMap disparity_to_depth(const DisparityMap &disp, const CameraModel &cam)
{
  DepthMap out;
  out.z = DisparityMap::Plane::Zero(disp.height(), disp.width());
  out.valid = disp.valid;
  for (int y = 0; y < disp.height(); ++y) {
    for (int x = 0; x < disp.width(); ++x) {
      if (!disp.valid(y, x) || !(disp.d(y, x) > 0)) {
        out.valid(y, x) = false;
        continue;
      }
      out.z(y, x) = disparity_to_depth(disp.d(y, x), cam);
    }
  }
  return out;
}

FlowField<double> flow_from_geometry(const DisparityMap &disp, const CameraModel &cam, const RigidTransform &T,
                                     GeometryStats *stats)
{
  cam.validate();
  if (disp.height() != cam.height || disp.width() != cam.width) {
    throw validation_error("disparity map size differs from the calibration");
  }
  if (!T.is_proper()) { throw validation_error("relative transform is not a proper rigid motion"); }
  const DepthMap depth = disparity_to_depth(disp, cam);
  FlowField<double> flow(cam.height, cam.width);
  GeometryStats local;
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      if (!depth.valid(y, x)) {
        flow.valid(y, x) = false;
        continue;
      }
      const double z = depth.z(y, x);
      // Work with the depth-normalized point so a zero motion maps x to itself exactly.
      const Eigen::Vector3d ray((x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, 1.0);
      const Eigen::Vector3d q = T.rotation * ray + T.translation / z;
      if (z < kMinDepth || z * q.z() < kMinDepth) {
        flow.valid(y, x) = false;
        ++local.degenerate_depth;
        continue;
      }
      const double du = cam.fx * (q.x() / q.z() - ray.x());
      const double dv = cam.fy * (q.y() / q.z() - ray.y());
      const double xp = x + du, yp = y + dv;
      if (!(xp >= 0 && xp <= cam.width - 1 && yp >= 0 && yp <= cam.height - 1)) {
        flow.valid(y, x) = false;
        ++local.out_of_frame;
        continue;
      }
      flow.u(y, x) = du;
      flow.v(y, x) = dv;
    }
  }
  if (stats) {
    stats->degenerate_depth += local.degenerate_depth;
    stats->out_of_frame += local.out_of_frame;
  }
  return flow;
}

FlowPair flow_pair_at_rate(const DisparityMap &disp, const CameraModel &cam, const PoseTrajectory &traj,
                           Timestamp t_i, Timestamp dt, GeometryStats *stats)
{
  if (dt < 0) { throw validation_error("flow rate interval must be non-negative"); }
  for (const Timestamp t : {t_i - dt, t_i, t_i + dt}) {
    if (!traj.covers(t)) { traj.at(t); }
  }
  if (dt == 0) {
    FlowField<double> zero(disp.height(), disp.width());
    zero.valid = disp.valid;
    return {zero, zero};
  }
  FlowPair out;
  out.forward = flow_from_geometry(disp, cam, traj.relative(t_i, t_i + dt), stats);
  out.backward = flow_from_geometry(disp, cam, traj.relative(t_i, t_i - dt), stats);
  return out;
}

template <typename Scalar>
FlowField<Scalar> consistency_filter(const FlowField<Scalar> &forward, const FlowField<Scalar> &backward_next,
                                     double threshold)
{
  if (forward.height() != backward_next.height() || forward.width() != backward_next.width() ||
      forward.resolution != backward_next.resolution) {
    throw validation_error("consistency_filter: fields differ in resolution");
  }
  const int h = forward.height(), w = forward.width();
  FlowField<Scalar> out = forward;
  const double inf = std::numeric_limits<double>::infinity();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!forward.valid(y, x)) { continue; }
      const double gx = x + double(forward.u(y, x)), gy = y + double(forward.v(y, x));
      double err = inf;
      const double fx = std::floor(gx), fy = std::floor(gy);
      const int x0 = int(fx), y0 = int(fy);
      const double ax = gx - fx, ay = gy - fy;
      double bu = 0, bv = 0;
      bool ok = gx >= 0 && gy >= 0 && gx <= w - 1 && gy <= h - 1;
      for (int k = 0; k < 4 && ok; ++k) {
        const int tx = x0 + (k & 1), ty = y0 + (k >> 1);
        const double wk = ((k & 1) ? ax : 1 - ax) * ((k >> 1) ? ay : 1 - ay);
        if (wk == 0) { continue; }
        if (tx >= w || ty >= h || !backward_next.valid(ty, tx)) {
          ok = false;
          break;
        }
        bu += wk * double(backward_next.u(ty, tx));
        bv += wk * double(backward_next.v(ty, tx));
      }
      if (ok) { err = std::hypot(double(forward.u(y, x)) + bu, double(forward.v(y, x)) + bv); }
      if (err > threshold) { out.valid(y, x) = false; }
    }
  }
  return out;
}

template FlowField<float> consistency_filter(const FlowField<float> &, const FlowField<float> &, double);
template FlowField<double> consistency_filter(const FlowField<double> &, const FlowField<double> &, double);

CameraModel read_calibration(const std::filesystem::path &path)
{
  const KeyValues kv = KeyValues::load(path);
  kv.reject_unknown({"fx", "fy", "cx", "cy", "baseline", "height", "width"});
  CameraModel cam;
  cam.fx = kv.require_double("fx");
  cam.fy = kv.require_double("fy");
  cam.cx = kv.require_double("cx");
  cam.cy = kv.require_double("cy");
  cam.baseline = kv.require_double("baseline");
  cam.height = int(kv.require_double("height"));
  cam.width = int(kv.require_double("width"));
  cam.validate();
  return cam;
}

void write_calibration(const std::filesystem::path &path, const CameraModel &cam)
{
  std::ofstream out(path);
  if (!out) { throw data_error("cannot write " + path.string()); }
  out << std::setprecision(17);
  out << "fx = " << cam.fx << "\nfy = " << cam.fy << "\ncx = " << cam.cx << "\ncy = " << cam.cy
      << "\nbaseline = " << cam.baseline << "\nheight = " << cam.height << "\nwidth = " << cam.width << "\n";
}

PoseTrajectory read_trajectory(const std::filesystem::path &path)
{
  std::ifstream in(path);
  if (!in) { throw data_error("cannot open " + path.string()); }
  std::vector<Pose> poses;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) { line.resize(hash); }
    if (line.find_first_not_of(" \t\r") == std::string::npos) { continue; }
    std::istringstream ls(line);
    Timestamp t = 0;
    double tx, ty, tz, qx, qy, qz, qw;
    if (!(ls >> t >> tx >> ty >> tz >> qx >> qy >> qz >> qw)) {
      throw data_error(path.string() + ":" + std::to_string(n) + ": expected 't tx ty tz qx qy qz qw'");
    }
    Eigen::Quaterniond q(qw, qx, qy, qz);
    if (!(q.norm() > 0)) { throw data_error(path.string() + ":" + std::to_string(n) + ": zero quaternion"); }
    Pose p;
    p.t = t;
    p.world_from_camera.rotation = q.normalized().toRotationMatrix();
    p.world_from_camera.translation = {tx, ty, tz};
    poses.push_back(p);
  }
  return PoseTrajectory(std::move(poses));
}

void write_trajectory(const std::filesystem::path &path, const PoseTrajectory &traj)
{
  std::ofstream out(path);
  if (!out) { throw data_error("cannot write " + path.string()); }
  out << "# t_us tx ty tz qx qy qz qw (world <- camera)\n" << std::setprecision(17);
  for (const Pose &p : traj.poses()) {
    const Eigen::Quaterniond q(p.world_from_camera.rotation);
    const auto &t = p.world_from_camera.translation;
    out << p.t << " " << t.x() << " " << t.y() << " " << t.z() << " " << q.x() << " " << q.y() << " " << q.z()
        << " " << q.w() << "\n";
  }
}

} // namespace evflow
