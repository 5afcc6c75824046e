#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <cmath>

#include "mdt/common.hpp"

namespace mdt {

/// Pinhole intrinsics in pixels. No distortion model; inputs are assumed
/// rectified.
struct CameraIntrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  void validate() const {
    if (!(fx > 0 && fy > 0))
      throw ConfigError("intrinsics: focal lengths must be positive");
    if (!(cx >= 0 && cx < width && cy >= 0 && cy < height))
      throw ConfigError("intrinsics: principal point outside image");
  }

  Eigen::Matrix3d matrix() const {
    Eigen::Matrix3d k;
    k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    return k;
  }
};

/// Scale intrinsics to a new resolution: fx, cx by W'/W and fy, cy by H'/H.
inline CameraIntrinsics scale_intrinsics(const CameraIntrinsics& k, int new_width,
                                         int new_height) {
  const double sx = static_cast<double>(new_width) / k.width;
  const double sy = static_cast<double>(new_height) / k.height;
  CameraIntrinsics out = k;
  out.fx *= sx;
  out.cx *= sx;
  out.fy *= sy;
  out.cy *= sy;
  out.width = new_width;
  out.height = new_height;
  return out;
}

/// Rigid transform: x_out = R * x_in + t, translation in meters.
struct PoseSE3 {
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  static PoseSE3 identity() { return {}; }

  static PoseSE3 from_quaternion(double qx, double qy, double qz, double qw,
                                 const Eigen::Vector3d& trans) {
    Eigen::Quaterniond q(qw, qx, qy, qz);
    q.normalize();
    return {q.toRotationMatrix(), trans};
  }

  PoseSE3 inverse() const { return {R.transpose(), -(R.transpose() * t)}; }

  /// this ∘ other: (this * other)(x) = this(other(x)).
  PoseSE3 compose(const PoseSE3& other) const {
    return {R * other.R, R * other.t + t};
  }

  Eigen::Vector3d apply(const Eigen::Vector3d& x) const { return R * x + t; }

  bool is_valid_rotation(double tol = 1e-9) const {
    const Eigen::Matrix3d err = R.transpose() * R - Eigen::Matrix3d::Identity();
    return err.cwiseAbs().maxCoeff() <= tol && std::abs(R.determinant() - 1.0) <= tol;
  }
};

/// Relative transform taking target-camera coordinates to source-camera
/// coordinates, from world-from-camera poses of both frames.
inline PoseSE3 relative_pose(const PoseSE3& world_from_target,
                             const PoseSE3& world_from_source) {
  return world_from_source.inverse().compose(world_from_target);
}

}  // namespace mdt
