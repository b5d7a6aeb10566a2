// include/rtag/geometry.hpp
//
// Small Eigen-idiomatic geometry helpers: free functions over dense types,
// templated on scalar where that is free.  All angles are radians, all
// lengths meters.
#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "rtag/common.hpp"

namespace rtag {

template <typename Scalar>
Eigen::Matrix<Scalar, 3, 3> skew(const Eigen::Matrix<Scalar, 3, 1>& u) {
  Eigen::Matrix<Scalar, 3, 3> k;
  k << Scalar(0), -u.z(), u.y(), u.z(), Scalar(0), -u.x(), -u.y(), u.x(), Scalar(0);
  return k;
}

// Rodrigues rotation about a unit axis.
template <typename Scalar>
Eigen::Matrix<Scalar, 3, 3> axis_angle_rotation(const Eigen::Matrix<Scalar, 3, 1>& axis, Scalar angle) {
  const Eigen::Matrix<Scalar, 3, 3> k = skew(axis);
  return Eigen::Matrix<Scalar, 3, 3>::Identity() + std::sin(angle) * k +
         (Scalar(1) - std::cos(angle)) * (k * k);
}

// Nearest rotation matrix (special orthogonal Procrustes projection): the
// orthogonal polar factor with the determinant sign corrected to +1.
inline Eigen::Matrix3d orthonormalized(const Eigen::Matrix3d& m) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const double s = ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) ? -1.0 : 1.0;
  Eigen::Vector3d c(1.0, 1.0, s);
  return svd.matrixU() * c.asDiagonal() * svd.matrixV().transpose();
}

// Camera rotation for a camera at `eye` looking at `target`, +z forward,
// world +z as the up reference.  Rows are the camera axes in world frame.
inline Eigen::Matrix3d look_at_rotation(const Eigen::Vector3d& eye, const Eigen::Vector3d& target) {
  const Eigen::Vector3d fwd = (target - eye).normalized();
  const Eigen::Vector3d up_ref(0.0, 0.0, 1.0);
  Eigen::Vector3d right = up_ref.cross(fwd);
  const double n = right.norm();
  if (n < 1e-9) throw DomainError("look_at_rotation: view direction parallel to up reference");
  right /= n;
  const Eigen::Vector3d down = fwd.cross(right);
  Eigen::Matrix3d r;
  r.row(0) = right.transpose();
  r.row(1) = down.transpose();
  r.row(2) = fwd.transpose();
  return r;
}

// Wraps an angle to (-pi, pi].
inline double wrap_angle(double a) {
  a = std::fmod(a, 2.0 * M_PI);
  if (a <= -M_PI) a += 2.0 * M_PI;
  if (a > M_PI) a -= 2.0 * M_PI;
  return a;
}

}  // namespace rtag
