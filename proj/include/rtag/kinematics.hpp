// include/rtag/kinematics.hpp
//
// Robot description and forward kinematics.
//
// A robot is a serial chain of n revolute joints.  Frame 0 is the base
// identity; frame i composes frame i-1 with a rotation of p[i] about the
// joint-i axis (acting at the frame i-1 origin) followed by the joint-i
// origin transform:
//
//   R_i = R_{i-1} * Rot(axis_i, p_i) * Q_i
//   t_i = t_{i-1} + R_{i-1} * Rot(axis_i, p_i) * d_i
//
// Keypoints and surface points attach to a link frame with a fixed offset.
// All angles radians, all lengths meters.
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "rtag/tape.hpp"

namespace rtag {

struct Joint {
  Eigen::Vector3d axis = Eigen::Vector3d::UnitZ();
  Eigen::Vector3d origin_translation = Eigen::Vector3d::Zero();
  Eigen::Matrix3d origin_rotation = Eigen::Matrix3d::Identity();
  double lower = -M_PI;
  double upper = M_PI;
};

struct PointAttachment {
  int link_index = 0;  // frame index in [0, n]
  Eigen::Vector3d offset = Eigen::Vector3d::Zero();
};

struct RobotModel {
  std::string name;
  std::vector<Joint> joints;
  std::vector<PointAttachment> keypoints;       // declaration order (labels correspond)
  std::vector<PointAttachment> surface_points;  // stably sorted by link_index at load

  int dof() const { return static_cast<int>(joints.size()); }
  int keypoint_count() const { return static_cast<int>(keypoints.size()); }
  int surface_count() const { return static_cast<int>(surface_points.size()); }
};

// Parses the sectioned key-value robot description (see docs/formats.md).
// Unknown keys, prismatic joints, and invariant violations raise DataError.
RobotModel parse_robot_model(const std::string& text, const std::string& origin = "<string>");
RobotModel load_robot_model(const std::string& path);
void validate_robot_model(const RobotModel& model, const std::string& origin = "<model>");

// Fingerprint of the numeric model content (invariant to comments/formatting).
std::uint64_t model_hash(const RobotModel& model);

// ---------------- plain forward kinematics ----------------

struct Frame {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
};

// Returns n+1 frames (base first).  p must have exactly n entries.
std::vector<Frame> forward_kinematics(const RobotModel& model, const Eigen::VectorXd& p);

// Attachment positions in the base frame, one row per point.
Eigen::MatrixXd attachment_points_base(const RobotModel& model,
                                       const std::vector<PointAttachment>& points,
                                       const Eigen::VectorXd& p);

// Keypoint / surface positions in the camera frame: x_cam = R x_base + T.
Eigen::MatrixXd keypoints_from_config(const RobotModel& model, const Eigen::VectorXd& p,
                                      const Eigen::Matrix3d& r, const Eigen::Vector3d& t);
Eigen::MatrixXd surface_cloud_from_config(const RobotModel& model, const Eigen::VectorXd& p,
                                          const Eigen::Matrix3d& r, const Eigen::Vector3d& t);

// ---------------- tape forward kinematics ----------------

struct FrameValue {
  ad::Value rotation;     // 3x3
  ad::Value translation;  // 3x1
};

// Differentiable frames from a joint vector value (n x 1).
std::vector<FrameValue> fk_frames(ad::Tape& tape, const RobotModel& model, ad::Value p);

// Applies a rigid transform to a k x 3 cloud of row points: X R^T + 1 T^T.
ad::Value transform_points(ad::Value points, ad::Value r, ad::Value t);

// Differentiable attachment positions in the camera frame (k x 3 rows in the
// declaration order of `points`).
ad::Value attachment_points_camera(ad::Tape& tape, const RobotModel& model,
                                   const std::vector<PointAttachment>& points, ad::Value p,
                                   ad::Value r, ad::Value t);

inline ad::Value keypoints_from_config(ad::Tape& tape, const RobotModel& model, ad::Value p,
                                       ad::Value r, ad::Value t) {
  return attachment_points_camera(tape, model, model.keypoints, p, r, t);
}

inline ad::Value surface_cloud_from_config(ad::Tape& tape, const RobotModel& model, ad::Value p,
                                           ad::Value r, ad::Value t) {
  return attachment_points_camera(tape, model, model.surface_points, p, r, t);
}

}  // namespace rtag
