// tests/test_kinematics.cpp
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <Eigen/Dense>
#include <cmath>

#include "doctest.h"
#include "rtag/geometry.hpp"
#include "rtag/kinematics.hpp"
#include "support.hpp"

using namespace rtag;
using Eigen::MatrixXd;
using Eigen::Vector3d;
using Eigen::VectorXd;
using rtag::test::check_gradients;

namespace {

RobotModel planar3() { return load_robot_model(std::string(RTAG_ASSET_DIR) + "/planar3.robot"); }

// A non-planar fixture: mixed axes and a non-identity origin rotation.
RobotModel bent_robot() {
  return parse_robot_model(R"(
name bent
joint
axis 0 0 1
origin_translation 0.2 0 0.1
limit -3 3

joint
axis 0 1 0
origin_translation 0.15 0.05 0
origin_rotation 0 -1 0 1 0 0 0 0 1
limit -2 2

keypoint
link 0
offset 0 0 0
keypoint
link 1
offset 0.05 0 0
keypoint
link 2
offset 0 0 0
keypoint
link 2
offset -0.05 0.02 0.01

surface_point
link 1
offset -0.1 0 0
surface_point
link 2
offset -0.05 0 0
)");
}

// Independent oracle: 4x4 homogeneous matrix composition.
std::vector<Eigen::Matrix4d> fk_homogeneous(const RobotModel& model, const VectorXd& p) {
  std::vector<Eigen::Matrix4d> frames{Eigen::Matrix4d::Identity()};
  for (int i = 0; i < model.dof(); ++i) {
    const Joint& j = model.joints[static_cast<std::size_t>(i)];
    Eigen::Matrix4d rot = Eigen::Matrix4d::Identity();
    rot.topLeftCorner<3, 3>() = axis_angle_rotation<double>(j.axis, p(i));
    Eigen::Matrix4d origin = Eigen::Matrix4d::Identity();
    origin.topLeftCorner<3, 3>() = j.origin_rotation;
    origin.topRightCorner<3, 1>() = j.origin_translation;
    frames.push_back(frames.back() * rot * origin);
  }
  return frames;
}

VectorXd random_config(Rng& rng, const RobotModel& model) {
  VectorXd p(model.dof());
  for (int i = 0; i < model.dof(); ++i)
    p(i) = rng.uniform(model.joints[static_cast<std::size_t>(i)].lower,
                       model.joints[static_cast<std::size_t>(i)].upper);
  return p;
}

}  // namespace

TEST_CASE("zero configuration lays the planar arm along x") {
  const RobotModel model = planar3();
  const auto frames = forward_kinematics(model, VectorXd::Zero(3));
  REQUIRE(frames.size() == 4);
  const double xs[4] = {0.0, 0.3, 0.55, 0.7};
  for (int i = 0; i < 4; ++i) {
    CHECK((frames[static_cast<std::size_t>(i)].translation - Vector3d(xs[i], 0, 0)).norm() < 1e-15);
    CHECK((frames[static_cast<std::size_t>(i)].rotation - Eigen::Matrix3d::Identity()).norm() < 1e-15);
  }
}

TEST_CASE("quarter turn at the base swings the whole arm to +y") {
  const RobotModel model = planar3();
  VectorXd p(3);
  p << M_PI / 2.0, 0.0, 0.0;
  const auto frames = forward_kinematics(model, p);
  CHECK((frames[3].translation - Vector3d(0.0, 0.7, 0.0)).norm() < 1e-12);
}

TEST_CASE("forward kinematics matches homogeneous-matrix composition") {
  for (const RobotModel& model : {planar3(), bent_robot()}) {
    Rng rng(11);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
      const VectorXd p = random_config(rng, model);
      const auto frames = forward_kinematics(model, p);
      const auto oracle = fk_homogeneous(model, p);
      for (std::size_t i = 0; i < frames.size(); ++i) {
        worst = std::max(worst,
                         (frames[i].rotation - oracle[i].topLeftCorner<3, 3>()).cwiseAbs().maxCoeff());
        worst = std::max(worst,
                         (frames[i].translation - oracle[i].topRightCorner<3, 1>()).cwiseAbs().maxCoeff());
      }
    }
    CHECK(worst < 1e-9);
  }
}

TEST_CASE("incremental and fold-composed transforms agree") {
  const RobotModel model = bent_robot();
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const VectorXd p = random_config(rng, model);
    // Right-fold the per-joint homogeneous transforms, then compare with the
    // incremental chain.
    Eigen::Matrix4d folded = Eigen::Matrix4d::Identity();
    std::vector<Eigen::Matrix4d> locals;
    for (int i = 0; i < model.dof(); ++i) {
      const Joint& j = model.joints[static_cast<std::size_t>(i)];
      Eigen::Matrix4d h = Eigen::Matrix4d::Identity();
      h.topLeftCorner<3, 3>() = axis_angle_rotation<double>(j.axis, p(i)) * j.origin_rotation;
      h.topRightCorner<3, 1>() = axis_angle_rotation<double>(j.axis, p(i)) * j.origin_translation;
      locals.push_back(h);
    }
    for (auto it = locals.rbegin(); it != locals.rend(); ++it) folded = *it * folded;
    const auto frames = forward_kinematics(model, p);
    const Frame& end = frames.back();
    CHECK((end.rotation - folded.topLeftCorner<3, 3>()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((end.translation - folded.topRightCorner<3, 1>()).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("tape forward kinematics equals the plain route") {
  for (const RobotModel& model : {planar3(), bent_robot()}) {
    Rng rng(13);
    for (int trial = 0; trial < 20; ++trial) {
      const VectorXd p = random_config(rng, model);
      const Eigen::Matrix3d r = axis_angle_rotation<double>(
          Vector3d(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)).normalized(),
          rng.uniform(-M_PI, M_PI));
      const Vector3d t(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 2.0));

      ad::Tape tape;
      ad::Value pv = tape.leaf(p);
      ad::Value kp = keypoints_from_config(tape, model, pv, tape.constant(r), tape.constant(t));
      ad::Value sc = surface_cloud_from_config(tape, model, pv, tape.constant(r), tape.constant(t));
      CHECK((kp.data() - keypoints_from_config(model, p, r, t)).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((sc.data() - surface_cloud_from_config(model, p, r, t)).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
}

TEST_CASE("keypoint gradients with respect to joints match finite differences") {
  const RobotModel model = bent_robot();
  Rng rng(14);
  for (int trial = 0; trial < 10; ++trial) {
    const VectorXd p = random_config(rng, model);
    const MatrixXd weight = rtag::test::random_matrix(rng, model.keypoint_count(), 3);
    const Eigen::Matrix3d r = orthonormalized(rtag::test::random_matrix(rng, 3, 3));
    const Vector3d t(0.1, -0.2, 1.5);
    auto res = check_gradients(
        [&](ad::Tape& tape, const std::vector<ad::Value>& xs) {
          ad::Value kp = keypoints_from_config(tape, model, xs[0], xs[1], xs[2]);
          return ad::sum(ad::mul(kp, tape.constant(weight)));
        },
        {MatrixXd(p), MatrixXd(r), MatrixXd(t)});
    INFO(res.detail);
    CHECK(res.ok);
  }
}

TEST_CASE("keypoints at link origins with identity camera equal frame translations") {
  const RobotModel model = planar3();
  const MatrixXd kp = keypoints_from_config(model, VectorXd::Zero(3),
                                            Eigen::Matrix3d::Identity(), Vector3d::Zero());
  const auto frames = forward_kinematics(model, VectorXd::Zero(3));
  for (int i = 0; i < 4; ++i)
    CHECK((kp.row(i).transpose() - frames[static_cast<std::size_t>(i)].translation).norm() < 1e-15);
}

TEST_CASE("surface points are stably sorted by link") {
  const RobotModel model = parse_robot_model(R"(
joint
axis 0 0 1
origin_translation 0.1 0 0
limit -1 1
keypoint
link 0
offset 0 0 0
keypoint
link 0
offset 0.01 0 0
keypoint
link 1
offset 0 0 0
keypoint
link 1
offset 0.02 0 0
surface_point
link 1
offset 0.5 0 0
surface_point
link 0
offset 0.25 0 0
surface_point
link 1
offset 0.75 0 0
)");
  REQUIRE(model.surface_count() == 3);
  CHECK(model.surface_points[0].link_index == 0);
  CHECK(model.surface_points[0].offset.x() == doctest::Approx(0.25));
  CHECK(model.surface_points[1].offset.x() == doctest::Approx(0.5));
  CHECK(model.surface_points[2].offset.x() == doctest::Approx(0.75));
}

TEST_CASE("loader rejects malformed descriptions") {
  const std::string valid_tail = R"(
keypoint
link 0
offset 0 0 0
keypoint
link 0
offset 1 0 0
keypoint
link 1
offset 0 0 0
keypoint
link 1
offset 1 0 0
surface_point
link 1
offset 0 0 0
)";
  const auto joint = [&](const std::string& body) {
    return "joint\n" + body + valid_tail;
  };
  CHECK_THROWS_AS(parse_robot_model(joint("type prismatic\naxis 0 0 1\nlimit -1 1\n")), DataError);
  CHECK_THROWS_AS(parse_robot_model(joint("axis 1 1 0\nlimit -1 1\n")), DataError);  // not unit
  CHECK_THROWS_AS(parse_robot_model(joint("axis 0 0 1\nlimit 1 -1\n")), DataError);  // order
  CHECK_THROWS_AS(parse_robot_model(joint("axis 0 0 1\nlimit -1 1\nwobble 3\n")), DataError);
  CHECK_THROWS_AS(parse_robot_model(joint(
                      "axis 0 0 1\norigin_rotation 2 0 0 0 1 0 0 0 1\nlimit -1 1\n")),
                  DataError);  // not a rotation
  // Keypoint link index out of range.
  CHECK_THROWS_AS(parse_robot_model("joint\naxis 0 0 1\nlimit -1 1\nkeypoint\nlink 5\n" + valid_tail),
                  DataError);
  // Too few keypoints.
  CHECK_THROWS_AS(parse_robot_model(R"(
joint
axis 0 0 1
limit -1 1
keypoint
link 0
offset 0 0 0
surface_point
link 0
offset 0 0 0
)"),
                  DataError);
  // Joint-count mismatch at FK time.
  const RobotModel model = planar3();
  CHECK_THROWS_AS(forward_kinematics(model, VectorXd::Zero(2)), DomainError);
}

TEST_CASE("model hash tracks content, not formatting") {
  const RobotModel a = planar3();
  RobotModel b = planar3();
  CHECK(model_hash(a) == model_hash(b));
  b.joints[0].origin_translation.x() += 1e-9;
  CHECK(model_hash(a) != model_hash(b));
}
