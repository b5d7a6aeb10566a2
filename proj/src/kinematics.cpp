// src/kinematics.cpp
#include "rtag/kinematics.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "rtag/geometry.hpp"

namespace rtag {

namespace {

std::vector<double> parse_numbers(const std::string& text) {
  std::istringstream is(text);
  std::vector<double> out;
  double v;
  while (is >> v) out.push_back(v);
  if (!is.eof()) throw DataError(cat("expected numbers, got '", text, "'"));
  return out;
}

Eigen::Vector3d as_vec3(const std::vector<double>& v, const std::string& key) {
  if (v.size() != 3) throw DataError(cat("key '", key, "' expects 3 values, got ", v.size()));
  return Eigen::Vector3d(v[0], v[1], v[2]);
}

}  // namespace

RobotModel parse_robot_model(const std::string& text, const std::string& origin) {
  RobotModel model;
  enum class Section { None, Joint, Keypoint, SurfacePoint };
  Section section = Section::None;

  const auto fail = [&origin](int line, const std::string& msg) {
    throw DataError(cat(origin, ":", line, ": ", msg));
  };

  std::istringstream is(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    std::istringstream ls(raw);
    std::string key;
    if (!(ls >> key)) continue;  // blank / comment-only line
    std::string rest;
    std::getline(ls, rest);

    if (key == "joint" || key == "keypoint" || key == "surface_point") {
      if (rest.find_first_not_of(" \t\r") != std::string::npos)
        fail(line_no, cat("section header '", key, "' takes no values"));
      if (key == "joint") {
        section = Section::Joint;
        model.joints.emplace_back();
      } else if (key == "keypoint") {
        section = Section::Keypoint;
        model.keypoints.emplace_back();
      } else {
        section = Section::SurfacePoint;
        model.surface_points.emplace_back();
      }
      continue;
    }

    if (key == "name") {
      if (section != Section::None) fail(line_no, "'name' must precede all sections");
      std::istringstream rs(rest);
      rs >> model.name;
      continue;
    }

    std::vector<double> nums;
    const auto numbers = [&]() -> const std::vector<double>& {
      try {
        nums = parse_numbers(rest);
      } catch (const DataError& e) {
        fail(line_no, e.what());
      }
      return nums;
    };

    switch (section) {
      case Section::None:
        fail(line_no, cat("key '", key, "' outside any section"));
        break;
      case Section::Joint: {
        Joint& j = model.joints.back();
        if (key == "type") {
          std::string type;
          std::istringstream rs(rest);
          rs >> type;
          if (type == "prismatic")
            fail(line_no, "prismatic joints are not supported (revolute only)");
          if (type != "revolute") fail(line_no, cat("unknown joint type '", type, "'"));
        } else if (key == "axis") {
          j.axis = as_vec3(numbers(), key);
        } else if (key == "origin_translation") {
          j.origin_translation = as_vec3(numbers(), key);
        } else if (key == "origin_rotation") {
          const auto& v = numbers();
          if (v.size() != 9) fail(line_no, "'origin_rotation' expects 9 values (row-major)");
          for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) j.origin_rotation(r, c) = v[static_cast<std::size_t>(3 * r + c)];
        } else if (key == "limit") {
          const auto& v = numbers();
          if (v.size() != 2) fail(line_no, "'limit' expects 2 values (lower upper)");
          j.lower = v[0];
          j.upper = v[1];
        } else {
          fail(line_no, cat("unknown key '", key, "' in joint section"));
        }
        break;
      }
      case Section::Keypoint:
      case Section::SurfacePoint: {
        PointAttachment& a = (section == Section::Keypoint) ? model.keypoints.back()
                                                            : model.surface_points.back();
        if (key == "link") {
          const auto& v = numbers();
          if (v.size() != 1 || v[0] != std::floor(v[0]))
            fail(line_no, "'link' expects one integer");
          a.link_index = static_cast<int>(v[0]);
        } else if (key == "offset") {
          a.offset = as_vec3(numbers(), key);
        } else {
          fail(line_no, cat("unknown key '", key, "' in ",
                            section == Section::Keypoint ? "keypoint" : "surface_point",
                            " section"));
        }
        break;
      }
    }
  }

  std::stable_sort(model.surface_points.begin(), model.surface_points.end(),
                   [](const PointAttachment& a, const PointAttachment& b) {
                     return a.link_index < b.link_index;
                   });
  validate_robot_model(model, origin);
  return model;
}

RobotModel load_robot_model(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError(cat("cannot open robot description '", path, "'"));
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_robot_model(ss.str(), path);
}

void validate_robot_model(const RobotModel& model, const std::string& origin) {
  const auto fail = [&origin](const std::string& msg) {
    throw DataError(cat(origin, ": ", msg));
  };
  if (model.joints.empty()) fail("robot needs at least one joint");
  const int n = model.dof();
  for (int i = 0; i < n; ++i) {
    const Joint& j = model.joints[static_cast<std::size_t>(i)];
    if (!j.axis.allFinite() || !j.origin_translation.allFinite() ||
        !j.origin_rotation.allFinite() || !std::isfinite(j.lower) || !std::isfinite(j.upper))
      fail(cat("joint ", i, ": non-finite value"));
    if (std::abs(j.axis.norm() - 1.0) > 1e-9)
      fail(cat("joint ", i, ": axis must be unit length (norm ", j.axis.norm(), ")"));
    const Eigen::Matrix3d q = j.origin_rotation;
    if ((q.transpose() * q - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-9 ||
        std::abs(q.determinant() - 1.0) > 1e-9)
      fail(cat("joint ", i, ": origin_rotation must be a rotation matrix"));
    if (!(j.lower < j.upper)) fail(cat("joint ", i, ": limit lower must be < upper"));
  }
  if (model.keypoint_count() < 4)
    fail(cat("need at least 4 keypoints, got ", model.keypoint_count()));
  const auto check_points = [&](const std::vector<PointAttachment>& pts, const char* what) {
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (pts[i].link_index < 0 || pts[i].link_index > n)
        fail(cat(what, " ", i, ": link index ", pts[i].link_index, " outside [0, ", n, "]"));
      if (!pts[i].offset.allFinite()) fail(cat(what, " ", i, ": non-finite offset"));
    }
  };
  check_points(model.keypoints, "keypoint");
  check_points(model.surface_points, "surface_point");
  if (model.surface_points.empty()) fail("robot needs at least one surface_point");
}

std::uint64_t model_hash(const RobotModel& model) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  const auto mix_double = [&h](double v) { h = fnv1a64(&v, sizeof(v), h); };
  const auto mix_int = [&h](std::int64_t v) { h = fnv1a64(&v, sizeof(v), h); };
  mix_int(model.dof());
  for (const Joint& j : model.joints) {
    for (int i = 0; i < 3; ++i) mix_double(j.axis(i));
    for (int i = 0; i < 3; ++i) mix_double(j.origin_translation(i));
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) mix_double(j.origin_rotation(r, c));
    mix_double(j.lower);
    mix_double(j.upper);
  }
  const auto mix_points = [&](const std::vector<PointAttachment>& pts) {
    mix_int(static_cast<std::int64_t>(pts.size()));
    for (const PointAttachment& a : pts) {
      mix_int(a.link_index);
      for (int i = 0; i < 3; ++i) mix_double(a.offset(i));
    }
  };
  mix_points(model.keypoints);
  mix_points(model.surface_points);
  return h;
}

// ---------------- plain forward kinematics ----------------

std::vector<Frame> forward_kinematics(const RobotModel& model, const Eigen::VectorXd& p) {
  if (p.size() != model.dof())
    throw DomainError(cat("forward_kinematics: expected ", model.dof(), " joint values, got ",
                          p.size()));
  std::vector<Frame> frames(static_cast<std::size_t>(model.dof()) + 1);
  for (int i = 1; i <= model.dof(); ++i) {
    const Joint& j = model.joints[static_cast<std::size_t>(i - 1)];
    const Frame& prev = frames[static_cast<std::size_t>(i - 1)];
    const Eigen::Matrix3d rot = axis_angle_rotation<double>(j.axis, p(i - 1));
    Frame& f = frames[static_cast<std::size_t>(i)];
    f.rotation = prev.rotation * rot * j.origin_rotation;
    f.translation = prev.translation + prev.rotation * (rot * j.origin_translation);
  }
  return frames;
}

Eigen::MatrixXd attachment_points_base(const RobotModel& model,
                                       const std::vector<PointAttachment>& points,
                                       const Eigen::VectorXd& p) {
  const std::vector<Frame> frames = forward_kinematics(model, p);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(points.size()), 3);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Frame& f = frames[static_cast<std::size_t>(points[i].link_index)];
    out.row(static_cast<Eigen::Index>(i)) =
        (f.rotation * points[i].offset + f.translation).transpose();
  }
  return out;
}

Eigen::MatrixXd keypoints_from_config(const RobotModel& model, const Eigen::VectorXd& p,
                                      const Eigen::Matrix3d& r, const Eigen::Vector3d& t) {
  Eigen::MatrixXd base = attachment_points_base(model, model.keypoints, p);
  return (base * r.transpose()).rowwise() + t.transpose();
}

Eigen::MatrixXd surface_cloud_from_config(const RobotModel& model, const Eigen::VectorXd& p,
                                          const Eigen::Matrix3d& r, const Eigen::Vector3d& t) {
  Eigen::MatrixXd base = attachment_points_base(model, model.surface_points, p);
  return (base * r.transpose()).rowwise() + t.transpose();
}

// ---------------- tape forward kinematics ----------------

std::vector<FrameValue> fk_frames(ad::Tape& tape, const RobotModel& model, ad::Value p) {
  if (p.rows() != model.dof() || p.cols() != 1)
    throw DomainError(cat("fk_frames: joint vector must be ", model.dof(), "x1, got ", p.rows(),
                          "x", p.cols()));
  std::vector<FrameValue> frames;
  frames.reserve(static_cast<std::size_t>(model.dof()) + 1);
  frames.push_back(FrameValue{tape.constant(Eigen::Matrix3d::Identity(), "fk_base_R"),
                              tape.constant(Eigen::Vector3d::Zero(), "fk_base_t")});
  for (int i = 1; i <= model.dof(); ++i) {
    const Joint& j = model.joints[static_cast<std::size_t>(i - 1)];
    const Eigen::Matrix3d k = skew<double>(j.axis);
    // Rodrigues: R = I + sin(p) K + (1 - cos(p)) K^2, with constant K.
    ad::Value theta = ad::block(p, i - 1, 0, 1, 1);
    ad::Value rot = ad::add(
        ad::add(tape.constant(Eigen::Matrix3d::Identity()), ad::cmul(ad::sin(theta), tape.constant(k))),
        ad::cmul(ad::offset(ad::neg(ad::cos(theta)), 1.0), tape.constant(k * k)));
    const FrameValue& prev = frames.back();
    ad::Value prev_rot = ad::matmul(prev.rotation, rot);
    FrameValue f{ad::matmul(prev_rot, tape.constant(j.origin_rotation)),
                 ad::add(prev.translation, ad::matmul(prev_rot, tape.constant(j.origin_translation)))};
    frames.push_back(f);
  }
  return frames;
}

ad::Value transform_points(ad::Value points, ad::Value r, ad::Value t) {
  return ad::broadcast_add_row(ad::matmul(points, ad::transpose(r)), t);
}

ad::Value attachment_points_camera(ad::Tape& tape, const RobotModel& model,
                                   const std::vector<PointAttachment>& points, ad::Value p,
                                   ad::Value r, ad::Value t) {
  if (points.empty()) throw DomainError("attachment_points_camera: no attachment points");
  const std::vector<FrameValue> frames = fk_frames(tape, model, p);

  // Group points by link so each link contributes one batched transform, then
  // restore declaration order.
  std::map<int, std::vector<int>> by_link;
  for (std::size_t i = 0; i < points.size(); ++i)
    by_link[points[i].link_index].push_back(static_cast<int>(i));

  std::vector<ad::Value> parts;
  std::vector<int> grouped_order;
  for (const auto& [link, idxs] : by_link) {
    Eigen::MatrixXd offsets(static_cast<Eigen::Index>(idxs.size()), 3);
    for (std::size_t k = 0; k < idxs.size(); ++k)
      offsets.row(static_cast<Eigen::Index>(k)) = points[static_cast<std::size_t>(idxs[k])].offset.transpose();
    const FrameValue& f = frames[static_cast<std::size_t>(link)];
    parts.push_back(transform_points(tape.constant(offsets, "link_offsets"), f.rotation,
                                     f.translation));
    grouped_order.insert(grouped_order.end(), idxs.begin(), idxs.end());
  }
  ad::Value base = parts.size() == 1 ? parts[0] : ad::concat_rows(parts);

  // Invert the grouping permutation if it is not the identity.
  bool identity = true;
  for (std::size_t i = 0; i < grouped_order.size(); ++i)
    identity = identity && grouped_order[i] == static_cast<int>(i);
  if (!identity) {
    std::vector<int> inverse(grouped_order.size());
    for (std::size_t pos = 0; pos < grouped_order.size(); ++pos)
      inverse[static_cast<std::size_t>(grouped_order[pos])] = static_cast<int>(pos);
    base = ad::gather_rows(base, inverse);
  }
  return transform_points(base, r, t);
}

}  // namespace rtag
