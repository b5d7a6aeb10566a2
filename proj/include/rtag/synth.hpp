// include/rtag/synth.hpp
//
// Synthetic scene generation and the ground-truth oracle: joint/camera
// sampling on a view sphere, z-buffer depth rendering of the arm's surface
// samples, scene-image derivation, dataset persistence with checksums, and
// the rendering-quantization bounds used to judge the Chamfer terms.
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "rtag/camera.hpp"
#include "rtag/kinematics.hpp"
#include "rtag/networks.hpp"
#include "rtag/rng.hpp"

namespace rtag {

// Far plane used to normalize the scene-image depth channel; all sampled
// views keep the arm well inside it.
inline constexpr double kZFar = 3.0;
// Surface samples are densified along each link at this spacing (meters)
// before splatting, bounding the gap between rendered and declared points.
inline constexpr double kDensifyStep = 0.01;
// Depth-channel noise applied to the out-of-distribution split (meters).
inline constexpr double kOodDepthNoiseSigma = 0.01;

// ---------------- splits and view sampling ----------------

enum class Split { in_dist, ood };

const char* to_string(Split s);
Split parse_split(const std::string& name);  // "in_dist" | "ood"

// Camera placement ranges; the two splits are disjoint in radius.  Azimuth
// stays in a band about the +y side so the toy networks face a consistent
// viewing side; the ood band is wider.
struct ViewRanges {
  double radius_lo = 0.0;
  double radius_hi = 0.0;  // in_dist [0.8, 1.2), ood [1.2, 2.0)
  double elev_lo_deg = 0.0;
  double elev_hi_deg = 0.0;  // in_dist [10, 60), ood [0, 80)
  double azim_lo_deg = 0.0;
  double azim_hi_deg = 0.0;  // in_dist [60, 120), ood [45, 135)
  double noise_sigma = 0.0;  // depth-channel noise, ood only
};

ViewRanges view_ranges(Split split);

// 64x64 with fx = fy = 42 and the principal point at the image center.
Intrinsics default_intrinsics();

// The default intrinsics rescaled to a square size x size image: focal
// length proportional to size, principal point at the center.
Intrinsics intrinsics_for_size(int size);

// One uniform draw per joint within its limits.
Eigen::VectorXd sample_joint_config(const RobotModel& model, Rng& rng);

// Mean keypoint position (base frame) at the mid-limit configuration; the
// look-at target of every sampled camera.
Eigen::Vector3d workspace_centroid(const RobotModel& model);

// Rotation/translation with x_cam = R x_base + T, the camera at `eye`, and
// the optical axis through `target`.
CameraPose look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target);

// True if every keypoint is in front of the camera and its pixel center lies
// inside the image.
bool keypoints_visible(const Eigen::MatrixXd& kappa3, const Intrinsics& k);

// ---------------- rendering ----------------

struct RenderResult {
  DepthMap depth;  // absolute; zero outside the mask
  MaskGrid mask;
  // Camera-frame surface sample that won each masked pixel, in the row-major
  // masked-pixel order of masked_pixels(mask); the oracle for the bounds.
  Eigen::MatrixXd winners;
};

// Splats the declared-plus-densified surface samples into a z-buffer
// (nearest z wins, one pixel per sample).  Throws DomainError when nothing
// lands in the image.
RenderResult render_depth(const RobotModel& model, const Eigen::VectorXd& p,
                          const Eigen::Matrix3d& r, const Eigen::Vector3d& t,
                          const Intrinsics& k);

// Channels: masked depth / kZFar (plus optional gaussian noise on masked
// pixels), the 0/1 mask, and x/y coordinate grids over [-1, 1].
SceneImage make_scene_image(const DepthMap& depth, const MaskGrid& mask, double noise_sigma,
                            std::uint64_t noise_seed);

// Upper bounds (squared meters) on the two Chamfer directions between the
// unprojected rendered depth and a camera-frame point cloud, derived from the
// renderer's own pixel-winner assignment and the pixel footprint at depth.
double quantization_bound_unproj_to_cloud(const RenderResult& rr, const Eigen::MatrixXd& cloud,
                                          const Intrinsics& k);
double quantization_bound_cloud_to_unproj(const RenderResult& rr, const Eigen::MatrixXd& cloud,
                                          const Intrinsics& k);

// ---------------- scenes ----------------

struct Scene {
  std::uint64_t seed = 0;
  Eigen::VectorXd p;        // ground-truth joints
  Eigen::Matrix3d r;        // camera rotation, x_cam = R x_base + T
  Eigen::Vector3d t;        // camera translation
  Intrinsics k;
  DepthMap depth;           // exact rendered depth (absolute)
  MaskGrid mask;
  Eigen::MatrixXd kappa2;   // m x 2 = project(kappa3)
  Eigen::MatrixXd kappa3;   // m x 3 camera-frame keypoints
  Eigen::MatrixXd pts_fk;   // s x 3 camera-frame declared surface cloud
  SceneImage image;         // derived network input (noisy for ood)
  std::uint64_t noise_seed = 0;
  double noise_sigma = 0.0;
};

// Deterministic in (model, seed, split, k).  The joint configuration is drawn
// once; only the camera is rejection-resampled until every keypoint is
// visible, so accepted joints stay uniform.  Throws DataError after 1000
// consecutive camera rejections.
Scene sample_scene(const RobotModel& model, std::uint64_t seed, Split split, const Intrinsics& k);
Scene sample_scene(const RobotModel& model, std::uint64_t seed, Split split);

// Scenes for indices [0, count) with per-index seeds derived from `seed`.
std::vector<Scene> generate_split(const RobotModel& model, Split split, int count,
                                  std::uint64_t seed, const Intrinsics& k = default_intrinsics());

// ---------------- datasets ----------------

struct DatasetMeta {
  Split split = Split::in_dist;
  std::uint64_t seed = 0;
  std::uint64_t model_hash = 0;
  int count = 0;
  int image_size = 0;
  double noise_sigma = 0.0;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<Scene> scenes;
};

// Directory layout: `manifest` (text) plus scene_NNNNN.bin records
// (little-endian, trailing fnv1a64 checksum; layout in docs/formats.md).
void write_dataset(const std::string& dir, const DatasetMeta& meta,
                   const std::vector<Scene>& scenes);

// Verifies the manifest against `model` (stale-model hash mismatch raises
// DataError) and every record checksum (naming the failing index).
Dataset read_dataset(const std::string& dir, const RobotModel& model);

// ---------------- statistical oracle ----------------

// Chi-square statistic of `samples` against the uniform distribution on
// [lo, hi) with equal-width bins (expected count per bin must be positive).
double chi_square_uniform_stat(const std::vector<double>& samples, double lo, double hi,
                               int bins);

}  // namespace rtag
