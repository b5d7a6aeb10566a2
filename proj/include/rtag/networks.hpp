// include/rtag/networks.hpp
//
// Toy trainable networks: the 2D feature backbone, the 3D relative-depth
// backbone, and the per-quantity prediction heads.  All parameters live in a
// named ParamSet so optimizers and checkpoints see one flat tensor list.
#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "rtag/camera.hpp"
#include "rtag/kinematics.hpp"
#include "rtag/tape.hpp"

namespace rtag {

using ad::Tensor;

// ---------------- scene image ----------------

// Synthetic stand-in for an RGB frame: a normalized depth channel, the
// silhouette mask, and two coordinate grids in [-1, 1].
struct SceneImage {
  static constexpr int kChannels = 4;
  enum Channel { kDepth = 0, kMask = 1, kCoordX = 2, kCoordY = 3 };

  std::array<Eigen::MatrixXd, kChannels> channels;

  int height() const { return static_cast<int>(channels[0].rows()); }
  int width() const { return static_cast<int>(channels[0].cols()); }
};

// Throws DomainError on shape mismatch, non-finite values, or coordinate
// channels outside [-1, 1].
void validate_scene_image(const SceneImage& image, int height, int width);

// ---------------- parameter set ----------------

// Ordered collection of named tensors with stable addresses.
class ParamSet {
 public:
  Tensor& add(const std::string& name, int rows, int cols);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const;

  const std::vector<std::unique_ptr<Tensor>>& all() const { return tensors_; }
  std::size_t tensor_count() const { return tensors_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::unique_ptr<Tensor>> tensors_;
};

// Checkpoint container: header of (name, rows, cols) entries, then the values
// of every tensor in order as 64-bit little-endian doubles.  Loading requires
// the exact same names and shapes.
void save_checkpoint(const std::string& path, const ParamSet& params);
void load_checkpoint(const std::string& path, ParamSet& params);

// ---------------- networks ----------------

struct NetConfig {
  int image_size = 64;
  int feature_dim = 128;  // output of the 2D backbone
  int hidden = 256;       // hidden width of every head
  int conv_channels = 8;  // 3D backbone intermediate channels
  int pool_2d = 4;        // 2D backbone pooling factor
  int pool_3d = 8;        // pooling factor applied to D' before the 3D heads
};

// All predictions of the 2D branch heads.
struct Heads2dOut {
  ad::Value p;       // n x 1 joint vector
  ad::Value r;       // 3 x 3 rotation (orthonormalized)
  ad::Value t;       // 3 x 1 translation
  ad::Value kappa2;  // m x 2 pixel keypoints
  ad::Value kappa3;  // m x 3 camera-frame keypoints
  ad::Value lambda;  // 1 x 1 positive depth regulator
};

struct Heads3dOut {
  ad::Value p;       // n x 1
  ad::Value kappa3;  // m x 3
};

// Owns every trainable tensor; forward functions below bind them onto the
// caller's tape, so gradients accumulate across samples until zero_grad().
struct Networks {
  NetConfig cfg;
  int dof = 0;
  int keypoints = 0;
  ParamSet params;
};

// Fresh parameters, deterministic in `seed`.  Head biases start at neutral
// predictions: identity rotation, translation on the optical axis at 1.2 m,
// keypoints at the principal point, lambda at 1.
Networks make_networks(const RobotModel& model, const Intrinsics& k, const NetConfig& cfg,
                       std::uint64_t seed);

// f = pooled image pushed through two tanh affine layers (feature_dim x 1).
ad::Value backbone_2d(ad::Tape& tape, Networks& nets, const SceneImage& image);

// Relative depth map: two 3x3 convolution layers (tanh, then softplus)
// normalized so the median pixel is exactly 1.
ad::Value backbone_3d(ad::Tape& tape, Networks& nets, const SceneImage& image);

Heads2dOut heads_2d(ad::Tape& tape, Networks& nets, ad::Value f);

// 3D-branch heads over pooled D' concatenated with flattened R and T.
Heads3dOut heads_3d(ad::Tape& tape, Networks& nets, ad::Value dprime, ad::Value r, ad::Value t);

// Reinterprets a (rows*cols) x 1 column as a rows x cols matrix in row-major
// order (differentiable; used to shape head outputs).
ad::Value reshape_rows(ad::Value v, int rows, int cols);

}  // namespace rtag
