// include/rtag/camera.hpp
//
// Pinhole camera geometry: projection, depth-map unprojection, and the
// relative-to-absolute depth regulator D' = lambda * D.
//
// Pixel coordinates are continuous with integer-centered pixels: column index
// ix corresponds to u = ix, row index iy to v = iy.  Projection maps a
// camera-frame point (x, y, z) to (fx*x/z + cx, fy*y/z + cy); unprojection of
// pixel (ix, iy) at depth d returns ((ix-cx)*d/fx, (iy-cy)*d/fy, d).
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "rtag/tape.hpp"

namespace rtag {

// Points closer than this to the image plane count as behind the camera.
inline constexpr double kZMin = 1e-4;

struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;
};

// Throws DomainError unless fx, fy > 0 and (cx, cy) lies inside the image.
void validate_intrinsics(const Intrinsics& k);

struct CameraPose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
};

// H x W grid of depths; `absolute` distinguishes metric maps from the
// scale-free maps produced by the 3D backbone.
struct DepthMap {
  Eigen::MatrixXd values;
  bool absolute = false;
};

using MaskGrid = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

// Masked pixel coordinates as (row, col) pairs in row-major scan order.
std::vector<std::pair<int, int>> masked_pixels(const MaskGrid& mask);

// ---------------- plain geometry ----------------

// D' = lambda * D.  Requires lambda > 0 and a relative input map.
DepthMap regulate_depth(const DepthMap& d, double lambda);

// k x 3 camera-frame rows -> k x 2 pixel rows.  Rows with z <= kZMin raise
// DomainError naming every offending row index.
Eigen::MatrixXd project(const Eigen::MatrixXd& points, const Intrinsics& k);

// Camera-frame cloud (k x 3) of the masked pixels of an absolute depth map,
// rows in mask scan order.  An empty mask raises DomainError.
Eigen::MatrixXd unproject(const DepthMap& d, const Intrinsics& k, const MaskGrid& mask);

// ---------------- tape geometry ----------------

// Same operations as composites over tape primitives; shapes as above.
ad::Value regulate_depth(ad::Value d, ad::Value lambda);
ad::Value project(ad::Value points, const Intrinsics& k);
ad::Value unproject(ad::Value dprime, const Intrinsics& k,
                    const std::vector<std::pair<int, int>>& pixels);

// ---------------- disk format ----------------
//
// Header: magic "RTDM", uint32 width, uint32 height, uint8 absolute flag;
// then height*width row-major float32 values.  All little-endian.
void save_depth_map(const std::string& path, const DepthMap& d);
DepthMap load_depth_map(const std::string& path);

}  // namespace rtag
