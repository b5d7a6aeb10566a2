// src/camera.cpp
#include "rtag/camera.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "rtag/common.hpp"

namespace rtag {

using Eigen::MatrixXd;
using Eigen::VectorXd;

void validate_intrinsics(const Intrinsics& k) {
  if (!(k.fx > 0.0) || !(k.fy > 0.0))
    throw DomainError(cat("intrinsics: focal lengths must be positive, got fx=", k.fx, " fy=", k.fy));
  if (k.width <= 0 || k.height <= 0)
    throw DomainError(cat("intrinsics: image size must be positive, got ", k.width, "x", k.height));
  if (!(k.cx >= 0.0 && k.cx < k.width) || !(k.cy >= 0.0 && k.cy < k.height))
    throw DomainError(cat("intrinsics: principal point (", k.cx, ", ", k.cy,
                          ") outside image ", k.width, "x", k.height));
}

std::vector<std::pair<int, int>> masked_pixels(const MaskGrid& mask) {
  std::vector<std::pair<int, int>> out;
  for (int y = 0; y < mask.rows(); ++y)
    for (int x = 0; x < mask.cols(); ++x)
      if (mask(y, x)) out.emplace_back(y, x);
  return out;
}

namespace {

// Fails loudly if any row is at or behind the z cutoff, naming the rows.
void check_in_front(const MatrixXd& points) {
  std::string bad;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    if (!(points(i, 2) > kZMin)) bad += (bad.empty() ? "" : ", ") + std::to_string(i);
  if (!bad.empty())
    throw DomainError(cat("project: points behind camera (z <= ", kZMin, ") at rows [", bad, "]"));
}

// Per-pixel unprojection coefficients ((ix-cx)/fx and (iy-cy)/fy).
void pixel_coefficients(const Intrinsics& k, const std::vector<std::pair<int, int>>& pixels,
                        VectorXd& xc, VectorXd& yc) {
  const auto n = static_cast<Eigen::Index>(pixels.size());
  xc.resize(n);
  yc.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    xc(i) = (pixels[static_cast<std::size_t>(i)].second - k.cx) / k.fx;
    yc(i) = (pixels[static_cast<std::size_t>(i)].first - k.cy) / k.fy;
  }
}

}  // namespace

// ---------------- plain geometry ----------------

DepthMap regulate_depth(const DepthMap& d, double lambda) {
  if (!(lambda > 0.0)) throw DomainError(cat("regulate_depth: lambda must be positive, got ", lambda));
  if (d.absolute) throw DomainError("regulate_depth: input map is already absolute");
  return DepthMap{lambda * d.values, true};
}

MatrixXd project(const MatrixXd& points, const Intrinsics& k) {
  if (points.cols() != 3)
    throw DomainError(cat("project: expected k x 3 points, got ", points.rows(), "x", points.cols()));
  check_in_front(points);
  MatrixXd out(points.rows(), 2);
  out.col(0) = k.fx * points.col(0).cwiseQuotient(points.col(2)).array() + k.cx;
  out.col(1) = k.fy * points.col(1).cwiseQuotient(points.col(2)).array() + k.cy;
  return out;
}

MatrixXd unproject(const DepthMap& d, const Intrinsics& k, const MaskGrid& mask) {
  if (!d.absolute) throw DomainError("unproject: depth map is relative; regulate it first");
  if (d.values.rows() != mask.rows() || d.values.cols() != mask.cols())
    throw DomainError(cat("unproject: depth ", d.values.rows(), "x", d.values.cols(), " vs mask ",
                          mask.rows(), "x", mask.cols()));
  const auto pixels = masked_pixels(mask);
  if (pixels.empty()) throw DomainError("unproject: mask selects no pixels");
  VectorXd xc, yc;
  pixel_coefficients(k, pixels, xc, yc);
  MatrixXd out(static_cast<Eigen::Index>(pixels.size()), 3);
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double depth = d.values(pixels[static_cast<std::size_t>(i)].first,
                                  pixels[static_cast<std::size_t>(i)].second);
    out(i, 0) = xc(i) * depth;
    out(i, 1) = yc(i) * depth;
    out(i, 2) = depth;
  }
  return out;
}

// ---------------- tape geometry ----------------

ad::Value regulate_depth(ad::Value d, ad::Value lambda) {
  if (lambda.rows() != 1 || lambda.cols() != 1)
    throw DomainError("regulate_depth: lambda must be a scalar value");
  if (!(lambda.scalar() > 0.0))
    throw DomainError(cat("regulate_depth: lambda must be positive, got ", lambda.scalar()));
  return ad::cmul(lambda, d);
}

ad::Value project(ad::Value points, const Intrinsics& k) {
  check_in_front(points.data());
  const int n = static_cast<int>(points.rows());
  ad::Value x = ad::block(points, 0, 0, n, 1);
  ad::Value y = ad::block(points, 0, 1, n, 1);
  ad::Value z = ad::block(points, 0, 2, n, 1);
  ad::Value u = ad::offset(ad::scale(ad::div(x, z), k.fx), k.cx);
  ad::Value v = ad::offset(ad::scale(ad::div(y, z), k.fy), k.cy);
  return ad::concat_cols({u, v});
}

ad::Value unproject(ad::Value dprime, const Intrinsics& k,
                    const std::vector<std::pair<int, int>>& pixels) {
  if (pixels.empty()) throw DomainError("unproject: mask selects no pixels");
  VectorXd xc, yc;
  pixel_coefficients(k, pixels, xc, yc);
  ad::Value depth = ad::gather_pixels(dprime, pixels);
  ad::Value x = ad::mul(depth, dprime.tape->constant(xc));
  ad::Value y = ad::mul(depth, dprime.tape->constant(yc));
  return ad::concat_cols({x, y, depth});
}

// ---------------- disk format ----------------

namespace {
constexpr char kDepthMagic[4] = {'R', 'T', 'D', 'M'};

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError(cat(path, ": truncated header"));
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}
}  // namespace

void save_depth_map(const std::string& path, const DepthMap& d) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError(cat("cannot open ", path, " for writing"));
  os.write(kDepthMagic, 4);
  write_u32(os, static_cast<std::uint32_t>(d.values.cols()));
  write_u32(os, static_cast<std::uint32_t>(d.values.rows()));
  const char flag = d.absolute ? 1 : 0;
  os.write(&flag, 1);
  for (Eigen::Index y = 0; y < d.values.rows(); ++y)
    for (Eigen::Index x = 0; x < d.values.cols(); ++x) {
      const float f = static_cast<float>(d.values(y, x));
      os.write(reinterpret_cast<const char*>(&f), sizeof(float));
    }
  if (!os) throw DataError(cat("short write to ", path));
}

DepthMap load_depth_map(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError(cat("cannot open ", path));
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kDepthMagic, 4) != 0)
    throw DataError(cat(path, ": not a depth map (bad magic)"));
  const std::uint32_t w = read_u32(is, path);
  const std::uint32_t h = read_u32(is, path);
  char flag = 0;
  if (!is.read(&flag, 1)) throw DataError(cat(path, ": truncated header"));
  DepthMap d;
  d.absolute = flag != 0;
  d.values.resize(h, w);
  for (std::uint32_t y = 0; y < h; ++y)
    for (std::uint32_t x = 0; x < w; ++x) {
      float f;
      if (!is.read(reinterpret_cast<char*>(&f), sizeof(float)))
        throw DataError(cat(path, ": truncated at pixel (", y, ", ", x, ")"));
      d.values(y, x) = f;
    }
  return d;
}

}  // namespace rtag
