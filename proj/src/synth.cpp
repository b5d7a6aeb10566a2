// src/synth.cpp
#include "rtag/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "rtag/common.hpp"

namespace rtag {

using Eigen::Matrix3d;
using Eigen::MatrixXd;
using Eigen::Vector3d;
using Eigen::VectorXd;

// ---------------- splits ----------------

const char* to_string(Split s) { return s == Split::in_dist ? "in_dist" : "ood"; }

Split parse_split(const std::string& name) {
  if (name == "in_dist") return Split::in_dist;
  if (name == "ood") return Split::ood;
  throw DataError(cat("unknown split '", name, "' (expected in_dist or ood)"));
}

ViewRanges view_ranges(Split split) {
  if (split == Split::in_dist) return ViewRanges{0.8, 1.2, 10.0, 60.0, 75.0, 105.0, 0.0};
  return ViewRanges{1.2, 2.0, 0.0, 80.0, 60.0, 120.0, kOodDepthNoiseSigma};
}

Intrinsics default_intrinsics() { return Intrinsics{42.0, 42.0, 31.5, 31.5, 64, 64}; }

Intrinsics intrinsics_for_size(int size) {
  if (size < 2) throw DomainError("intrinsics_for_size: size must be >= 2");
  const double f = 42.0 * size / 64.0;
  const double c = (size - 1) / 2.0;
  return Intrinsics{f, f, c, c, size, size};
}

// ---------------- sampling ----------------

VectorXd sample_joint_config(const RobotModel& model, Rng& rng) {
  VectorXd p(model.dof());
  for (int i = 0; i < model.dof(); ++i)
    p(i) = rng.uniform(model.joints[static_cast<std::size_t>(i)].lower,
                       model.joints[static_cast<std::size_t>(i)].upper);
  return p;
}

Vector3d workspace_centroid(const RobotModel& model) {
  VectorXd mid(model.dof());
  for (int i = 0; i < model.dof(); ++i)
    mid(i) = 0.5 * (model.joints[static_cast<std::size_t>(i)].lower +
                    model.joints[static_cast<std::size_t>(i)].upper);
  const MatrixXd kp =
      keypoints_from_config(model, mid, Matrix3d::Identity(), Vector3d::Zero());
  return kp.colwise().mean().transpose();
}

CameraPose look_at(const Vector3d& eye, const Vector3d& target) {
  const Vector3d forward = target - eye;
  if (forward.norm() < 1e-12) throw DomainError("look_at: eye coincides with target");
  const Vector3d zc = forward.normalized();
  Vector3d xc = zc.cross(Vector3d::UnitZ());
  if (xc.norm() < 1e-9) xc = zc.cross(Vector3d::UnitY());  // looking straight down/up
  xc.normalize();
  const Vector3d yc = zc.cross(xc);
  CameraPose pose;
  pose.rotation.row(0) = xc;
  pose.rotation.row(1) = yc;
  pose.rotation.row(2) = zc;
  pose.translation = -pose.rotation * eye;
  return pose;
}

bool keypoints_visible(const MatrixXd& kappa3, const Intrinsics& k) {
  for (Eigen::Index i = 0; i < kappa3.rows(); ++i) {
    const double z = kappa3(i, 2);
    if (!(z > kZMin)) return false;
    const double u = k.fx * kappa3(i, 0) / z + k.cx;
    const double v = k.fy * kappa3(i, 1) / z + k.cy;
    if (u < 0.0 || u > k.width - 1 || v < 0.0 || v > k.height - 1) return false;
  }
  return true;
}

// ---------------- rendering ----------------

namespace {

// Declared surface points in camera frame plus interpolated samples between
// consecutive declared points of the same link.
std::vector<Vector3d> densified_surface(const RobotModel& model, const MatrixXd& declared) {
  std::vector<Vector3d> samples;
  samples.reserve(static_cast<std::size_t>(declared.rows()) * 4);
  for (Eigen::Index i = 0; i < declared.rows(); ++i) samples.push_back(declared.row(i));
  for (Eigen::Index i = 0; i + 1 < declared.rows(); ++i) {
    if (model.surface_points[static_cast<std::size_t>(i)].link_index !=
        model.surface_points[static_cast<std::size_t>(i + 1)].link_index)
      continue;
    const Vector3d a = declared.row(i), b = declared.row(i + 1);
    const double len = (b - a).norm();
    const int steps = static_cast<int>(std::ceil(len / kDensifyStep));
    for (int j = 1; j < steps; ++j)
      samples.push_back(a + (static_cast<double>(j) / steps) * (b - a));
  }
  return samples;
}

}  // namespace

RenderResult render_depth(const RobotModel& model, const VectorXd& p, const Matrix3d& r,
                          const Vector3d& t, const Intrinsics& k) {
  validate_intrinsics(k);
  const MatrixXd declared = surface_cloud_from_config(model, p, r, t);

  RenderResult out;
  out.depth.values = MatrixXd::Zero(k.height, k.width);
  out.depth.absolute = true;
  out.mask = MaskGrid::Zero(k.height, k.width);
  MatrixXd zbuf = MatrixXd::Constant(k.height, k.width, std::numeric_limits<double>::infinity());
  std::vector<Vector3d> winner(static_cast<std::size_t>(k.height * k.width));

  for (const Vector3d& s : densified_surface(model, declared)) {
    const double z = s.z();
    if (!(z > kZMin)) continue;
    const long ix = std::lround(k.fx * s.x() / z + k.cx);
    const long iy = std::lround(k.fy * s.y() / z + k.cy);
    if (ix < 0 || ix >= k.width || iy < 0 || iy >= k.height) continue;
    if (z < zbuf(iy, ix)) {
      zbuf(iy, ix) = z;
      winner[static_cast<std::size_t>(iy * k.width + ix)] = s;
      out.mask(iy, ix) = 1;
    }
  }

  const auto pixels = masked_pixels(out.mask);
  if (pixels.empty())
    throw DomainError("render_depth: empty mask (robot is behind the camera or out of view)");
  out.winners.resize(static_cast<Eigen::Index>(pixels.size()), 3);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const auto [iy, ix] = pixels[i];
    out.depth.values(iy, ix) = zbuf(iy, ix);
    out.winners.row(static_cast<Eigen::Index>(i)) =
        winner[static_cast<std::size_t>(iy * k.width + ix)];
  }
  return out;
}

SceneImage make_scene_image(const DepthMap& depth, const MaskGrid& mask, double noise_sigma,
                            std::uint64_t noise_seed) {
  if (!depth.absolute) throw DomainError("make_scene_image: depth must be absolute");
  if (depth.values.rows() != mask.rows() || depth.values.cols() != mask.cols())
    throw DomainError("make_scene_image: depth and mask shapes differ");
  const Eigen::Index h = depth.values.rows(), w = depth.values.cols();
  SceneImage img;
  for (auto& ch : img.channels) ch = MatrixXd::Zero(h, w);
  Rng rng = Rng::derive(noise_seed, 0x6e6f697365ull);  // independent noise stream
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index x = 0; x < w; ++x) {
      if (mask(y, x) == 0) continue;
      double d = depth.values(y, x);
      if (noise_sigma > 0.0) d += rng.gaussian(0.0, noise_sigma);
      img.channels[SceneImage::kDepth](y, x) = d / kZFar;
      img.channels[SceneImage::kMask](y, x) = 1.0;
    }
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index x = 0; x < w; ++x) {
      img.channels[SceneImage::kCoordX](y, x) =
          w > 1 ? 2.0 * static_cast<double>(x) / static_cast<double>(w - 1) - 1.0 : 0.0;
      img.channels[SceneImage::kCoordY](y, x) =
          h > 1 ? 2.0 * static_cast<double>(y) / static_cast<double>(h - 1) - 1.0 : 0.0;
    }
  return img;
}

// ---------------- quantization bounds ----------------

namespace {

// Lateral offset between a pixel center and any point that rounds to it, at
// depth z: half a pixel in each axis.
double footprint(double z, const Intrinsics& k) {
  return 0.5 * z * std::sqrt(1.0 / (k.fx * k.fx) + 1.0 / (k.fy * k.fy));
}

double nearest_sq(const Vector3d& q, const MatrixXd& cloud) {
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < cloud.rows(); ++i)
    best = std::min(best, (q - cloud.row(i).transpose()).squaredNorm());
  return best;
}

}  // namespace

double quantization_bound_unproj_to_cloud(const RenderResult& rr, const MatrixXd& cloud,
                                          const Intrinsics& k) {
  // Each masked pixel unprojects within the pixel footprint of its winning
  // sample; the winner's own distance to the cloud is measured directly.
  double worst = 0.0;
  for (Eigen::Index i = 0; i < rr.winners.rows(); ++i) {
    const Vector3d s = rr.winners.row(i);
    const double d = footprint(s.z(), k) + std::sqrt(nearest_sq(s, cloud));
    worst = std::max(worst, d * d);
  }
  return worst;
}

double quantization_bound_cloud_to_unproj(const RenderResult& rr, const MatrixXd& cloud,
                                          const Intrinsics& k) {
  // Each cloud point's own pixel is masked (the point was splatted); the
  // pixel's unprojection lies within a footprint of that pixel's winner.
  const auto pixels = masked_pixels(rr.mask);
  double worst = 0.0;
  for (Eigen::Index i = 0; i < cloud.rows(); ++i) {
    const Vector3d q = cloud.row(i);
    if (!(q.z() > kZMin)) return std::numeric_limits<double>::infinity();
    const long ix = std::lround(k.fx * q.x() / q.z() + k.cx);
    const long iy = std::lround(k.fy * q.y() / q.z() + k.cy);
    if (ix < 0 || ix >= k.width || iy < 0 || iy >= k.height || rr.mask(iy, ix) == 0)
      return std::numeric_limits<double>::infinity();
    // Locate the winner of that pixel in masked row-major order.
    const auto it = std::lower_bound(pixels.begin(), pixels.end(),
                                     std::make_pair(static_cast<int>(iy), static_cast<int>(ix)));
    const Vector3d s = rr.winners.row(static_cast<Eigen::Index>(it - pixels.begin()));
    const double d = (q - s).norm() + footprint(s.z(), k);
    worst = std::max(worst, d * d);
  }
  return worst;
}

// ---------------- scenes ----------------

Scene sample_scene(const RobotModel& model, std::uint64_t seed, Split split,
                   const Intrinsics& k) {
  validate_intrinsics(k);
  const ViewRanges vr = view_ranges(split);
  const Vector3d target = workspace_centroid(model);
  Rng rng = Rng::derive(seed, 0x7363656e65ull);  // scene stream

  Scene s;
  s.seed = seed;
  s.k = k;
  s.noise_sigma = vr.noise_sigma;
  s.noise_seed = Rng::derive(seed, 0x646570746e6full).bits();
  s.p = sample_joint_config(model, rng);

  bool accepted = false;
  for (int attempt = 0; attempt < 1000 && !accepted; ++attempt) {
    const double radius = rng.uniform(vr.radius_lo, vr.radius_hi);
    const double elev = rng.uniform(vr.elev_lo_deg, vr.elev_hi_deg) * M_PI / 180.0;
    const double azim = rng.uniform(vr.azim_lo_deg, vr.azim_hi_deg) * M_PI / 180.0;
    const Vector3d eye =
        target + radius * Vector3d(std::cos(elev) * std::cos(azim),
                                   std::cos(elev) * std::sin(azim), std::sin(elev));
    const CameraPose pose = look_at(eye, target);
    const MatrixXd kappa3 = keypoints_from_config(model, s.p, pose.rotation, pose.translation);
    if (!keypoints_visible(kappa3, k)) continue;
    s.r = pose.rotation;
    s.t = pose.translation;
    s.kappa3 = kappa3;
    accepted = true;
  }
  if (!accepted)
    throw DataError(cat("sample_scene: 1000 consecutive camera rejections for seed ", seed,
                        "; the view ranges cannot see the arm"));

  s.kappa2 = project(s.kappa3, k);
  s.pts_fk = surface_cloud_from_config(model, s.p, s.r, s.t);
  RenderResult rr = render_depth(model, s.p, s.r, s.t, k);
  s.depth = std::move(rr.depth);
  s.mask = std::move(rr.mask);
  s.image = make_scene_image(s.depth, s.mask, s.noise_sigma, s.noise_seed);
  return s;
}

Scene sample_scene(const RobotModel& model, std::uint64_t seed, Split split) {
  return sample_scene(model, seed, split, default_intrinsics());
}

std::vector<Scene> generate_split(const RobotModel& model, Split split, int count,
                                  std::uint64_t seed, const Intrinsics& k) {
  if (count < 0) throw DomainError("generate_split: count must be nonnegative");
  std::vector<Scene> scenes;
  scenes.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    scenes.push_back(
        sample_scene(model, Rng::derive(seed, 0x73706c6974ull, static_cast<std::uint64_t>(i)).bits(),
                     split, k));
  return scenes;
}

// ---------------- dataset persistence ----------------

namespace {

constexpr char kRecordMagic[4] = {'R', 'T', 'S', 'C'};

void put_bytes(std::string& buf, const void* data, std::size_t n) {
  buf.append(static_cast<const char*>(data), n);
}

void put_u32(std::string& buf, std::uint32_t v) { put_bytes(buf, &v, 4); }
void put_u64(std::string& buf, std::uint64_t v) { put_bytes(buf, &v, 8); }
void put_f64(std::string& buf, double v) { put_bytes(buf, &v, 8); }

void put_matrix(std::string& buf, const MatrixXd& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) put_f64(buf, m(i, j));
}

class Reader {
 public:
  Reader(std::string bytes, std::string origin)
      : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

  void raw(void* out, std::size_t n) {
    if (pos_ + n > bytes_.size()) throw DataError(cat(origin_, ": truncated record"));
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    raw(&v, 8);
    return v;
  }
  double f64() {
    double v;
    raw(&v, 8);
    return v;
  }
  MatrixXd matrix(Eigen::Index rows, Eigen::Index cols) {
    MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = f64();
    return m;
  }
  std::size_t pos() const { return pos_; }
  const std::string& bytes() const { return bytes_; }
  const std::string& origin() const { return origin_; }

 private:
  std::string bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

std::string record_path(const std::string& dir, int index) {
  std::ostringstream os;
  os << dir << "/scene_" << std::setw(5) << std::setfill('0') << index << ".bin";
  return os.str();
}

std::string encode_record(const Scene& s, int index) {
  std::string buf;
  put_bytes(buf, kRecordMagic, 4);
  put_u32(buf, static_cast<std::uint32_t>(index));
  put_u64(buf, s.seed);
  put_u64(buf, s.noise_seed);
  put_f64(buf, s.noise_sigma);
  put_u32(buf, static_cast<std::uint32_t>(s.p.size()));
  put_u32(buf, static_cast<std::uint32_t>(s.kappa3.rows()));
  put_u32(buf, static_cast<std::uint32_t>(s.pts_fk.rows()));
  put_u32(buf, static_cast<std::uint32_t>(s.depth.values.rows()));
  put_u32(buf, static_cast<std::uint32_t>(s.depth.values.cols()));
  put_f64(buf, s.k.fx);
  put_f64(buf, s.k.fy);
  put_f64(buf, s.k.cx);
  put_f64(buf, s.k.cy);
  put_matrix(buf, s.p);
  put_matrix(buf, s.r);
  put_matrix(buf, s.t);
  put_matrix(buf, s.kappa2);
  put_matrix(buf, s.kappa3);
  put_matrix(buf, s.pts_fk);
  put_matrix(buf, s.depth.values);
  for (Eigen::Index y = 0; y < s.mask.rows(); ++y)
    for (Eigen::Index x = 0; x < s.mask.cols(); ++x)
      buf.push_back(static_cast<char>(s.mask(y, x)));
  put_u64(buf, fnv1a64(buf.data(), buf.size()));
  return buf;
}

Scene decode_record(Reader& rd, int expect_index) {
  // Checksum first: everything but the trailing 8 bytes must hash to them.
  if (rd.bytes().size() < 12) throw DataError(cat(rd.origin(), ": truncated record"));
  std::uint64_t stored;
  std::memcpy(&stored, rd.bytes().data() + rd.bytes().size() - 8, 8);
  if (fnv1a64(rd.bytes().data(), rd.bytes().size() - 8) != stored)
    throw DataError(cat(rd.origin(), ": checksum mismatch (corrupt record)"));

  char magic[4];
  rd.raw(magic, 4);
  if (std::memcmp(magic, kRecordMagic, 4) != 0)
    throw DataError(cat(rd.origin(), ": bad record magic"));
  const std::uint32_t index = rd.u32();
  if (index != static_cast<std::uint32_t>(expect_index))
    throw DataError(cat(rd.origin(), ": record index ", index, ", expected ", expect_index));

  Scene s;
  s.seed = rd.u64();
  s.noise_seed = rd.u64();
  s.noise_sigma = rd.f64();
  const Eigen::Index n = rd.u32(), m = rd.u32(), sc = rd.u32(), h = rd.u32(), w = rd.u32();
  s.k.fx = rd.f64();
  s.k.fy = rd.f64();
  s.k.cx = rd.f64();
  s.k.cy = rd.f64();
  s.k.width = static_cast<int>(w);
  s.k.height = static_cast<int>(h);
  s.p = rd.matrix(n, 1);
  s.r = rd.matrix(3, 3);
  s.t = rd.matrix(3, 1);
  s.kappa2 = rd.matrix(m, 2);
  s.kappa3 = rd.matrix(m, 3);
  s.pts_fk = rd.matrix(sc, 3);
  s.depth.values = rd.matrix(h, w);
  s.depth.absolute = true;
  s.mask.resize(h, w);
  for (Eigen::Index y = 0; y < h; ++y)
    for (Eigen::Index x = 0; x < w; ++x) {
      char b;
      rd.raw(&b, 1);
      s.mask(y, x) = static_cast<std::uint8_t>(b);
    }
  s.image = make_scene_image(s.depth, s.mask, s.noise_sigma, s.noise_seed);
  return s;
}

}  // namespace

void write_dataset(const std::string& dir, const DatasetMeta& meta,
                   const std::vector<Scene>& scenes) {
  if (meta.count != static_cast<int>(scenes.size()))
    throw DomainError(cat("write_dataset: manifest count ", meta.count, " != ", scenes.size(),
                          " scenes"));
  std::filesystem::create_directories(dir);
  {
    std::ofstream mf(dir + "/manifest");
    if (!mf) throw DataError(cat("write_dataset: cannot write ", dir, "/manifest"));
    mf << "rtag_dataset 1\n";
    mf << "split " << to_string(meta.split) << "\n";
    mf << "seed " << meta.seed << "\n";
    mf << "model_hash " << std::hex << meta.model_hash << std::dec << "\n";
    mf << "count " << meta.count << "\n";
    mf << "image_size " << meta.image_size << "\n";
    char sigma[64];
    std::snprintf(sigma, sizeof sigma, "%.17g", meta.noise_sigma);
    mf << "noise_sigma " << sigma << "\n";
  }
  for (int i = 0; i < meta.count; ++i) {
    const std::string path = record_path(dir, i);
    std::ofstream rf(path, std::ios::binary | std::ios::trunc);
    if (!rf) throw DataError(cat("write_dataset: cannot write ", path));
    const std::string bytes = encode_record(scenes[static_cast<std::size_t>(i)], i);
    rf.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
}

Dataset read_dataset(const std::string& dir, const RobotModel& model) {
  std::ifstream mf(dir + "/manifest");
  if (!mf) throw DataError(cat("read_dataset: no manifest in ", dir));
  Dataset ds;
  std::string key;
  int version = 0;
  mf >> key >> version;
  if (key != "rtag_dataset" || version != 1)
    throw DataError(cat("read_dataset: ", dir, "/manifest is not a version-1 dataset manifest"));
  while (mf >> key) {
    if (key == "split") {
      std::string v;
      mf >> v;
      ds.meta.split = parse_split(v);
    } else if (key == "seed") {
      mf >> ds.meta.seed;
    } else if (key == "model_hash") {
      mf >> std::hex >> ds.meta.model_hash >> std::dec;
    } else if (key == "count") {
      mf >> ds.meta.count;
    } else if (key == "image_size") {
      mf >> ds.meta.image_size;
    } else if (key == "noise_sigma") {
      mf >> ds.meta.noise_sigma;
    } else {
      throw DataError(cat("read_dataset: unknown manifest key '", key, "'"));
    }
  }
  if (ds.meta.model_hash != model_hash(model))
    throw DataError(cat("read_dataset: ", dir, " was generated from a different robot model ",
                        "(stale dataset; regenerate it)"));
  if (ds.meta.count < 0) throw DataError("read_dataset: negative record count");

  ds.scenes.reserve(static_cast<std::size_t>(ds.meta.count));
  for (int i = 0; i < ds.meta.count; ++i) {
    const std::string path = record_path(dir, i);
    std::ifstream rf(path, std::ios::binary);
    if (!rf) throw DataError(cat("read_dataset: missing record ", path));
    std::ostringstream os;
    os << rf.rdbuf();
    Reader rd(os.str(), cat(dir, " record ", i));
    ds.scenes.push_back(decode_record(rd, i));
    const Scene& s = ds.scenes.back();
    if (s.p.size() != model.dof() || s.kappa3.rows() != model.keypoint_count() ||
        s.pts_fk.rows() != model.surface_count())
      throw DataError(cat(dir, " record ", i, ": shape does not match the robot model"));
  }
  return ds;
}

// ---------------- statistical oracle ----------------

double chi_square_uniform_stat(const std::vector<double>& samples, double lo, double hi,
                               int bins) {
  if (bins < 2) throw DomainError("chi_square_uniform_stat: need at least 2 bins");
  if (!(hi > lo)) throw DomainError("chi_square_uniform_stat: empty interval");
  const double expected = static_cast<double>(samples.size()) / bins;
  if (expected <= 0.0) throw DomainError("chi_square_uniform_stat: no samples");
  std::vector<double> observed(static_cast<std::size_t>(bins), 0.0);
  for (double x : samples) {
    if (x < lo || x >= hi)
      throw DomainError(cat("chi_square_uniform_stat: sample ", x, " outside [", lo, ", ", hi,
                            ")"));
    const int b = std::min(bins - 1, static_cast<int>((x - lo) / (hi - lo) * bins));
    observed[static_cast<std::size_t>(b)] += 1.0;
  }
  double stat = 0.0;
  for (double o : observed) stat += (o - expected) * (o - expected) / expected;
  return stat;
}

}  // namespace rtag
