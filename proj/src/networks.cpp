// src/networks.cpp
#include "rtag/networks.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "rtag/common.hpp"
#include "rtag/rng.hpp"

namespace rtag {

using Eigen::MatrixXd;

// ---------------- scene image ----------------

void validate_scene_image(const SceneImage& image, int height, int width) {
  for (int c = 0; c < SceneImage::kChannels; ++c) {
    const MatrixXd& ch = image.channels[static_cast<std::size_t>(c)];
    if (ch.rows() != height || ch.cols() != width)
      throw DomainError(cat("scene image channel ", c, ": expected ", height, "x", width, ", got ",
                            ch.rows(), "x", ch.cols()));
    if (!ch.allFinite()) throw DomainError(cat("scene image channel ", c, " has non-finite values"));
  }
  for (int c : {SceneImage::kCoordX, SceneImage::kCoordY}) {
    const MatrixXd& ch = image.channels[static_cast<std::size_t>(c)];
    if (ch.size() > 0 && (ch.minCoeff() < -1.0 || ch.maxCoeff() > 1.0))
      throw DomainError(cat("scene image coordinate channel ", c, " leaves [-1, 1]"));
  }
}

// ---------------- parameter set ----------------

Tensor& ParamSet::add(const std::string& name, int rows, int cols) {
  if (has(name)) throw DomainError(cat("duplicate parameter name '", name, "'"));
  tensors_.push_back(std::make_unique<Tensor>(name, MatrixXd::Zero(rows, cols)));
  return *tensors_.back();
}

Tensor& ParamSet::at(const std::string& name) {
  for (auto& t : tensors_)
    if (t->name == name) return *t;
  throw DomainError(cat("no parameter named '", name, "'"));
}

const Tensor& ParamSet::at(const std::string& name) const {
  for (const auto& t : tensors_)
    if (t->name == name) return *t;
  throw DomainError(cat("no parameter named '", name, "'"));
}

bool ParamSet::has(const std::string& name) const {
  for (const auto& t : tensors_)
    if (t->name == name) return true;
  return false;
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += static_cast<std::size_t>(t->value.size());
  return n;
}

void ParamSet::zero_grad() {
  for (auto& t : tensors_) t->zero_grad();
}

// ---------------- checkpoint io ----------------

namespace {

constexpr char kCheckpointMagic[4] = {'R', 'T', 'C', 'P'};

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError(cat(path, ": truncated"));
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

void write_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

double read_f64(std::istream& is, const std::string& path) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw DataError(cat(path, ": truncated"));
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamSet& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError(cat("cannot open ", path, " for writing"));
  os.write(kCheckpointMagic, 4);
  write_u32(os, static_cast<std::uint32_t>(params.tensor_count()));
  for (const auto& t : params.all()) {
    write_u32(os, static_cast<std::uint32_t>(t->name.size()));
    os.write(t->name.data(), static_cast<std::streamsize>(t->name.size()));
    write_u32(os, static_cast<std::uint32_t>(t->value.rows()));
    write_u32(os, static_cast<std::uint32_t>(t->value.cols()));
  }
  for (const auto& t : params.all())
    for (Eigen::Index r = 0; r < t->value.rows(); ++r)
      for (Eigen::Index c = 0; c < t->value.cols(); ++c) write_f64(os, t->value(r, c));
  if (!os) throw DataError(cat("short write to ", path));
}

void load_checkpoint(const std::string& path, ParamSet& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError(cat("cannot open ", path));
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw DataError(cat(path, ": not a checkpoint (bad magic)"));
  const std::uint32_t count = read_u32(is, path);
  if (count != params.tensor_count())
    throw DataError(cat(path, ": holds ", count, " tensors, architecture has ",
                        params.tensor_count()));
  for (const auto& t : params.all()) {
    const std::uint32_t name_len = read_u32(is, path);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name_len)))
      throw DataError(cat(path, ": truncated"));
    const auto rows = static_cast<Eigen::Index>(read_u32(is, path));
    const auto cols = static_cast<Eigen::Index>(read_u32(is, path));
    if (name != t->name || rows != t->value.rows() || cols != t->value.cols())
      throw DataError(cat(path, ": tensor '", name, "' (", rows, "x", cols,
                          ") does not match architecture tensor '", t->name, "' (",
                          t->value.rows(), "x", t->value.cols(), ")"));
  }
  for (const auto& t : params.all())
    for (Eigen::Index r = 0; r < t->value.rows(); ++r)
      for (Eigen::Index c = 0; c < t->value.cols(); ++c) t->value(r, c) = read_f64(is, path);
}

// ---------------- construction ----------------

namespace {

// Gaussian fill in row-major order with a per-tensor stream keyed on the name.
void init_gaussian(Tensor& t, std::uint64_t seed, double scale) {
  Rng rng = Rng::derive(seed, fnv1a64(t.name));
  for (Eigen::Index r = 0; r < t.value.rows(); ++r)
    for (Eigen::Index c = 0; c < t.value.cols(); ++c) t.value(r, c) = rng.gaussian() * scale;
}

// Two-layer head: hidden tanh layer plus a small-scale output layer whose
// bias fixes the initial prediction.
void add_head(Networks& n, std::uint64_t seed, const std::string& stem, int in_dim, int out_dim,
              const Eigen::VectorXd& bias) {
  Tensor& w1 = n.params.add(stem + ".fc1.w", n.cfg.hidden, in_dim);
  n.params.add(stem + ".fc1.b", n.cfg.hidden, 1);
  Tensor& w2 = n.params.add(stem + ".fc2.w", out_dim, n.cfg.hidden);
  Tensor& b2 = n.params.add(stem + ".fc2.b", out_dim, 1);
  init_gaussian(w1, seed, 1.0 / std::sqrt(static_cast<double>(in_dim)));
  init_gaussian(w2, seed, 0.1 / std::sqrt(static_cast<double>(n.cfg.hidden)));
  if (bias.size() != out_dim) throw DomainError(cat(stem, ": bias size ", bias.size()));
  b2.value = bias;
}

Eigen::VectorXd tiled(int copies, std::initializer_list<double> pattern) {
  const int p = static_cast<int>(pattern.size());
  Eigen::VectorXd v(copies * p);
  int i = 0;
  for (int c = 0; c < copies; ++c)
    for (double x : pattern) v(i++) = x;
  return v;
}

}  // namespace

Networks make_networks(const RobotModel& model, const Intrinsics& k, const NetConfig& cfg,
                       std::uint64_t seed) {
  validate_intrinsics(k);
  if (cfg.image_size % cfg.pool_2d != 0 || cfg.image_size % cfg.pool_3d != 0)
    throw DomainError(cat("image size ", cfg.image_size, " not divisible by pooling factors"));
  Networks n;
  n.cfg = cfg;
  n.dof = model.dof();
  n.keypoints = model.keypoint_count();

  // 2D backbone over the pooled, flattened image.
  const int side_2d = cfg.image_size / cfg.pool_2d;
  const int in_2d = SceneImage::kChannels * side_2d * side_2d;
  Tensor& b2w1 = n.params.add("b2.fc1.w", cfg.hidden, in_2d);
  n.params.add("b2.fc1.b", cfg.hidden, 1);
  Tensor& b2w2 = n.params.add("b2.fc2.w", cfg.feature_dim, cfg.hidden);
  n.params.add("b2.fc2.b", cfg.feature_dim, 1);
  init_gaussian(b2w1, seed, 1.0 / std::sqrt(static_cast<double>(in_2d)));
  init_gaussian(b2w2, seed, 1.0 / std::sqrt(static_cast<double>(cfg.hidden)));

  // 3D backbone convolution stacks.
  for (int o = 0; o < cfg.conv_channels; ++o) {
    for (int i = 0; i < SceneImage::kChannels; ++i) {
      Tensor& kk = n.params.add(cat("b3.conv1.k.", o, ".", i), 3, 3);
      init_gaussian(kk, seed, 1.0 / std::sqrt(9.0 * SceneImage::kChannels));
    }
    n.params.add(cat("b3.conv1.b.", o), 1, 1);
  }
  for (int i = 0; i < cfg.conv_channels; ++i) {
    Tensor& kk = n.params.add(cat("b3.conv2.k.0.", i), 3, 3);
    init_gaussian(kk, seed, 1.0 / std::sqrt(9.0 * cfg.conv_channels));
  }
  n.params.add("b3.conv2.b.0", 1, 1);

  // 2D heads.  Neutral biases keep the first forward pass projectable:
  // identity rotation, camera 1.2 m from the base, keypoints on the axis.
  const int m = n.keypoints;
  const double lam_bias = std::log(std::exp(1.0) - 1.0);  // softplus(lam_bias) = 1
  add_head(n, seed, "h2.p", cfg.feature_dim, n.dof, Eigen::VectorXd::Zero(n.dof));
  add_head(n, seed, "h2.r", cfg.feature_dim, 9, tiled(1, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
  add_head(n, seed, "h2.t", cfg.feature_dim, 3, tiled(1, {0, 0, 1.2}));
  add_head(n, seed, "h2.k2", cfg.feature_dim, 2 * m, tiled(m, {k.cx, k.cy}));
  add_head(n, seed, "h2.k3", cfg.feature_dim, 3 * m, tiled(m, {0, 0, 1.2}));
  add_head(n, seed, "h2.lam", cfg.feature_dim, 1, tiled(1, {lam_bias}));

  // 3D heads share one hidden layer over (pooled D', R, T).
  const int side_3d = cfg.image_size / cfg.pool_3d;
  const int in_3d = side_3d * side_3d + 9 + 3;
  Tensor& h3w1 = n.params.add("h3.fc1.w", cfg.hidden, in_3d);
  n.params.add("h3.fc1.b", cfg.hidden, 1);
  Tensor& h3pw = n.params.add("h3.p.w", n.dof, cfg.hidden);
  n.params.add("h3.p.b", n.dof, 1);
  Tensor& h3kw = n.params.add("h3.k3.w", 3 * m, cfg.hidden);
  Tensor& h3kb = n.params.add("h3.k3.b", 3 * m, 1);
  init_gaussian(h3w1, seed, 1.0 / std::sqrt(static_cast<double>(in_3d)));
  init_gaussian(h3pw, seed, 0.1 / std::sqrt(static_cast<double>(cfg.hidden)));
  init_gaussian(h3kw, seed, 0.1 / std::sqrt(static_cast<double>(cfg.hidden)));
  h3kb.value = tiled(m, {0, 0, 1.2});
  return n;
}

// ---------------- forward passes ----------------

namespace {

ad::Value affine(ad::Tape& tape, ParamSet& params, const std::string& stem, ad::Value x) {
  return ad::add(ad::matmul(tape.param(params.at(stem + ".w")), x),
                 tape.param(params.at(stem + ".b")));
}

// One multi-channel 3x3 convolution layer under the naming scheme above.
std::vector<ad::Value> conv_layer(ad::Tape& tape, ParamSet& params, const std::string& stem,
                                  const std::vector<ad::Value>& in, int out_channels) {
  std::vector<ad::Value> out;
  ad::Value ones = tape.constant(
      MatrixXd::Ones(in.front().rows(), in.front().cols()), "ones");
  for (int o = 0; o < out_channels; ++o) {
    ad::Value acc = ad::conv3x3(in[0], tape.param(params.at(cat(stem, ".k.", o, ".", 0))));
    for (std::size_t i = 1; i < in.size(); ++i)
      acc = ad::add(acc, ad::conv3x3(in[i], tape.param(params.at(cat(stem, ".k.", o, ".", i)))));
    out.push_back(ad::add(acc, ad::cmul(tape.param(params.at(cat(stem, ".b.", o))), ones)));
  }
  return out;
}

}  // namespace

ad::Value reshape_rows(ad::Value v, int rows, int cols) {
  if (v.cols() != 1 || v.rows() != static_cast<Eigen::Index>(rows) * cols)
    throw DomainError(cat("reshape_rows: ", v.rows(), "x", v.cols(), " into ", rows, "x", cols));
  std::vector<ad::Value> columns;
  for (int c = 0; c < cols; ++c) {
    std::vector<int> picks;
    for (int r = 0; r < rows; ++r) picks.push_back(r * cols + c);
    columns.push_back(ad::gather_rows(v, picks));
  }
  return ad::concat_cols(columns);
}

ad::Value backbone_2d(ad::Tape& tape, Networks& nets, const SceneImage& image) {
  validate_scene_image(image, nets.cfg.image_size, nets.cfg.image_size);
  std::vector<ad::Value> pooled;
  for (const MatrixXd& ch : image.channels)
    pooled.push_back(ad::flatten(ad::avgpool(tape.constant(ch, "image"), nets.cfg.pool_2d)));
  ad::Value x = ad::concat_rows(pooled);
  ad::Value h = ad::tanh(affine(tape, nets.params, "b2.fc1", x));
  return ad::tanh(affine(tape, nets.params, "b2.fc2", h));
}

ad::Value backbone_3d(ad::Tape& tape, Networks& nets, const SceneImage& image) {
  validate_scene_image(image, nets.cfg.image_size, nets.cfg.image_size);
  std::vector<ad::Value> in;
  for (const MatrixXd& ch : image.channels) in.push_back(tape.constant(ch, "image"));
  std::vector<ad::Value> mid = conv_layer(tape, nets.params, "b3.conv1", in, nets.cfg.conv_channels);
  for (ad::Value& v : mid) v = ad::tanh(v);
  ad::Value raw = ad::softplus(conv_layer(tape, nets.params, "b3.conv2", mid, 1)[0]);
  return ad::cdiv(raw, ad::median_scalar(raw));
}

Heads2dOut heads_2d(ad::Tape& tape, Networks& nets, ad::Value f) {
  if (f.rows() != nets.cfg.feature_dim || f.cols() != 1)
    throw DomainError(cat("heads_2d: feature must be ", nets.cfg.feature_dim, "x1, got ", f.rows(),
                          "x", f.cols()));
  const auto head = [&](const std::string& stem) {
    ad::Value h = ad::tanh(affine(tape, nets.params, stem + ".fc1", f));
    return affine(tape, nets.params, stem + ".fc2", h);
  };
  Heads2dOut out;
  out.p = head("h2.p");
  out.r = ad::special_orthonormalize(reshape_rows(head("h2.r"), 3, 3));
  out.t = head("h2.t");
  out.kappa2 = reshape_rows(head("h2.k2"), nets.keypoints, 2);
  out.kappa3 = reshape_rows(head("h2.k3"), nets.keypoints, 3);
  out.lambda = ad::softplus(head("h2.lam"));
  return out;
}

Heads3dOut heads_3d(ad::Tape& tape, Networks& nets, ad::Value dprime, ad::Value r, ad::Value t) {
  if (dprime.rows() != nets.cfg.image_size || dprime.cols() != nets.cfg.image_size)
    throw DomainError(cat("heads_3d: depth must be ", nets.cfg.image_size, " square, got ",
                          dprime.rows(), "x", dprime.cols()));
  ad::Value pooled = ad::flatten(ad::avgpool(dprime, nets.cfg.pool_3d));
  ad::Value x = ad::concat_rows({pooled, ad::flatten(r), t});
  ad::Value h = ad::tanh(ad::add(ad::matmul(tape.param(nets.params.at("h3.fc1.w")), x),
                                 tape.param(nets.params.at("h3.fc1.b"))));
  Heads3dOut out;
  out.p = ad::add(ad::matmul(tape.param(nets.params.at("h3.p.w")), h),
                  tape.param(nets.params.at("h3.p.b")));
  out.kappa3 = reshape_rows(ad::add(ad::matmul(tape.param(nets.params.at("h3.k3.w")), h),
                                    tape.param(nets.params.at("h3.k3.b"))),
                            nets.keypoints, 3);
  return out;
}

}  // namespace rtag
