// src/trainer.cpp
#include "rtag/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

#include "rtag/common.hpp"
#include "rtag/rng.hpp"

namespace rtag {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------- configuration ----------------

void validate_train_config(const TrainConfig& cfg) {
  const auto check_stage = [](const StageSchedule& s, const char* name) {
    if (!(s.lr >= 0.0) || !std::isfinite(s.lr))
      throw DomainError(cat(name, ": learning rate must be finite and nonnegative, got ", s.lr));
    if (s.epochs < 1) throw DomainError(cat(name, ": epochs must be >= 1, got ", s.epochs));
    if (s.batch < 1) throw DomainError(cat(name, ": batch must be >= 1, got ", s.batch));
    if (!(s.decay > 0.0 && s.decay <= 1.0))
      throw DomainError(cat(name, ": decay must be in (0, 1], got ", s.decay));
  };
  check_stage(cfg.stage1, "stage1");
  check_stage(cfg.stage2, "stage2");
  validate_loss_weights(cfg.weights);
  if (!(cfg.add_threshold_m > 0.0))
    throw DomainError(cat("add_threshold_m must be positive, got ", cfg.add_threshold_m));
  if (cfg.patience < 1) throw DomainError(cat("patience must be >= 1, got ", cfg.patience));
}

// ---------------- metrics ----------------

double wrap_angle(double rad) {
  double w = std::fmod(rad, 2.0 * M_PI);
  if (w > M_PI)
    w -= 2.0 * M_PI;
  else if (w <= -M_PI)
    w += 2.0 * M_PI;
  return w;
}

double add_auc_from_distances(const std::vector<double>& add, double threshold_max) {
  if (add.empty()) throw DomainError("add_auc_from_distances: no samples");
  if (!(threshold_max > 0.0))
    throw DomainError(cat("add_auc_from_distances: threshold must be positive, got ",
                          threshold_max));
  double s = 0.0;
  for (double d : add)
    if (d < threshold_max) s += threshold_max - std::max(d, 0.0);
  return s / (threshold_max * static_cast<double>(add.size()));
}

Eigen::VectorXd joint_deviation_deg(const MatrixXd& pred, const MatrixXd& gt) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols())
    throw DomainError(cat("joint_deviation_deg: shape mismatch, ", pred.rows(), "x", pred.cols(),
                          " vs ", gt.rows(), "x", gt.cols()));
  if (pred.rows() == 0) throw DomainError("joint_deviation_deg: no samples");
  VectorXd out = VectorXd::Zero(pred.cols());
  for (Eigen::Index i = 0; i < pred.rows(); ++i)
    for (Eigen::Index j = 0; j < pred.cols(); ++j)
      out(j) += std::abs(wrap_angle(pred(i, j) - gt(i, j)));
  return out * (180.0 / M_PI / static_cast<double>(pred.rows()));
}

ScenePrediction predict_scene(Networks& nets, const RobotModel& model, const Scene& scene) {
  ad::Tape tape;
  TagGraph graph = build_tag(tape, nets, model, scene.image, scene.k, scene.mask);
  const auto need = [&graph](Branch b, NodeKind kk) -> const StateNode& {
    const StateNode& n = graph.at(b, kk);
    if (!n.ok())
      throw NumericError(cat("predict_scene: node ", n.label(), " failed: ", n.failure));
    return n;
  };
  ScenePrediction out;
  out.p = need(Branch::three_d, NodeKind::joints).value.data();
  out.r = need(Branch::two_d, NodeKind::rotation).value.data();
  out.t = need(Branch::two_d, NodeKind::translation).value.data();
  out.kappa3 = keypoints_from_config(model, out.p, out.r, out.t);
  out.add = (out.kappa3 - scene.kappa3).rowwise().norm().mean();
  out.joint_err_rad.resize(model.dof());
  for (int i = 0; i < model.dof(); ++i)
    out.joint_err_rad(i) = std::abs(wrap_angle(out.p(i) - scene.p(i)));
  return out;
}

EvalMetrics evaluate_split(Networks& nets, const RobotModel& model,
                           const std::vector<Scene>& scenes, double threshold_max) {
  if (scenes.empty()) throw DomainError("evaluate_split: empty split");
  EvalMetrics m;
  m.add_values.reserve(scenes.size());
  MatrixXd pred_p(static_cast<Eigen::Index>(scenes.size()), model.dof());
  MatrixXd gt_p(static_cast<Eigen::Index>(scenes.size()), model.dof());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const ScenePrediction pred = predict_scene(nets, model, scenes[i]);
    m.add_values.push_back(pred.add);
    pred_p.row(static_cast<Eigen::Index>(i)) = pred.p.transpose();
    gt_p.row(static_cast<Eigen::Index>(i)) = scenes[i].p.transpose();
  }
  m.per_joint_dev_deg = joint_deviation_deg(pred_p, gt_p);
  m.mean_joint_dev_deg = m.per_joint_dev_deg.mean();
  m.add_auc = add_auc_from_distances(m.add_values, threshold_max);
  return m;
}

GroundTruth ground_truth_of(const Scene& scene) {
  GroundTruth gt;
  gt.p = scene.p;
  gt.r = scene.r;
  gt.t = scene.t;
  gt.kappa2 = scene.kappa2;
  gt.pts_fk = scene.pts_fk;
  return gt;
}

// ---------------- metrics CSV ----------------

namespace {

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string metrics_csv_header() {
  return "stage,epoch,split,loss_total,loss_align,loss_supervised,"
         "align1,align2,align3,align4,align5,align6,"
         "sup1,sup2,sup3,sup4,sup5,sup6,sup7,add_auc,mean_joint_dev_deg";
}

std::string to_csv(const MetricsRow& row) {
  std::string out = cat(row.stage, ",", row.epoch, ",", row.split, ",", fmt_g(row.loss_total),
                        ",", fmt_g(row.loss_align), ",", fmt_g(row.loss_supervised));
  for (double v : row.align) out += cat(",", fmt_g(v));
  for (double v : row.sup) out += cat(",", fmt_g(v));
  out += cat(",", fmt_g(row.add_auc), ",", fmt_g(row.mean_joint_dev_deg));
  return out;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  const std::filesystem::path parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError(cat("write_metrics_csv: cannot write ", path));
  f << metrics_csv_header() << "\n";
  for (const MetricsRow& row : rows) f << to_csv(row) << "\n";
}

// ---------------- optimizer ----------------

AdaptiveOptimizer::AdaptiveOptimizer(ParamSet& params, double lr, double rho, double eps)
    : params_(&params), lr_(lr), rho_(rho), eps_(eps) {
  if (!(lr >= 0.0) || !std::isfinite(lr))
    throw DomainError(cat("optimizer: learning rate must be finite and nonnegative, got ", lr));
  if (!(rho > 0.0 && rho < 1.0))
    throw DomainError(cat("optimizer: rho must be in (0, 1), got ", rho));
  if (!(eps > 0.0)) throw DomainError(cat("optimizer: eps must be positive, got ", eps));
  second_moment_.reserve(params.all().size());
  for (const auto& t : params.all())
    second_moment_.push_back(MatrixXd::Zero(t->value.rows(), t->value.cols()));
}

void AdaptiveOptimizer::set_lr(double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr))
    throw DomainError(cat("optimizer: learning rate must be finite and nonnegative, got ", lr));
  lr_ = lr;
}

void AdaptiveOptimizer::step() {
  if (lr_ == 0.0) return;  // inert run: parameters must stay bit-identical
  const auto& tensors = params_->all();
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    ad::Tensor& t = *tensors[i];
    MatrixXd& v = second_moment_[i];
    v = rho_ * v + (1.0 - rho_) * t.grad.cwiseProduct(t.grad);
    t.value.array() -= lr_ * t.grad.array() / (v.array().sqrt() + eps_);
  }
}

std::vector<MatrixXd> snapshot_params(const ParamSet& params) {
  std::vector<MatrixXd> snap;
  snap.reserve(params.all().size());
  for (const auto& t : params.all()) snap.push_back(t->value);
  return snap;
}

void restore_params(ParamSet& params, const std::vector<MatrixXd>& snapshot) {
  const auto& tensors = params.all();
  if (snapshot.size() != tensors.size())
    throw DomainError(cat("restore_params: snapshot has ", snapshot.size(), " tensors, set has ",
                          tensors.size()));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (snapshot[i].rows() != tensors[i]->value.rows() ||
        snapshot[i].cols() != tensors[i]->value.cols())
      throw DomainError(cat("restore_params: shape mismatch on ", tensors[i]->name));
    tensors[i]->value = snapshot[i];
  }
}

// ---------------- training ----------------

namespace {

constexpr std::uint64_t kShuffleTag = 0x74726e736875ull;  // order stream per stage/epoch

// Weighted per-term means over many loss reports.
struct TermSums {
  double total = 0.0, align = 0.0, sup = 0.0;
  std::array<double, 6> a{};
  std::array<double, 7> b{};
  int n = 0;

  void add(const LossReport& rep) {
    total += rep.total_value();
    for (const LossTerm& t : rep.terms) {
      const double w = t.weighted();
      if (t.name.rfind("align", 0) == 0) {
        a[static_cast<std::size_t>(t.name[5] - '1')] += w;
        align += w;
      } else {
        b[static_cast<std::size_t>(t.name[3] - '1')] += w;
        sup += w;
      }
    }
    ++n;
  }

  void fill(MetricsRow& row) const {
    const double d = n > 0 ? static_cast<double>(n) : 1.0;
    row.loss_total = total / d;
    row.loss_align = align / d;
    row.loss_supervised = sup / d;
    for (std::size_t i = 0; i < a.size(); ++i) row.align[i] = a[i] / d;
    for (std::size_t i = 0; i < b.size(); ++i) row.sup[i] = b[i] / d;
  }
};

// ADD and joint-deviation accumulators fed by already-built graphs.
struct Rolling {
  std::vector<double> add;
  VectorXd joint_sum;

  explicit Rolling(int dof) : joint_sum(VectorXd::Zero(dof)) {}

  void add_graph(const TagGraph& graph, const RobotModel& model, const Scene& sc) {
    const StateNode& jp = graph.at(Branch::three_d, NodeKind::joints);
    const StateNode& rot = graph.at(Branch::two_d, NodeKind::rotation);
    const StateNode& tra = graph.at(Branch::two_d, NodeKind::translation);
    if (jp.ok() && rot.ok() && tra.ok()) {
      const VectorXd p3 = jp.value.data();
      const MatrixXd kp = keypoints_from_config(model, p3, rot.value.data(), tra.value.data());
      add.push_back((kp - sc.kappa3).rowwise().norm().mean());
      for (int i = 0; i < model.dof(); ++i)
        joint_sum(i) += std::abs(wrap_angle(p3(i) - sc.p(i)));
    } else {  // scored as a full miss so a failed forward cannot inflate metrics
      add.push_back(std::numeric_limits<double>::infinity());
      joint_sum.array() += M_PI;
    }
  }

  void fill(MetricsRow& row, double threshold_max) const {
    row.add_auc = add_auc_from_distances(add, threshold_max);
    row.mean_joint_dev_deg =
        (joint_sum / static_cast<double>(add.size())).mean() * 180.0 / M_PI;
  }
};

LossReport stage_loss(TagGraph& graph, const Scene& sc, const TrainConfig& cfg,
                      bool supervised) {
  if (!supervised) return align_loss(graph, cfg.weights, cfg.loops);
  const GroundTruth gt = ground_truth_of(sc);
  return total_loss(graph, &gt, cfg.weights, cfg.loops);
}

// Losses plus metrics over a split with frozen parameters.
MetricsRow split_row(Networks& nets, const RobotModel& model, const std::vector<Scene>& scenes,
                     const TrainConfig& cfg, bool supervised, int stage, int epoch,
                     const char* name) {
  TermSums sums;
  Rolling roll(model.dof());
  for (const Scene& sc : scenes) {
    ad::Tape tape;
    TagGraph graph = build_tag(tape, nets, model, sc.image, sc.k, sc.mask);
    LossReport rep = stage_loss(graph, sc, cfg, supervised);
    sums.add(rep);
    roll.add_graph(graph, model, sc);
  }
  MetricsRow row;
  row.stage = stage;
  row.epoch = epoch;
  row.split = name;
  sums.fill(row);
  roll.fill(row, cfg.add_threshold_m);
  return row;
}

StageResult run_stage(Networks& nets, const RobotModel& model, const std::vector<Scene>& train,
                      const std::vector<Scene>& val, const TrainConfig& cfg, int stage,
                      const RowCallback& on_row) {
  validate_train_config(cfg);
  const bool supervised = stage == 1;
  const StageSchedule sched = supervised ? cfg.stage1 : cfg.stage2;
  if (train.empty()) throw DomainError(cat("stage ", stage, ": empty training split"));
  if (supervised && val.empty())
    throw DomainError("stage 1: empty validation split (needed for checkpoint selection)");

  AdaptiveOptimizer opt(nets.params, sched.lr);
  StageResult res;
  std::vector<MatrixXd> last_finite = snapshot_params(nets.params);
  std::vector<MatrixXd> best;
  double best_auc = -std::numeric_limits<double>::infinity();
  double best_align = std::numeric_limits<double>::infinity();
  int plateau = 0;

  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= sched.epochs; ++epoch) {
    opt.set_lr(sched.lr * std::pow(sched.decay, epoch - 1));
    Rng rng = Rng::derive(cfg.seed, kShuffleTag, static_cast<std::uint64_t>(stage),
                          static_cast<std::uint64_t>(epoch));
    rng.shuffle(order.begin(), order.end());

    TermSums sums;
    Rolling roll(model.dof());
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(sched.batch)) {
      const std::size_t bn = std::min(static_cast<std::size_t>(sched.batch), order.size() - start);
      nets.params.zero_grad();
      for (std::size_t k = 0; k < bn; ++k) {
        const Scene& sc = train[static_cast<std::size_t>(order[start + k])];
        try {
          ad::Tape tape;
          TagGraph graph = build_tag(tape, nets, model, sc.image, sc.k, sc.mask);
          LossReport rep = stage_loss(graph, sc, cfg, supervised);
          if (!std::isfinite(rep.total_value())) throw NumericError("non-finite loss");
          tape.backward(ad::scale(rep.total, 1.0 / static_cast<double>(bn)));
          sums.add(rep);
          roll.add_graph(graph, model, sc);
        } catch (const NumericError& e) {
          restore_params(nets.params, last_finite);
          res.aborted = true;
          log_warn(cat("stage ", stage, " epoch ", epoch, ": ", e.what(),
                       "; restored last finite parameters"));
          break;
        }
      }
      if (res.aborted) break;
      opt.step();
    }
    if (res.aborted) break;
    res.epochs_run = epoch;

    MetricsRow train_row;
    train_row.stage = stage;
    train_row.epoch = epoch;
    train_row.split = supervised ? "train" : "ood";
    sums.fill(train_row);
    roll.fill(train_row, cfg.add_threshold_m);
    res.rows.push_back(train_row);
    if (on_row) on_row(train_row);

    bool stop = false;
    if (!val.empty()) {
      const MetricsRow vr = split_row(nets, model, val, cfg, supervised, stage, epoch, "val");
      res.rows.push_back(vr);
      if (on_row) on_row(vr);
      if (supervised) {
        if (vr.add_auc > best_auc) {
          best_auc = vr.add_auc;
          best = snapshot_params(nets.params);
          res.best_epoch = epoch;
          plateau = 0;
        } else if (++plateau >= cfg.patience) {
          stop = true;
        }
      }
    }
    if (!supervised && train_row.loss_align < best_align) {
      // Label-free selection: the alignment loss itself, never a labeled metric.
      best_align = train_row.loss_align;
      best = snapshot_params(nets.params);
      res.best_epoch = epoch;
    }
    last_finite = snapshot_params(nets.params);
    if (stop) break;
  }

  if (res.best_epoch > 0) restore_params(nets.params, best);
  res.best_val_auc = supervised && res.best_epoch > 0 ? best_auc : 0.0;
  res.best_align_loss = !supervised && res.best_epoch > 0 ? best_align : 0.0;
  return res;
}

}  // namespace

StageResult train_stage1(Networks& nets, const RobotModel& model,
                         const std::vector<Scene>& train, const std::vector<Scene>& val,
                         const TrainConfig& cfg, const RowCallback& on_row) {
  return run_stage(nets, model, train, val, cfg, 1, on_row);
}

StageResult train_stage2(Networks& nets, const RobotModel& model,
                         const std::vector<Scene>& ood, const std::vector<Scene>& val,
                         const TrainConfig& cfg, const RowCallback& on_row) {
  return run_stage(nets, model, ood, val, cfg, 2, on_row);
}

}  // namespace rtag
