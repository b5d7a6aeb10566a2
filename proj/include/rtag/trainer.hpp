// include/rtag/trainer.hpp
//
// Two-stage training over synthetic scenes, the evaluation metrics (ADD AUC
// and mean joint deviation), and the deterministic metrics-CSV format.
// Stage 1 minimizes the combined alignment + supervised loss on a labeled
// split; stage 2 fine-tunes with the alignment loss alone and never reads
// labels, which then serve evaluation only.
#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rtag/losses.hpp"
#include "rtag/synth.hpp"
#include "rtag/tag_graph.hpp"

namespace rtag {

// ---------------- configuration ----------------

struct StageSchedule {
  double lr = 0.0;
  int epochs = 0;
  int batch = 0;
  double decay = 1.0;  // multiplicative per-epoch learning-rate factor
};

struct TrainConfig {
  // Desk-scale defaults; the reference schedule runs batch 128 for 80 epochs.
  StageSchedule stage1{1.2e-4, 40, 32, 0.95};
  StageSchedule stage2{1.0e-6, 20, 32, 0.95};
  LossWeights weights;
  LossOptions loops;
  std::uint64_t seed = 0;

  std::string robot;      // robot description file
  std::string train_dir;  // labeled in-distribution training split
  std::string val_dir;    // labeled in-distribution validation split
  std::string ood_dir;    // out-of-distribution split (stage 2; labels unused)
  std::string out_dir = "out";
  // When set and readable, stage 1 is skipped and these parameters are loaded.
  std::string stage1_checkpoint;

  NetConfig net;
  double add_threshold_m = 0.1;  // ADD AUC integration limit, recorded in the config echo
  int patience = 10;             // stage-1 early stop on validation-AUC plateau
};

// lr >= 0 (zero gives an inert run), epochs >= 1, batch >= 1, decay in (0, 1].
void validate_train_config(const TrainConfig& cfg);

// ---------------- metrics ----------------

// Wraps an angle difference onto (-pi, pi].
double wrap_angle(double rad);

// Normalized area under the fraction-below-threshold curve of the ADD values
// over [0, threshold_max]; closed form mean(max(0, M - d)) / M.  Non-finite
// distances count as never below threshold.
double add_auc_from_distances(const std::vector<double>& add, double threshold_max);

// Per-joint mean wrapped absolute deviation in degrees.  Rows are samples,
// columns joints; shapes must match.
Eigen::VectorXd joint_deviation_deg(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt);

struct ScenePrediction {
  Eigen::VectorXd p;      // 3D-branch joint estimate
  Eigen::Matrix3d r;      // 2D-branch camera rotation
  Eigen::Vector3d t;      // 2D-branch camera translation
  Eigen::MatrixXd kappa3;  // keypoints via forward kinematics of (p, r, t)
  double add = 0.0;        // mean keypoint distance to the scene's ground truth
  Eigen::VectorXd joint_err_rad;  // wrapped absolute joint errors
};

// One deterministic forward pass on a fresh tape; throws NumericError if the
// joint, rotation, or translation node failed to populate.
ScenePrediction predict_scene(Networks& nets, const RobotModel& model, const Scene& scene);

struct EvalMetrics {
  double add_auc = 0.0;
  double mean_joint_dev_deg = 0.0;
  Eigen::VectorXd per_joint_dev_deg;
  std::vector<double> add_values;  // one per scene, split order
};

// Metrics over a nonempty split.
EvalMetrics evaluate_split(Networks& nets, const RobotModel& model,
                           const std::vector<Scene>& scenes, double threshold_max);

// Labels of a synthetic scene packaged for the supervised loss.
GroundTruth ground_truth_of(const Scene& scene);

// ---------------- metrics CSV ----------------

struct MetricsRow {
  int stage = 1;
  int epoch = 0;
  std::string split;  // "train", "val", "ood"
  double loss_total = 0.0;
  double loss_align = 0.0;
  double loss_supervised = 0.0;
  std::array<double, 6> align{};  // weighted per-term means
  std::array<double, 7> sup{};
  double add_auc = 0.0;
  double mean_joint_dev_deg = 0.0;
};

std::string metrics_csv_header();
std::string to_csv(const MetricsRow& row);  // %.17g doubles for byte-stable output
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

// ---------------- optimizer ----------------

// Momentum-free adaptive per-parameter step: each coordinate is scaled by the
// inverse root of a leaky accumulator of squared gradients.  A zero learning
// rate leaves parameters bit-identical.
class AdaptiveOptimizer {
 public:
  AdaptiveOptimizer(ParamSet& params, double lr, double rho = 0.99, double eps = 1e-8);

  double lr() const { return lr_; }
  void set_lr(double lr);
  void step();  // consumes the accumulated tensor gradients

 private:
  ParamSet* params_;
  std::vector<Eigen::MatrixXd> second_moment_;
  double lr_;
  double rho_;
  double eps_;
};

// Value-only snapshot of every tensor, for checkpoint selection and rollback.
std::vector<Eigen::MatrixXd> snapshot_params(const ParamSet& params);
void restore_params(ParamSet& params, const std::vector<Eigen::MatrixXd>& snapshot);

// ---------------- training ----------------

struct StageResult {
  std::vector<MetricsRow> rows;
  int epochs_run = 0;
  int best_epoch = -1;         // epoch the returned parameters come from (1-based)
  double best_val_auc = 0.0;   // stage-1 selection score
  double best_align_loss = 0.0;  // stage-2 selection score
  bool aborted = false;  // loss went non-finite; parameters restored to the last finite state
};

using RowCallback = std::function<void(const MetricsRow&)>;

// Hybrid stage: minimizes align + supervised loss on the labeled split,
// evaluates the validation split each epoch, early-stops on an AUC plateau,
// and leaves `nets` at the best-validation parameters.
StageResult train_stage1(Networks& nets, const RobotModel& model,
                         const std::vector<Scene>& train, const std::vector<Scene>& val,
                         const TrainConfig& cfg, const RowCallback& on_row = {});

// Label-free stage: minimizes the alignment loss alone on the given split
// (labels are read only for reported metrics, never by the loss or by
// checkpoint selection) and leaves `nets` at the lowest-alignment-loss epoch.
StageResult train_stage2(Networks& nets, const RobotModel& model,
                         const std::vector<Scene>& ood, const std::vector<Scene>& val,
                         const TrainConfig& cfg, const RowCallback& on_row = {});

}  // namespace rtag
