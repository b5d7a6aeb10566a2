// include/rtag/losses.hpp
//
// Chamfer distances and the alignment / supervised / total losses over a
// populated alignment graph.  Terms whose inputs are unavailable (failed
// nodes, missing labels, zero weights, disabled loop groups) are skipped and
// contribute exactly zero with no gradient.
#pragma once

#include <Eigen/Dense>
#include <array>
#include <optional>
#include <string>
#include <vector>

#include "rtag/tag_graph.hpp"
#include "rtag/tape.hpp"

namespace rtag {

// ---------------- chamfer ----------------

// Mean over rows of `a` of the squared distance to the nearest row of `b`.
double chamfer_uni(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);
// Symmetric sum of both directions.
double chamfer(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);
ad::Value chamfer(ad::Value a, ad::Value b);

// ---------------- weights and labels ----------------

struct LossWeights {
  // Alignment terms, in loss order: joints, kappa3 pair, kappa3-vs-fk pair,
  // kappa2 pair, unidirectional cloud, bidirectional cloud.
  std::array<double, 6> alpha{1, 1, 1, 1, 1, 1};
  // Supervised terms: joints, rotation, translation, kappa2 labels, kappa2
  // self-consistency, cloud-vs-label uni, fk-cloud-vs-label.
  std::array<double, 7> beta{1, 1, 1, 1, 1, 1, 1};
};

void validate_loss_weights(const LossWeights& w);

// Labels for one sample; every field is optional ("if some of the ground
// truth labels are not provided, the corresponding term is not used").
struct GroundTruth {
  std::optional<Eigen::VectorXd> p;
  std::optional<Eigen::Matrix3d> r;
  std::optional<Eigen::Vector3d> t;
  std::optional<Eigen::MatrixXd> kappa2;  // m x 2 pixels
  std::optional<Eigen::MatrixXd> pts_fk;  // s x 3 camera-frame surface cloud
};

struct LossOptions {
  // Loop-group toggles: joints gates alignment term 1, keypoints terms 2-4,
  // pointcloud terms 5-6.
  bool joint_loops = true;
  bool keypoint_loops = true;
  bool pointcloud_loops = true;
  // Per-term stop-gradient on the target (second) operand of each alignment
  // term, for experiments that treat one side as a fixed label.
  std::array<bool, 6> stop_align_target{};
};

// ---------------- reports ----------------

struct LossTerm {
  std::string name;   // "align1".."align6", "sup1".."sup7"
  double weight = 0;  // the alpha/beta applied
  int edge_id = -1;   // alignment edge carrying the term, -1 for label terms
  bool active = false;
  std::string note;  // why the term was skipped
  ad::Value value;   // normalized but unweighted term (valid iff active)

  double weighted() const { return active ? weight * value.scalar() : 0.0; }
};

struct LossReport {
  ad::Value total;  // weighted sum on the graph's tape (a zero constant if empty)
  std::vector<LossTerm> terms;

  double total_value() const { return total.scalar(); }
  const LossTerm& term(const std::string& name) const;
};

// ---------------- term catalogue ----------------

// Static wiring of one alignment term: the two graph nodes whose alignment
// edge carries the loss, and the loop group that gates it.
struct AlignmentTermSpec {
  const char* name;  // "align1".."align6"
  Branch branch_a;
  NodeKind kind_a;
  Branch branch_b;
  NodeKind kind_b;
  const char* loop_group;  // "joints", "keypoints", "pointcloud"
};

// The six loss-bearing alignment edges in term order.  align_loss resolves
// its edges from this table, so reports built on it cannot drift from the
// loss implementation.
const std::array<AlignmentTermSpec, 6>& alignment_term_specs();

// ---------------- losses ----------------

// Alignment loss: (a1/n)|p3-p2|^2 + (a2/m)|k3_3-k3_2|^2 + (a3/m)|k3_3-k3fk_2|^2
// + (a4/m)|k2pr_2-k2_2|^2 + a5*chamfer_uni(unproj, fk3) + a6*chamfer(unproj, fk2).
LossReport align_loss(TagGraph& graph, const LossWeights& w, const LossOptions& opts = {});

// Supervised loss: (b1/n)|p3-p_gt|^2 + b2|R-R_gt|_F^2 + b3|T-T_gt|^2 +
// (b4/m)|k2_2-k2_gt|^2 + (b5/m)|k2pr_2-k2_2|^2 + b6*chamfer_uni(unproj, pts_gt)
// + b7*chamfer(fk2, pts_gt); the b5 self-consistency term is active only when
// kappa2 labels are present.
LossReport supervised_loss(TagGraph& graph, const GroundTruth& gt, const LossWeights& w,
                           const LossOptions& opts = {});

// align + supervised; with no labels it reduces to the alignment loss.
LossReport total_loss(TagGraph& graph, const GroundTruth* gt, const LossWeights& w,
                      const LossOptions& opts = {});

}  // namespace rtag
