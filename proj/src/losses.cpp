// src/losses.cpp
#include "rtag/losses.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <limits>
#include <utility>

#include "rtag/common.hpp"

namespace rtag {

using Eigen::MatrixXd;

// ---------------- chamfer ----------------

double chamfer_uni(const MatrixXd& a, const MatrixXd& b) {
  if (a.rows() == 0 || b.rows() == 0) throw DomainError("chamfer: empty point cloud");
  if (a.cols() != b.cols())
    throw DomainError(cat("chamfer: dimension mismatch ", a.cols(), " vs ", b.cols()));
  double acc = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < b.rows(); ++j)
      best = std::min(best, (a.row(i) - b.row(j)).squaredNorm());
    acc += best;
  }
  return acc / static_cast<double>(a.rows());
}

double chamfer(const MatrixXd& a, const MatrixXd& b) {
  return chamfer_uni(a, b) + chamfer_uni(b, a);
}

ad::Value chamfer(ad::Value a, ad::Value b) {
  return ad::add(ad::chamfer_uni(a, b), ad::chamfer_uni(b, a));
}

// ---------------- weights ----------------

void validate_loss_weights(const LossWeights& w) {
  for (double a : w.alpha)
    if (!(a >= 0.0) || !std::isfinite(a))
      throw DomainError(cat("alignment weight must be finite and nonnegative, got ", a));
  for (double b : w.beta)
    if (!(b >= 0.0) || !std::isfinite(b))
      throw DomainError(cat("supervised weight must be finite and nonnegative, got ", b));
}

const LossTerm& LossReport::term(const std::string& name) const {
  for (const LossTerm& t : terms)
    if (t.name == name) return t;
  throw DomainError(cat("no loss term named '", name, "'"));
}

// ---------------- assembly ----------------

namespace {

using B = Branch;
using K = NodeKind;

// Accumulates weighted terms on one tape, recording skips with their reason.
class Assembler {
 public:
  Assembler(TagGraph& graph, LossReport& report) : graph_(graph), report_(report) {
    if (graph.tape == nullptr) throw DomainError("loss over an unpopulated graph");
  }

  // `make` runs only if the weight is positive, the group toggle is on, and
  // every listed node populated; it returns the unweighted term value.
  void term(const std::string& name, double weight, int edge_id, bool group_on,
            std::initializer_list<std::pair<B, K>> needs, const std::string& label_note,
            const std::function<ad::Value()>& make) {
    LossTerm t;
    t.name = name;
    t.weight = weight;
    t.edge_id = edge_id;
    if (weight == 0.0) {
      t.note = "weight is zero";
    } else if (!group_on) {
      t.note = "loop group disabled";
    } else if (!label_note.empty()) {
      t.note = label_note;
    } else {
      std::string failed;
      for (const auto& [br, k] : needs) {
        const StateNode& n = graph_.at(br, k);
        if (!n.ok()) {
          failed = cat("node ", n.label(), " unavailable");
          break;
        }
      }
      if (!failed.empty()) {
        t.note = failed;
        log_warn(cat("loss term ", name, " skipped: ", failed));
      } else {
        t.value = make();
        t.active = true;
        ad::Value weighted = ad::scale(t.value, weight);
        sum_ = sum_.valid() ? ad::add(sum_, weighted) : weighted;
      }
    }
    report_.terms.push_back(std::move(t));
  }

  ad::Value total() {
    return sum_.valid() ? sum_ : graph_.tape->constant(MatrixXd::Zero(1, 1), "zero_loss");
  }

 private:
  TagGraph& graph_;
  LossReport& report_;
  ad::Value sum_;
};

ad::Value mean_sq_diff(ad::Value a, ad::Value b, double denom) {
  return ad::scale(ad::sum_squares(ad::sub(a, b)), 1.0 / denom);
}

ad::Value maybe_stop(ad::Value v, bool stop) { return stop ? ad::stop_gradient(v) : v; }

}  // namespace

const std::array<AlignmentTermSpec, 6>& alignment_term_specs() {
  static const std::array<AlignmentTermSpec, 6> specs{{
      {"align1", B::two_d, K::joints, B::three_d, K::joints, "joints"},
      {"align2", B::two_d, K::kappa3, B::three_d, K::kappa3, "keypoints"},
      {"align3", B::three_d, K::kappa3, B::two_d, K::kappa3_fk, "keypoints"},
      {"align4", B::two_d, K::kappa2, B::two_d, K::kappa2_proj, "keypoints"},
      {"align5", B::three_d, K::cloud_fk, B::three_d, K::cloud_unproj, "pointcloud"},
      {"align6", B::three_d, K::cloud_unproj, B::two_d, K::cloud_fk, "pointcloud"},
  }};
  return specs;
}

LossReport align_loss(TagGraph& graph, const LossWeights& w, const LossOptions& opts) {
  validate_loss_weights(w);
  LossReport report;
  Assembler as(graph, report);
  const auto& specs = alignment_term_specs();
  const auto node = [&graph](B br, K k) -> ad::Value { return graph.at(br, k).value; };
  const auto edge = [&graph](const AlignmentTermSpec& s) {
    return graph.find_edge(graph.find(s.branch_a, s.kind_a), graph.find(s.branch_b, s.kind_b));
  };
  const auto gate = [&opts](const AlignmentTermSpec& s) {
    const std::string g = s.loop_group;
    return g == "joints" ? opts.joint_loops
                         : g == "keypoints" ? opts.keypoint_loops : opts.pointcloud_loops;
  };

  as.term(specs[0].name, w.alpha[0], edge(specs[0]), gate(specs[0]),
          {{B::three_d, K::joints}, {B::two_d, K::joints}}, {}, [&] {
            const double n = static_cast<double>(node(B::three_d, K::joints).rows());
            return mean_sq_diff(node(B::three_d, K::joints),
                                maybe_stop(node(B::two_d, K::joints), opts.stop_align_target[0]), n);
          });
  as.term(specs[1].name, w.alpha[1], edge(specs[1]), gate(specs[1]),
          {{B::three_d, K::kappa3}, {B::two_d, K::kappa3}}, {}, [&] {
            const double m = static_cast<double>(node(B::three_d, K::kappa3).rows());
            return mean_sq_diff(node(B::three_d, K::kappa3),
                                maybe_stop(node(B::two_d, K::kappa3), opts.stop_align_target[1]), m);
          });
  as.term(specs[2].name, w.alpha[2], edge(specs[2]), gate(specs[2]),
          {{B::three_d, K::kappa3}, {B::two_d, K::kappa3_fk}}, {}, [&] {
            const double m = static_cast<double>(node(B::three_d, K::kappa3).rows());
            return mean_sq_diff(
                node(B::three_d, K::kappa3),
                maybe_stop(node(B::two_d, K::kappa3_fk), opts.stop_align_target[2]), m);
          });
  as.term(specs[3].name, w.alpha[3], edge(specs[3]), gate(specs[3]),
          {{B::two_d, K::kappa2_proj}, {B::two_d, K::kappa2}}, {}, [&] {
            const double m = static_cast<double>(node(B::two_d, K::kappa2).rows());
            return mean_sq_diff(node(B::two_d, K::kappa2_proj),
                                maybe_stop(node(B::two_d, K::kappa2), opts.stop_align_target[3]), m);
          });
  as.term(specs[4].name, w.alpha[4], edge(specs[4]), gate(specs[4]),
          {{B::three_d, K::cloud_unproj}, {B::three_d, K::cloud_fk}}, {}, [&] {
            return ad::chamfer_uni(
                node(B::three_d, K::cloud_unproj),
                maybe_stop(node(B::three_d, K::cloud_fk), opts.stop_align_target[4]));
          });
  as.term(specs[5].name, w.alpha[5], edge(specs[5]), gate(specs[5]),
          {{B::three_d, K::cloud_unproj}, {B::two_d, K::cloud_fk}}, {}, [&] {
            return chamfer(node(B::three_d, K::cloud_unproj),
                           maybe_stop(node(B::two_d, K::cloud_fk), opts.stop_align_target[5]));
          });
  report.total = as.total();
  return report;
}

LossReport supervised_loss(TagGraph& graph, const GroundTruth& gt, const LossWeights& w,
                           const LossOptions&) {
  validate_loss_weights(w);
  LossReport report;
  Assembler as(graph, report);
  ad::Tape& tape = *graph.tape;
  const auto node = [&graph](B br, K k) -> ad::Value { return graph.at(br, k).value; };
  const std::string no_label = "label not provided";

  as.term("sup1", w.beta[0], -1, true, {{B::three_d, K::joints}},
          gt.p.has_value() ? std::string{} : no_label, [&] {
            const double n = static_cast<double>(gt.p->size());
            return mean_sq_diff(node(B::three_d, K::joints), tape.constant(*gt.p), n);
          });
  as.term("sup2", w.beta[1], -1, true, {{B::two_d, K::rotation}},
          gt.r.has_value() ? std::string{} : no_label, [&] {
            return ad::sum_squares(ad::sub(node(B::two_d, K::rotation), tape.constant(*gt.r)));
          });
  as.term("sup3", w.beta[2], -1, true, {{B::two_d, K::translation}},
          gt.t.has_value() ? std::string{} : no_label, [&] {
            return ad::sum_squares(ad::sub(node(B::two_d, K::translation), tape.constant(*gt.t)));
          });
  as.term("sup4", w.beta[3], -1, true, {{B::two_d, K::kappa2}},
          gt.kappa2.has_value() ? std::string{} : no_label, [&] {
            const double m = static_cast<double>(gt.kappa2->rows());
            return mean_sq_diff(node(B::two_d, K::kappa2), tape.constant(*gt.kappa2), m);
          });
  as.term("sup5", w.beta[4], -1, true, {{B::two_d, K::kappa2_proj}, {B::two_d, K::kappa2}},
          gt.kappa2.has_value() ? std::string{} : no_label, [&] {
            const double m = static_cast<double>(node(B::two_d, K::kappa2).rows());
            return mean_sq_diff(node(B::two_d, K::kappa2_proj), node(B::two_d, K::kappa2), m);
          });
  as.term("sup6", w.beta[5], -1, true, {{B::three_d, K::cloud_unproj}},
          gt.pts_fk.has_value() ? std::string{} : no_label, [&] {
            return ad::chamfer_uni(node(B::three_d, K::cloud_unproj), tape.constant(*gt.pts_fk));
          });
  as.term("sup7", w.beta[6], -1, true, {{B::two_d, K::cloud_fk}},
          gt.pts_fk.has_value() ? std::string{} : no_label, [&] {
            return chamfer(node(B::two_d, K::cloud_fk), tape.constant(*gt.pts_fk));
          });
  report.total = as.total();
  return report;
}

LossReport total_loss(TagGraph& graph, const GroundTruth* gt, const LossWeights& w,
                      const LossOptions& opts) {
  LossReport align = align_loss(graph, w, opts);
  if (gt == nullptr) return align;
  LossReport sup = supervised_loss(graph, *gt, w, opts);
  LossReport report;
  report.total = ad::add(align.total, sup.total);
  report.terms = std::move(align.terms);
  for (LossTerm& t : sup.terms) report.terms.push_back(std::move(t));
  return report;
}

}  // namespace rtag
