// include/rtag/tag_graph.hpp
//
// The topological alignment graph: typed state nodes for the 2D and 3D
// estimation branches, forward edges for the computations that connect them,
// alignment edges for quantities that must agree, and the closed-loop basis
// (fundamental cycles filtered to exactly one alignment edge each).
#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "rtag/camera.hpp"
#include "rtag/kinematics.hpp"
#include "rtag/networks.hpp"
#include "rtag/tape.hpp"

namespace rtag {

// ---------------- nodes and edges ----------------

enum class Branch { two_d, three_d };

// Declaration order fixes the deterministic traversal priority used by the
// spanning tree, so the loop basis is reproducible.
enum class NodeKind {
  feature,      // f            (2D)
  regulator,    // lambda       (2D)
  depth_rel,    // D            (3D)
  depth_abs,    // D'           (3D)
  joints,       // p
  rotation,     // R            (2D)
  translation,  // T            (2D)
  kappa2,       // predicted pixel keypoints (2D)
  kappa3,       // camera-frame keypoints
  kappa3_fk,    // keypoints via forward kinematics
  kappa2_proj,  // keypoints projected to pixels
  cloud_fk,     // surface cloud via forward kinematics
  cloud_unproj  // unprojected depth cloud (3D)
};

const char* to_string(Branch b);
const char* to_string(NodeKind k);

struct StateNode {
  int id = -1;
  Branch branch = Branch::two_d;
  NodeKind kind = NodeKind::feature;
  ad::Value value;
  std::string failure;  // non-empty once the node is poisoned

  bool ok() const { return failure.empty() && value.valid(); }
  std::string label() const;  // e.g. "kappa3_fk/2d"
};

enum class EdgeClass { transformation, robot_prior, network, alignment };

const char* to_string(EdgeClass c);

struct Edge {
  int a = -1;
  int b = -1;  // undirected; (a, b) order is presentational only
  EdgeClass cls = EdgeClass::transformation;

  bool is_alignment() const { return cls == EdgeClass::alignment; }
};

struct GraphOptions {
  // Also installs the non-consecutive chain pairs (kappa3 2D, kappa3_fk 3D),
  // (kappa3 2D, kappa3_fk 2D) and (kappa2 2D, kappa2_proj 3D) as alignment
  // edges.  Off by default: the default edge set is the smallest one that
  // makes every loss term an alignment edge.
  bool extra_chain_pairs = false;
};

struct TagGraph {
  std::vector<StateNode> nodes;
  std::vector<Edge> edges;
  ad::Tape* tape = nullptr;  // tape the node values live on (null if unpopulated)

  int find(Branch branch, NodeKind kind) const;  // -1 if absent
  const StateNode& at(Branch branch, NodeKind kind) const;
  StateNode& at(Branch branch, NodeKind kind);
  // Undirected edge lookup by endpoints; -1 if absent.
  int find_edge(int a, int b) const;
  std::size_t alignment_count() const;
};

// Structure only: the canonical node and edge sets with empty value slots.
TagGraph make_tag_structure(const GraphOptions& opts = {});

// Populates the canonical graph by running, in dependency order, the 2D
// backbone, 3D backbone, 2D heads, depth regulator, unprojection, 3D heads,
// the four forward-kinematics nodes, and the two projections.  A step that
// fails (for example an empty mask or a keypoint behind the camera) poisons
// its node and every dependent node with a named diagnostic instead of
// throwing.
TagGraph build_tag(ad::Tape& tape, Networks& nets, const RobotModel& model,
                   const SceneImage& image, const Intrinsics& k, const MaskGrid& mask,
                   const GraphOptions& opts = {});

// Populates every branch node analytically from one consistent ground truth,
// making both branches agree exactly (the consistency fixed point).  The
// feature node, which no loss reads, is a zero placeholder.
TagGraph build_tag_from_ground_truth(ad::Tape& tape, const RobotModel& model,
                                     const Eigen::VectorXd& p, const Eigen::Matrix3d& r,
                                     const Eigen::Vector3d& t, const DepthMap& depth_abs,
                                     const MaskGrid& mask, const Intrinsics& k,
                                     const GraphOptions& opts = {});

// ---------------- closed loops ----------------

enum class LoopType { alignment_forward, backbone_connecting };

struct ClosedLoop {
  LoopType type = LoopType::alignment_forward;
  // Real-edge ids in cycle order.  For a backbone-connecting line the virtual
  // backbone edge is elided, leaving the open path between the two backbones.
  std::vector<int> edge_ids;
  // Vertex sequence; closed (first == last) for alignment-forward loops, an
  // open backbone-to-backbone path otherwise.
  std::vector<int> node_ids;
  int alignment_edge_id = -1;
};

struct LoopBasis {
  std::vector<ClosedLoop> loops;
  // Every fundamental cycle as a sorted edge-id set (virtual edge included
  // where used), before the one-alignment-edge filter; spans the cycle space.
  std::vector<std::vector<int>> fundamental_cycles;
  int virtual_edge_id = -1;  // edges.size() when the virtual f--D edge exists
  int component_count = 0;
};

// Fundamental cycles of the graph plus the virtual backbone edge, from a BFS
// spanning tree rooted at the feature node, filtered to cycles with exactly
// one alignment edge.  Disconnected graphs are handled per component.
LoopBasis enumerate_closed_loops(const TagGraph& graph);

// Every simple cycle (as a sorted edge-id set, virtual edge included) via
// Johnson-style enumeration; feasible at this graph size and used to verify
// that the fundamental cycles span the cycle space over Z2.
std::vector<std::vector<int>> enumerate_all_cycles(const TagGraph& graph);

// True if `cycle_edges` (sorted edge-id set) is a symmetric-difference
// combination of the basis' fundamental cycles.
bool in_cycle_span(const LoopBasis& basis, const std::vector<int>& cycle_edges);

// ---------------- gradient audit ----------------

// Applies only this loop's alignment discrepancy (squared difference, or
// Chamfer for clouds of different sizes), scaled by `weight`, runs backward,
// and returns the names of parameter tensors that received nonzero gradient.
std::vector<std::string> loop_gradient_audit(TagGraph& graph, const ClosedLoop& loop,
                                             ParamSet& params, double weight = 1.0);

// Human-readable structure/basis report backing the analyze-graph command.
std::string describe_graph(const TagGraph& graph, const LoopBasis& basis);

}  // namespace rtag
