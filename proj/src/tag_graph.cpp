// src/tag_graph.cpp
#include "rtag/tag_graph.hpp"

#include <algorithm>
#include <deque>
#include <functional>
#include <set>

#include "rtag/common.hpp"

namespace rtag {

using Eigen::MatrixXd;

// ---------------- names ----------------

const char* to_string(Branch b) { return b == Branch::two_d ? "2d" : "3d"; }

const char* to_string(NodeKind k) {
  switch (k) {
    case NodeKind::feature: return "feature";
    case NodeKind::regulator: return "regulator";
    case NodeKind::depth_rel: return "depth_rel";
    case NodeKind::depth_abs: return "depth_abs";
    case NodeKind::joints: return "joints";
    case NodeKind::rotation: return "rotation";
    case NodeKind::translation: return "translation";
    case NodeKind::kappa2: return "kappa2";
    case NodeKind::kappa3: return "kappa3";
    case NodeKind::kappa3_fk: return "kappa3_fk";
    case NodeKind::kappa2_proj: return "kappa2_proj";
    case NodeKind::cloud_fk: return "cloud_fk";
    case NodeKind::cloud_unproj: return "cloud_unproj";
  }
  return "?";
}

const char* to_string(EdgeClass c) {
  switch (c) {
    case EdgeClass::transformation: return "transformation";
    case EdgeClass::robot_prior: return "robot_prior";
    case EdgeClass::network: return "network";
    case EdgeClass::alignment: return "alignment";
  }
  return "?";
}

std::string StateNode::label() const { return cat(to_string(kind), "/", to_string(branch)); }

// ---------------- graph lookups ----------------

int TagGraph::find(Branch branch, NodeKind kind) const {
  for (const StateNode& n : nodes)
    if (n.branch == branch && n.kind == kind) return n.id;
  return -1;
}

const StateNode& TagGraph::at(Branch branch, NodeKind kind) const {
  const int id = find(branch, kind);
  if (id < 0) throw DomainError(cat("no node ", to_string(kind), "/", to_string(branch)));
  return nodes[static_cast<std::size_t>(id)];
}

StateNode& TagGraph::at(Branch branch, NodeKind kind) {
  const int id = find(branch, kind);
  if (id < 0) throw DomainError(cat("no node ", to_string(kind), "/", to_string(branch)));
  return nodes[static_cast<std::size_t>(id)];
}

int TagGraph::find_edge(int a, int b) const {
  for (std::size_t i = 0; i < edges.size(); ++i)
    if ((edges[i].a == a && edges[i].b == b) || (edges[i].a == b && edges[i].b == a))
      return static_cast<int>(i);
  return -1;
}

std::size_t TagGraph::alignment_count() const {
  std::size_t n = 0;
  for (const Edge& e : edges) n += e.is_alignment() ? 1 : 0;
  return n;
}

// ---------------- structure ----------------

TagGraph make_tag_structure(const GraphOptions& opts) {
  TagGraph g;
  const auto add_node = [&g](Branch br, NodeKind k) {
    StateNode n;
    n.id = static_cast<int>(g.nodes.size());
    n.branch = br;
    n.kind = k;
    g.nodes.push_back(n);
    return n.id;
  };
  using B = Branch;
  using K = NodeKind;
  const int f = add_node(B::two_d, K::feature);
  const int lam = add_node(B::two_d, K::regulator);
  const int p2 = add_node(B::two_d, K::joints);
  const int rot = add_node(B::two_d, K::rotation);
  const int tra = add_node(B::two_d, K::translation);
  const int k2_2 = add_node(B::two_d, K::kappa2);
  const int k3_2 = add_node(B::two_d, K::kappa3);
  const int k3fk_2 = add_node(B::two_d, K::kappa3_fk);
  const int k2pr_2 = add_node(B::two_d, K::kappa2_proj);
  const int pfk_2 = add_node(B::two_d, K::cloud_fk);
  const int dep = add_node(B::three_d, K::depth_rel);
  const int dab = add_node(B::three_d, K::depth_abs);
  const int p3 = add_node(B::three_d, K::joints);
  const int k3_3 = add_node(B::three_d, K::kappa3);
  const int k3fk_3 = add_node(B::three_d, K::kappa3_fk);
  const int k2pr_3 = add_node(B::three_d, K::kappa2_proj);
  const int pfk_3 = add_node(B::three_d, K::cloud_fk);
  const int pun = add_node(B::three_d, K::cloud_unproj);

  const auto add_edge = [&g](int a, int b, EdgeClass c) { g.edges.push_back(Edge{a, b, c}); };
  using E = EdgeClass;
  // 2D head outputs.
  for (int v : {p2, rot, tra, k2_2, k3_2, lam}) add_edge(f, v, E::network);
  // Depth regulation and unprojection.
  add_edge(lam, dab, E::transformation);
  add_edge(dep, dab, E::transformation);
  add_edge(dab, pun, E::transformation);
  // 3D head inputs.
  for (int v : {dab, rot, tra}) add_edge(v, p3, E::network);
  for (int v : {dab, rot, tra}) add_edge(v, k3_3, E::network);
  // Forward kinematics.
  for (int v : {p3, rot, tra}) add_edge(v, k3fk_3, E::robot_prior);
  for (int v : {p2, rot, tra}) add_edge(v, k3fk_2, E::robot_prior);
  for (int v : {p3, rot, tra}) add_edge(v, pfk_3, E::robot_prior);
  for (int v : {p2, rot, tra}) add_edge(v, pfk_2, E::robot_prior);
  // Projections.
  add_edge(k3_3, k2pr_3, E::transformation);
  add_edge(k3_2, k2pr_2, E::transformation);
  // Alignment edges: consecutive chain pairs plus the two extra pairs that
  // the alignment loss penalizes directly.
  add_edge(p2, p3, E::alignment);
  add_edge(k3_2, k3_3, E::alignment);
  add_edge(k3_3, k3fk_3, E::alignment);
  add_edge(k3fk_3, k3fk_2, E::alignment);
  add_edge(k3_3, k3fk_2, E::alignment);
  add_edge(k2_2, k2pr_2, E::alignment);
  add_edge(k2pr_2, k2pr_3, E::alignment);
  add_edge(pfk_2, pfk_3, E::alignment);
  add_edge(pfk_3, pun, E::alignment);
  add_edge(pun, pfk_2, E::alignment);
  if (opts.extra_chain_pairs) {
    add_edge(k3_2, k3fk_3, E::alignment);
    add_edge(k3_2, k3fk_2, E::alignment);
    add_edge(k2_2, k2pr_3, E::alignment);
  }
  return g;
}

// ---------------- population ----------------

namespace {

// Returns the label of the first failed input, or empty if all are usable.
std::string first_failed(const TagGraph& g, std::initializer_list<std::pair<Branch, NodeKind>> in) {
  for (const auto& [br, k] : in) {
    const StateNode& n = g.at(br, k);
    if (!n.ok()) return n.label();
  }
  return {};
}

void poison(TagGraph& g, Branch br, NodeKind k, const std::string& why) {
  StateNode& n = g.at(br, k);
  n.failure = why;
  log_warn(cat("node ", n.label(), " unavailable: ", why));
}

// Runs one population step guarded by its inputs; on failure poisons every
// output with a diagnostic naming the cause.
void step(TagGraph& g, std::initializer_list<std::pair<Branch, NodeKind>> inputs,
          std::initializer_list<std::pair<Branch, NodeKind>> outputs,
          const std::function<void()>& body) {
  const std::string failed = first_failed(g, inputs);
  if (!failed.empty()) {
    for (const auto& [br, k] : outputs) poison(g, br, k, cat("input ", failed, " failed"));
    return;
  }
  try {
    body();
  } catch (const std::exception& e) {
    for (const auto& [br, k] : outputs) poison(g, br, k, e.what());
  }
}

}  // namespace

TagGraph build_tag(ad::Tape& tape, Networks& nets, const RobotModel& model,
                   const SceneImage& image, const Intrinsics& k, const MaskGrid& mask,
                   const GraphOptions& opts) {
  TagGraph g = make_tag_structure(opts);
  g.tape = &tape;
  using B = Branch;
  using K = NodeKind;
  const auto set = [&g](B br, K kind, ad::Value v) { g.at(br, kind).value = v; };

  step(g, {}, {{B::two_d, K::feature}}, [&] { set(B::two_d, K::feature, backbone_2d(tape, nets, image)); });
  step(g, {}, {{B::three_d, K::depth_rel}},
       [&] { set(B::three_d, K::depth_rel, backbone_3d(tape, nets, image)); });
  step(g, {{B::two_d, K::feature}},
       {{B::two_d, K::joints},
        {B::two_d, K::rotation},
        {B::two_d, K::translation},
        {B::two_d, K::kappa2},
        {B::two_d, K::kappa3},
        {B::two_d, K::regulator}},
       [&] {
         const Heads2dOut h = heads_2d(tape, nets, g.at(B::two_d, K::feature).value);
         set(B::two_d, K::joints, h.p);
         set(B::two_d, K::rotation, h.r);
         set(B::two_d, K::translation, h.t);
         set(B::two_d, K::kappa2, h.kappa2);
         set(B::two_d, K::kappa3, h.kappa3);
         set(B::two_d, K::regulator, h.lambda);
       });
  step(g, {{B::three_d, K::depth_rel}, {B::two_d, K::regulator}}, {{B::three_d, K::depth_abs}}, [&] {
    set(B::three_d, K::depth_abs,
        regulate_depth(g.at(B::three_d, K::depth_rel).value, g.at(B::two_d, K::regulator).value));
  });
  step(g, {{B::three_d, K::depth_abs}}, {{B::three_d, K::cloud_unproj}}, [&] {
    set(B::three_d, K::cloud_unproj,
        unproject(g.at(B::three_d, K::depth_abs).value, k, masked_pixels(mask)));
  });
  step(g, {{B::three_d, K::depth_abs}, {B::two_d, K::rotation}, {B::two_d, K::translation}},
       {{B::three_d, K::joints}, {B::three_d, K::kappa3}}, [&] {
         const Heads3dOut h =
             heads_3d(tape, nets, g.at(B::three_d, K::depth_abs).value,
                      g.at(B::two_d, K::rotation).value, g.at(B::two_d, K::translation).value);
         set(B::three_d, K::joints, h.p);
         set(B::three_d, K::kappa3, h.kappa3);
       });
  // Forward-kinematics nodes, one per (branch joint vector, attachment list).
  const auto fk_step = [&](B pbranch, B out_branch, K out_kind,
                           const std::vector<PointAttachment>& points) {
    step(g, {{pbranch, K::joints}, {B::two_d, K::rotation}, {B::two_d, K::translation}},
         {{out_branch, out_kind}}, [&] {
           set(out_branch, out_kind,
               attachment_points_camera(tape, model, points, g.at(pbranch, K::joints).value,
                                        g.at(B::two_d, K::rotation).value,
                                        g.at(B::two_d, K::translation).value));
         });
  };
  fk_step(B::three_d, B::three_d, K::kappa3_fk, model.keypoints);
  fk_step(B::two_d, B::two_d, K::kappa3_fk, model.keypoints);
  fk_step(B::three_d, B::three_d, K::cloud_fk, model.surface_points);
  fk_step(B::two_d, B::two_d, K::cloud_fk, model.surface_points);
  // Projections.
  step(g, {{B::three_d, K::kappa3}}, {{B::three_d, K::kappa2_proj}},
       [&] { set(B::three_d, K::kappa2_proj, project(g.at(B::three_d, K::kappa3).value, k)); });
  step(g, {{B::two_d, K::kappa3}}, {{B::two_d, K::kappa2_proj}},
       [&] { set(B::two_d, K::kappa2_proj, project(g.at(B::two_d, K::kappa3).value, k)); });
  return g;
}

TagGraph build_tag_from_ground_truth(ad::Tape& tape, const RobotModel& model,
                                     const Eigen::VectorXd& p, const Eigen::Matrix3d& r,
                                     const Eigen::Vector3d& t, const DepthMap& depth_abs,
                                     const MaskGrid& mask, const Intrinsics& k,
                                     const GraphOptions& opts) {
  if (!depth_abs.absolute) throw DomainError("ground-truth depth map must be absolute");
  TagGraph g = make_tag_structure(opts);
  g.tape = &tape;
  using B = Branch;
  using K = NodeKind;
  const auto set = [&g](B br, K kind, ad::Value v) { g.at(br, kind).value = v; };

  // Shared Value handles make both branches agree bit for bit.
  set(B::two_d, K::feature, tape.constant(MatrixXd::Zero(1, 1), "feature_placeholder"));
  ad::Value pv = tape.constant(p);
  set(B::two_d, K::joints, pv);
  set(B::three_d, K::joints, pv);
  ad::Value rv = tape.constant(r);
  ad::Value tv = tape.constant(t);
  set(B::two_d, K::rotation, rv);
  set(B::two_d, K::translation, tv);
  ad::Value lam = tape.constant(MatrixXd::Ones(1, 1), "lambda_gt");
  set(B::two_d, K::regulator, lam);
  ad::Value d_rel = tape.constant(depth_abs.values, "depth_gt");
  set(B::three_d, K::depth_rel, d_rel);
  ad::Value d_abs = regulate_depth(d_rel, lam);
  set(B::three_d, K::depth_abs, d_abs);

  ad::Value kappa3 = keypoints_from_config(tape, model, pv, rv, tv);
  set(B::two_d, K::kappa3, kappa3);
  set(B::three_d, K::kappa3, kappa3);
  set(B::two_d, K::kappa3_fk, kappa3);
  set(B::three_d, K::kappa3_fk, kappa3);
  ad::Value cloud = surface_cloud_from_config(tape, model, pv, rv, tv);
  set(B::two_d, K::cloud_fk, cloud);
  set(B::three_d, K::cloud_fk, cloud);

  step(g, {{B::two_d, K::kappa3}},
       {{B::two_d, K::kappa2}, {B::two_d, K::kappa2_proj}, {B::three_d, K::kappa2_proj}}, [&] {
         ad::Value px = project(kappa3, k);
         set(B::two_d, K::kappa2, px);
         set(B::two_d, K::kappa2_proj, px);
         set(B::three_d, K::kappa2_proj, px);
       });
  step(g, {{B::three_d, K::depth_abs}}, {{B::three_d, K::cloud_unproj}},
       [&] { set(B::three_d, K::cloud_unproj, unproject(d_abs, k, masked_pixels(mask))); });
  return g;
}

// ---------------- loop enumeration ----------------

namespace {

// Neighbor priority: 3D branch first, then kind declaration order, then id.
// Fixing this makes the spanning tree, and with it the basis, reproducible.
struct NeighborOrder {
  const TagGraph* g;
  bool operator()(const std::pair<int, int>& x, const std::pair<int, int>& y) const {
    const StateNode& a = g->nodes[static_cast<std::size_t>(x.second)];
    const StateNode& b = g->nodes[static_cast<std::size_t>(y.second)];
    const auto key = [](const StateNode& n) {
      return std::make_tuple(n.branch == Branch::three_d ? 0 : 1, static_cast<int>(n.kind), n.id);
    };
    return key(a) < key(b);
  }
};

// Edge list of the graph plus (when both backbones exist) the virtual edge
// joining them; its id is graph.edges.size().
std::vector<Edge> edges_with_virtual(const TagGraph& g, int* virtual_id) {
  std::vector<Edge> edges = g.edges;
  *virtual_id = -1;
  const int f = g.find(Branch::two_d, NodeKind::feature);
  const int d = g.find(Branch::three_d, NodeKind::depth_rel);
  if (f >= 0 && d >= 0) {
    *virtual_id = static_cast<int>(edges.size());
    edges.push_back(Edge{f, d, EdgeClass::transformation});
  }
  return edges;
}

std::vector<std::vector<std::pair<int, int>>> adjacency(const TagGraph& g,
                                                        const std::vector<Edge>& edges) {
  std::vector<std::vector<std::pair<int, int>>> adj(g.nodes.size());
  for (std::size_t i = 0; i < edges.size(); ++i) {
    if (edges[i].a == edges[i].b) throw DomainError("self-edges are not allowed");
    adj[static_cast<std::size_t>(edges[i].a)].emplace_back(static_cast<int>(i), edges[i].b);
    adj[static_cast<std::size_t>(edges[i].b)].emplace_back(static_cast<int>(i), edges[i].a);
  }
  for (auto& lst : adj) std::sort(lst.begin(), lst.end(), NeighborOrder{&g});
  return adj;
}

}  // namespace

LoopBasis enumerate_closed_loops(const TagGraph& graph) {
  LoopBasis basis;
  std::vector<Edge> edges = edges_with_virtual(graph, &basis.virtual_edge_id);
  const auto adj = adjacency(graph, edges);
  const int n = static_cast<int>(graph.nodes.size());

  // BFS forest; the feature node roots its component, extra components root
  // at their smallest node id.
  std::vector<int> parent(static_cast<std::size_t>(n), -1);
  std::vector<int> parent_edge(static_cast<std::size_t>(n), -1);
  std::vector<char> visited(static_cast<std::size_t>(n), 0);
  std::vector<char> in_tree(edges.size(), 0);
  std::vector<int> roots;
  const int f = graph.find(Branch::two_d, NodeKind::feature);
  if (f >= 0) roots.push_back(f);
  for (int i = 0; i < n; ++i) roots.push_back(i);
  for (int root : roots) {
    if (visited[static_cast<std::size_t>(root)]) continue;
    ++basis.component_count;
    std::deque<int> queue{root};
    visited[static_cast<std::size_t>(root)] = 1;
    while (!queue.empty()) {
      const int u = queue.front();
      queue.pop_front();
      for (const auto& [eid, v] : adj[static_cast<std::size_t>(u)]) {
        if (visited[static_cast<std::size_t>(v)]) continue;
        visited[static_cast<std::size_t>(v)] = 1;
        parent[static_cast<std::size_t>(v)] = u;
        parent_edge[static_cast<std::size_t>(v)] = eid;
        in_tree[static_cast<std::size_t>(eid)] = 1;
        queue.push_back(v);
      }
    }
  }

  const auto path_to_root = [&](int u) {
    // Edge and node sequences from u up to its root.
    std::vector<int> es, vs{u};
    while (parent[static_cast<std::size_t>(u)] >= 0) {
      es.push_back(parent_edge[static_cast<std::size_t>(u)]);
      u = parent[static_cast<std::size_t>(u)];
      vs.push_back(u);
    }
    return std::make_pair(es, vs);
  };

  for (std::size_t eid = 0; eid < edges.size(); ++eid) {
    if (in_tree[eid]) continue;
    const Edge& e = edges[eid];
    auto [ea, va] = path_to_root(e.a);
    auto [eb, vb] = path_to_root(e.b);
    // Strip the shared tail above the lowest common ancestor.
    while (!ea.empty() && !eb.empty() && ea.back() == eb.back()) {
      ea.pop_back();
      va.pop_back();
      eb.pop_back();
      vb.pop_back();
    }
    // Cycle: a -> lca -> b, then the non-tree edge back to a.
    std::vector<int> cyc_edges = ea;
    cyc_edges.insert(cyc_edges.end(), eb.rbegin(), eb.rend());
    cyc_edges.push_back(static_cast<int>(eid));
    std::vector<int> cyc_nodes = va;  // a ... lca
    for (auto it = vb.rbegin() + 1; it != vb.rend(); ++it) cyc_nodes.push_back(*it);
    cyc_nodes.push_back(e.a);

    std::vector<int> sorted = cyc_edges;
    std::sort(sorted.begin(), sorted.end());
    basis.fundamental_cycles.push_back(sorted);

    int align_edge = -1, align_count = 0;
    for (int ce : cyc_edges)
      if (edges[static_cast<std::size_t>(ce)].is_alignment()) {
        align_edge = ce;
        ++align_count;
      }
    if (align_count != 1) continue;

    ClosedLoop loop;
    loop.alignment_edge_id = align_edge;
    const auto vpos = std::find(cyc_edges.begin(), cyc_edges.end(), basis.virtual_edge_id);
    if (basis.virtual_edge_id >= 0 && vpos != cyc_edges.end()) {
      // Rotate so the open path starts right after the virtual edge, then
      // elide it; orient the path to start at the feature node.
      const std::size_t pos = static_cast<std::size_t>(vpos - cyc_edges.begin());
      std::vector<int> open_edges, open_nodes;
      const std::size_t len = cyc_edges.size();
      for (std::size_t i = 1; i < len; ++i)
        open_edges.push_back(cyc_edges[(pos + i) % len]);
      // cyc_nodes has len+1 entries with cyc_nodes[i] -- cyc_nodes[i+1] joined
      // by cyc_edges[i]; the open path visits len nodes.
      for (std::size_t i = 0; i < len; ++i) open_nodes.push_back(cyc_nodes[(pos + 1 + i) % len]);
      if (open_nodes.front() != f) {
        std::reverse(open_edges.begin(), open_edges.end());
        std::reverse(open_nodes.begin(), open_nodes.end());
      }
      loop.type = LoopType::backbone_connecting;
      loop.edge_ids = std::move(open_edges);
      loop.node_ids = std::move(open_nodes);
    } else {
      loop.type = LoopType::alignment_forward;
      loop.edge_ids = cyc_edges;
      loop.node_ids = cyc_nodes;
    }
    basis.loops.push_back(std::move(loop));
  }
  return basis;
}

std::vector<std::vector<int>> enumerate_all_cycles(const TagGraph& graph) {
  int virtual_id = -1;
  std::vector<Edge> edges = edges_with_virtual(graph, &virtual_id);
  const auto adj = adjacency(graph, edges);
  const int n = static_cast<int>(graph.nodes.size());

  std::set<std::vector<int>> out;
  std::vector<char> in_path(static_cast<std::size_t>(n), 0);
  std::vector<int> path_nodes, path_edges;
  // Each cycle is emitted once: at its smallest vertex, in the orientation
  // whose second vertex id is below its last vertex id.
  std::function<void(int, int)> dfs = [&](int s, int u) {
    for (const auto& [eid, v] : adj[static_cast<std::size_t>(u)]) {
      if (v == s && path_nodes.size() >= 3 && path_nodes[1] < path_nodes.back()) {
        std::vector<int> cyc = path_edges;
        cyc.push_back(eid);
        std::sort(cyc.begin(), cyc.end());
        out.insert(std::move(cyc));
      } else if (v > s && !in_path[static_cast<std::size_t>(v)]) {
        in_path[static_cast<std::size_t>(v)] = 1;
        path_nodes.push_back(v);
        path_edges.push_back(eid);
        dfs(s, v);
        path_edges.pop_back();
        path_nodes.pop_back();
        in_path[static_cast<std::size_t>(v)] = 0;
      }
    }
  };
  for (int s = 0; s < n; ++s) {
    in_path[static_cast<std::size_t>(s)] = 1;
    path_nodes = {s};
    path_edges.clear();
    dfs(s, s);
    in_path[static_cast<std::size_t>(s)] = 0;
  }
  return {out.begin(), out.end()};
}

bool in_cycle_span(const LoopBasis& basis, const std::vector<int>& cycle_edges) {
  // Z2 elimination over edge-id bitmasks.
  const auto to_mask = [](const std::vector<int>& ids) {
    std::uint64_t m = 0;
    for (int id : ids) {
      if (id < 0 || id >= 64) throw DomainError("in_cycle_span: edge id out of bitmask range");
      m |= std::uint64_t{1} << id;
    }
    return m;
  };
  // XOR basis indexed by highest set bit.
  std::uint64_t by_bit[64] = {};
  const auto reduce = [&by_bit](std::uint64_t x) {
    for (int b = 63; b >= 0; --b) {
      if (((x >> b) & 1u) == 0) continue;
      if (by_bit[b] == 0) return x;  // irreducible remainder with high bit b
      x ^= by_bit[b];
    }
    return x;
  };
  for (const auto& c : basis.fundamental_cycles) {
    const std::uint64_t r = reduce(to_mask(c));
    if (r != 0) {
      int high = 63;
      while (((r >> high) & 1u) == 0) --high;
      by_bit[high] = r;
    }
  }
  return reduce(to_mask(cycle_edges)) == 0;
}

// ---------------- gradient audit ----------------

namespace {

bool is_cloud(NodeKind k) { return k == NodeKind::cloud_fk || k == NodeKind::cloud_unproj; }

// Discrepancy across one alignment edge: mean squared difference for
// like-shaped quantities, bidirectional Chamfer for unordered clouds.
ad::Value alignment_discrepancy(const StateNode& a, const StateNode& b) {
  if (is_cloud(a.kind) || is_cloud(b.kind))
    return ad::add(ad::chamfer_uni(a.value, b.value), ad::chamfer_uni(b.value, a.value));
  return ad::scale(ad::sum_squares(ad::sub(a.value, b.value)),
                   1.0 / static_cast<double>(a.value.data().size()));
}

}  // namespace

std::vector<std::string> loop_gradient_audit(TagGraph& graph, const ClosedLoop& loop,
                                             ParamSet& params, double weight) {
  if (graph.tape == nullptr) throw DomainError("loop_gradient_audit: graph is not populated");
  if (loop.alignment_edge_id < 0 ||
      loop.alignment_edge_id >= static_cast<int>(graph.edges.size()))
    throw DomainError("loop_gradient_audit: loop has no valid alignment edge");
  const Edge& e = graph.edges[static_cast<std::size_t>(loop.alignment_edge_id)];
  StateNode& na = graph.nodes[static_cast<std::size_t>(e.a)];
  StateNode& nb = graph.nodes[static_cast<std::size_t>(e.b)];
  if (!na.ok() || !nb.ok())
    throw DomainError(cat("loop_gradient_audit: alignment endpoint failed (",
                          na.ok() ? nb.label() : na.label(), ")"));
  params.zero_grad();
  graph.tape->zero_node_grads();
  graph.tape->backward(ad::scale(alignment_discrepancy(na, nb), weight));
  std::vector<std::string> touched;
  for (const auto& t : params.all())
    if (t->grad.size() > 0 && t->grad.cwiseAbs().maxCoeff() > 0.0) touched.push_back(t->name);
  return touched;
}

// ---------------- reporting ----------------

std::string describe_graph(const TagGraph& graph, const LoopBasis& basis) {
  std::ostringstream os;
  os << "nodes (" << graph.nodes.size() << "):\n";
  for (const StateNode& n : graph.nodes) {
    os << "  [" << n.id << "] " << n.label();
    if (!n.failure.empty())
      os << "  FAILED: " << n.failure;
    else if (n.value.valid())
      os << "  " << n.value.rows() << "x" << n.value.cols();
    os << "\n";
  }
  os << "edges (" << graph.edges.size() << ", " << graph.alignment_count() << " alignment):\n";
  for (std::size_t i = 0; i < graph.edges.size(); ++i) {
    const Edge& e = graph.edges[i];
    os << "  [" << i << "] " << graph.nodes[static_cast<std::size_t>(e.a)].label() << " -- "
       << graph.nodes[static_cast<std::size_t>(e.b)].label() << "  (" << to_string(e.cls) << ")\n";
  }
  os << "loop basis (" << basis.loops.size() << " kept of " << basis.fundamental_cycles.size()
     << " fundamental cycles, " << basis.component_count << " component"
     << (basis.component_count == 1 ? "" : "s") << "):\n";
  for (std::size_t i = 0; i < basis.loops.size(); ++i) {
    const ClosedLoop& l = basis.loops[i];
    const Edge& ae = graph.edges[static_cast<std::size_t>(l.alignment_edge_id)];
    os << "  [" << i << "] "
       << (l.type == LoopType::alignment_forward ? "loop" : "backbone-line") << " length "
       << l.edge_ids.size() << ", alignment "
       << graph.nodes[static_cast<std::size_t>(ae.a)].label() << " <=> "
       << graph.nodes[static_cast<std::size_t>(ae.b)].label() << "\n";
  }
  return os.str();
}

}  // namespace rtag
