// src/cli_commands.cpp
//
// The gen / train / eval / analyze-graph / overlay commands and their file
// formats: JSON config + echo, eval CSVs, graph report/JSON, P6 overlays.

#include "rtag/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <utility>

#include "rtag/common.hpp"
#include "rtag/kinematics.hpp"
#include "rtag/losses.hpp"
#include "rtag/networks.hpp"
#include "rtag/tag_graph.hpp"

namespace rtag {
namespace {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(cat("cannot open ", path, " for writing"));
  out << text;
  if (!out) throw DataError(cat("short write to ", path));
}

// ---------------- config parsing ----------------

void expect_keys(const ordered_json& j, const std::string& where,
                 std::initializer_list<const char*> allowed) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed) known = known || item.key() == k;
    if (!known) throw DataError(cat("config: unknown key \"", item.key(), "\" in ", where));
  }
}

template <typename T>
void read_key(const ordered_json& j, const char* key, const std::string& display, T& out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(cat("config: bad value for ", display, ": ", e.what()));
  }
}

template <typename T, std::size_t N>
void read_fixed_array(const ordered_json& j, const char* key, const char* display,
                      std::array<T, N>& out) {
  if (!j.contains(key)) return;
  const auto& a = j.at(key);
  if (!a.is_array() || a.size() != N)
    throw DataError(cat("config: ", display, " must be an array of ", N, " entries"));
  for (std::size_t i = 0; i < N; ++i) {
    try {
      a.at(i).get_to(out[i]);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(cat("config: bad value for ", display, "[", i, "]: ", e.what()));
    }
  }
}

void read_schedule(const ordered_json& j, const char* key, StageSchedule& s) {
  if (!j.contains(key)) return;
  const auto& o = j.at(key);
  if (!o.is_object()) throw DataError(cat("config: ", key, " must be an object"));
  expect_keys(o, key, {"lr", "epochs", "batch", "decay"});
  const std::string k(key);
  read_key(o, "lr", k + ".lr", s.lr);
  read_key(o, "epochs", k + ".epochs", s.epochs);
  read_key(o, "batch", k + ".batch", s.batch);
  read_key(o, "decay", k + ".decay", s.decay);
}

TrainConfig parse_train_config(const ordered_json& j) {
  TrainConfig cfg;
  expect_keys(j, "the top level",
              {"seed", "robot", "train_dir", "val_dir", "ood_dir", "out_dir",
               "stage1_checkpoint", "stage1", "stage2", "weights", "loops", "net",
               "add_threshold_m", "patience"});
  read_key(j, "seed", "seed", cfg.seed);
  read_key(j, "robot", "robot", cfg.robot);
  read_key(j, "train_dir", "train_dir", cfg.train_dir);
  read_key(j, "val_dir", "val_dir", cfg.val_dir);
  read_key(j, "ood_dir", "ood_dir", cfg.ood_dir);
  read_key(j, "out_dir", "out_dir", cfg.out_dir);
  read_key(j, "stage1_checkpoint", "stage1_checkpoint", cfg.stage1_checkpoint);
  read_schedule(j, "stage1", cfg.stage1);
  read_schedule(j, "stage2", cfg.stage2);
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    if (!w.is_object()) throw DataError("config: weights must be an object");
    expect_keys(w, "weights", {"alpha", "beta"});
    read_fixed_array(w, "alpha", "weights.alpha", cfg.weights.alpha);
    read_fixed_array(w, "beta", "weights.beta", cfg.weights.beta);
  }
  if (j.contains("loops")) {
    const auto& l = j.at("loops");
    if (!l.is_object()) throw DataError("config: loops must be an object");
    expect_keys(l, "loops", {"joints", "keypoints", "pointcloud", "stop_align_target"});
    read_key(l, "joints", "loops.joints", cfg.loops.joint_loops);
    read_key(l, "keypoints", "loops.keypoints", cfg.loops.keypoint_loops);
    read_key(l, "pointcloud", "loops.pointcloud", cfg.loops.pointcloud_loops);
    read_fixed_array(l, "stop_align_target", "loops.stop_align_target",
                     cfg.loops.stop_align_target);
  }
  if (j.contains("net")) {
    const auto& n = j.at("net");
    if (!n.is_object()) throw DataError("config: net must be an object");
    expect_keys(n, "net",
                {"image_size", "feature_dim", "hidden", "conv_channels", "pool_2d", "pool_3d"});
    read_key(n, "image_size", "net.image_size", cfg.net.image_size);
    read_key(n, "feature_dim", "net.feature_dim", cfg.net.feature_dim);
    read_key(n, "hidden", "net.hidden", cfg.net.hidden);
    read_key(n, "conv_channels", "net.conv_channels", cfg.net.conv_channels);
    read_key(n, "pool_2d", "net.pool_2d", cfg.net.pool_2d);
    read_key(n, "pool_3d", "net.pool_3d", cfg.net.pool_3d);
  }
  read_key(j, "add_threshold_m", "add_threshold_m", cfg.add_threshold_m);
  read_key(j, "patience", "patience", cfg.patience);
  return cfg;
}

// ---------------- shared command helpers ----------------

void check_image_size(const DatasetMeta& meta, const NetConfig& net, const std::string& dir) {
  if (meta.image_size != net.image_size)
    throw DataError(cat("dataset ", dir, " has image size ", meta.image_size,
                        " but the network expects ", net.image_size));
}

Networks nets_for(const TrainConfig& cfg, const RobotModel& model) {
  return make_networks(model, intrinsics_for_size(cfg.net.image_size), cfg.net, cfg.seed);
}

Dataset read_split_dir(const std::string& dir, const RobotModel& model, const NetConfig& net) {
  Dataset ds = read_dataset(resolve_data_path(dir), model);
  check_image_size(ds.meta, net, dir);
  return ds;
}

// ---------------- gen ----------------

int cmd_gen(const std::string& robot, const std::string& split_name, int count,
            std::uint64_t seed, const std::string& out, int image_size) {
  const RobotModel model = load_robot_model(robot);
  const Split split = parse_split(split_name);
  if (count < 1) throw DomainError("gen: count must be >= 1");
  const Intrinsics k = intrinsics_for_size(image_size);
  const std::vector<Scene> scenes = generate_split(model, split, count, seed, k);
  DatasetMeta meta;
  meta.split = split;
  meta.seed = seed;
  meta.model_hash = model_hash(model);
  meta.count = count;
  meta.image_size = image_size;
  meta.noise_sigma = view_ranges(split).noise_sigma;
  const std::string dir = resolve_data_path(out);
  write_dataset(dir, meta, scenes);
  std::cout << "wrote " << count << " " << to_string(split) << " scenes (" << image_size << "x"
            << image_size << ", seed " << seed << ") to " << dir << "\n";
  return kExitOk;
}

// ---------------- train ----------------

std::vector<MetricsRow> train_once(const TrainConfig& cfg) {
  validate_train_config(cfg);
  if (cfg.robot.empty()) throw DomainError("train: robot is required");
  if (cfg.train_dir.empty()) throw DomainError("train: train_dir is required");
  if (cfg.val_dir.empty()) throw DomainError("train: val_dir is required");
  const RobotModel model = load_robot_model(cfg.robot);
  const Dataset train = read_split_dir(cfg.train_dir, model, cfg.net);
  const Dataset val = read_split_dir(cfg.val_dir, model, cfg.net);
  const bool run_stage2 = !cfg.ood_dir.empty();
  Dataset ood;
  if (run_stage2) ood = read_split_dir(cfg.ood_dir, model, cfg.net);

  Networks nets = nets_for(cfg, model);
  fs::create_directories(cfg.out_dir);
  const fs::path out(cfg.out_dir);
  write_train_config((out / "config_echo.json").string(), cfg);

  std::vector<MetricsRow> rows;
  const RowCallback collect = [&rows](const MetricsRow& r) {
    rows.push_back(r);
    if (r.split != "train")
      std::cout << "[stage " << r.stage << "] epoch " << r.epoch << " " << r.split << ": auc "
                << r.add_auc << ", joint dev " << r.mean_joint_dev_deg << " deg" << std::endl;
  };

  bool aborted = false;
  if (!cfg.stage1_checkpoint.empty()) {
    load_checkpoint(cfg.stage1_checkpoint, nets.params);
    std::cout << "stage 1 skipped; loaded " << cfg.stage1_checkpoint << "\n";
  } else {
    const StageResult r1 = train_stage1(nets, model, train.scenes, val.scenes, cfg, collect);
    aborted = r1.aborted;
    save_checkpoint((out / "stage1.ckpt").string(), nets.params);
    std::cout << "stage 1 done: best epoch " << r1.best_epoch << ", val auc " << r1.best_val_auc
              << "\n";
  }
  if (!aborted && run_stage2) {
    const StageResult r2 = train_stage2(nets, model, ood.scenes, val.scenes, cfg, collect);
    aborted = r2.aborted;
    save_checkpoint((out / "stage2.ckpt").string(), nets.params);
    std::cout << "stage 2 done: best epoch " << r2.best_epoch << ", align loss "
              << r2.best_align_loss << "\n";
  }
  write_metrics_csv((out / "metrics.csv").string(), rows);
  std::cout << "metrics written to " << (out / "metrics.csv").string() << "\n";
  if (aborted)
    throw NumericError(
        "training diverged; parameters were rolled back to the last finite epoch "
        "(partial metrics retained)");
  return rows;
}

int cmd_train(const TrainConfig& cfg, int seed_sweep) {
  if (seed_sweep < 0) throw DomainError("train: --seed-sweep must be >= 0");
  if (seed_sweep <= 1) {
    train_once(cfg);
    return kExitOk;
  }
  std::ostringstream sum;
  sum << "seed,final_val_auc,final_ood_auc\n";
  double val_total = 0, ood_total = 0;
  int val_n = 0, ood_n = 0;
  for (int i = 0; i < seed_sweep; ++i) {
    TrainConfig c = cfg;
    c.seed = cfg.seed + static_cast<std::uint64_t>(i);
    c.out_dir = (fs::path(cfg.out_dir) / ("seed_" + std::to_string(c.seed))).string();
    std::cout << "--- seed " << c.seed << " -> " << c.out_dir << " ---\n";
    const std::vector<MetricsRow> rows = train_once(c);
    double val_auc = std::nan(""), ood_auc = std::nan("");
    for (const MetricsRow& r : rows) {
      if (r.split == "val") val_auc = r.add_auc;
      if (r.split == "ood") ood_auc = r.add_auc;
    }
    if (std::isfinite(val_auc)) val_total += val_auc, ++val_n;
    if (std::isfinite(ood_auc)) ood_total += ood_auc, ++ood_n;
    sum << c.seed << "," << fmt_g(val_auc) << "," << fmt_g(ood_auc) << "\n";
  }
  sum << "mean," << fmt_g(val_n ? val_total / val_n : std::nan("")) << ","
      << fmt_g(ood_n ? ood_total / ood_n : std::nan("")) << "\n";
  fs::create_directories(cfg.out_dir);
  const std::string path = (fs::path(cfg.out_dir) / "sweep_summary.csv").string();
  write_text_file(path, sum.str());
  std::cout << sum.str() << "sweep summary written to " << path << "\n";
  return kExitOk;
}

// ---------------- eval ----------------

int cmd_eval(const TrainConfig& cfg, const std::string& checkpoint, const std::string& data_dir,
             const std::string& out_dir, double threshold) {
  if (!(threshold > 0)) throw DomainError("eval: threshold must be > 0");
  if (cfg.robot.empty()) throw DomainError("eval: the config provides no robot file");
  const RobotModel model = load_robot_model(cfg.robot);
  const Dataset ds = read_split_dir(data_dir, model, cfg.net);
  if (ds.scenes.empty()) throw DataError(cat("eval: dataset ", data_dir, " has no scenes"));
  Networks nets = nets_for(cfg, model);
  load_checkpoint(checkpoint, nets.params);
  const EvalMetrics m = evaluate_split(nets, model, ds.scenes, threshold);

  std::ostringstream os;
  os << "split,count,add_threshold_m,add_auc,mean_joint_dev_deg";
  for (int i = 0; i < m.per_joint_dev_deg.size(); ++i) os << ",joint" << i + 1 << "_dev_deg";
  os << "\n"
     << to_string(ds.meta.split) << "," << ds.scenes.size() << "," << fmt_g(threshold) << ","
     << fmt_g(m.add_auc) << "," << fmt_g(m.mean_joint_dev_deg);
  for (int i = 0; i < m.per_joint_dev_deg.size(); ++i) os << "," << fmt_g(m.per_joint_dev_deg(i));
  os << "\n";

  fs::create_directories(out_dir);
  const fs::path out(out_dir);
  write_text_file((out / "eval_metrics.csv").string(), os.str());
  write_text_file((out / "add_curve.csv").string(), add_curve_csv(m.add_values, threshold));
  std::cout << "add auc " << m.add_auc << " (threshold " << threshold << " m), mean joint dev "
            << m.mean_joint_dev_deg << " deg over " << ds.scenes.size() << " scenes\n"
            << "wrote " << (out / "eval_metrics.csv").string() << " and "
            << (out / "add_curve.csv").string() << "\n";
  return kExitOk;
}

// ---------------- analyze-graph ----------------

int cmd_analyze(const std::string& robot, const std::string& out_dir, bool extra_chain_pairs) {
  const RobotModel model = load_robot_model(robot);
  GraphOptions opts;
  opts.extra_chain_pairs = extra_chain_pairs;
  const TagGraph graph = make_tag_structure(opts);
  const LoopBasis basis = enumerate_closed_loops(graph);

  std::ostringstream head;
  head << "robot " << robot << ": " << model.dof() << " joints, " << model.keypoint_count()
       << " keypoints, " << model.surface_count() << " surface points\n\n";
  const std::string report = head.str() + graph_report(graph, basis);

  ordered_json j = ordered_json::parse(graph_json(graph, basis));
  j["robot"] = ordered_json{{"file", robot},
                            {"dof", model.dof()},
                            {"keypoints", model.keypoint_count()},
                            {"surface_points", model.surface_count()},
                            {"model_hash", model_hash(model)}};

  if (out_dir.empty()) {
    std::cout << report;
  } else {
    fs::create_directories(out_dir);
    const fs::path out(out_dir);
    write_text_file((out / "report.txt").string(), report);
    write_text_file((out / "graph.json").string(), j.dump(2) + "\n");
    int fwd = 0, bcl = 0;
    for (const ClosedLoop& l : basis.loops)
      (l.type == LoopType::alignment_forward ? fwd : bcl)++;
    std::cout << "closed loops: " << basis.loops.size() << " (" << fwd << " alignment-forward, "
              << bcl << " backbone-connecting)\n"
              << "wrote " << (out / "report.txt").string() << " and "
              << (out / "graph.json").string() << "\n";
  }
  return kExitOk;
}

// ---------------- overlay ----------------

int cmd_overlay(const TrainConfig& cfg, const std::string& checkpoint, const std::string& data_dir,
                int index, const std::string& out_file) {
  if (cfg.robot.empty()) throw DomainError("overlay: the config provides no robot file");
  const RobotModel model = load_robot_model(cfg.robot);
  const Dataset ds = read_split_dir(data_dir, model, cfg.net);
  if (index < 0 || index >= static_cast<int>(ds.scenes.size()))
    throw DataError(cat("overlay: scene index ", index, " out of range [0, ", ds.scenes.size(),
                        ") for dataset ", data_dir));
  Networks nets = nets_for(cfg, model);
  load_checkpoint(checkpoint, nets.params);
  const Scene& scene = ds.scenes[static_cast<std::size_t>(index)];
  const ScenePrediction pred = predict_scene(nets, model, scene);
  const RgbImage img = render_overlay(scene, scene.kappa3, pred.kappa3);
  const fs::path parent = fs::path(out_file).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  write_ppm(out_file, img);
  std::cout << "wrote " << img.width << "x" << img.height << " overlay to " << out_file << " (add "
            << pred.add << " m)\n";
  return kExitOk;
}

}  // namespace

// ---------------- config files ----------------

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(cat("config: cannot open ", path));
  ordered_json j;
  try {
    j = ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(cat("config: ", path, " is not valid JSON: ", e.what()));
  }
  if (!j.is_object()) throw DataError(cat("config: ", path, " must contain a JSON object"));
  return parse_train_config(j);
}

std::string train_config_json(const TrainConfig& cfg) {
  ordered_json j;
  j["seed"] = cfg.seed;
  j["robot"] = cfg.robot;
  j["train_dir"] = cfg.train_dir;
  j["val_dir"] = cfg.val_dir;
  j["ood_dir"] = cfg.ood_dir;
  j["out_dir"] = cfg.out_dir;
  j["stage1_checkpoint"] = cfg.stage1_checkpoint;
  j["stage1"] = ordered_json{{"lr", cfg.stage1.lr},
                             {"epochs", cfg.stage1.epochs},
                             {"batch", cfg.stage1.batch},
                             {"decay", cfg.stage1.decay}};
  j["stage2"] = ordered_json{{"lr", cfg.stage2.lr},
                             {"epochs", cfg.stage2.epochs},
                             {"batch", cfg.stage2.batch},
                             {"decay", cfg.stage2.decay}};
  j["weights"] = ordered_json{{"alpha", cfg.weights.alpha}, {"beta", cfg.weights.beta}};
  j["loops"] = ordered_json{{"joints", cfg.loops.joint_loops},
                            {"keypoints", cfg.loops.keypoint_loops},
                            {"pointcloud", cfg.loops.pointcloud_loops},
                            {"stop_align_target", cfg.loops.stop_align_target}};
  j["net"] = ordered_json{{"image_size", cfg.net.image_size},
                          {"feature_dim", cfg.net.feature_dim},
                          {"hidden", cfg.net.hidden},
                          {"conv_channels", cfg.net.conv_channels},
                          {"pool_2d", cfg.net.pool_2d},
                          {"pool_3d", cfg.net.pool_3d}};
  j["add_threshold_m"] = cfg.add_threshold_m;
  j["patience"] = cfg.patience;
  return j.dump(2) + "\n";
}

void write_train_config(const std::string& path, const TrainConfig& cfg) {
  write_text_file(path, train_config_json(cfg));
}

std::string resolve_data_path(const std::string& path) {
  if (path.empty()) return path;
  if (fs::path(path).is_absolute()) return path;
  const char* base = std::getenv("RTAG_DATA_DIR");
  if (base == nullptr || *base == '\0') return path;
  return (fs::path(base) / path).string();
}

// ---------------- eval outputs ----------------

std::string add_curve_csv(const std::vector<double>& add, double threshold_max, int steps) {
  if (add.empty()) throw DomainError("add_curve_csv: no distances");
  if (!(threshold_max > 0)) throw DomainError("add_curve_csv: threshold_max must be > 0");
  if (steps < 1) throw DomainError("add_curve_csv: steps must be >= 1");
  std::ostringstream os;
  os << "threshold_m,fraction\n";
  const double n = static_cast<double>(add.size());
  for (int i = 0; i <= steps; ++i) {
    const double t = threshold_max * i / steps;
    int below = 0;
    for (double d : add)
      if (std::isfinite(d) && d <= t) ++below;
    os << fmt_g(t) << "," << fmt_g(below / n) << "\n";
  }
  return os.str();
}

// ---------------- analyze-graph outputs ----------------

std::string graph_json(const TagGraph& graph, const LoopBasis& basis) {
  ordered_json j;
  j["nodes"] = ordered_json::array();
  for (const StateNode& n : graph.nodes)
    j["nodes"].push_back(ordered_json{{"id", n.id},
                                      {"branch", to_string(n.branch)},
                                      {"kind", to_string(n.kind)},
                                      {"label", n.label()}});
  j["edges"] = ordered_json::array();
  ordered_json counts;
  for (EdgeClass c : {EdgeClass::network, EdgeClass::transformation, EdgeClass::robot_prior,
                      EdgeClass::alignment})
    counts[to_string(c)] = 0;
  for (std::size_t i = 0; i < graph.edges.size(); ++i) {
    const Edge& e = graph.edges[i];
    j["edges"].push_back(ordered_json{{"id", static_cast<int>(i)},
                                      {"a", e.a},
                                      {"b", e.b},
                                      {"class", to_string(e.cls)}});
    counts[to_string(e.cls)] = counts[to_string(e.cls)].get<int>() + 1;
  }
  counts["total"] = static_cast<int>(graph.edges.size());
  j["edge_counts"] = counts;

  int fwd = 0, bcl = 0;
  ordered_json items = ordered_json::array();
  for (const ClosedLoop& l : basis.loops) {
    (l.type == LoopType::alignment_forward ? fwd : bcl)++;
    items.push_back(ordered_json{
        {"type", l.type == LoopType::alignment_forward ? "alignment_forward"
                                                       : "backbone_connecting"},
        {"alignment_edge_id", l.alignment_edge_id},
        {"edge_ids", l.edge_ids},
        {"node_ids", l.node_ids}});
  }
  j["loops"] = ordered_json{{"count", static_cast<int>(basis.loops.size())},
                            {"alignment_forward", fwd},
                            {"backbone_connecting", bcl},
                            {"fundamental_cycles", static_cast<int>(basis.fundamental_cycles.size())},
                            {"virtual_edge_id", basis.virtual_edge_id},
                            {"component_count", basis.component_count},
                            {"items", items}};

  ordered_json terms = ordered_json::array();
  for (const AlignmentTermSpec& s : alignment_term_specs()) {
    const int a = graph.find(s.branch_a, s.kind_a);
    const int b = graph.find(s.branch_b, s.kind_b);
    terms.push_back(ordered_json{{"name", s.name},
                                 {"loop_group", s.loop_group},
                                 {"a", graph.nodes[static_cast<std::size_t>(a)].label()},
                                 {"b", graph.nodes[static_cast<std::size_t>(b)].label()},
                                 {"edge_id", graph.find_edge(a, b)}});
  }
  j["alignment_terms"] = terms;
  return j.dump(2) + "\n";
}

std::string graph_report(const TagGraph& graph, const LoopBasis& basis) {
  std::ostringstream os;
  os << describe_graph(graph, basis);
  const auto& specs = alignment_term_specs();
  os << "\nloss-bearing alignment edges (" << specs.size() << "):\n";
  for (const AlignmentTermSpec& s : specs) {
    const int a = graph.find(s.branch_a, s.kind_a);
    const int b = graph.find(s.branch_b, s.kind_b);
    os << "  " << s.name << ": " << graph.nodes[static_cast<std::size_t>(a)].label() << " -- "
       << graph.nodes[static_cast<std::size_t>(b)].label() << "  (edge " << graph.find_edge(a, b)
       << ", group " << s.loop_group << ")\n";
  }
  return os.str();
}

// ---------------- overlay ----------------

namespace {

void put_pixel(RgbImage& img, long row, long col, std::uint8_t r, std::uint8_t g,
               std::uint8_t b) {
  if (row < 0 || col < 0 || row >= img.height || col >= img.width) return;
  std::uint8_t* p = img.px(static_cast<int>(row), static_cast<int>(col));
  p[0] = r;
  p[1] = g;
  p[2] = b;
}

struct PixelPoint {
  double u = 0, v = 0;
  bool ok = false;
};

std::vector<PixelPoint> project_for_overlay(const Eigen::MatrixXd& kappa3, const Intrinsics& k) {
  std::vector<PixelPoint> out(static_cast<std::size_t>(kappa3.rows()));
  for (Eigen::Index i = 0; i < kappa3.rows(); ++i) {
    const double x = kappa3(i, 0), y = kappa3(i, 1), z = kappa3(i, 2);
    if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z) || z <= kZMin) continue;
    out[static_cast<std::size_t>(i)] = {k.fx * x / z + k.cx, k.fy * y / z + k.cy, true};
  }
  return out;
}

void draw_segment(RgbImage& img, const PixelPoint& p0, const PixelPoint& p1, std::uint8_t r,
                  std::uint8_t g, std::uint8_t b) {
  const double du = p1.u - p0.u, dv = p1.v - p0.v;
  const int steps =
      std::max(1, static_cast<int>(std::ceil(2.0 * std::max(std::abs(du), std::abs(dv)))));
  for (int i = 0; i <= steps; ++i) {
    const double s = static_cast<double>(i) / steps;
    put_pixel(img, std::lround(p0.v + s * dv), std::lround(p0.u + s * du), r, g, b);
  }
}

void draw_skeleton(RgbImage& img, const Eigen::MatrixXd& kappa3, const Intrinsics& k,
                   std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  const std::vector<PixelPoint> pts = project_for_overlay(kappa3, k);
  for (std::size_t i = 0; i + 1 < pts.size(); ++i)
    if (pts[i].ok && pts[i + 1].ok) draw_segment(img, pts[i], pts[i + 1], r, g, b);
  for (const PixelPoint& p : pts)
    if (p.ok) put_pixel(img, std::lround(p.v), std::lround(p.u), r, g, b);
}

}  // namespace

RgbImage render_overlay(const Scene& scene, const Eigen::MatrixXd& gt_kappa3,
                        const Eigen::MatrixXd& pred_kappa3) {
  if (gt_kappa3.rows() > 0 && gt_kappa3.cols() != 3)
    throw DomainError("render_overlay: ground-truth keypoints must be k x 3");
  if (pred_kappa3.rows() > 0 && pred_kappa3.cols() != 3)
    throw DomainError("render_overlay: predicted keypoints must be k x 3");
  RgbImage img;
  img.width = scene.image.width();
  img.height = scene.image.height();
  if (img.width <= 0 || img.height <= 0) throw DomainError("render_overlay: empty scene image");
  img.rgb.assign(static_cast<std::size_t>(3) * img.width * img.height, 0);
  const Eigen::MatrixXd& depth = scene.image.channels[SceneImage::kDepth];
  for (int row = 0; row < img.height; ++row)
    for (int col = 0; col < img.width; ++col) {
      const double d = std::clamp(depth(row, col), 0.0, 1.0);
      const auto gray = static_cast<std::uint8_t>(std::lround(255.0 * d));
      put_pixel(img, row, col, gray, gray, gray);
    }
  draw_skeleton(img, gt_kappa3, scene.k, 0, 255, 0);
  draw_skeleton(img, pred_kappa3, scene.k, 255, 0, 0);
  return img;
}

void write_ppm(const std::string& path, const RgbImage& img) {
  if (img.width <= 0 || img.height <= 0 ||
      img.rgb.size() != static_cast<std::size_t>(3) * img.width * img.height)
    throw DomainError("write_ppm: inconsistent image dimensions");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(cat("write_ppm: cannot open ", path));
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
  if (!out) throw DataError(cat("write_ppm: short write to ", path));
}

// ---------------- entry point ----------------

int run_cli(std::vector<std::string> args) {
  CLI::App app{"robot topological-alignment graph: dataset generation, training, and analysis"};
  app.require_subcommand(1);
  app.footer(
      "exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric error.\n"
      "Relative dataset directories resolve under $RTAG_DATA_DIR when it is set.");

  // gen
  auto* gen = app.add_subcommand("gen", "generate a synthetic scene dataset");
  struct {
    std::string robot, split, out;
    int count = 0;
    std::uint64_t seed = 0;
    int image_size = 64;
  } g;
  gen->add_option("--robot", g.robot, "robot description file")->required();
  gen->add_option("--split", g.split, "in_dist | ood")
      ->required()
      ->check(CLI::IsMember({"in_dist", "ood"}));
  gen->add_option("--count", g.count, "number of scenes")->required();
  gen->add_option("--seed", g.seed, "base RNG seed (default 0)");
  gen->add_option("--out", g.out, "output dataset directory")->required();
  gen->add_option("--image-size", g.image_size, "square image size in pixels (default 64)");
  gen->callback([&] { cmd_gen(g.robot, g.split, g.count, g.seed, g.out, g.image_size); });

  // train
  auto* tr = app.add_subcommand("train", "run stage-1 + stage-2 training from a JSON config");
  struct {
    std::string config, robot, train_dir, val_dir, ood_dir, out_dir, ckpt;
    std::uint64_t seed = 0;
    int seed_sweep = 0;
    double s1_lr = 0, s1_decay = 0, s2_lr = 0, s2_decay = 0, add_threshold = 0;
    int s1_epochs = 0, s1_batch = 0, s2_epochs = 0, s2_batch = 0, patience = 0;
    int n_image = 0, n_feature = 0, n_hidden = 0, n_conv = 0, n_pool2 = 0, n_pool3 = 0;
    std::vector<double> alpha, beta;
    bool joints = true, keypoints = true, pointcloud = true;
  } t;
  tr->add_option("--config", t.config, "JSON train config file")->required();
  auto* o_seed = tr->add_option("--seed", t.seed, "overrides config seed");
  auto* o_robot = tr->add_option("--robot", t.robot, "overrides config robot");
  auto* o_train = tr->add_option("--train-dir", t.train_dir, "overrides config train_dir");
  auto* o_val = tr->add_option("--val-dir", t.val_dir, "overrides config val_dir");
  auto* o_ood = tr->add_option("--ood-dir", t.ood_dir, "overrides config ood_dir");
  auto* o_out = tr->add_option("--out-dir", t.out_dir, "overrides config out_dir");
  auto* o_ckpt = tr->add_option("--stage1-checkpoint", t.ckpt,
                                "skip stage 1 and load these parameters");
  auto* o_s1lr = tr->add_option("--stage1-lr", t.s1_lr, "overrides stage1.lr");
  auto* o_s1ep = tr->add_option("--stage1-epochs", t.s1_epochs, "overrides stage1.epochs");
  auto* o_s1ba = tr->add_option("--stage1-batch", t.s1_batch, "overrides stage1.batch");
  auto* o_s1de = tr->add_option("--stage1-decay", t.s1_decay, "overrides stage1.decay");
  auto* o_s2lr = tr->add_option("--stage2-lr", t.s2_lr, "overrides stage2.lr");
  auto* o_s2ep = tr->add_option("--stage2-epochs", t.s2_epochs, "overrides stage2.epochs");
  auto* o_s2ba = tr->add_option("--stage2-batch", t.s2_batch, "overrides stage2.batch");
  auto* o_s2de = tr->add_option("--stage2-decay", t.s2_decay, "overrides stage2.decay");
  auto* o_alpha = tr->add_option("--alpha", t.alpha, "overrides weights.alpha")->expected(6);
  auto* o_beta = tr->add_option("--beta", t.beta, "overrides weights.beta")->expected(7);
  auto* o_jl = tr->add_flag("--joint-loops,!--no-joint-loops", t.joints,
                            "toggle the joint loop group");
  auto* o_kl = tr->add_flag("--keypoint-loops,!--no-keypoint-loops", t.keypoints,
                            "toggle the keypoint loop group");
  auto* o_pl = tr->add_flag("--pointcloud-loops,!--no-pointcloud-loops", t.pointcloud,
                            "toggle the pointcloud loop group");
  auto* o_nimg = tr->add_option("--net-image-size", t.n_image, "overrides net.image_size");
  auto* o_nfeat = tr->add_option("--net-feature-dim", t.n_feature, "overrides net.feature_dim");
  auto* o_nhid = tr->add_option("--net-hidden", t.n_hidden, "overrides net.hidden");
  auto* o_nconv = tr->add_option("--net-conv-channels", t.n_conv, "overrides net.conv_channels");
  auto* o_np2 = tr->add_option("--net-pool-2d", t.n_pool2, "overrides net.pool_2d");
  auto* o_np3 = tr->add_option("--net-pool-3d", t.n_pool3, "overrides net.pool_3d");
  auto* o_thr = tr->add_option("--add-threshold-m", t.add_threshold,
                               "overrides add_threshold_m");
  auto* o_pat = tr->add_option("--patience", t.patience, "overrides patience");
  tr->add_option("--seed-sweep", t.seed_sweep,
                 "run N consecutive seeds into out_dir/seed_<s>/ and write a summary");
  tr->callback([&] {
    TrainConfig cfg = load_train_config(t.config);
    if (o_seed->count()) cfg.seed = t.seed;
    if (o_robot->count()) cfg.robot = t.robot;
    if (o_train->count()) cfg.train_dir = t.train_dir;
    if (o_val->count()) cfg.val_dir = t.val_dir;
    if (o_ood->count()) cfg.ood_dir = t.ood_dir;
    if (o_out->count()) cfg.out_dir = t.out_dir;
    if (o_ckpt->count()) cfg.stage1_checkpoint = t.ckpt;
    if (o_s1lr->count()) cfg.stage1.lr = t.s1_lr;
    if (o_s1ep->count()) cfg.stage1.epochs = t.s1_epochs;
    if (o_s1ba->count()) cfg.stage1.batch = t.s1_batch;
    if (o_s1de->count()) cfg.stage1.decay = t.s1_decay;
    if (o_s2lr->count()) cfg.stage2.lr = t.s2_lr;
    if (o_s2ep->count()) cfg.stage2.epochs = t.s2_epochs;
    if (o_s2ba->count()) cfg.stage2.batch = t.s2_batch;
    if (o_s2de->count()) cfg.stage2.decay = t.s2_decay;
    if (o_alpha->count()) std::copy(t.alpha.begin(), t.alpha.end(), cfg.weights.alpha.begin());
    if (o_beta->count()) std::copy(t.beta.begin(), t.beta.end(), cfg.weights.beta.begin());
    if (o_jl->count()) cfg.loops.joint_loops = t.joints;
    if (o_kl->count()) cfg.loops.keypoint_loops = t.keypoints;
    if (o_pl->count()) cfg.loops.pointcloud_loops = t.pointcloud;
    if (o_nimg->count()) cfg.net.image_size = t.n_image;
    if (o_nfeat->count()) cfg.net.feature_dim = t.n_feature;
    if (o_nhid->count()) cfg.net.hidden = t.n_hidden;
    if (o_nconv->count()) cfg.net.conv_channels = t.n_conv;
    if (o_np2->count()) cfg.net.pool_2d = t.n_pool2;
    if (o_np3->count()) cfg.net.pool_3d = t.n_pool3;
    if (o_thr->count()) cfg.add_threshold_m = t.add_threshold;
    if (o_pat->count()) cfg.patience = t.patience;
    cmd_train(cfg, t.seed_sweep);
  });

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  struct {
    std::string config, checkpoint, data, out, robot;
    double threshold = 0;
  } e;
  ev->add_option("--config", e.config, "JSON train config (robot + network shape)")->required();
  ev->add_option("--checkpoint", e.checkpoint, "parameter checkpoint file")->required();
  ev->add_option("--data", e.data, "dataset directory")->required();
  ev->add_option("--out", e.out, "output directory")->required();
  auto* o_ethr = ev->add_option("--threshold", e.threshold,
                                "ADD AUC threshold in meters (default: config add_threshold_m)");
  auto* o_erob = ev->add_option("--robot", e.robot, "overrides config robot");
  ev->callback([&] {
    TrainConfig cfg = load_train_config(e.config);
    if (o_erob->count()) cfg.robot = e.robot;
    const double thr = o_ethr->count() ? e.threshold : cfg.add_threshold_m;
    cmd_eval(cfg, e.checkpoint, e.data, e.out, thr);
  });

  // analyze-graph
  auto* an = app.add_subcommand("analyze-graph",
                                "report the alignment-graph structure and closed loops");
  struct {
    std::string robot, out;
    bool extra = false;
  } a;
  an->add_option("--robot", a.robot, "robot description file")->required();
  an->add_option("--out", a.out, "write report.txt and graph.json here (default: print report)");
  an->add_flag("--extra-chain-pairs", a.extra,
               "include the non-consecutive chain alignment edges");
  an->callback([&] { cmd_analyze(a.robot, a.out, a.extra); });

  // overlay
  auto* ov = app.add_subcommand("overlay",
                                "render ground-truth vs predicted skeletons over a scene");
  struct {
    std::string config, checkpoint, data, out, robot;
    int index = 0;
  } o;
  ov->add_option("--config", o.config, "JSON train config (robot + network shape)")->required();
  ov->add_option("--checkpoint", o.checkpoint, "parameter checkpoint file")->required();
  ov->add_option("--data", o.data, "dataset directory")->required();
  ov->add_option("--index", o.index, "scene index within the dataset (default 0)");
  ov->add_option("--out", o.out, "output PPM file")->required();
  auto* o_orob = ov->add_option("--robot", o.robot, "overrides config robot");
  ov->callback([&] {
    TrainConfig cfg = load_train_config(o.config);
    if (o_orob->count()) cfg.robot = o.robot;
    cmd_overlay(cfg, o.checkpoint, o.data, o.index, o.out);
  });

  std::reverse(args.begin(), args.end());
  try {
    app.parse(std::move(args));
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? kExitOk : kExitUsage;
  } catch (const DataError& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return kExitData;
  } catch (const DomainError& err) {
    std::cerr << "usage error: " << err.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& err) {
    std::cerr << "numeric error: " << err.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitNumeric;
  }
  return kExitOk;
}

}  // namespace rtag
