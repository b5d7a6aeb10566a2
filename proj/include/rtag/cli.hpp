// include/rtag/cli.hpp
//
// Command-line layer behind the `rtag` tool: JSON train-config loading with
// flag overrides, the gen / train / eval / analyze-graph / overlay commands,
// and the exit-code contract.  Everything here is plain-function testable;
// tools/rtag_main.cpp only forwards argv to run_cli.
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "rtag/synth.hpp"
#include "rtag/trainer.hpp"

namespace rtag {

// ---------------- exit codes ----------------

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;    // bad invocation, flags, or config values
inline constexpr int kExitData = 2;     // missing, corrupt, or mismatched files
inline constexpr int kExitNumeric = 3;  // numerical failure (divergence, failed nodes)

// ---------------- config files ----------------

// Parses a JSON train config.  Every key is optional and falls back to the
// TrainConfig defaults; unknown keys are data errors so typos cannot silently
// revert a setting.  Dataset paths are returned as written; resolve_data_path
// applies RTAG_DATA_DIR where the commands consume them.
TrainConfig load_train_config(const std::string& path);

// Serializes the effective config with a stable key order;
// load(write(cfg)) == cfg field for field.
std::string train_config_json(const TrainConfig& cfg);
void write_train_config(const std::string& path, const TrainConfig& cfg);

// Relative paths resolve under $RTAG_DATA_DIR when that variable is set and
// non-empty; absolute paths and empty strings pass through untouched.
std::string resolve_data_path(const std::string& path);

// ---------------- eval outputs ----------------

// "threshold_m,fraction" rows: the fraction of ADD values <= t at steps + 1
// evenly spaced thresholds t in [0, threshold_max].  Fractions are monotone
// nondecreasing in t; non-finite distances never count.
std::string add_curve_csv(const std::vector<double>& add, double threshold_max, int steps = 200);

// ---------------- analyze-graph outputs ----------------

// Machine-readable structure/basis/term report (JSON).
std::string graph_json(const TagGraph& graph, const LoopBasis& basis);

// Human-readable counterpart: describe_graph plus the table of loss-bearing
// alignment edges.  Built from the same structures as graph_json.
std::string graph_report(const TagGraph& graph, const LoopBasis& basis);

// ---------------- overlay ----------------

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  std::uint8_t* px(int row, int col) {
    return rgb.data() + 3 * (static_cast<std::size_t>(row) * width + col);
  }
  const std::uint8_t* px(int row, int col) const {
    return rgb.data() + 3 * (static_cast<std::size_t>(row) * width + col);
  }
};

// Depth-channel background with the ground-truth keypoint skeleton in green
// and the predicted skeleton in red (drawn last).  Skeleton segments join
// consecutive keypoint rows; camera-frame points at or behind z = kZMin and
// non-finite points are skipped.  A 0-row prediction draws no red layer, and
// an exact prediction paints exactly the ground-truth pixels.
RgbImage render_overlay(const Scene& scene, const Eigen::MatrixXd& gt_kappa3,
                        const Eigen::MatrixXd& pred_kappa3);

// Binary P6 with maxval 255.
void write_ppm(const std::string& path, const RgbImage& img);

// ---------------- entry point ----------------

// Full command-line interface; `args` excludes the program name.  Errors are
// reported on stderr and mapped onto the exit-code contract above.
int run_cli(std::vector<std::string> args);

}  // namespace rtag
