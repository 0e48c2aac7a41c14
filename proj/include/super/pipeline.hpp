#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "super/core_math.hpp"
#include "super/deform_solver.hpp"
#include "super/image.hpp"
#include "super/kinematics.hpp"
#include "super/surfel_map.hpp"
#include "super/tool_tracker.hpp"

namespace super {

struct PipelineConfig {
  FilterConfig filter;
  SolverConfig solver;
  FusionConfig fusion;
  double node_spacing = 0.01;       // m, deformation-graph resolution
  int mask_dilation_px = 9;         // tool-mask dilation before invalidating depth
  int keyframe_interval = 10;       // PLY export cadence
  int temporal_window = 4;          // frames in the temporal median
  double bilateral_sigma_s = 3.0;   // px
  double bilateral_sigma_r = 5e-3;  // m
  double cluster_radius = 0.004;    // m, tracked-point surfel cluster
  uint64_t seed = 1;
};

/// Structured-text round trip; missing keys keep their defaults.
PipelineConfig load_config(const std::filesystem::path& path);
void save_config(const PipelineConfig& cfg, const std::filesystem::path& path);

struct Dataset {
  std::filesystem::path root;
  std::string name;
  int frames = 0;
  double fps = 30.0;
  CameraIntrinsics K;
  bool has_tool = false;
  KinematicChain chain;           // valid when has_tool
  std::vector<int> phase;         // per-frame grasp schedule (empty when none)
  std::vector<Vec2> label_pixels; // frame-0 tracked-point labels
};

/// Reads and validates manifest, chain, and labels. Throws IOFailure on a
/// missing or inconsistent manifest.
Dataset open_dataset(const std::filesystem::path& root);

DepthImage load_depth(const Dataset& ds, int frame);
ColorImage load_color(const Dataset& ds, int frame);
FrameFeatures load_features(const Dataset& ds, int frame);
std::vector<double> load_joints(const Dataset& ds, int frame);

struct GroundTruth {
  AxisAngleTranslation error;
  std::vector<std::vector<Vec3>> tracked;    // [frame][point]
  std::vector<std::vector<Vec2>> tracked_px;
  std::vector<int> phase;
};
GroundTruth load_ground_truth(const Dataset& ds);  // throws MissingGroundTruth

/// Temporal median over the window (oldest first, current frame last,
/// NaN-skipping), then a bilateral filter anchored at the center value, then
/// invalidation of the dilated tool mask.
DepthImage preprocess_depth(const std::vector<const DepthImage*>& window, const MaskImage& mask,
                            const PipelineConfig& cfg);

/// Labeled point tracked as a cluster of surfels with an averaged position and
/// normal; recomputed after each commit.
struct TrackedPoint {
  std::vector<int> cluster;
  Vec3 p_g = Vec3::Zero();
  Vec3 n_g = Vec3::UnitZ();
  bool bound = false;
};

/// Grasp target for a tracked point: position p_g + d n_g and an orientation
/// whose approach axis (+z column) is -n_g. Throws EmptyCluster.
std::pair<Vec3, Mat3> track_point_query(const TrackedPoint& tp, double d);

enum class RunMode { Full, ToolOnly, DeformOnly };

struct FrameStats {
  AxisAngleTranslation estimate;
  double n_eff = 0;
  bool resampled = false;
  bool solver_skipped = false;
  int lm_iterations = 0;
  double solver_cost = 0;
  int surfel_count = 0;
  double wall_ms = 0;
};

struct RunResult {
  std::vector<FrameStats> frames;
  std::vector<std::vector<Vec3>> tracked_p;   // [frame][point], NaN when unbound
  std::vector<std::vector<Vec2>> tracked_px;
  std::vector<TrackedPoint> tracked;
  SurfelMap map;
  EDGraph graph;
};

/// Per-frame loop: particle-filter update from features, tool mask under the
/// current estimate, depth preprocessing, deformation solve, commit, fuse,
/// tracked-point update. Writes estimates.csv, tracked_points.csv,
/// solver_log.csv, keyframe PLYs, and run_report.json under out_dir; pass an
/// empty path to keep the run in memory.
RunResult run_pipeline(const Dataset& ds, const PipelineConfig& cfg, RunMode mode,
                       const std::filesystem::path& out_dir);

struct MetricsReport {
  std::vector<double> w_err;        // rad
  std::vector<double> b_err;        // m
  std::vector<double> reproj_px;    // mean over tracked points, NaN when none bound
  std::vector<double> baseline_px;  // first-frame nearest-neighbor baseline
  std::vector<double> iou;          // undilated mask IoU, 1 when no tool
  std::vector<double> solver_cost;
  double mean_reproj = 0;
  double mean_baseline = 0;
  double mean_iou = 0;
};

/// Compares a finished run against the dataset's ground truth and writes
/// run_dir/metrics.csv. Throws MissingGroundTruth.
MetricsReport eval_metrics(const Dataset& ds, const std::filesystem::path& run_dir);

}  // namespace super
