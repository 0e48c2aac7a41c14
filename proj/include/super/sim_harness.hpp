#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "super/core_math.hpp"
#include "super/image.hpp"
#include "super/kinematics.hpp"
#include "super/tool_tracker.hpp"

namespace super {

enum class DeformationKind { None, Bump, Pinch, GraspStretch };

/// Parametric deforming sheet: a height field over a rectangle, triangulated
/// from an nu x nv control grid. The deformation is zero at t = 0.
struct SheetConfig {
  double size_x = 0.12;
  double size_y = 0.09;
  double z0 = 0.5;
  double tilt = 0.15;  // rotation of the sheet about the x axis (rad)
  int nu = 33;
  int nv = 25;
  DeformationKind deform = DeformationKind::None;
  double amplitude = 0.01;  // peak displacement (m)
  double freq_hz = 0.5;
  double sigma = 0.02;    // spatial falloff of the deformation (m)
  double duration = 1.0;  // sequence length (s), sets the grasp-stretch schedule clock
};

/// Grasp-stretch schedule phases, as fractions of the sequence.
enum GraspPhase { kAlign = 0, kLower = 1, kGrasp = 2, kStretch = 3, kRelease = 4 };

struct ScenarioConfig {
  std::string name = "static";
  int frames = 50;
  double fps = 30.0;
  uint64_t seed = 1;
  CameraIntrinsics K{400, 400, 80, 60, 160, 120};
  SheetConfig sheet;
  bool with_tool = false;
  AxisAngleTranslation true_error;
  double marker_noise_px = 0.0;
  double dropout = 0.0;
  double line_noise_rho = 0.0;
  double line_noise_phi = 0.0;
  double depth_noise = 0.0;
  double corr_noise_px = 0.0;
  int n_corr = 40;
  int n_tracked = 20;
};

/// Sheet surface point for normalized parameters (sx, sy) in [0,1]^2 at time t.
Vec3 sheet_point(const SheetConfig& cfg, double sx, double sy, double t);
/// Phase of the grasp-stretch schedule at normalized time in [0,1].
GraspPhase grasp_phase(double time_frac);

struct SheetMesh {
  int nu = 0, nv = 0;
  std::vector<Vec3> pts;     // row-major over (iv, iu)
  std::vector<Vec2> params;  // matching (sx, sy)
};
SheetMesh sheet_mesh(const SheetConfig& cfg, double t);

/// Exact ray-triangle rasterization of the sheet into depth (NaN background)
/// and a procedurally textured color image.
void render_sheet(const SheetMesh& mesh, const CameraIntrinsics& K, DepthImage& depth,
                  ColorImage& color);

void add_depth_noise(DepthImage& depth, double sigma, std::mt19937_64& rng);

/// Noisy marker and silhouette-line detections for the tool under the true
/// hand-eye error. Markers outside the image are dropped like missed
/// detections; each feature is independently dropped with `p_dropout`.
FrameFeatures emit_tool_features(const KinematicChain& chain, const std::vector<double>& theta,
                                 const AxisAngleTranslation& true_error,
                                 const CameraIntrinsics& K, double sigma_px, double p_dropout,
                                 double sigma_rho, double sigma_phi, std::mt19937_64& rng);

/// Ground-truth point correspondences between consecutive frames: fixed sheet
/// parameters projected in both states, with optional pixel noise.
std::vector<Vec4> emit_correspondences(const SheetConfig& sheet, double t_prev, double t_cur,
                                       const CameraIntrinsics& K, int count, double sigma_px,
                                       std::mt19937_64& rng);

/// Marker-rich two-joint instrument used by the desk-scale scenarios.
KinematicChain make_scenario_tool(int n_markers, double lever, double depth_spread,
                                  double camera_distance);

/// Scripted joint trajectory covering the image.
std::vector<double> scenario_joints(int frame);

/// Sheet parameters of the labeled points tracked for evaluation.
std::vector<Vec2> tracked_params(int count);

ScenarioConfig scenario_by_name(const std::string& name, int frames, uint64_t seed);

/// Writes the full dataset directory: manifest.json, depth/, color/,
/// features/, joints/, labels.json, ground_truth.json, and chain.json when a
/// tool is present. Deterministic for a fixed config.
void make_sequence(const ScenarioConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace super
