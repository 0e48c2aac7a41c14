#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <utility>
#include <vector>

#include "super/core_math.hpp"
#include "super/kinematics.hpp"

namespace super {

/// Detected image features for one frame. Correspondences pair a pixel in the
/// previous frame (first two entries) with one in the current frame (last two).
struct FrameFeatures {
  std::vector<Vec2> markers;
  std::vector<ImageLine> lines;
  std::vector<Vec4> correspondences;
};

struct Particle {
  AxisAngleTranslation state;
  double weight = 0;
};

struct ParticleSet {
  std::vector<Particle> particles;
};

struct FilterConfig {
  int n_particles = 500;
  // Diagonal variances for (w, b): rad^2 and m^2.
  Vec6 init_variance = (Vec6() << 0.025, 0.025, 0.025, 1e-7, 1e-7, 1e-7).finished();
  Vec6 walk_variance = 0.1 * (Vec6() << 0.025, 0.025, 0.025, 1e-7, 1e-7, 1e-7).finished();
  double gamma_m = 0.01;    // 1 / px^2
  double gamma_phi = 10.0;  // 1 / rad
  double gamma_rho = 0.05;  // 1 / px
  double marker_gate_sq = 50.0;  // px^2, squared-distance gate
  double line_gate_phi = 0.15;   // rad
  double line_gate_rho = 75.0;   // px
  double resample_threshold = 200.0;

  double marker_floor() const { return std::exp(-gamma_m * marker_gate_sq); }
  double line_floor() const {
    return std::exp(-gamma_phi * line_gate_phi - gamma_rho * line_gate_rho);
  }
};

/// One-to-one matches as (detection index, prediction index) pairs with the
/// matching similarity per pair; every kept score strictly exceeds the floor.
struct AssociationList {
  std::vector<std::pair<int, int>> pairs;
  std::vector<double> scores;

  size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
};

struct UpdateResult {
  AxisAngleTranslation estimate;
  double n_eff = 0;
  bool resampled = false;
  bool degenerate = false;
};

/// Markers (visible ones, in chain order) and silhouette lines predicted for one
/// hand-eye hypothesis.
struct PredictedFeatures {
  std::vector<Vec2> markers;
  std::vector<ImageLine> lines;
};

PredictedFeatures predict_features(const KinematicChain& chain, const std::vector<double>& theta,
                                   const HandEyeState& he, const CameraIntrinsics& K);

ParticleSet init_particles(const FilterConfig& cfg, std::mt19937_64& rng);

/// Random-walk diffusion: adds zero-mean Gaussian noise with the walk variances.
void predict(ParticleSet& set, const FilterConfig& cfg, std::mt19937_64& rng);

/// Greedy one-to-one matching by descending score; a pair is kept only while its
/// score strictly exceeds the floor.
AssociationList associate_markers(const std::vector<Vec2>& detections,
                                  const std::vector<Vec2>& predictions, double gamma_m,
                                  double floor);
AssociationList associate_lines(const std::vector<ImageLine>& detections,
                                const std::vector<ImageLine>& predictions, double gamma_phi,
                                double gamma_rho, double floor);

/// Sum of matched scores plus the floor once per unmatched model feature.
/// Serves both the marker and the line observation terms.
double feature_likelihood(const AssociationList& assoc, int n_model, double floor);

/// 1 / sum(w^2) for normalized weights.
double effective_sample_size(const std::vector<double>& weights);

/// Stratified resampling: one uniform draw per stratum of the weight CDF.
std::vector<int> stratified_resample(const std::vector<double>& weights, std::mt19937_64& rng);

AxisAngleTranslation weighted_mean(const ParticleSet& set);

/// Reweights particles against one frame of features, normalizes, reports the
/// weighted-mean estimate, then resamples when n_eff drops below the threshold.
UpdateResult update(ParticleSet& set, const KinematicChain& chain,
                    const std::vector<double>& theta, const CameraIntrinsics& K,
                    const FrameFeatures& obs, const FilterConfig& cfg, std::mt19937_64& rng);

void write_particles(const ParticleSet& set, const std::filesystem::path& path);

}  // namespace super
