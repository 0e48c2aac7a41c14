#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "super/core_math.hpp"
#include "super/image.hpp"

namespace super {

enum SurfelFlag : uint8_t {
  kFlagGrazing = 1,     // radius computed with |n_z| clamped
  kFlagZeroNormal = 2,  // normal blend vanished during a commit; normal kept
};

/// One fused surface patch: position, unit normal, color in [0,1], radius (m),
/// accumulated confidence, and the frame index of the last update.
struct Surfel {
  Vec3 p = Vec3::Zero();
  Vec3 n = Vec3::UnitZ();
  Vec3 c = Vec3::Zero();
  double radius = 0;
  double conf = 0;
  int t = 0;
  uint8_t flags = 0;
};

/// Deformation-graph node: rest position g plus the current frame's estimated
/// quaternion (scalar-first) and translation. Committed parameters are identity.
struct EDNode {
  Vec3 g = Vec3::Zero();
  Vec4 q = Vec4(1, 0, 0, 0);
  Vec3 b = Vec3::Zero();
};

struct EDGraph {
  std::vector<EDNode> nodes;
  std::vector<std::vector<int>> edges;  // per-node neighbor ids, KNN over rest positions
  QuatTranslation t_g;                  // global motion shared by all surfels
  int k_skin = 4;
  int k_edge = 6;

  int n_params() const { return 7 * (static_cast<int>(nodes.size()) + 1); }
};

struct SurfelMap {
  std::vector<Surfel> surfels;
  // Cached skinning (KNN ids + blend weights) per surfel, parallel to `surfels`.
  std::vector<KnnWeights> skinning;
};

struct FusionConfig {
  double merge_depth = 5e-3;      // max depth disagreement for a merge (m)
  double merge_angle_deg = 30.0;  // max normal disagreement for a merge
  int t_stale = 30;               // frames without observation before removal
  double conf_stable = 10.0;      // confidence that exempts a surfel from removal
  double min_nz = 0.1;            // |n_z| clamp for the radius formula
};

std::vector<Vec3> node_positions(const EDGraph& g);

/// Blended warp of a point: T_g applied to the weighted sum of per-node
/// transforms of (p - g_i) plus g_i. Quaternions enter through the homogeneous
/// (raw) form, so non-unit q scales by |q|^2; committed graphs are unit.
Vec3 warp_point(const Vec3& p, const EDGraph& g, const KnnWeights& skin);
/// Rotation-only blend of a normal, before renormalization.
Vec3 warp_normal_raw(const Vec3& n, const EDGraph& g, const KnnWeights& skin);
/// Renormalized warped normal. Throws ZeroNormal when the blend vanishes.
Vec3 warp_normal(const Vec3& n, const EDGraph& g, const KnnWeights& skin);

/// Convenience forms that look up the surfel's neighbors on the fly.
Vec3 warp_point(const Surfel& s, const EDGraph& g);
Vec3 warp_normal(const Surfel& s, const EDGraph& g);

/// Recomputes every surfel's KNN skinning against the graph's rest positions.
void rebuild_skinning(SurfelMap& map, const EDGraph& g);
/// Recomputes node-to-node KNN edges from rest positions.
void rebuild_edges(EDGraph& g);

/// Applies the current deformation to every surfel and node, then resets all
/// node parameters and T_g to identity. Surfels whose normal blend vanishes
/// keep their old normal and are flagged. Edges and skinning are rebuilt from
/// the new rest positions afterwards.
void commit_deformation(SurfelMap& map, EDGraph& g);

/// r = sqrt(2) * d / (f * |n_z|) with |n_z| clamped from below.
double surfel_radius(double d, double f, double n_z, double min_nz = 0.1);
/// c = exp(-d_c^2 / 0.72) for a center-normalized pixel distance in [0, 1].
double surfel_confidence(double d_c);

/// Per-pixel normals from the depth map: cross product of the unprojected
/// image-axis tangents, oriented toward the camera. Central differences where
/// both neighbors are valid, one-sided at borders; NaN where underdetermined.
Image<Vec3> depth_to_normals(const DepthImage& depth, const CameraIntrinsics& K);

/// Merges one masked depth/color frame into the map: each valid unmasked pixel
/// either averages into a surfel that projects within 1 px and agrees in depth
/// and normal, or starts a new surfel. Unstable stale surfels are dropped.
/// Throws EmptyFrame when no pixel qualifies; the map is left unchanged.
void fuse_frame(SurfelMap& map, const DepthImage& depth, const ColorImage& color,
                const MaskImage& tool_mask, const CameraIntrinsics& K, int frame_idx,
                const FusionConfig& cfg);

/// Adds nodes at surfels farther than `spacing` from every node (visiting
/// surfels in a seeded random order), then rebuilds edges if anything changed.
void sample_ed_nodes(SurfelMap& map, EDGraph& g, double spacing, std::mt19937_64& rng);

/// ASCII point-cloud export; 13 properties per vertex, doubles at full
/// precision so a re-import is bit-exact.
void export_ply(const SurfelMap& map, const std::filesystem::path& path);
SurfelMap import_ply(const std::filesystem::path& path);

}  // namespace super
