#include "super/surfel_map.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>

namespace super {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

bool finite(const Vec3& v) { return v.allFinite(); }

}  // namespace

std::vector<Vec3> node_positions(const EDGraph& g) {
  std::vector<Vec3> out;
  out.reserve(g.nodes.size());
  for (const auto& nd : g.nodes) out.push_back(nd.g);
  return out;
}

Vec3 warp_point(const Vec3& p, const EDGraph& g, const KnnWeights& skin) {
  // Grouped as p + sum of per-node displacements so identity parameters give
  // back p bit-exactly (the weights only multiply terms that vanish).
  Vec3 acc = p;
  for (size_t i = 0; i < skin.indices.size(); ++i) {
    const EDNode& nd = g.nodes[skin.indices[i]];
    const Vec3 d = p - nd.g;
    acc += skin.weights[i] * (quat_to_rotation_raw(nd.q) * d - d + nd.b);
  }
  return quat_to_rotation_raw(g.t_g.q) * acc + g.t_g.b;
}

Vec3 warp_normal_raw(const Vec3& n, const EDGraph& g, const KnnWeights& skin) {
  Vec3 acc = Vec3::Zero();
  for (size_t i = 0; i < skin.indices.size(); ++i) {
    const EDNode& nd = g.nodes[skin.indices[i]];
    acc += skin.weights[i] * (quat_to_rotation_raw(nd.q) * n);
  }
  return quat_to_rotation_raw(g.t_g.q) * acc;
}

Vec3 warp_normal(const Vec3& n, const EDGraph& g, const KnnWeights& skin) {
  const Vec3 blend = warp_normal_raw(n, g, skin);
  const double norm = blend.norm();
  if (norm < 1e-9) throw ZeroNormal();
  return blend / norm;
}

Vec3 warp_point(const Surfel& s, const EDGraph& g) {
  return warp_point(s.p, g, knn_weights(s.p, node_positions(g), g.k_skin));
}

Vec3 warp_normal(const Surfel& s, const EDGraph& g) {
  return warp_normal(s.n, g, knn_weights(s.p, node_positions(g), g.k_skin));
}

void rebuild_skinning(SurfelMap& map, const EDGraph& g) {
  const std::vector<Vec3> pos = node_positions(g);
  map.skinning.resize(map.surfels.size());
  for (size_t i = 0; i < map.surfels.size(); ++i)
    map.skinning[i] = knn_weights(map.surfels[i].p, pos, g.k_skin);
}

void rebuild_edges(EDGraph& g) {
  const int n = static_cast<int>(g.nodes.size());
  const int k = std::min(g.k_edge, n - 1);
  g.edges.assign(n, {});
  if (k < 1) return;
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), 0);
    const Vec3& p = g.nodes[i].g;
    std::partial_sort(order.begin(), order.begin() + k + 1, order.end(), [&](int a, int b) {
      const double da = (g.nodes[a].g - p).squaredNorm();
      const double db = (g.nodes[b].g - p).squaredNorm();
      if (da != db) return da < db;
      return a < b;
    });
    // The node itself sorts first (distance 0); neighbors follow.
    for (int j = 0; j <= k; ++j) {
      if (order[j] == i) continue;
      g.edges[i].push_back(order[j]);
      if (static_cast<int>(g.edges[i].size()) == k) break;
    }
  }
}

void commit_deformation(SurfelMap& map, EDGraph& g) {
  if (map.skinning.size() != map.surfels.size()) rebuild_skinning(map, g);
  for (size_t i = 0; i < map.surfels.size(); ++i) {
    Surfel& s = map.surfels[i];
    const Vec3 p_new = warp_point(s.p, g, map.skinning[i]);
    try {
      s.n = warp_normal(s.n, g, map.skinning[i]);
    } catch (const ZeroNormal&) {
      s.flags |= kFlagZeroNormal;
    }
    s.p = p_new;
  }
  const Mat3 Rg = quat_to_rotation_raw(g.t_g.q);
  for (auto& nd : g.nodes) {
    // A node warped by its own parameters reduces to g + b before T_g.
    nd.g = Rg * (nd.g + nd.b) + g.t_g.b;
    nd.q = Vec4(1, 0, 0, 0);
    nd.b = Vec3::Zero();
  }
  g.t_g = QuatTranslation::identity();
  rebuild_edges(g);
  rebuild_skinning(map, g);
}

double surfel_radius(double d, double f, double n_z, double min_nz) {
  const double nz = std::max(std::abs(n_z), min_nz);
  return std::numbers::sqrt2 * d / (f * nz);
}

double surfel_confidence(double d_c) { return std::exp(-d_c * d_c / 0.72); }

Image<Vec3> depth_to_normals(const DepthImage& depth, const CameraIntrinsics& K) {
  Image<Vec3> out(depth.width, depth.height, Vec3(kNan, kNan, kNan));
  auto point = [&](int u, int v, Vec3& p) {
    if (!depth.in_bounds(u, v)) return false;
    const float d = depth.at(u, v);
    if (!(d > 0) || !std::isfinite(d)) return false;
    p = unproject(K, u, v, d);
    return true;
  };
  for (int v = 0; v < depth.height; ++v) {
    for (int u = 0; u < depth.width; ++u) {
      Vec3 p0;
      if (!point(u, v, p0)) continue;
      Vec3 pl, pr, pu, pd;
      const bool l = point(u - 1, v, pl), r = point(u + 1, v, pr);
      const bool up = point(u, v - 1, pu), dn = point(u, v + 1, pd);
      Vec3 tx, ty;
      if (l && r) tx = pr - pl;
      else if (r) tx = pr - p0;
      else if (l) tx = p0 - pl;
      else continue;
      if (up && dn) ty = pd - pu;
      else if (dn) ty = pd - p0;
      else if (up) ty = p0 - pu;
      else continue;
      Vec3 n = tx.cross(ty);
      const double norm = n.norm();
      if (norm < 1e-12) continue;
      n /= norm;
      if (n.dot(p0) > 0) n = -n;
      out.at(u, v) = n;
    }
  }
  return out;
}

void fuse_frame(SurfelMap& map, const DepthImage& depth, const ColorImage& color,
                const MaskImage& tool_mask, const CameraIntrinsics& K, int frame_idx,
                const FusionConfig& cfg) {
  const Image<Vec3> normals = depth_to_normals(depth, K);
  struct Obs {
    int u, v;
    Vec3 p, n, c;
  };
  std::vector<Obs> observations;
  for (int v = 0; v < depth.height; ++v) {
    for (int u = 0; u < depth.width; ++u) {
      if (tool_mask.in_bounds(u, v) && tool_mask.at(u, v)) continue;
      const float d = depth.at(u, v);
      if (!(d > 0) || !std::isfinite(d)) continue;
      if (!finite(normals.at(u, v))) continue;
      const Rgb rgb = color.at(u, v);
      observations.push_back({u, v, unproject(K, u, v, d), normals.at(u, v),
                              Vec3(rgb.r, rgb.g, rgb.b) / 255.0});
    }
  }
  if (observations.empty()) throw EmptyFrame();

  // One candidate surfel per pixel: nearest depth wins, then lowest index.
  Image<int> bucket(depth.width, depth.height, -1);
  std::vector<Vec2> proj(map.surfels.size());
  for (size_t i = 0; i < map.surfels.size(); ++i) {
    const Vec3& p = map.surfels[i].p;
    if (!(p.z() > 1e-9)) continue;
    proj[i] = project_point(K, p);
    const int u = static_cast<int>(std::lround(proj[i].x()));
    const int v = static_cast<int>(std::lround(proj[i].y()));
    if (!bucket.in_bounds(u, v)) continue;
    int& slot = bucket.at(u, v);
    if (slot < 0 || p.z() < map.surfels[slot].p.z()) slot = static_cast<int>(i);
  }

  const double cos_max = std::cos(cfg.merge_angle_deg * M_PI / 180.0);
  const double corner =
      std::hypot(std::max(K.cx, depth.width - 1 - K.cx), std::max(K.cy, depth.height - 1 - K.cy));

  for (const Obs& ob : observations) {
    int best = -1;
    double best_px = std::numeric_limits<double>::infinity();
    for (int dv = -1; dv <= 1; ++dv) {
      for (int du = -1; du <= 1; ++du) {
        if (!bucket.in_bounds(ob.u + du, ob.v + dv)) continue;
        const int cand = bucket.at(ob.u + du, ob.v + dv);
        if (cand < 0) continue;
        const Surfel& s = map.surfels[cand];
        const Vec2 off = proj[cand] - Vec2(ob.u, ob.v);
        if (std::abs(off.x()) > 1.0 || std::abs(off.y()) > 1.0) continue;
        if (std::abs(s.p.z() - ob.p.z()) > cfg.merge_depth) continue;
        if (s.n.dot(ob.n) < cos_max) continue;
        const double d_px = off.norm();
        if (d_px < best_px || (d_px == best_px && cand < best)) {
          best = cand;
          best_px = d_px;
        }
      }
    }
    const double d_c =
        corner > 0 ? std::hypot(ob.u - K.cx, ob.v - K.cy) / corner : 0.0;
    const double conf = surfel_confidence(d_c);
    if (best >= 0) {
      Surfel& s = map.surfels[best];
      const double w_old = s.conf, w_new = conf, w_sum = w_old + w_new;
      s.p = (w_old * s.p + w_new * ob.p) / w_sum;
      const Vec3 n_blend = w_old * s.n + w_new * ob.n;
      if (n_blend.norm() > 1e-9) s.n = n_blend.normalized();
      s.c = (w_old * s.c + w_new * ob.c) / w_sum;
      s.conf = w_sum;
      s.t = frame_idx;
    } else {
      Surfel s;
      s.p = ob.p;
      s.n = ob.n;
      s.c = ob.c;
      s.radius = surfel_radius(ob.p.z(), K.fx, ob.n.z(), cfg.min_nz);
      if (std::abs(ob.n.z()) < cfg.min_nz) s.flags |= kFlagGrazing;
      s.conf = conf;
      s.t = frame_idx;
      map.surfels.push_back(s);
    }
  }

  std::erase_if(map.surfels, [&](const Surfel& s) {
    return frame_idx - s.t > cfg.t_stale && s.conf < cfg.conf_stable;
  });
  map.skinning.clear();  // stale after insertion/removal; callers rebuild
}

void sample_ed_nodes(SurfelMap& map, EDGraph& g, double spacing, std::mt19937_64& rng) {
  std::vector<size_t> order(map.surfels.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const double spacing_sq = spacing * spacing;
  bool added = false;
  for (const size_t idx : order) {
    const Vec3& p = map.surfels[idx].p;
    double best = std::numeric_limits<double>::infinity();
    for (const auto& nd : g.nodes) best = std::min(best, (nd.g - p).squaredNorm());
    if (best > spacing_sq) {
      g.nodes.push_back({p, Vec4(1, 0, 0, 0), Vec3::Zero()});
      added = true;
    }
  }
  if (added) rebuild_edges(g);
}

void export_ply(const SurfelMap& map, const std::filesystem::path& path) {
  std::FILE* f = std::fopen(path.string().c_str(), "w");
  if (!f) throw IOFailure("cannot open " + path.string() + " for writing");
  std::fprintf(f,
               "ply\nformat ascii 1.0\nelement vertex %zu\n"
               "property double x\nproperty double y\nproperty double z\n"
               "property double nx\nproperty double ny\nproperty double nz\n"
               "property uchar red\nproperty uchar green\nproperty uchar blue\n"
               "property double radius\nproperty double confidence\n"
               "property int time\nproperty uchar flags\nend_header\n",
               map.surfels.size());
  for (const Surfel& s : map.surfels) {
    const auto q = [](double x) {
      return std::clamp(static_cast<int>(std::lround(x * 255.0)), 0, 255);
    };
    std::fprintf(f, "%.17g %.17g %.17g %.17g %.17g %.17g %d %d %d %.17g %.17g %d %u\n", s.p.x(),
                 s.p.y(), s.p.z(), s.n.x(), s.n.y(), s.n.z(), q(s.c.x()), q(s.c.y()), q(s.c.z()),
                 s.radius, s.conf, s.t, static_cast<unsigned>(s.flags));
  }
  if (std::fclose(f) != 0) throw IOFailure("write failed for " + path.string());
}

SurfelMap import_ply(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IOFailure("cannot open " + path.string());
  std::string line;
  size_t count = 0;
  bool header_done = false;
  while (std::getline(in, line)) {
    if (line.rfind("element vertex", 0) == 0) count = std::stoul(line.substr(15));
    if (line == "end_header") {
      header_done = true;
      break;
    }
  }
  if (!header_done) throw IOFailure("malformed header in " + path.string());
  SurfelMap map;
  map.surfels.reserve(count);
  for (size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw IOFailure("truncated vertex list in " + path.string());
    std::istringstream row(line);
    Surfel s;
    int r, g, b, flags;
    row >> s.p.x() >> s.p.y() >> s.p.z() >> s.n.x() >> s.n.y() >> s.n.z() >> r >> g >> b >>
        s.radius >> s.conf >> s.t >> flags;
    if (!row) throw IOFailure("malformed vertex row in " + path.string());
    s.c = Vec3(r, g, b) / 255.0;
    s.flags = static_cast<uint8_t>(flags);
    map.surfels.push_back(s);
  }
  return map;
}

}  // namespace super
