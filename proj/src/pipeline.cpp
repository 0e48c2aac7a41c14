#include "super/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <fstream>
#include <limits>
#include <sstream>

#include "super/errors.hpp"
#include "super/sim_harness.hpp"  // grasp-phase ids shared with the dataset writer

namespace super {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

json vec6_to_json(const Vec6& v) {
  json a = json::array();
  for (int i = 0; i < 6; ++i) a.push_back(v[i]);
  return a;
}

Vec6 vec6_from_json(const json& a) {
  if (!a.is_array() || a.size() != 6) throw IOFailure("expected a 6-element array");
  Vec6 v;
  for (int i = 0; i < 6; ++i) v[i] = a[i].get<double>();
  return v;
}

std::string frame_name(int frame, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06d%s", frame, ext);
  return buf;
}

json load_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IOFailure("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IOFailure(path.string() + ": " + e.what());
  }
  return j;
}

}  // namespace

PipelineConfig load_config(const fs::path& path) {
  const json j = load_json(path);
  PipelineConfig c;
  if (j.contains("filter")) {
    const json& f = j.at("filter");
    c.filter.n_particles = f.value("n_particles", c.filter.n_particles);
    if (f.contains("init_variance")) c.filter.init_variance = vec6_from_json(f.at("init_variance"));
    if (f.contains("walk_variance")) c.filter.walk_variance = vec6_from_json(f.at("walk_variance"));
    c.filter.gamma_m = f.value("gamma_m", c.filter.gamma_m);
    c.filter.gamma_phi = f.value("gamma_phi", c.filter.gamma_phi);
    c.filter.gamma_rho = f.value("gamma_rho", c.filter.gamma_rho);
    c.filter.marker_gate_sq = f.value("marker_gate_sq", c.filter.marker_gate_sq);
    c.filter.line_gate_phi = f.value("line_gate_phi", c.filter.line_gate_phi);
    c.filter.line_gate_rho = f.value("line_gate_rho", c.filter.line_gate_rho);
    c.filter.resample_threshold = f.value("resample_threshold", c.filter.resample_threshold);
  }
  if (j.contains("solver")) {
    const json& s = j.at("solver");
    c.solver.lambda_a = s.value("lambda_a", c.solver.lambda_a);
    c.solver.lambda_r = s.value("lambda_r", c.solver.lambda_r);
    c.solver.lambda_c = s.value("lambda_c", c.solver.lambda_c);
    c.solver.mu0 = s.value("mu0", c.solver.mu0);
    c.solver.mu_up = s.value("mu_up", c.solver.mu_up);
    c.solver.mu_down = s.value("mu_down", c.solver.mu_down);
    c.solver.mu_limit = s.value("mu_limit", c.solver.mu_limit);
    c.solver.max_lm_iters = s.value("max_lm_iters", c.solver.max_lm_iters);
    c.solver.pcg_iters = s.value("pcg_iters", c.solver.pcg_iters);
    c.solver.pcg_tol = s.value("pcg_tol", c.solver.pcg_tol);
    c.solver.rel_change_tol = s.value("rel_change_tol", c.solver.rel_change_tol);
    c.solver.cost_floor = s.value("cost_floor", c.solver.cost_floor);
    c.solver.robust_percentile = s.value("robust_percentile", c.solver.robust_percentile);
    c.solver.robust_scale = s.value("robust_scale", c.solver.robust_scale);
  }
  if (j.contains("fusion")) {
    const json& u = j.at("fusion");
    c.fusion.merge_depth = u.value("merge_depth", c.fusion.merge_depth);
    c.fusion.merge_angle_deg = u.value("merge_angle_deg", c.fusion.merge_angle_deg);
    c.fusion.t_stale = u.value("t_stale", c.fusion.t_stale);
    c.fusion.conf_stable = u.value("conf_stable", c.fusion.conf_stable);
    c.fusion.min_nz = u.value("min_nz", c.fusion.min_nz);
  }
  if (j.contains("pipeline")) {
    const json& p = j.at("pipeline");
    c.node_spacing = p.value("node_spacing", c.node_spacing);
    c.mask_dilation_px = p.value("mask_dilation_px", c.mask_dilation_px);
    c.keyframe_interval = p.value("keyframe_interval", c.keyframe_interval);
    c.temporal_window = p.value("temporal_window", c.temporal_window);
    c.bilateral_sigma_s = p.value("bilateral_sigma_s", c.bilateral_sigma_s);
    c.bilateral_sigma_r = p.value("bilateral_sigma_r", c.bilateral_sigma_r);
    c.cluster_radius = p.value("cluster_radius", c.cluster_radius);
    c.seed = p.value("seed", c.seed);
  }
  return c;
}

void save_config(const PipelineConfig& c, const fs::path& path) {
  json j;
  j["filter"] = {{"n_particles", c.filter.n_particles},
                 {"init_variance", vec6_to_json(c.filter.init_variance)},
                 {"walk_variance", vec6_to_json(c.filter.walk_variance)},
                 {"gamma_m", c.filter.gamma_m},
                 {"gamma_phi", c.filter.gamma_phi},
                 {"gamma_rho", c.filter.gamma_rho},
                 {"marker_gate_sq", c.filter.marker_gate_sq},
                 {"line_gate_phi", c.filter.line_gate_phi},
                 {"line_gate_rho", c.filter.line_gate_rho},
                 {"resample_threshold", c.filter.resample_threshold}};
  j["solver"] = {{"lambda_a", c.solver.lambda_a},
                 {"lambda_r", c.solver.lambda_r},
                 {"lambda_c", c.solver.lambda_c},
                 {"mu0", c.solver.mu0},
                 {"mu_up", c.solver.mu_up},
                 {"mu_down", c.solver.mu_down},
                 {"mu_limit", c.solver.mu_limit},
                 {"max_lm_iters", c.solver.max_lm_iters},
                 {"pcg_iters", c.solver.pcg_iters},
                 {"pcg_tol", c.solver.pcg_tol},
                 {"rel_change_tol", c.solver.rel_change_tol},
                 {"cost_floor", c.solver.cost_floor},
                 {"robust_percentile", c.solver.robust_percentile},
                 {"robust_scale", c.solver.robust_scale}};
  j["fusion"] = {{"merge_depth", c.fusion.merge_depth},
                 {"merge_angle_deg", c.fusion.merge_angle_deg},
                 {"t_stale", c.fusion.t_stale},
                 {"conf_stable", c.fusion.conf_stable},
                 {"min_nz", c.fusion.min_nz}};
  j["pipeline"] = {{"node_spacing", c.node_spacing},
                   {"mask_dilation_px", c.mask_dilation_px},
                   {"keyframe_interval", c.keyframe_interval},
                   {"temporal_window", c.temporal_window},
                   {"bilateral_sigma_s", c.bilateral_sigma_s},
                   {"bilateral_sigma_r", c.bilateral_sigma_r},
                   {"cluster_radius", c.cluster_radius},
                   {"seed", c.seed}};
  std::ofstream out(path);
  if (!out) throw IOFailure("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

Dataset open_dataset(const fs::path& root) {
  const json m = load_json(root / "manifest.json");
  Dataset ds;
  ds.root = root;
  ds.name = m.value("name", std::string("unnamed"));
  ds.frames = m.at("frames").get<int>();
  ds.fps = m.value("fps", 30.0);
  ds.K.fx = m.at("fx").get<double>();
  ds.K.fy = m.at("fy").get<double>();
  ds.K.cx = m.at("cx").get<double>();
  ds.K.cy = m.at("cy").get<double>();
  ds.K.width = m.at("width").get<int>();
  ds.K.height = m.at("height").get<int>();
  ds.has_tool = m.value("has_tool", false);
  if (m.contains("phase")) ds.phase = m.at("phase").get<std::vector<int>>();

  if (ds.frames < 1 || ds.K.width < 1 || ds.K.height < 1)
    throw IOFailure("manifest has a non-positive frame count or image size");
  for (int f = 0; f < ds.frames; ++f) {
    if (!fs::exists(root / "depth" / frame_name(f, ".raw")))
      throw IOFailure("manifest frame count does not match the depth files");
  }
  if (ds.has_tool) ds.chain = load_chain(root / "chain.json");
  if (fs::exists(root / "labels.json")) {
    const json l = load_json(root / "labels.json");
    for (const auto& p : l.at("pixels")) ds.label_pixels.emplace_back(p[0].get<double>(),
                                                                      p[1].get<double>());
  }
  return ds;
}

DepthImage load_depth(const Dataset& ds, int frame) {
  const fs::path path = ds.root / "depth" / frame_name(frame, ".raw");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IOFailure("cannot open " + path.string());
  DepthImage img(ds.K.width, ds.K.height);
  in.read(reinterpret_cast<char*>(img.data.data()),
          static_cast<std::streamsize>(img.data.size() * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(img.data.size() * sizeof(float)) ||
      in.peek() != EOF)
    throw IOFailure(path.string() + " does not match the manifest dimensions");
  return img;
}

ColorImage load_color(const Dataset& ds, int frame) {
  const fs::path path = ds.root / "color" / frame_name(frame, ".ppm");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IOFailure("cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w != ds.K.width || h != ds.K.height)
    throw IOFailure(path.string() + " is not the expected binary PPM");
  in.get();
  ColorImage img(w, h);
  in.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.size() * 3));
  if (in.gcount() != static_cast<std::streamsize>(img.size() * 3))
    throw IOFailure(path.string() + " is truncated");
  return img;
}

FrameFeatures load_features(const Dataset& ds, int frame) {
  const json j = load_json(ds.root / "features" / frame_name(frame, ".json"));
  FrameFeatures feat;
  for (const auto& m : j.at("markers")) feat.markers.emplace_back(m[0].get<double>(),
                                                                  m[1].get<double>());
  for (const auto& l : j.at("lines"))
    feat.lines.push_back({l[0].get<double>(), l[1].get<double>()});
  for (const auto& c : j.at("correspondences")) {
    Vec4 pair;
    for (int i = 0; i < 4; ++i) pair[i] = c[i].get<double>();
    feat.correspondences.push_back(pair);
  }
  return feat;
}

std::vector<double> load_joints(const Dataset& ds, int frame) {
  const fs::path path = ds.root / "joints" / frame_name(frame, ".txt");
  std::ifstream in(path);
  if (!in) throw IOFailure("cannot open " + path.string());
  std::vector<double> theta;
  double v = 0;
  while (in >> v) theta.push_back(v);
  return theta;
}

GroundTruth load_ground_truth(const Dataset& ds) {
  const fs::path path = ds.root / "ground_truth.json";
  if (!fs::exists(path)) throw MissingGroundTruth();
  const json j = load_json(path);
  GroundTruth gt;
  for (int i = 0; i < 3; ++i) {
    gt.error.w[i] = j.at("w")[i].get<double>();
    gt.error.b[i] = j.at("b")[i].get<double>();
  }
  for (const auto& row : j.at("tracked")) {
    std::vector<Vec3> pts;
    for (const auto& p : row) pts.emplace_back(p[0].get<double>(), p[1].get<double>(),
                                               p[2].get<double>());
    gt.tracked.push_back(std::move(pts));
  }
  for (const auto& row : j.at("tracked_px")) {
    std::vector<Vec2> pts;
    for (const auto& p : row) pts.emplace_back(p[0].get<double>(), p[1].get<double>());
    gt.tracked_px.push_back(std::move(pts));
  }
  if (j.contains("phase")) gt.phase = j.at("phase").get<std::vector<int>>();
  return gt;
}

DepthImage preprocess_depth(const std::vector<const DepthImage*>& window, const MaskImage& mask,
                            const PipelineConfig& cfg) {
  if (window.empty()) throw DimensionMismatch("preprocess window is empty");
  const int w = window.back()->width;
  const int h = window.back()->height;
  for (const DepthImage* d : window) {
    if (d->width != w || d->height != h)
      throw DimensionMismatch("preprocess window mixes image sizes");
  }

  // Temporal median, skipping invalid samples per pixel.
  DepthImage med(w, h, std::numeric_limits<float>::quiet_NaN());
  std::vector<float> vals;
  vals.reserve(window.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      vals.clear();
      for (const DepthImage* d : window) {
        const float v = d->at(x, y);
        if (std::isfinite(v)) vals.push_back(v);
      }
      if (vals.empty()) continue;
      std::sort(vals.begin(), vals.end());
      const size_t n = vals.size();
      med.at(x, y) = n % 2 ? vals[n / 2] : 0.5f * (vals[n / 2 - 1] + vals[n / 2]);
    }
  }

  // Bilateral filter, written as center + weighted increments so a constant
  // neighborhood passes through bit-exactly.
  const int radius = static_cast<int>(std::ceil(2 * cfg.bilateral_sigma_s));
  std::vector<double> spatial(static_cast<size_t>(2 * radius + 1) * (2 * radius + 1));
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      spatial[static_cast<size_t>(dy + radius) * (2 * radius + 1) + (dx + radius)] =
          std::exp(-(dx * dx + dy * dy) / (2 * cfg.bilateral_sigma_s * cfg.bilateral_sigma_s));
    }
  }
  const double inv_range = 1.0 / (2 * cfg.bilateral_sigma_r * cfg.bilateral_sigma_r);

  DepthImage out(w, h, std::numeric_limits<float>::quiet_NaN());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const float center = med.at(x, y);
      if (!std::isfinite(center)) continue;
      double num = 0, den = 0;
      for (int dy = -radius; dy <= radius; ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= h) continue;
        for (int dx = -radius; dx <= radius; ++dx) {
          const int xx = x + dx;
          if (xx < 0 || xx >= w) continue;
          const float v = med.at(xx, yy);
          if (!std::isfinite(v)) continue;
          const double diff = v - center;
          const double wgt =
              spatial[static_cast<size_t>(dy + radius) * (2 * radius + 1) + (dx + radius)] *
              std::exp(-diff * diff * inv_range);
          num += wgt * diff;
          den += wgt;
        }
      }
      out.at(x, y) = static_cast<float>(center + num / den);
    }
  }

  if (mask.size() > 0) {
    if (mask.width != w || mask.height != h)
      throw DimensionMismatch("mask size does not match the depth size");
    const MaskImage dil = dilate_mask(mask, cfg.mask_dilation_px);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (dil.at(x, y)) out.at(x, y) = std::numeric_limits<float>::quiet_NaN();
      }
    }
  }
  return out;
}

std::pair<Vec3, Mat3> track_point_query(const TrackedPoint& tp, double d) {
  if (!tp.bound || tp.cluster.empty()) throw EmptyCluster();
  const Vec3 z = -tp.n_g.normalized();
  const Vec3 seed = std::abs(z.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  const Vec3 x = (seed - z * z.dot(seed)).normalized();
  Mat3 R;
  R.col(0) = x;
  R.col(1) = z.cross(x);
  R.col(2) = z;
  return {tp.p_g + d * tp.n_g, R};
}

namespace {

std::vector<int> resolve_cluster(const SurfelMap& map, const Vec3& center, double radius) {
  std::vector<int> ids;
  const double r2 = radius * radius;
  for (size_t i = 0; i < map.surfels.size(); ++i) {
    if ((map.surfels[i].p - center).squaredNorm() <= r2) ids.push_back(static_cast<int>(i));
  }
  return ids;
}

void average_cluster(const SurfelMap& map, TrackedPoint& tp) {
  if (tp.cluster.empty()) return;
  Vec3 p = Vec3::Zero();
  Vec3 n = Vec3::Zero();
  for (const int id : tp.cluster) {
    p += map.surfels[id].p;
    n += map.surfels[id].n;
  }
  tp.p_g = p / static_cast<double>(tp.cluster.size());
  if (n.norm() > 1e-9) tp.n_g = n.normalized();
}

struct CsvWriter {
  FILE* f = nullptr;

  void open(const fs::path& path, const char* header) {
    f = std::fopen(path.string().c_str(), "w");
    if (!f) throw IOFailure("cannot write " + path.string());
    std::fprintf(f, "%s\n", header);
  }
  ~CsvWriter() {
    if (f) std::fclose(f);
  }
};

}  // namespace

RunResult run_pipeline(const Dataset& ds, const PipelineConfig& cfg, RunMode mode,
                       const fs::path& out_dir) {
  const bool do_tool = ds.has_tool && mode != RunMode::DeformOnly;
  const bool do_deform = mode != RunMode::ToolOnly;
  const bool writing = !out_dir.empty();

  CsvWriter est, tpw, slog;
  if (writing) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IOFailure("cannot create " + out_dir.string());
    est.open(out_dir / "estimates.csv",
             "frame,wx,wy,wz,bx,by,bz,n_eff,resampled,solver_skipped,lm_iterations,solver_cost,"
             "surfel_count");
    tpw.open(out_dir / "tracked_points.csv", "frame,point,px,py,pz,u,v");
    slog.open(out_dir / "solver_log.csv", "frame,iter,cost_before,cost,mu,accepted,step_inf");
  }

  std::mt19937_64 rng(cfg.seed);
  ParticleSet particles;
  bool filter_ready = false;

  RunResult R;
  R.tracked.resize(ds.label_pixels.size());
  std::deque<DepthImage> history;

  const auto t_start = std::chrono::steady_clock::now();
  for (int f = 0; f < ds.frames; ++f) {
    const auto t_frame = std::chrono::steady_clock::now();
    FrameStats st;
    const std::vector<double> theta = load_joints(ds, f);
    const FrameFeatures feat = load_features(ds, f);

    MaskImage mask;
    if (do_tool) {
      if (!filter_ready) {
        particles = init_particles(cfg.filter, rng);
        filter_ready = true;
      }
      predict(particles, cfg.filter, rng);
      const UpdateResult ur = update(particles, ds.chain, theta, ds.K, feat, cfg.filter, rng);
      st.estimate = ur.estimate;
      st.n_eff = ur.n_eff;
      st.resampled = ur.resampled;
      if (do_deform) {
        mask = render_tool_mask(ds.chain, theta,
                                HandEyeState{ds.chain.nominal_hand_eye, ur.estimate}, ds.K, 0);
      }
    }

    if (do_deform) {
      DepthImage depth_raw = load_depth(ds, f);
      const ColorImage color = load_color(ds, f);
      history.push_back(std::move(depth_raw));
      while (static_cast<int>(history.size()) > std::max(1, cfg.temporal_window))
        history.pop_front();
      std::vector<const DepthImage*> window;
      window.reserve(history.size());
      for (const DepthImage& d : history) window.push_back(&d);
      const DepthImage depth = preprocess_depth(window, mask, cfg);

      const bool frozen = f < static_cast<int>(ds.phase.size()) &&
                          (ds.phase[f] == kGrasp || ds.phase[f] == kStretch);

      if (R.map.surfels.empty()) {
        try {
          fuse_frame(R.map, depth, color, mask, ds.K, f, cfg.fusion);
          sample_ed_nodes(R.map, R.graph, cfg.node_spacing, rng);
          rebuild_skinning(R.map, R.graph);
          for (size_t i = 0; i < ds.label_pixels.size(); ++i) {
            const Vec2 px = ds.label_pixels[i];
            const int u0 = static_cast<int>(std::lround(px.x()));
            const int v0 = static_cast<int>(std::lround(px.y()));
            for (const auto [du, dv] : {std::pair{0, 0}, {1, 0}, {-1, 0}, {0, 1}, {0, -1},
                                        {1, 1}, {1, -1}, {-1, 1}, {-1, -1}}) {
              const int u = u0 + du, v = v0 + dv;
              if (!depth.in_bounds(u, v) || !std::isfinite(depth.at(u, v))) continue;
              const Vec3 p0 = unproject(ds.K, px.x(), px.y(), depth.at(u, v));
              R.tracked[i].cluster = resolve_cluster(R.map, p0, cfg.cluster_radius);
              if (!R.tracked[i].cluster.empty()) {
                R.tracked[i].bound = true;
                R.tracked[i].p_g = p0;
                average_cluster(R.map, R.tracked[i]);
              }
              break;
            }
          }
        } catch (const EmptyFrame&) {
          // Nothing to start the map from yet; try again next frame.
        }
      } else {
        for (TrackedPoint& tp : R.tracked) {
          if (tp.bound && !frozen) tp.cluster = resolve_cluster(R.map, tp.p_g, cfg.cluster_radius);
        }
        bool solved = false;
        try {
          const SolveReport rep =
              lm_optimize(R.map, R.graph, depth, ds.K, feat.correspondences, cfg.solver);
          st.lm_iterations = rep.iterations;
          st.solver_cost = rep.final_cost;
          solved = true;
          if (writing) {
            for (const IterationLog& l : rep.log) {
              std::fprintf(slog.f, "%d,%d,%.17g,%.17g,%.17g,%d,%.17g\n", f, l.iter, l.cost_before,
                           l.cost, l.mu, l.accepted ? 1 : 0, l.step_inf);
            }
          }
        } catch (const Error&) {
          // Divergence or a non-finite system: drop this frame's deformation.
          st.solver_skipped = true;
          for (EDNode& n : R.graph.nodes) {
            n.q = Vec4(1, 0, 0, 0);
            n.b = Vec3::Zero();
          }
          R.graph.t_g = QuatTranslation::identity();
        }
        if (solved) {
          commit_deformation(R.map, R.graph);
          if (!frozen) {
            for (TrackedPoint& tp : R.tracked) {
              if (tp.bound) average_cluster(R.map, tp);
            }
          }
        }
        try {
          fuse_frame(R.map, depth, color, mask, ds.K, f, cfg.fusion);
        } catch (const EmptyFrame&) {
        }
        sample_ed_nodes(R.map, R.graph, cfg.node_spacing, rng);
        rebuild_skinning(R.map, R.graph);
      }
      st.surfel_count = static_cast<int>(R.map.surfels.size());

      if (writing && !R.map.surfels.empty() &&
          (f % std::max(1, cfg.keyframe_interval) == 0 || f == ds.frames - 1)) {
        export_ply(R.map, out_dir / ("map_" + frame_name(f, ".ply")));
      }
    }

    std::vector<Vec3> row_p(R.tracked.size(), Vec3::Constant(kNan));
    std::vector<Vec2> row_px(R.tracked.size(), Vec2::Constant(kNan));
    for (size_t i = 0; i < R.tracked.size(); ++i) {
      if (!R.tracked[i].bound) continue;
      row_p[i] = R.tracked[i].p_g;
      row_px[i] = project_point(ds.K, R.tracked[i].p_g);
    }
    R.tracked_p.push_back(row_p);
    R.tracked_px.push_back(row_px);

    st.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                           t_frame)
                     .count();
    R.frames.push_back(st);

    if (writing) {
      std::fprintf(est.f, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%d,%d,%.17g,%d\n", f,
                   st.estimate.w.x(), st.estimate.w.y(), st.estimate.w.z(), st.estimate.b.x(),
                   st.estimate.b.y(), st.estimate.b.z(), st.n_eff, st.resampled ? 1 : 0,
                   st.solver_skipped ? 1 : 0, st.lm_iterations, st.solver_cost, st.surfel_count);
      for (size_t i = 0; i < row_p.size(); ++i) {
        std::fprintf(tpw.f, "%d,%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", f, i, row_p[i].x(),
                     row_p[i].y(), row_p[i].z(), row_px[i].x(), row_px[i].y());
      }
    }
  }

  if (writing) {
    const double total_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    json rep;
    rep["frames"] = ds.frames;
    rep["total_s"] = total_s;
    rep["fps"] = ds.frames / std::max(total_s, 1e-9);
    rep["mode"] = mode == RunMode::Full ? "full" : (mode == RunMode::ToolOnly ? "tool" : "deform");
    std::ofstream out(out_dir / "run_report.json");
    out << rep.dump(2) << "\n";
  }
  return R;
}

namespace {

std::vector<std::vector<double>> read_csv(const fs::path& path, const std::string& expect_header) {
  std::ifstream in(path);
  if (!in) throw IOFailure("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IOFailure(path.string() + " is empty");
  if (line != expect_header) throw IOFailure(path.string() + " has an unexpected header");
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    const char* s = line.c_str();
    char* end = nullptr;
    for (;;) {
      row.push_back(std::strtod(s, &end));
      if (*end != ',') break;
      s = end + 1;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

double mask_iou(const MaskImage& a, const MaskImage& b) {
  int inter = 0, uni = 0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const bool pa = a.data[i] != 0;
    const bool pb = b.data[i] != 0;
    inter += pa && pb;
    uni += pa || pb;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
}

double nan_mean(const std::vector<double>& v) {
  double sum = 0;
  int n = 0;
  for (const double x : v) {
    if (std::isfinite(x)) {
      sum += x;
      ++n;
    }
  }
  return n ? sum / n : kNan;
}

}  // namespace

MetricsReport eval_metrics(const Dataset& ds, const fs::path& run_dir) {
  const GroundTruth gt = load_ground_truth(ds);
  const auto est = read_csv(run_dir / "estimates.csv",
                            "frame,wx,wy,wz,bx,by,bz,n_eff,resampled,solver_skipped,lm_iterations,"
                            "solver_cost,surfel_count");
  const auto tracked = read_csv(run_dir / "tracked_points.csv", "frame,point,px,py,pz,u,v");
  if (static_cast<int>(est.size()) != ds.frames)
    throw IOFailure("estimates.csv row count does not match the dataset");

  std::vector<std::vector<Vec2>> run_px(ds.frames);
  for (const auto& row : tracked) {
    const int f = static_cast<int>(row[0]);
    if (f >= 0 && f < ds.frames) run_px[f].emplace_back(row[5], row[6]);
  }

  MetricsReport rep;
  for (int f = 0; f < ds.frames; ++f) {
    const auto& e = est[f];
    rep.w_err.push_back((Vec3(e[1], e[2], e[3]) - gt.error.w).norm());
    rep.b_err.push_back((Vec3(e[4], e[5], e[6]) - gt.error.b).norm());
    rep.solver_cost.push_back(e[11]);

    double sum = 0;
    int n = 0;
    for (size_t i = 0; i < run_px[f].size() && i < gt.tracked_px[f].size(); ++i) {
      if (!run_px[f][i].allFinite()) continue;
      sum += (run_px[f][i] - gt.tracked_px[f][i]).norm();
      ++n;
    }
    rep.reproj_px.push_back(n ? sum / n : kNan);

    double bsum = 0;
    int bn = 0;
    if (!gt.tracked.empty()) {
      for (size_t i = 0; i < gt.tracked[0].size(); ++i) {
        bsum += (project_point(ds.K, gt.tracked[0][i]) - gt.tracked_px[f][i]).norm();
        ++bn;
      }
    }
    rep.baseline_px.push_back(bn ? bsum / bn : kNan);

    if (ds.has_tool) {
      const std::vector<double> theta = load_joints(ds, f);
      const AxisAngleTranslation est_err{Vec3(e[1], e[2], e[3]), Vec3(e[4], e[5], e[6])};
      const MaskImage m_est =
          render_tool_mask(ds.chain, theta, HandEyeState{ds.chain.nominal_hand_eye, est_err},
                           ds.K, 0);
      const MaskImage m_true = render_tool_mask(
          ds.chain, theta, HandEyeState{ds.chain.nominal_hand_eye, gt.error}, ds.K, 0);
      rep.iou.push_back(mask_iou(m_est, m_true));
    } else {
      rep.iou.push_back(1.0);
    }
  }
  rep.mean_reproj = nan_mean(rep.reproj_px);
  rep.mean_baseline = nan_mean(rep.baseline_px);
  rep.mean_iou = nan_mean(rep.iou);

  CsvWriter out;
  out.open(run_dir / "metrics.csv", "frame,w_err,b_err,reproj_px,baseline_px,iou,solver_cost");
  for (int f = 0; f < ds.frames; ++f) {
    std::fprintf(out.f, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", f, rep.w_err[f], rep.b_err[f],
                 rep.reproj_px[f], rep.baseline_px[f], rep.iou[f], rep.solver_cost[f]);
  }
  return rep;
}

}  // namespace super
