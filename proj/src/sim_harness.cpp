#include "super/sim_harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>

#include "super/errors.hpp"

namespace super {

using nlohmann::json;

namespace {

double smoothstep(double x) {
  x = std::clamp(x, 0.0, 1.0);
  return x * x * (3 - 2 * x);
}

/// Peak displacement of the deformation at time t. The grasp-stretch family
/// follows the align / lower / grasp / stretch / release schedule; the surface
/// only moves while stretched and settles back after release.
double deformation_scale(const SheetConfig& cfg, double t) {
  switch (cfg.deform) {
    case DeformationKind::None:
      return 0;
    case DeformationKind::Bump:
    case DeformationKind::Pinch:
      return cfg.amplitude * std::sin(2 * std::numbers::pi * cfg.freq_hz * t);
    case DeformationKind::GraspStretch: {
      const double f = t / cfg.duration;
      if (f < 0.5) return 0;
      if (f < 0.8) return cfg.amplitude * smoothstep((f - 0.5) / 0.3);
      return cfg.amplitude * (1 - smoothstep((f - 0.8) / 0.2));
    }
  }
  return 0;
}

}  // namespace

GraspPhase grasp_phase(double time_frac) {
  if (time_frac < 0.2) return kAlign;
  if (time_frac < 0.35) return kLower;
  if (time_frac < 0.5) return kGrasp;
  if (time_frac < 0.8) return kStretch;
  return kRelease;
}

Vec3 sheet_point(const SheetConfig& cfg, double sx, double sy, double t) {
  double x = (sx - 0.5) * cfg.size_x;
  double y = (sy - 0.5) * cfg.size_y;

  const double scale = deformation_scale(cfg, t);
  const double r2 = x * x + y * y;
  const double falloff = std::exp(-r2 / (2 * cfg.sigma * cfg.sigma));
  if (cfg.deform == DeformationKind::Pinch) {
    // Contract in-plane toward the center; the axial pull is applied below.
    x -= 0.5 * scale * falloff * x / cfg.sigma;
    y -= 0.5 * scale * falloff * y / cfg.sigma;
  }

  // Sheet plane tilted about the x axis; the deformation displaces along the
  // plane normal toward the camera, so a tilted sheet moves laterally too.
  const double ct = std::cos(cfg.tilt);
  const double st = std::sin(cfg.tilt);
  const double lift = scale * falloff;
  return Vec3(x, y * ct + lift * st, cfg.z0 + y * st - lift * ct);
}

SheetMesh sheet_mesh(const SheetConfig& cfg, double t) {
  SheetMesh mesh;
  mesh.nu = cfg.nu;
  mesh.nv = cfg.nv;
  mesh.pts.reserve(static_cast<size_t>(cfg.nu) * cfg.nv);
  mesh.params.reserve(mesh.pts.capacity());
  for (int iv = 0; iv < cfg.nv; ++iv) {
    for (int iu = 0; iu < cfg.nu; ++iu) {
      const double sx = static_cast<double>(iu) / (cfg.nu - 1);
      const double sy = static_cast<double>(iv) / (cfg.nv - 1);
      mesh.pts.push_back(sheet_point(cfg, sx, sy, t));
      mesh.params.emplace_back(sx, sy);
    }
  }
  return mesh;
}

namespace {

Rgb sheet_texture(double sx, double sy) {
  const auto band = [](double v) {
    return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255));
  };
  const double r = 0.55 + 0.4 * std::sin(14 * std::numbers::pi * sx + 2 * std::sin(5 * sy));
  const double g = 0.55 + 0.4 * std::sin(11 * std::numbers::pi * sy + 1.3);
  return Rgb{band(r), band(g), band(0.7)};
}

/// Intersects the pixel ray ((u-cx)/fx, (v-cy)/fy, 1) with one triangle and
/// writes depth/color where it is the nearest hit so far. The ray direction has
/// unit z, so the ray parameter equals the depth.
void raster_triangle(const Vec3& a, const Vec3& b, const Vec3& c, const Vec2& pa, const Vec2& pb,
                     const Vec2& pc, const CameraIntrinsics& K, DepthImage& depth,
                     ColorImage& color) {
  if (a.z() <= 0 || b.z() <= 0 || c.z() <= 0) return;
  const Vec2 qa = project_point(K, a), qb = project_point(K, b), qc = project_point(K, c);
  const int u0 = std::max(0, static_cast<int>(std::floor(std::min({qa.x(), qb.x(), qc.x()}))));
  const int u1 = std::min(K.width - 1, static_cast<int>(std::ceil(std::max({qa.x(), qb.x(), qc.x()}))));
  const int v0 = std::max(0, static_cast<int>(std::floor(std::min({qa.y(), qb.y(), qc.y()}))));
  const int v1 = std::min(K.height - 1, static_cast<int>(std::ceil(std::max({qa.y(), qb.y(), qc.y()}))));

  const Vec3 e1 = b - a;
  const Vec3 e2 = c - a;
  constexpr double eps = 1e-9;
  for (int v = v0; v <= v1; ++v) {
    for (int u = u0; u <= u1; ++u) {
      const Vec3 dir((u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0);
      const Vec3 h = dir.cross(e2);
      const double det = e1.dot(h);
      if (std::abs(det) < 1e-18) continue;
      const double inv = 1.0 / det;
      const Vec3 s = -a;
      const double beta = inv * s.dot(h);
      if (beta < -eps || beta > 1 + eps) continue;
      const Vec3 q = s.cross(e1);
      const double gamma = inv * dir.dot(q);
      if (gamma < -eps || beta + gamma > 1 + eps) continue;
      const double d = inv * e2.dot(q);
      if (d <= 0) continue;
      float& cell = depth.at(u, v);
      if (std::isnan(cell) || d < cell) {
        cell = static_cast<float>(d);
        const Vec2 par = pa + beta * (pb - pa) + gamma * (pc - pa);
        color.at(u, v) = sheet_texture(par.x(), par.y());
      }
    }
  }
}

}  // namespace

void render_sheet(const SheetMesh& mesh, const CameraIntrinsics& K, DepthImage& depth,
                  ColorImage& color) {
  depth = DepthImage(K.width, K.height, std::numeric_limits<float>::quiet_NaN());
  color = ColorImage(K.width, K.height);
  const auto idx = [&](int iu, int iv) { return iv * mesh.nu + iu; };
  for (int iv = 0; iv + 1 < mesh.nv; ++iv) {
    for (int iu = 0; iu + 1 < mesh.nu; ++iu) {
      const int i00 = idx(iu, iv), i10 = idx(iu + 1, iv);
      const int i01 = idx(iu, iv + 1), i11 = idx(iu + 1, iv + 1);
      raster_triangle(mesh.pts[i00], mesh.pts[i10], mesh.pts[i11], mesh.params[i00],
                      mesh.params[i10], mesh.params[i11], K, depth, color);
      raster_triangle(mesh.pts[i00], mesh.pts[i11], mesh.pts[i01], mesh.params[i00],
                      mesh.params[i11], mesh.params[i01], K, depth, color);
    }
  }
}

void add_depth_noise(DepthImage& depth, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  for (float& d : depth.data) {
    if (std::isfinite(d)) d = static_cast<float>(d + sigma * g(rng));
  }
}

FrameFeatures emit_tool_features(const KinematicChain& chain, const std::vector<double>& theta,
                                 const AxisAngleTranslation& true_error,
                                 const CameraIntrinsics& K, double sigma_px, double p_dropout,
                                 double sigma_rho, double sigma_phi, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u01(0, 1);
  const PredictedFeatures pf =
      predict_features(chain, theta, HandEyeState{chain.nominal_hand_eye, true_error}, K);

  FrameFeatures obs;
  for (const Vec2& m : pf.markers) {
    if (m.x() < 0 || m.x() >= K.width || m.y() < 0 || m.y() >= K.height) continue;
    if (u01(rng) < p_dropout) continue;
    obs.markers.push_back(m + sigma_px * Vec2(g(rng), g(rng)));
  }
  for (const ImageLine& l : pf.lines) {
    if (u01(rng) < p_dropout) continue;
    const double rho = l.rho + sigma_rho * g(rng);
    const double phi = l.phi + sigma_phi * g(rng);
    if (phi >= 0 && phi < std::numbers::pi) {
      obs.lines.push_back({rho, phi});
    } else {
      obs.lines.push_back(canonical_line(std::cos(phi), std::sin(phi), -rho));
    }
  }
  return obs;
}

std::vector<Vec4> emit_correspondences(const SheetConfig& sheet, double t_prev, double t_cur,
                                       const CameraIntrinsics& K, int count, double sigma_px,
                                       std::mt19937_64& rng) {
  std::uniform_real_distribution<double> up(0.05, 0.95);
  std::normal_distribution<double> g;
  std::vector<Vec4> pairs;
  pairs.reserve(count);
  for (int i = 0; i < count; ++i) {
    const double sx = up(rng);
    const double sy = up(rng);
    const Vec2 prev = project_point(K, sheet_point(sheet, sx, sy, t_prev));
    const Vec2 cur = project_point(K, sheet_point(sheet, sx, sy, t_cur));
    const auto inside = [&](const Vec2& p) {
      return p.x() >= 0 && p.x() < K.width && p.y() >= 0 && p.y() < K.height;
    };
    if (!inside(prev) || !inside(cur)) continue;
    Vec4 pair;
    pair << prev + sigma_px * Vec2(g(rng), g(rng)), cur + sigma_px * Vec2(g(rng), g(rng));
    pairs.push_back(pair);
  }
  return pairs;
}

KinematicChain make_scenario_tool(int n_markers, double lever, double depth_spread,
                                  double camera_distance) {
  KinematicChain c;
  Joint j1;
  j1.axis = Vec3(0, 0, 1);
  Joint j2;
  j2.axis = Vec3(0, 1, 0);
  j2.home.t = Vec3(0.12, 0, 0);
  c.joints = {j1, j2};

  // Marker constellation on a golden-angle spiral, alternating between the two
  // links so both joints are observable, with depth spread for the lever arm.
  c.link_points.push_back({1, Vec3::Zero(), 0});
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (int i = 1; i < n_markers; ++i) {
    const double frac = static_cast<double>(i) / n_markers;
    const double ang = golden * i;
    const double z = depth_spread * (2 * frac - 1);
    const double r = lever * std::sqrt(frac);
    const Vec3 p(0.3 * r * std::cos(ang), r * std::sin(ang), z);
    c.link_points.push_back({i % 3 == 0 ? 1 : 2, p, i});
  }
  c.shaft.link = 1;
  c.shaft.axis_point = Vec3::Zero();
  c.shaft.axis_dir = Vec3(1, 0, 0);
  c.shaft.radius = 0.004;
  c.shaft.length = 0.12;
  c.mask_point_radius = 0.006;
  c.nominal_hand_eye = RigidTransform{Mat3::Identity(), Vec3(0, 0, camera_distance)};
  return c;
}

std::vector<double> scenario_joints(int frame) {
  return {0.3 + 0.25 * std::sin(2 * std::numbers::pi * frame / 60.0),
          0.2 + 0.18 * std::cos(2 * std::numbers::pi * frame / 45.0)};
}

std::vector<Vec2> tracked_params(int count) {
  // 5-wide grid over the deforming center region of the sheet.
  std::vector<Vec2> params;
  params.reserve(count);
  const int cols = 5;
  const int rows = (count + cols - 1) / cols;
  for (int i = 0; i < count; ++i) {
    const int cx = i % cols;
    const int cy = i / cols;
    params.emplace_back(0.3 + 0.4 * cx / (cols - 1),
                        rows > 1 ? 0.3 + 0.4 * cy / (rows - 1) : 0.5);
  }
  return params;
}

ScenarioConfig scenario_by_name(const std::string& name, int frames, uint64_t seed) {
  ScenarioConfig cfg;
  cfg.name = name;
  cfg.frames = frames;
  cfg.seed = seed;

  if (name == "static") {
    cfg.K = {400, 400, 80, 60, 160, 120};
  } else if (name == "bump") {
    cfg.K = {600, 600, 320, 240, 640, 480};
    cfg.sheet.size_x = 0.20;
    cfg.sheet.size_y = 0.15;
    cfg.sheet.tilt = 0.3;
    cfg.sheet.nu = 41;
    cfg.sheet.nv = 31;
    cfg.sheet.deform = DeformationKind::Bump;
    cfg.sheet.amplitude = 0.01;
    cfg.sheet.freq_hz = 0.5;
    cfg.sheet.sigma = 0.03;
    cfg.n_corr = 50;
  } else if (name == "pinch") {
    cfg.K = {450, 450, 160, 120, 320, 240};
    cfg.sheet.size_x = 0.16;
    cfg.sheet.size_y = 0.12;
    cfg.sheet.deform = DeformationKind::Pinch;
    cfg.sheet.amplitude = 0.008;
    cfg.sheet.freq_hz = 0.4;
    cfg.sheet.sigma = 0.025;
    cfg.n_corr = 60;
  } else if (name == "grasp") {
    cfg.K = {450, 450, 160, 120, 320, 240};
    cfg.sheet.size_x = 0.16;
    cfg.sheet.size_y = 0.12;
    cfg.sheet.deform = DeformationKind::GraspStretch;
    cfg.sheet.amplitude = 0.015;
    cfg.sheet.sigma = 0.02;
    cfg.n_corr = 60;
  } else if (name == "handeye") {
    cfg.K = {600, 600, 320, 240, 640, 480};
    cfg.with_tool = true;
    cfg.marker_noise_px = 1.0;
    cfg.dropout = 0.10;
    cfg.line_noise_rho = 1.0;
    cfg.line_noise_phi = 0.002;
    cfg.sheet.size_x = 0.08;
    cfg.sheet.size_y = 0.06;
    cfg.sheet.tilt = 0.0;
    cfg.sheet.nu = 17;
    cfg.sheet.nv = 13;
    cfg.n_corr = 0;
    // Hand-eye error with fixed norms and a seed-dependent direction.
    std::mt19937_64 dir_rng(seed ^ 0x517cc1b727220a95ull);
    std::normal_distribution<double> g;
    Vec3 wdir(g(dir_rng), g(dir_rng), g(dir_rng));
    Vec3 bdir(g(dir_rng), g(dir_rng), g(dir_rng));
    cfg.true_error.w = 0.04 * wdir.normalized();
    cfg.true_error.b = 0.003 * bdir.normalized();
  } else {
    throw IOFailure("unknown scenario " + name);
  }
  cfg.sheet.duration = frames / cfg.fps;
  return cfg;
}

namespace {

void write_binary(const std::filesystem::path& path, const void* data, size_t bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IOFailure("cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!out) throw IOFailure("short write to " + path.string());
}

void write_ppm(const std::filesystem::path& path, const ColorImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IOFailure("cannot write " + path.string());
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size() * 3));
  if (!out) throw IOFailure("short write to " + path.string());
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IOFailure("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IOFailure("short write to " + path.string());
}

std::string frame_name(int frame, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06d%s", frame, ext);
  return buf;
}

}  // namespace

void make_sequence(const ScenarioConfig& cfg, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  if (cfg.frames < 1) throw IOFailure("scenario needs at least one frame");
  std::error_code ec;
  for (const char* sub : {"", "depth", "color", "features", "joints"}) {
    fs::create_directories(out_dir / sub, ec);
    if (ec) throw IOFailure("cannot create " + (out_dir / sub).string());
  }

  std::mt19937_64 rng(cfg.seed);
  KinematicChain chain;
  if (cfg.with_tool) {
    chain = make_scenario_tool(12, 0.2, 0.25, 0.45);
    save_chain(chain, out_dir / "chain.json");
  }

  const std::vector<Vec2> params = tracked_params(cfg.n_tracked);
  json gt_tracked = json::array();
  json gt_tracked_px = json::array();
  json gt_phase = json::array();
  json gt_theta = json::array();

  for (int f = 0; f < cfg.frames; ++f) {
    const double t = f / cfg.fps;
    const SheetMesh mesh = sheet_mesh(cfg.sheet, t);
    DepthImage depth;
    ColorImage color;
    render_sheet(mesh, cfg.K, depth, color);
    if (cfg.depth_noise > 0) add_depth_noise(depth, cfg.depth_noise, rng);
    write_binary(out_dir / "depth" / frame_name(f, ".raw"), depth.data.data(),
                 depth.data.size() * sizeof(float));
    write_ppm(out_dir / "color" / frame_name(f, ".ppm"), color);

    std::vector<double> theta;
    FrameFeatures feat;
    if (cfg.with_tool) {
      theta = scenario_joints(f);
      feat = emit_tool_features(chain, theta, cfg.true_error, cfg.K, cfg.marker_noise_px,
                                cfg.dropout, cfg.line_noise_rho, cfg.line_noise_phi, rng);
    }
    if (f > 0 && cfg.n_corr > 0) {
      feat.correspondences = emit_correspondences(cfg.sheet, (f - 1) / cfg.fps, t, cfg.K,
                                                  cfg.n_corr, cfg.corr_noise_px, rng);
    }

    json jf;
    jf["markers"] = json::array();
    for (const Vec2& m : feat.markers) jf["markers"].push_back({m.x(), m.y()});
    jf["lines"] = json::array();
    for (const ImageLine& l : feat.lines) jf["lines"].push_back({l.rho, l.phi});
    jf["correspondences"] = json::array();
    for (const Vec4& c : feat.correspondences)
      jf["correspondences"].push_back({c[0], c[1], c[2], c[3]});
    write_json(out_dir / "features" / frame_name(f, ".json"), jf);

    {
      std::ofstream out(out_dir / "joints" / frame_name(f, ".txt"));
      if (!out) throw IOFailure("cannot write joints file");
      out.precision(17);
      for (const double v : theta) out << v << "\n";
    }

    json row = json::array();
    json row_px = json::array();
    for (const Vec2& p : params) {
      const Vec3 g = sheet_point(cfg.sheet, p.x(), p.y(), t);
      const Vec2 px = project_point(cfg.K, g);
      row.push_back({g.x(), g.y(), g.z()});
      row_px.push_back({px.x(), px.y()});
    }
    gt_tracked.push_back(row);
    gt_tracked_px.push_back(row_px);
    gt_phase.push_back(cfg.sheet.deform == DeformationKind::GraspStretch
                           ? static_cast<int>(grasp_phase(t / cfg.sheet.duration))
                           : 0);
    gt_theta.push_back(theta);
  }

  json labels;
  labels["pixels"] = gt_tracked_px[0];
  labels["params"] = json::array();
  for (const Vec2& p : params) labels["params"].push_back({p.x(), p.y()});
  write_json(out_dir / "labels.json", labels);

  json gt;
  gt["w"] = {cfg.true_error.w.x(), cfg.true_error.w.y(), cfg.true_error.w.z()};
  gt["b"] = {cfg.true_error.b.x(), cfg.true_error.b.y(), cfg.true_error.b.z()};
  gt["tracked"] = gt_tracked;
  gt["tracked_px"] = gt_tracked_px;
  gt["phase"] = gt_phase;
  gt["theta"] = gt_theta;
  write_json(out_dir / "ground_truth.json", gt);

  json manifest;
  manifest["name"] = cfg.name;
  manifest["frames"] = cfg.frames;
  manifest["fps"] = cfg.fps;
  manifest["seed"] = cfg.seed;
  manifest["width"] = cfg.K.width;
  manifest["height"] = cfg.K.height;
  manifest["fx"] = cfg.K.fx;
  manifest["fy"] = cfg.K.fy;
  manifest["cx"] = cfg.K.cx;
  manifest["cy"] = cfg.K.cy;
  manifest["has_tool"] = cfg.with_tool;
  manifest["phase"] = gt_phase;  // robot schedule, known to the system at run time
  write_json(out_dir / "manifest.json", manifest);
}

}  // namespace super
