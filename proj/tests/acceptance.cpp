// Acceptance checks for the seven headline requirements. Each criterion prints
// one [PASS]/[FAIL] line with the measured values and the pinned limits; the
// exit code is the number of failures.

#include <Eigen/Cholesky>
#include <Eigen/Geometry>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "super/deform_solver.hpp"
#include "super/errors.hpp"
#include "super/pipeline.hpp"
#include "super/sim_harness.hpp"
#include "super/surfel_map.hpp"

using namespace super;
namespace fs = std::filesystem;

namespace {

fs::path g_root;
int g_failures = 0;

void report(int id, bool ok, const char* fmt, ...) {
  std::printf("[%s] %d ", ok ? "PASS" : "FAIL", id);
  va_list args;
  va_start(args, fmt);
  std::vprintf(fmt, args);
  va_end(args);
  std::printf("\n");
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

double median5(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Desk-scale filter tuning used by the scenario runs (defaults keep the
/// reference endoscope values, which are too diffuse for this geometry). The
/// init spread covers the full error range the scenarios draw from: 0.05 rad
/// and 5 mm.
PipelineConfig desk_config() {
  PipelineConfig cfg;
  cfg.filter.gamma_m = 0.5;
  cfg.filter.init_variance << 2.5e-3, 2.5e-3, 2.5e-3, 6.25e-6, 6.25e-6, 6.25e-6;
  cfg.filter.walk_variance << 1e-4, 1e-4, 1e-4, 1e-8, 1e-8, 1e-8;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// 1. Hand-eye recovery: 100 frames, 1 px marker noise, 10% dropout, N = 500;
//    median final-frame error over 5 seeds within 0.01 rad / 1 mm, each
//    tracking run under 60 s.

void criterion_1() {
  std::vector<double> w_errs, b_errs;
  double slowest = 0;
  for (uint64_t seed = 101; seed <= 105; ++seed) {
    const fs::path dir = g_root / ("c1_" + std::to_string(seed));
    make_sequence(scenario_by_name("handeye", 100, seed), dir);
    const Dataset ds = open_dataset(dir);
    const GroundTruth gt = load_ground_truth(ds);

    const auto t0 = std::chrono::steady_clock::now();
    const RunResult R = run_pipeline(ds, desk_config(), RunMode::ToolOnly, fs::path{});
    slowest = std::max(slowest, seconds_since(t0));

    const AxisAngleTranslation& est = R.frames.back().estimate;
    w_errs.push_back((est.w - gt.error.w).norm());
    b_errs.push_back((est.b - gt.error.b).norm());
  }
  const double mw = median5(w_errs), mb = median5(b_errs);
  const bool ok = mw <= 0.01 && mb <= 1e-3 && slowest < 60.0;
  report(1, ok,
         "hand-eye recovery: median final error %.2e rad / %.2e m "
         "(limits 1e-02 rad / 1e-03 m), slowest run %.1f s (limit 60 s)",
         mw, mb, slowest);
}

// ---------------------------------------------------------------------------
// 2. Mask IoU: mean over 50 frames at N = 500 at least 0.80, and the particle
//    count trend N=5000 vs N=100 holds on seed-averaged means.

void criterion_2() {
  const std::vector<int> counts = {100, 500, 5000};
  std::vector<double> mean_iou(counts.size(), 0.0);
  double min_iou_500 = 1.0;
  const int n_seeds = 5;
  for (uint64_t seed = 201; seed <= 200 + n_seeds; ++seed) {
    const fs::path dir = g_root / ("c2_" + std::to_string(seed));
    make_sequence(scenario_by_name("handeye", 50, seed), dir);
    const Dataset ds = open_dataset(dir);
    for (size_t ci = 0; ci < counts.size(); ++ci) {
      PipelineConfig cfg = desk_config();
      cfg.filter.n_particles = counts[ci];
      cfg.filter.resample_threshold = std::min(cfg.filter.resample_threshold, 0.4 * counts[ci]);
      const fs::path run = dir / ("run_" + std::to_string(counts[ci]));
      run_pipeline(ds, cfg, RunMode::ToolOnly, run);
      const MetricsReport rep = eval_metrics(ds, run);
      mean_iou[ci] += rep.mean_iou / n_seeds;
      if (counts[ci] == 500) min_iou_500 = std::min(min_iou_500, rep.mean_iou);
    }
  }
  const bool ok = mean_iou[1] >= 0.80 && mean_iou[2] >= mean_iou[0];
  report(2, ok,
         "mask IoU: N=500 mean %.3f (limit 0.80, worst seed %.3f); "
         "trend N=5000 %.3f >= N=100 %.3f",
         mean_iou[1], min_iou_500, mean_iou[2], mean_iou[0]);
}

// ---------------------------------------------------------------------------
// 3. Deformable tracking: 10 mm sinusoidal bump at 640x480, mean reprojection
//    error of the 20 tracked points under 3 px and below the first-frame
//    nearest-neighbor baseline.

fs::path g_c3_run;  // solver log reused by criterion 4b

void criterion_3() {
  const fs::path dir = g_root / "c3_bump";
  make_sequence(scenario_by_name("bump", 50, 301), dir);
  const Dataset ds = open_dataset(dir);
  g_c3_run = g_root / "c3_run";
  run_pipeline(ds, PipelineConfig{}, RunMode::Full, g_c3_run);
  const MetricsReport rep = eval_metrics(ds, g_c3_run);
  const bool ok = rep.mean_reproj < 3.0 && rep.mean_reproj < rep.mean_baseline;
  report(3, ok,
         "deformable tracking: mean reprojection %.3f px (limit 3 px), "
         "static baseline %.3f px (must exceed tracker)",
         rep.mean_reproj, rep.mean_baseline);
}

// ---------------------------------------------------------------------------
// 4. Solver property suite: finite-difference Jacobians, monotone accepted
//    costs, PCG vs direct solve, and the exact zero-energy cases.

EDGraph random_graph(std::mt19937_64& rng, int n_nodes, double param_scale) {
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  std::uniform_real_distribution<double> s(-param_scale, param_scale);
  EDGraph g;
  for (int i = 0; i < n_nodes; ++i) {
    EDNode nd;
    nd.g = Vec3(u(rng), u(rng), u(rng));
    nd.q = Vec4(1 + s(rng), s(rng), s(rng), s(rng));
    nd.b = Vec3(s(rng), s(rng), s(rng)) * 0.1;
    g.nodes.push_back(nd);
  }
  g.t_g.q = Vec4(1 + s(rng), s(rng), s(rng), s(rng));
  g.t_g.b = Vec3(s(rng), s(rng), s(rng)) * 0.1;
  rebuild_edges(g);
  return g;
}

SurfelMap random_map(std::mt19937_64& rng, const EDGraph& g, int n_surfels) {
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  SurfelMap map;
  for (int i = 0; i < n_surfels; ++i) {
    Surfel s;
    s.p = Vec3(u(rng), u(rng), u(rng));
    s.n = Vec3(u(rng), u(rng), 1 + u(rng)).normalized();
    map.surfels.push_back(s);
  }
  rebuild_skinning(map, g);
  return map;
}

VecX stack_values(const std::vector<ResidualBlock>& blocks) {
  int rows = 0;
  for (const auto& b : blocks) rows += static_cast<int>(b.value.size());
  VecX f(rows);
  int at = 0;
  for (const auto& b : blocks) {
    f.segment(at, b.value.size()) = b.value;
    at += static_cast<int>(b.value.size());
  }
  return f;
}

MatX dense_jacobian(const std::vector<ResidualBlock>& blocks, int n_params) {
  int rows = 0;
  for (const auto& b : blocks) rows += static_cast<int>(b.value.size());
  MatX J = MatX::Zero(rows, n_params);
  int at = 0;
  for (const auto& b : blocks) {
    for (size_t s = 0; s < b.nodes.size(); ++s) {
      const int off = b.nodes[s] < 0 ? 0 : 7 * (b.nodes[s] + 1);
      J.block(at, off, b.value.size(), 7) = b.jac.middleCols(7 * s, 7);
    }
    at += static_cast<int>(b.value.size());
  }
  return J;
}

template <typename BlockFn>
double jacobian_fd_error(const EDGraph& graph, BlockFn&& eval) {
  EDGraph g = graph;
  const VecX x0 = pack_params(g);
  const MatX J = dense_jacobian(eval(g), g.n_params());
  const double h = 1e-6;
  MatX J_fd(J.rows(), J.cols());
  for (int c = 0; c < x0.size(); ++c) {
    VecX xp = x0, xm = x0;
    xp[c] += h;
    xm[c] -= h;
    unpack_params(xp, g);
    const VecX fp = stack_values(eval(g));
    unpack_params(xm, g);
    const VecX fm = stack_values(eval(g));
    J_fd.col(c) = (fp - fm) / (2 * h);
  }
  return (J - J_fd).norm() / std::max(1.0, J_fd.norm());
}

/// Every accepted row of a solver_log.csv must strictly decrease the cost it
/// was measured against (associations refreeze between iterations, so costs
/// from different iterations are not directly comparable).
bool solver_log_monotone(const fs::path& csv) {
  std::ifstream in(csv);
  if (!in.good()) return false;
  std::string line;
  std::getline(in, line);  // header
  bool any = false;
  while (std::getline(in, line)) {
    int frame = 0, iter = 0, accepted = 0;
    double before = 0, cost = 0, mu = 0, step = 0;
    if (std::sscanf(line.c_str(), "%d,%d,%lf,%lf,%lf,%d,%lf", &frame, &iter, &before, &cost, &mu,
                    &accepted, &step) != 7)
      return false;
    any = true;
    if (accepted && !(cost < before)) return false;
  }
  return any;
}

void criterion_4() {
  std::mt19937_64 rng(929);
  std::uniform_real_distribution<double> u(-0.01, 0.01);

  // (a) analytic vs central finite-difference Jacobians, 10 random configs.
  double worst_fd = 0;
  for (int trial = 0; trial < 10; ++trial) {
    EDGraph g = random_graph(rng, 8 + trial, 0.25);
    SurfelMap map = random_map(rng, g, 25);
    std::vector<DataAssociation> data;
    std::vector<CorrAssociation> corr;
    for (int i = 0; i < 25; ++i) {
      data.push_back({i, map.surfels[i].p + Vec3(u(rng), u(rng), u(rng)), map.surfels[i].n,
                      i % 5 == 0 ? 0.1 : 1.0});
      if (i % 4 == 0) corr.push_back({i, map.surfels[i].p + Vec3(u(rng), u(rng), u(rng))});
    }
    worst_fd = std::max(
        {worst_fd,
         jacobian_fd_error(g, [&](const EDGraph& gg) { return residuals_data(map, gg, data); }),
         jacobian_fd_error(g, [&](const EDGraph& gg) { return residuals_arap(gg, 10.0); }),
         jacobian_fd_error(g, [&](const EDGraph& gg) { return residuals_rot(gg, 100.0); }),
         jacobian_fd_error(g,
                           [&](const EDGraph& gg) { return residuals_corr(map, gg, corr, 10.0); })});
  }
  const bool fd_ok = worst_fd < 1e-4;

  // (b) accepted-cost monotonicity on fresh solves and on the criterion-3 log.
  bool monotone = solver_log_monotone(g_c3_run / "solver_log.csv");
  const CameraIntrinsics K{300, 300, 32, 24, 64, 48};
  for (int trial = 0; trial < 5 && monotone; ++trial) {
    SurfelMap map;
    fuse_frame(map, DepthImage(64, 48, 0.5f), ColorImage(64, 48, Rgb{120, 120, 120}),
               MaskImage(64, 48, 0), K, 0, FusionConfig{});
    EDGraph g;
    sample_ed_nodes(map, g, 0.015, rng);
    rebuild_skinning(map, g);
    DepthImage moved(64, 48, 0.5f + 0.001f * (trial + 1));
    const SolveReport rep = lm_optimize(map, g, moved, K, {}, SolverConfig{});
    for (const IterationLog& il : rep.log) {
      if (il.accepted && !(il.cost < il.cost_before)) monotone = false;
    }
  }

  // (c) PCG against a direct Cholesky solve on 20 random SPD systems.
  bool pcg_ok = true;
  std::normal_distribution<double> gauss;
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 5 + static_cast<int>(rng() % 196);
    MatX B(n, n);
    for (int i = 0; i < n * n; ++i) B.data()[i] = gauss(rng);
    const MatX dense = B.transpose() * B + static_cast<double>(n) * MatX::Identity(n, n);
    VecX rhs(n);
    for (int i = 0; i < n; ++i) rhs[i] = gauss(rng);
    const VecX direct = dense.llt().solve(rhs);
    const VecX iterative = pcg_solve(dense.sparseView(), rhs, 3 * n, 1e-14);
    if ((iterative - direct).norm() >= 1e-8 * std::max(1.0, direct.norm())) pcg_ok = false;
  }

  // (d) exact zeros: common translation for the rigidity term, exactly
  // representable unit quaternions for the normalization term.
  EDGraph flat = random_graph(rng, 12, 0.0);
  for (EDNode& nd : flat.nodes) {
    nd.q = Vec4(1, 0, 0, 0);
    nd.b = Vec3(0.017, -0.003, 0.008);
  }
  const double arap_zero = stack_values(residuals_arap(flat, 10.0)).lpNorm<Eigen::Infinity>();
  const Vec4 units[] = {{1, 0, 0, 0}, {0, 1, 0, 0}, {0.6, 0.8, 0, 0}, {0, 0.6, 0, -0.8}};
  for (size_t i = 0; i < flat.nodes.size(); ++i) flat.nodes[i].q = units[i % 4];
  const double rot_zero = stack_values(residuals_rot(flat, 100.0)).lpNorm<Eigen::Infinity>();
  const bool zeros_ok = arap_zero == 0.0 && rot_zero == 0.0;

  report(4, fd_ok && monotone && pcg_ok && zeros_ok,
         "solver properties: FD Jacobian rel err %.1e (limit 1e-4); "
         "accepted costs monotone %s; PCG vs direct %s; exact zeros %s",
         worst_fd, monotone ? "yes" : "NO", pcg_ok ? "ok" : "FAIL", zeros_ok ? "ok" : "FAIL");
}

// ---------------------------------------------------------------------------
// 5. Warp-field equivalence against a dense homogeneous-matrix oracle,
//    1000 surfels x 10 graphs, 1e-12.

Mat3 oracle_rotation(const Vec4& q) {
  const Eigen::Quaterniond eq(q[0], q[1], q[2], q[3]);
  return q.squaredNorm() * eq.normalized().toRotationMatrix();
}

KnnWeights oracle_weights(const Vec3& p, const EDGraph& g, int k) {
  std::vector<std::pair<double, int>> by_dist;
  for (size_t i = 0; i < g.nodes.size(); ++i)
    by_dist.push_back({(g.nodes[i].g - p).norm(), static_cast<int>(i)});
  std::sort(by_dist.begin(), by_dist.end());
  const double d_max = by_dist[k].first;
  KnnWeights out;
  double sum = 0;
  for (int i = 0; i < k; ++i) {
    out.indices.push_back(by_dist[i].second);
    const double w = std::pow(1.0 - by_dist[i].first / d_max, 2);
    out.weights.push_back(w);
    sum += w;
  }
  for (double& w : out.weights) w = sum > 0 ? w / sum : 1.0 / k;
  return out;
}

void criterion_5() {
  std::mt19937_64 rng(515);
  std::uniform_real_distribution<double> u(-0.12, 0.12);
  double worst = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const EDGraph g = random_graph(rng, 25 + 3 * trial, 0.2);
    for (int i = 0; i < 1000; ++i) {
      Surfel s;
      s.p = Vec3(u(rng), u(rng), u(rng));
      s.n = Vec3(u(rng), u(rng), 1.0 + u(rng)).normalized();

      const KnnWeights skin = oracle_weights(s.p, g, g.k_skin);
      Mat4 blend = Mat4::Zero();
      for (size_t j = 0; j < skin.indices.size(); ++j) {
        const EDNode& nd = g.nodes[skin.indices[j]];
        Mat4 m = Mat4::Identity();
        m.topLeftCorner<3, 3>() = oracle_rotation(nd.q);
        m.topRightCorner<3, 1>() = nd.b + nd.g - oracle_rotation(nd.q) * nd.g;
        blend += skin.weights[j] * m;
      }
      Mat4 global = Mat4::Identity();
      global.topLeftCorner<3, 3>() = oracle_rotation(g.t_g.q);
      global.topRightCorner<3, 1>() = g.t_g.b;
      const Vec3 want_p = (global * blend * s.p.homogeneous()).eval().head<3>();

      Mat3 nblend = Mat3::Zero();
      for (size_t j = 0; j < skin.indices.size(); ++j)
        nblend += skin.weights[j] * oracle_rotation(g.nodes[skin.indices[j]].q);
      const Vec3 want_n = (oracle_rotation(g.t_g.q) * nblend * s.n).normalized();

      worst = std::max({worst, (warp_point(s, g) - want_p).norm(),
                        (warp_normal(s, g) - want_n).norm()});
    }
  }
  report(5, worst < 1e-12, "warp equivalence: worst deviation %.2e (limit 1e-12)", worst);
}

// ---------------------------------------------------------------------------
// 6. Rigid-scene sanity: static sequence, zero noise; stable surfel count,
//    sub-half-millimeter map, solver idle at iteration 0 or 1 with tiny steps.

void criterion_6() {
  const fs::path dir = g_root / "c6_static";
  const int frames = 15;
  make_sequence(scenario_by_name("static", frames, 601), dir);
  const Dataset ds = open_dataset(dir);
  const fs::path run = g_root / "c6_run";
  const RunResult R = run_pipeline(ds, PipelineConfig{}, RunMode::Full, run);

  double count_dev = 0;
  const double ref = R.frames[10].surfel_count;
  for (int f = 10; f < frames; ++f)
    count_dev = std::max(count_dev, std::abs(R.frames[f].surfel_count - ref) / ref);

  // Static sheet: the analytic surface is the plane through (0, 0, z0) tilted
  // about x, normal (0, sin t, -cos t).
  const double st = std::sin(0.15), ct = std::cos(0.15);
  double sq = 0;
  for (const Surfel& s : R.map.surfels) {
    const double d = s.p.y() * st - (s.p.z() - 0.5) * ct;
    sq += d * d;
  }
  const double rms = std::sqrt(sq / R.map.surfels.size());

  int max_iters = 0;
  for (const FrameStats& f : R.frames) max_iters = std::max(max_iters, f.lm_iterations);

  double max_step = 0;
  {
    std::ifstream in(run / "solver_log.csv");
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      int frame, iter, accepted;
      double before, cost, mu, step;
      if (std::sscanf(line.c_str(), "%d,%d,%lf,%lf,%lf,%d,%lf", &frame, &iter, &before, &cost, &mu,
                      &accepted, &step) == 7)
        max_step = std::max(max_step, step);
    }
  }

  const bool ok = count_dev <= 0.01 && rms < 5e-4 && max_iters <= 1 && max_step < 1e-6;
  report(6, ok,
         "rigid-scene sanity: count drift %.2f%% (limit 1%%), map RMS %.3f mm "
         "(limit 0.5 mm), max solver iterations %d (limit 1), max step %.1e (limit 1e-6)",
         100 * count_dev, 1e3 * rms, max_iters, max_step);
}

// ---------------------------------------------------------------------------
// 7. Determinism: simulate + run + eval twice with fixed seeds, byte-identical
//    metrics.csv. Uses the CLI binary when SUPER_CLI is set, the library
//    otherwise.

void criterion_7() {
  std::string metrics[2];
  const char* cli = std::getenv("SUPER_CLI");
  bool steps_ok = true;
  for (int rep = 0; rep < 2; ++rep) {
    const fs::path ds_dir = g_root / ("c7_ds_" + std::to_string(rep));
    const fs::path run_dir = g_root / ("c7_run_" + std::to_string(rep));
    if (cli) {
      const std::string q = "\"" + std::string(cli) + "\"";
      const std::string cmd = q + " simulate handeye --frames 20 --seed 701 --out " +
                              ds_dir.string() + " > /dev/null && " + q + " run " + ds_dir.string() +
                              " --out " + run_dir.string() + " > /dev/null && " + q + " eval " +
                              ds_dir.string() + " --run " + run_dir.string() + " > /dev/null";
      if (std::system(cmd.c_str()) != 0) steps_ok = false;
    } else {
      make_sequence(scenario_by_name("handeye", 20, 701), ds_dir);
      const Dataset ds = open_dataset(ds_dir);
      run_pipeline(ds, PipelineConfig{}, RunMode::Full, run_dir);
      eval_metrics(ds, run_dir);
    }
    metrics[rep] = slurp(run_dir / "metrics.csv");
  }
  const bool ok = steps_ok && !metrics[0].empty() && metrics[0] == metrics[1];
  report(7, ok, "determinism: metrics.csv %s across two %s executions (%zu bytes)",
         ok ? "identical" : "DIFFERS", cli ? "CLI" : "in-process", metrics[0].size());
}

}  // namespace

int main() {
  g_root = fs::temp_directory_path() / "super_acceptance";
  fs::remove_all(g_root);
  fs::create_directories(g_root);

  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_5();
  criterion_6();
  criterion_7();

  fs::remove_all(g_root);
  std::printf("%d/7 criteria passed\n", 7 - g_failures);
  return g_failures;
}
