#include "super/deform_solver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace super {

Eigen::Matrix<double, 3, 4> raw_rotation_jacobian(const Vec4& q, const Vec3& v) {
  const double w = q[0];
  const Vec3 u = q.tail<3>();
  Eigen::Matrix<double, 3, 4> J;
  J.col(0) = 2.0 * (w * v + u.cross(v));
  Mat3 vx;
  vx << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  J.rightCols<3>() =
      2.0 * (-v * u.transpose() + u * v.transpose() + u.dot(v) * Mat3::Identity() - w * vx);
  return J;
}

VecX pack_params(const EDGraph& g) {
  VecX x(g.n_params());
  x.segment<4>(0) = g.t_g.q;
  x.segment<3>(4) = g.t_g.b;
  for (size_t i = 0; i < g.nodes.size(); ++i) {
    x.segment<4>(7 * (i + 1)) = g.nodes[i].q;
    x.segment<3>(7 * (i + 1) + 4) = g.nodes[i].b;
  }
  return x;
}

void unpack_params(const VecX& x, EDGraph& g) {
  if (x.size() != g.n_params()) throw DimensionMismatch("parameter vector length mismatch");
  g.t_g.q = x.segment<4>(0);
  g.t_g.b = x.segment<3>(4);
  for (size_t i = 0; i < g.nodes.size(); ++i) {
    g.nodes[i].q = x.segment<4>(7 * (i + 1));
    g.nodes[i].b = x.segment<3>(7 * (i + 1) + 4);
  }
}

std::vector<DataAssociation> associate_data(const SurfelMap& map, const EDGraph& g,
                                            const DepthImage& depth, const CameraIntrinsics& K,
                                            const SolverConfig& cfg) {
  std::vector<DataAssociation> out;
  std::vector<double> magnitudes;
  for (size_t i = 0; i < map.surfels.size(); ++i) {
    const Surfel& s = map.surfels[i];
    const Vec3 wp = warp_point(s.p, g, map.skinning[i]);
    if (!(wp.z() > 1e-9)) continue;
    const Vec2 px = project_point(K, wp);
    const int u = static_cast<int>(std::lround(px.x()));
    const int v = static_cast<int>(std::lround(px.y()));
    if (!depth.in_bounds(u, v)) continue;
    const float d = depth.at(u, v);
    if (!(d > 0) || !std::isfinite(d)) continue;
    DataAssociation a;
    a.surfel = static_cast<int>(i);
    a.obs = unproject(K, u, v, d);
    try {
      a.normal = warp_normal(s.n, g, map.skinning[i]);
    } catch (const ZeroNormal&) {
      continue;
    }
    magnitudes.push_back(std::abs(a.normal.dot(wp - a.obs)));
    out.push_back(a);
  }
  if (out.size() > 1) {
    std::vector<double> sorted = magnitudes;
    std::sort(sorted.begin(), sorted.end());
    const double cutoff =
        sorted[static_cast<size_t>(cfg.robust_percentile * (sorted.size() - 1))];
    for (size_t i = 0; i < out.size(); ++i)
      if (magnitudes[i] > cutoff) out[i].robust = cfg.robust_scale;
  }
  return out;
}

std::vector<CorrAssociation> associate_corr(const SurfelMap& map, const EDGraph& g,
                                            const std::vector<Vec4>& pairs,
                                            const DepthImage& depth, const CameraIntrinsics& K) {
  (void)g;
  // Index map of the committed model: nearest surfel rendered per pixel.
  Image<int> bucket(depth.width, depth.height, -1);
  for (size_t i = 0; i < map.surfels.size(); ++i) {
    const Vec3& p = map.surfels[i].p;
    if (!(p.z() > 1e-9)) continue;
    const Vec2 px = project_point(K, p);
    const int u = static_cast<int>(std::lround(px.x()));
    const int v = static_cast<int>(std::lround(px.y()));
    if (!bucket.in_bounds(u, v)) continue;
    int& slot = bucket.at(u, v);
    if (slot < 0 || p.z() < map.surfels[slot].p.z()) slot = static_cast<int>(i);
  }
  std::vector<CorrAssociation> out;
  for (const Vec4& pair : pairs) {
    const int mu = static_cast<int>(std::lround(pair[0]));
    const int mv = static_cast<int>(std::lround(pair[1]));
    const int cu = static_cast<int>(std::lround(pair[2]));
    const int cv = static_cast<int>(std::lround(pair[3]));
    if (!bucket.in_bounds(mu, mv) || !depth.in_bounds(cu, cv)) continue;
    const int surfel = bucket.at(mu, mv);
    if (surfel < 0) continue;
    const float d = depth.at(cu, cv);
    if (!(d > 0) || !std::isfinite(d)) continue;  // invalid feature depth: drop
    out.push_back({surfel, unproject(K, cu, cv, d)});
  }
  return out;
}

namespace {

// Shared position-warp Jacobian: slots are [global, skin nodes...]; out is 3x7m.
void warp_jacobian(const Vec3& p, const EDGraph& g, const KnnWeights& skin, MatX& jac,
                   std::vector<int>& nodes) {
  const int m = static_cast<int>(skin.indices.size());
  nodes.resize(m + 1);
  nodes[0] = -1;
  jac.setZero(3, 7 * (m + 1));

  Vec3 blend = p;
  for (int j = 0; j < m; ++j) {
    const EDNode& nd = g.nodes[skin.indices[j]];
    const Vec3 d = p - nd.g;
    blend += skin.weights[j] * (quat_to_rotation_raw(nd.q) * d - d + nd.b);
  }
  const Mat3 Rg = quat_to_rotation_raw(g.t_g.q);
  jac.block<3, 4>(0, 0) = raw_rotation_jacobian(g.t_g.q, blend);
  jac.block<3, 3>(0, 4) = Mat3::Identity();
  for (int j = 0; j < m; ++j) {
    const int id = skin.indices[j];
    const EDNode& nd = g.nodes[id];
    nodes[j + 1] = id;
    jac.block<3, 4>(0, 7 * (j + 1)) =
        skin.weights[j] * Rg * raw_rotation_jacobian(nd.q, p - nd.g);
    jac.block<3, 3>(0, 7 * (j + 1) + 4) = skin.weights[j] * Rg;
  }
}

}  // namespace

std::vector<ResidualBlock> residuals_data(const SurfelMap& map, const EDGraph& g,
                                          const std::vector<DataAssociation>& assoc) {
  std::vector<ResidualBlock> blocks;
  blocks.reserve(assoc.size());
  MatX pos_jac;
  std::vector<int> nodes;
  for (const DataAssociation& a : assoc) {
    const Surfel& s = map.surfels[a.surfel];
    const KnnWeights& skin = map.skinning[a.surfel];
    const Vec3 wp = warp_point(s.p, g, skin);
    const double scale = std::sqrt(a.robust);
    ResidualBlock b;
    b.kind = ResidualKind::Data;
    warp_jacobian(s.p, g, skin, pos_jac, nodes);
    b.nodes = nodes;
    b.value.resize(1);
    b.value[0] = scale * a.normal.dot(wp - a.obs);
    b.jac = scale * (a.normal.transpose() * pos_jac);
    blocks.push_back(std::move(b));
  }
  return blocks;
}

std::vector<ResidualBlock> residuals_arap(const EDGraph& g, double lambda_a) {
  const double w = std::sqrt(lambda_a);
  std::vector<ResidualBlock> blocks;
  for (size_t i = 0; i < g.edges.size(); ++i) {
    for (const int k : g.edges[i]) {
      const EDNode& ni = g.nodes[i];
      const EDNode& nk = g.nodes[k];
      ResidualBlock b;
      b.kind = ResidualKind::Arap;
      b.nodes = {static_cast<int>(i), k};
      // R d - d form: exactly zero for identity rotations and equal b.
      const Vec3 d = ni.g - nk.g;
      b.value = w * (quat_to_rotation_raw(nk.q) * d - d + nk.b - ni.b);
      b.jac.setZero(3, 14);
      b.jac.block<3, 3>(0, 4) = -w * Mat3::Identity();
      b.jac.block<3, 4>(0, 7) = w * raw_rotation_jacobian(nk.q, ni.g - nk.g);
      b.jac.block<3, 3>(0, 11) = w * Mat3::Identity();
      blocks.push_back(std::move(b));
    }
  }
  return blocks;
}

std::vector<ResidualBlock> residuals_rot(const EDGraph& g, double lambda_r) {
  const double w = std::sqrt(lambda_r);
  std::vector<ResidualBlock> blocks;
  auto add = [&](int slot, const Vec4& q) {
    ResidualBlock b;
    b.kind = ResidualKind::Rot;
    b.nodes = {slot};
    b.value.resize(1);
    b.value[0] = w * (1.0 - q.squaredNorm());
    b.jac.setZero(1, 7);
    b.jac.leftCols<4>() = -2.0 * w * q.transpose();
    blocks.push_back(std::move(b));
  };
  // The global transform is estimated with a quaternion too and needs the
  // same normalization pressure as the nodes.
  add(-1, g.t_g.q);
  for (size_t k = 0; k < g.nodes.size(); ++k) add(static_cast<int>(k), g.nodes[k].q);
  return blocks;
}

std::vector<ResidualBlock> residuals_corr(const SurfelMap& map, const EDGraph& g,
                                          const std::vector<CorrAssociation>& assoc,
                                          double lambda_c) {
  const double w = std::sqrt(lambda_c);
  std::vector<ResidualBlock> blocks;
  blocks.reserve(assoc.size());
  MatX pos_jac;
  std::vector<int> nodes;
  for (const CorrAssociation& a : assoc) {
    const Surfel& s = map.surfels[a.surfel];
    const KnnWeights& skin = map.skinning[a.surfel];
    ResidualBlock b;
    b.kind = ResidualKind::Corr;
    warp_jacobian(s.p, g, skin, pos_jac, nodes);
    b.nodes = nodes;
    b.value = w * (warp_point(s.p, g, skin) - a.obs);
    b.jac = w * pos_jac;
    blocks.push_back(std::move(b));
  }
  return blocks;
}

double total_cost(const std::vector<ResidualBlock>& blocks) {
  double cost = 0;
  for (const auto& b : blocks) cost += b.value.squaredNorm();
  return cost;
}

void assemble_normal_equations(const std::vector<ResidualBlock>& blocks, int n_params, MatX& jtj,
                               VecX& jtf) {
  jtj.setZero(n_params, n_params);
  jtf.setZero(n_params);
  const auto offset = [](int slot) { return slot < 0 ? 0 : 7 * (slot + 1); };
  for (const ResidualBlock& b : blocks) {
    const int m = static_cast<int>(b.nodes.size());
    for (int a = 0; a < m; ++a) {
      const auto ja = b.jac.middleCols(7 * a, 7);
      jtf.segment<7>(offset(b.nodes[a])).noalias() += ja.transpose() * b.value;
      for (int c = 0; c < m; ++c) {
        jtj.block<7, 7>(offset(b.nodes[a]), offset(b.nodes[c])).noalias() +=
            ja.transpose() * b.jac.middleCols(7 * c, 7);
      }
    }
  }
}

VecX pcg_solve(const SparseMat& A, const VecX& rhs, int iters, double tol) {
  if (!rhs.allFinite() ||
      !Eigen::Map<const VecX>(A.valuePtr(), A.nonZeros()).allFinite())
    throw NonFiniteSystem();
  VecX x = VecX::Zero(rhs.size());
  const double rhs_norm = rhs.norm();
  if (rhs_norm == 0.0) return x;

  VecX minv = A.diagonal();
  for (int i = 0; i < minv.size(); ++i) minv[i] = minv[i] > 1e-300 ? 1.0 / minv[i] : 1.0;

  VecX r = rhs;
  VecX z = minv.cwiseProduct(r);
  VecX p = z;
  double rz = r.dot(z);
  VecX best_x = x;
  double best_res = r.norm();
  for (int it = 0; it < iters && best_res / rhs_norm > tol; ++it) {
    const VecX ap = A * p;
    const double pap = p.dot(ap);
    if (!std::isfinite(pap)) throw NonFiniteSystem();
    if (pap <= 0) break;  // damping lost positive definiteness; keep best
    const double alpha = rz / pap;
    x += alpha * p;
    r -= alpha * ap;
    const double res = r.norm();
    if (res < best_res) {
      best_res = res;
      best_x = x;
    }
    z = minv.cwiseProduct(r);
    const double rz_new = r.dot(z);
    if (rz <= 0) break;
    p = z + (rz_new / rz) * p;
    rz = rz_new;
  }
  return best_x;
}

SolveReport lm_optimize(SurfelMap& map, EDGraph& g, const DepthImage& depth,
                        const CameraIntrinsics& K, const std::vector<Vec4>& corr_pairs,
                        const SolverConfig& cfg) {
  if (map.skinning.size() != map.surfels.size()) rebuild_skinning(map, g);
  const std::vector<CorrAssociation> corr = associate_corr(map, g, corr_pairs, depth, K);

  const auto build = [&](const std::vector<DataAssociation>& data_assoc) {
    std::vector<ResidualBlock> blocks = residuals_data(map, g, data_assoc);
    auto arap = residuals_arap(g, cfg.lambda_a);
    auto rot = residuals_rot(g, cfg.lambda_r);
    auto corr_blocks = residuals_corr(map, g, corr, cfg.lambda_c);
    blocks.insert(blocks.end(), std::make_move_iterator(arap.begin()),
                  std::make_move_iterator(arap.end()));
    blocks.insert(blocks.end(), std::make_move_iterator(rot.begin()),
                  std::make_move_iterator(rot.end()));
    blocks.insert(blocks.end(), std::make_move_iterator(corr_blocks.begin()),
                  std::make_move_iterator(corr_blocks.end()));
    return blocks;
  };

  SolveReport report;
  double mu = cfg.mu0;
  VecX x = pack_params(g);
  MatX jtj;
  VecX jtf;
  double last_accepted = std::numeric_limits<double>::infinity();

  for (int iter = 0; iter < cfg.max_lm_iters; ++iter) {
    const std::vector<DataAssociation> data_assoc = associate_data(map, g, depth, K, cfg);
    const std::vector<ResidualBlock> blocks = build(data_assoc);
    const double cost = total_cost(blocks);
    if (iter == 0) report.initial_cost = cost;
    report.final_cost = cost;
    if (cost < cfg.cost_floor) break;
    if (std::isfinite(last_accepted) &&
        std::abs(last_accepted - cost) < cfg.rel_change_tol * last_accepted)
      break;

    assemble_normal_equations(blocks, g.n_params(), jtj, jtf);
    SparseMat A = jtj.sparseView();
    for (int i = 0; i < g.n_params(); ++i) A.coeffRef(i, i) += mu;
    A.makeCompressed();
    const VecX delta = pcg_solve(A, -jtf, cfg.pcg_iters, cfg.pcg_tol);

    EDGraph trial = g;
    unpack_params(x + delta, trial);
    std::vector<ResidualBlock> trial_blocks = residuals_data(map, trial, data_assoc);
    {
      auto arap = residuals_arap(trial, cfg.lambda_a);
      auto rot = residuals_rot(trial, cfg.lambda_r);
      auto corr_blocks = residuals_corr(map, trial, corr, cfg.lambda_c);
      trial_blocks.insert(trial_blocks.end(), std::make_move_iterator(arap.begin()),
                          std::make_move_iterator(arap.end()));
      trial_blocks.insert(trial_blocks.end(), std::make_move_iterator(rot.begin()),
                          std::make_move_iterator(rot.end()));
      trial_blocks.insert(trial_blocks.end(), std::make_move_iterator(corr_blocks.begin()),
                          std::make_move_iterator(corr_blocks.end()));
    }
    const double trial_cost = total_cost(trial_blocks);

    IterationLog log;
    log.iter = iter;
    log.cost_before = cost;
    log.mu = mu;
    log.step_inf = delta.lpNorm<Eigen::Infinity>();
    if (trial_cost < cost) {
      x += delta;
      unpack_params(x, g);
      mu *= cfg.mu_down;
      last_accepted = cost;
      log.accepted = true;
      log.cost = trial_cost;
      report.final_cost = trial_cost;
    } else {
      mu *= cfg.mu_up;
      log.accepted = false;
      log.cost = cost;
      if (mu > cfg.mu_limit) {
        report.log.push_back(log);
        ++report.iterations;
        throw SolverDiverged();
      }
    }
    report.log.push_back(log);
    ++report.iterations;
  }
  return report;
}

}  // namespace super
