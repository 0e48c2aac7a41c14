#include "super/tool_tracker.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "super/errors.hpp"

namespace super {

namespace {

struct ScoredPair {
  double score;
  int det;
  int pred;
};

AssociationList greedy_match(std::vector<ScoredPair>& pairs, size_t n_det, size_t n_pred,
                             double floor) {
  std::sort(pairs.begin(), pairs.end(), [](const ScoredPair& a, const ScoredPair& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.det != b.det) return a.det < b.det;
    return a.pred < b.pred;
  });
  std::vector<char> det_used(n_det, 0), pred_used(n_pred, 0);
  AssociationList out;
  for (const auto& p : pairs) {
    if (!(p.score > floor)) break;
    if (det_used[p.det] || pred_used[p.pred]) continue;
    det_used[p.det] = pred_used[p.pred] = 1;
    out.pairs.emplace_back(p.det, p.pred);
    out.scores.push_back(p.score);
  }
  return out;
}

}  // namespace

PredictedFeatures predict_features(const KinematicChain& chain, const std::vector<double>& theta,
                                   const HandEyeState& he, const CameraIntrinsics& K) {
  PredictedFeatures out;
  const auto poses = forward_kinematics(chain, theta);
  const RigidTransform T_cam = he.compose();
  for (const auto& lp : chain.link_points) {
    const Vec3 pc = T_cam * (poses[lp.link] * lp.p);
    if (pc.z() <= 1e-9) continue;
    out.markers.push_back(project_point(K, pc));
  }
  try {
    const RigidTransform Ts = T_cam * poses[chain.shaft.link];
    const auto [l1, l2] = cylinder_silhouette(
        Ts * chain.shaft.axis_point, Ts.R * chain.shaft.axis_dir.normalized(), chain.shaft.radius,
        K);
    out.lines = {l1, l2};
  } catch (const CameraInsideCylinder&) {
  }
  return out;
}

ParticleSet init_particles(const FilterConfig& cfg, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  ParticleSet set;
  set.particles.resize(cfg.n_particles);
  for (auto& p : set.particles) {
    Vec6 v;
    for (int i = 0; i < 6; ++i) v[i] = g(rng) * std::sqrt(cfg.init_variance[i]);
    p.state = AxisAngleTranslation::from_stacked(v);
    p.weight = 1.0 / cfg.n_particles;
  }
  return set;
}

void predict(ParticleSet& set, const FilterConfig& cfg, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  for (auto& p : set.particles) {
    Vec6 v = p.state.stacked();
    for (int i = 0; i < 6; ++i) v[i] += g(rng) * std::sqrt(cfg.walk_variance[i]);
    p.state = AxisAngleTranslation::from_stacked(v);
  }
}

AssociationList associate_markers(const std::vector<Vec2>& detections,
                                  const std::vector<Vec2>& predictions, double gamma_m,
                                  double floor) {
  std::vector<ScoredPair> pairs;
  pairs.reserve(detections.size() * predictions.size());
  for (size_t i = 0; i < detections.size(); ++i)
    for (size_t j = 0; j < predictions.size(); ++j)
      pairs.push_back({std::exp(-gamma_m * (detections[i] - predictions[j]).squaredNorm()),
                       static_cast<int>(i), static_cast<int>(j)});
  return greedy_match(pairs, detections.size(), predictions.size(), floor);
}

AssociationList associate_lines(const std::vector<ImageLine>& detections,
                                const std::vector<ImageLine>& predictions, double gamma_phi,
                                double gamma_rho, double floor) {
  std::vector<ScoredPair> pairs;
  pairs.reserve(detections.size() * predictions.size());
  for (size_t i = 0; i < detections.size(); ++i)
    for (size_t j = 0; j < predictions.size(); ++j)
      pairs.push_back({std::exp(-line_distance(detections[i], predictions[j], gamma_phi, gamma_rho)),
                       static_cast<int>(i), static_cast<int>(j)});
  return greedy_match(pairs, detections.size(), predictions.size(), floor);
}

double feature_likelihood(const AssociationList& assoc, int n_model, double floor) {
  double L = (n_model - static_cast<int>(assoc.size())) * floor;
  for (const double s : assoc.scores) L += s;
  return L;
}

double effective_sample_size(const std::vector<double>& weights) {
  double s = 0;
  for (double w : weights) s += w * w;
  return s > 0 ? 1.0 / s : 0.0;
}

std::vector<int> stratified_resample(const std::vector<double>& weights, std::mt19937_64& rng) {
  const int n = static_cast<int>(weights.size());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<int> out(n);
  double cum = weights.empty() ? 0.0 : weights[0];
  int j = 0;
  for (int i = 0; i < n; ++i) {
    const double target = (i + u(rng)) / n;
    while (cum < target && j + 1 < n) cum += weights[++j];
    out[i] = j;
  }
  return out;
}

AxisAngleTranslation weighted_mean(const ParticleSet& set) {
  Vec6 m = Vec6::Zero();
  double wsum = 0;
  for (const auto& p : set.particles) {
    m += p.weight * p.state.stacked();
    wsum += p.weight;
  }
  if (wsum > 0) m /= wsum;
  return AxisAngleTranslation::from_stacked(m);
}

UpdateResult update(ParticleSet& set, const KinematicChain& chain,
                    const std::vector<double>& theta, const CameraIntrinsics& K,
                    const FrameFeatures& obs, const FilterConfig& cfg, std::mt19937_64& rng) {
  const double cm = cfg.marker_floor();
  const double cl = cfg.line_floor();
  const int n_markers = static_cast<int>(chain.link_points.size());
  const int n = static_cast<int>(set.particles.size());

  std::vector<double> logw(n);
  for (int i = 0; i < n; ++i) {
    const Particle& p = set.particles[i];
    const HandEyeState he{chain.nominal_hand_eye, p.state};
    const PredictedFeatures pred = predict_features(chain, theta, he, K);
    const auto am = associate_markers(obs.markers, pred.markers, cfg.gamma_m, cm);
    const auto al = associate_lines(obs.lines, pred.lines, cfg.gamma_phi, cfg.gamma_rho, cl);
    const double Lm = feature_likelihood(am, n_markers, cm);
    const double Ll = feature_likelihood(al, 2, cl);
    logw[i] = std::log(std::max(p.weight, 1e-300)) + std::log(std::max(Lm, 1e-300)) +
              std::log(std::max(Ll, 1e-300));
  }

  UpdateResult res;
  const double mx = *std::max_element(logw.begin(), logw.end());
  std::vector<double> w(n);
  double sum = 0;
  if (std::isfinite(mx)) {
    for (int i = 0; i < n; ++i) sum += w[i] = std::exp(logw[i] - mx);
  }
  if (!(sum > 0) || !std::isfinite(sum)) {
    res.degenerate = true;
    std::fill(w.begin(), w.end(), 1.0 / n);
  } else {
    for (double& x : w) x /= sum;
  }
  for (int i = 0; i < n; ++i) set.particles[i].weight = w[i];

  res.n_eff = effective_sample_size(w);
  res.estimate = weighted_mean(set);

  if (res.n_eff < cfg.resample_threshold) {
    const auto idx = stratified_resample(w, rng);
    std::vector<Particle> next(n);
    for (int i = 0; i < n; ++i) next[i] = {set.particles[idx[i]].state, 1.0 / n};
    set.particles = std::move(next);
    res.resampled = true;
  }
  return res;
}

void write_particles(const ParticleSet& set, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IOFailure("cannot write " + path.string());
  out << "wx,wy,wz,bx,by,bz,weight\n";
  char buf[256];
  for (const auto& p : set.particles) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", p.state.w.x(),
                  p.state.w.y(), p.state.w.z(), p.state.b.x(), p.state.b.y(), p.state.b.z(),
                  p.weight);
    out << buf;
  }
}

}  // namespace super
