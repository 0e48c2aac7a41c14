#pragma once

#include <Eigen/Sparse>
#include <vector>

#include "super/core_math.hpp"
#include "super/image.hpp"
#include "super/surfel_map.hpp"

namespace super {

using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;
using SparseMat = Eigen::SparseMatrix<double>;

struct SolverConfig {
  double lambda_a = 10.0;   // rigidity term weight
  double lambda_r = 100.0;  // quaternion-normalization term weight
  double lambda_c = 10.0;   // feature-correspondence term weight
  double mu0 = 1e-4;
  double mu_up = 10.0;
  double mu_down = 0.5;
  double mu_limit = 1e12;
  int max_lm_iters = 10;
  int pcg_iters = 10;
  double pcg_tol = 1e-10;
  double rel_change_tol = 1e-6;
  double cost_floor = 1e-14;       // already-converged guard for rigid scenes
  double robust_percentile = 0.95;  // data residuals above this get scaled
  double robust_scale = 0.1;
};

enum class ResidualKind { Data, Arap, Rot, Corr };

/// Residuals and analytic Jacobian for one energy contribution. `nodes` lists
/// the parameter slots the block touches: -1 is the global transform, others
/// are graph node ids; `jac` has 7 columns per listed slot, in order.
struct ResidualBlock {
  ResidualKind kind = ResidualKind::Data;
  std::vector<int> nodes;
  VecX value;
  MatX jac;
};

/// Frozen per-iteration context of the point-plane term: the observed point,
/// the fixed warped normal, and the outlier down-weight.
struct DataAssociation {
  int surfel = -1;
  Vec3 obs = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  double robust = 1.0;
};

struct CorrAssociation {
  int surfel = -1;
  Vec3 obs = Vec3::Zero();
};

/// d(R_raw(q) v)/dq for the homogeneous quaternion form; columns are
/// (d/dw, d/dx, d/dy, d/dz).
Eigen::Matrix<double, 3, 4> raw_rotation_jacobian(const Vec4& q, const Vec3& v);

/// Stacks [q_g, b_g, q_1, b_1, ...] into a flat vector and back.
VecX pack_params(const EDGraph& g);
void unpack_params(const VecX& x, EDGraph& g);

/// Projective association at the current graph state: warp each surfel,
/// project, read the depth pixel, freeze the warped normal. Residuals whose
/// magnitude exceeds the robust percentile are down-weighted.
std::vector<DataAssociation> associate_data(const SurfelMap& map, const EDGraph& g,
                                            const DepthImage& depth, const CameraIntrinsics& K,
                                            const SolverConfig& cfg);

/// Resolves (model pixel, observed pixel) pairs against the surfel rendered at
/// the model pixel; pairs with invalid observed depth are dropped.
std::vector<CorrAssociation> associate_corr(const SurfelMap& map, const EDGraph& g,
                                            const std::vector<Vec4>& pairs,
                                            const DepthImage& depth, const CameraIntrinsics& K);

std::vector<ResidualBlock> residuals_data(const SurfelMap& map, const EDGraph& g,
                                          const std::vector<DataAssociation>& assoc);
std::vector<ResidualBlock> residuals_arap(const EDGraph& g, double lambda_a);
std::vector<ResidualBlock> residuals_rot(const EDGraph& g, double lambda_r);
std::vector<ResidualBlock> residuals_corr(const SurfelMap& map, const EDGraph& g,
                                          const std::vector<CorrAssociation>& assoc,
                                          double lambda_c);

double total_cost(const std::vector<ResidualBlock>& blocks);

/// Accumulates J^T J and J^T f over all blocks for a parameter vector of the
/// given length.
void assemble_normal_equations(const std::vector<ResidualBlock>& blocks, int n_params, MatX& jtj,
                               VecX& jtf);

/// Jacobi-preconditioned conjugate gradients; returns the best iterate seen.
/// Throws NonFiniteSystem on non-finite inputs or breakdown.
VecX pcg_solve(const SparseMat& A, const VecX& rhs, int iters, double tol);

struct IterationLog {
  int iter = 0;
  double cost_before = 0;  // frozen-structure cost at the start of the iteration
  double cost = 0;         // trial cost when accepted, cost_before when rejected
  double mu = 0;
  bool accepted = false;
  double step_inf = 0;
};

struct SolveReport {
  double initial_cost = 0;
  double final_cost = 0;
  int iterations = 0;
  std::vector<IterationLog> log;
};

/// Levenberg-Marquardt over the graph parameters: per iteration the data and
/// correspondence associations are refrozen, the damped normal equations are
/// solved with PCG, and the step is kept only when the frozen-structure cost
/// decreases. Throws SolverDiverged when damping exceeds its limit.
SolveReport lm_optimize(SurfelMap& map, EDGraph& g, const DepthImage& depth,
                        const CameraIntrinsics& K, const std::vector<Vec4>& corr_pairs,
                        const SolverConfig& cfg);

}  // namespace super
