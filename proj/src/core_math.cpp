#include "super/core_math.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace super {

Mat4 RigidTransform::matrix() const {
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = R;
  m.topRightCorner<3, 1>() = t;
  return m;
}

RigidTransform RigidTransform::from_matrix(const Mat4& m) {
  RigidTransform out;
  out.R = m.topLeftCorner<3, 3>();
  out.t = m.topRightCorner<3, 1>();
  return out;
}

Mat3 rotation_from_axis_angle(const Vec3& w) {
  const double theta = w.norm();
  if (theta < 1e-12) {
    // First-order term is enough below the noise floor of double precision.
    Mat3 skew;
    skew << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
    return Mat3::Identity() + skew;
  }
  return Eigen::AngleAxisd(theta, w / theta).toRotationMatrix();
}

RigidTransform se3_from_axis_angle(const AxisAngleTranslation& p) {
  return {rotation_from_axis_angle(p.w), p.b};
}

Mat3 quat_to_rotation_raw(const Vec4& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 R;
  R << w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z;
  return R;
}

Vec4 quat_normalized(const Vec4& q) {
  const double n = q.norm();
  if (n < 1e-15) return Vec4(1, 0, 0, 0);
  return q / n;
}

Mat3 quat_to_rotation(const Vec4& q) { return quat_to_rotation_raw(quat_normalized(q)); }

RigidTransform transform_from_quat(const QuatTranslation& qt) {
  return {quat_to_rotation(qt.q), qt.b};
}

Vec2 project_point(const CameraIntrinsics& K, const Vec3& p) {
  if (!(p.z() > 1e-9)) throw NonPositiveDepth();
  return {K.fx * p.x() / p.z() + K.cx, K.fy * p.y() / p.z() + K.cy};
}

Vec3 unproject(const CameraIntrinsics& K, double u, double v, double d) {
  if (!(d > 0.0) || !std::isfinite(d)) throw InvalidDepth();
  return {(u - K.cx) / K.fx * d, (v - K.cy) / K.fy * d, d};
}

KnnWeights knn_weights(const Vec3& p, const std::vector<Vec3>& nodes, int k) {
  const int n = static_cast<int>(nodes.size());
  if (k < 1 || n < k) throw InsufficientNodes();

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  const int m = std::min(n, k + 1);
  std::partial_sort(order.begin(), order.begin() + m, order.end(), [&](int a, int b) {
    const double da = (nodes[a] - p).squaredNorm();
    const double db = (nodes[b] - p).squaredNorm();
    if (da != db) return da < db;
    return a < b;  // deterministic tie break
  });

  const double d_max = (nodes[order[m - 1]] - p).norm();

  KnnWeights out;
  out.indices.assign(order.begin(), order.begin() + k);
  out.weights.resize(k);
  double sum = 0;
  for (int i = 0; i < k; ++i) {
    const double d = (nodes[out.indices[i]] - p).norm();
    const double w = d_max > 1e-12 ? (1.0 - d / d_max) * (1.0 - d / d_max) : 0.0;
    out.weights[i] = w;
    sum += w;
  }
  if (sum <= 1e-300) {
    // All selected nodes sit at d_max (or on top of p); fall back to uniform.
    std::fill(out.weights.begin(), out.weights.end(), 1.0 / k);
  } else {
    for (double& w : out.weights) w /= sum;
  }
  return out;
}

}  // namespace super
