#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <vector>

#include "super/errors.hpp"

namespace super {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// Proper rigid transform: orthonormal rotation (det +1) plus translation in meters.
struct RigidTransform {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  Vec3 operator*(const Vec3& p) const { return R * p + t; }

  RigidTransform operator*(const RigidTransform& rhs) const {
    return {R * rhs.R, R * rhs.t + t};
  }

  RigidTransform inverse() const {
    RigidTransform out;
    out.R = R.transpose();
    out.t = -(out.R * t);
    return out;
  }

  Mat4 matrix() const;
  static RigidTransform from_matrix(const Mat4& m);
};

/// Six-scalar parameterization of a rigid transform: axis-angle w (rad) and translation b (m).
struct AxisAngleTranslation {
  Vec3 w = Vec3::Zero();
  Vec3 b = Vec3::Zero();

  Vec6 stacked() const {
    Vec6 v;
    v << w, b;
    return v;
  }
  static AxisAngleTranslation from_stacked(const Vec6& v) {
    return {v.head<3>(), v.tail<3>()};
  }
};

/// Quaternion (scalar-first) plus translation. The quaternion may be unnormalized
/// while a solver is iterating; normalize before converting to a RigidTransform.
struct QuatTranslation {
  Vec4 q = Vec4(1, 0, 0, 0);
  Vec3 b = Vec3::Zero();

  static QuatTranslation identity() { return {}; }
};

Mat3 rotation_from_axis_angle(const Vec3& w);
RigidTransform se3_from_axis_angle(const AxisAngleTranslation& p);

/// Rotation matrix of a normalized copy of q (scalar-first).
Mat3 quat_to_rotation(const Vec4& q);
/// Homogeneous quadratic form: for unit q this is the rotation matrix, otherwise
/// it scales by |q|^2. This is the form differentiated by the deformation solver.
Mat3 quat_to_rotation_raw(const Vec4& q);
Vec4 quat_normalized(const Vec4& q);
RigidTransform transform_from_quat(const QuatTranslation& qt);

struct CameraIntrinsics {
  double fx = 1, fy = 1, cx = 0, cy = 0;
  int width = 0, height = 0;
};

/// Pinhole projection of a camera-frame point. Throws NonPositiveDepth when z <= 1e-9.
Vec2 project_point(const CameraIntrinsics& K, const Vec3& p);

/// Back-projection of pixel (u, v) at depth d along the ray through the pixel.
/// Throws InvalidDepth when d is non-positive or non-finite.
Vec3 unproject(const CameraIntrinsics& K, double u, double v, double d);

struct KnnWeights {
  std::vector<int> indices;
  std::vector<double> weights;  // nonnegative, sums to 1
};

/// The k nearest nodes to p with blend weights (1 - d/d_max)^2 normalized, where
/// d_max is the distance to the (k+1)-th nearest node. Throws InsufficientNodes
/// when fewer than k nodes exist.
KnnWeights knn_weights(const Vec3& p, const std::vector<Vec3>& nodes, int k);

}  // namespace super
