#pragma once

#include <filesystem>
#include <utility>
#include <vector>

#include "super/core_math.hpp"
#include "super/image.hpp"

namespace super {

enum class JointType { Revolute, Prismatic };

struct Joint {
  RigidTransform home;
  JointType type = JointType::Revolute;
  Vec3 axis = Vec3::UnitZ();  // unit vector in the joint's local frame
};

/// Point rigidly attached to a link, expressed in that link's frame.
struct LinkPoint {
  int link = 1;  // 1-based: frame after applying joints 1..link (0 = base frame)
  Vec3 p = Vec3::Zero();
  int marker_id = 0;
};

struct Shaft {
  int link = 1;
  Vec3 axis_point = Vec3::Zero();  // a point on the axis, link frame
  Vec3 axis_dir = Vec3::UnitZ();   // unit direction, link frame
  double radius = 0.004;
  double length = 0.2;  // finite extent used for masking, from axis_point along axis_dir
};

struct KinematicChain {
  std::vector<Joint> joints;
  std::vector<LinkPoint> link_points;
  Shaft shaft;
  double mask_point_radius = 0.006;  // sphere radius used when rasterizing link points
  RigidTransform nominal_hand_eye;   // calibrated camera-from-base transform
};

/// Calibrated hand-eye transform plus the six-scalar error being estimated.
struct HandEyeState {
  RigidTransform nominal;
  AxisAngleTranslation error;

  /// Camera-from-base transform: nominal composed with the error.
  RigidTransform compose() const { return nominal * se3_from_axis_angle(error); }
};

/// Image line in (rho, phi) form: rho = u cos(phi) + v sin(phi), phi in [0, pi).
struct ImageLine {
  double rho = 0;
  double phi = 0;
};

/// Canonicalize the line a*u + b*v + c = 0 to (rho, phi) with phi in [0, pi).
ImageLine canonical_line(double a, double b, double c);

/// Weighted distance between lines under the (rho, phi) ~ (-rho, phi +- pi) identification.
double line_distance(const ImageLine& l1, const ImageLine& l2, double gamma_phi, double gamma_rho);

/// Base-frame pose of each link: pose[j] = prod_{i<=j} home_i * motion_i(theta_i).
/// Throws DimensionMismatch when theta size differs from the joint count.
std::vector<RigidTransform> forward_kinematics(const KinematicChain& chain,
                                               const std::vector<double>& theta);

Vec3 point_to_camera(const KinematicChain& chain, const std::vector<double>& theta,
                     const HandEyeState& he, const LinkPoint& lp);

/// Pixel position of the marker with the given id. Throws BehindCamera when the
/// camera-frame depth is non-positive.
Vec2 project_marker(const KinematicChain& chain, const std::vector<double>& theta,
                    const HandEyeState& he, int marker_id, const CameraIntrinsics& K);

/// Silhouette lines of an infinite cylinder given in camera coordinates: the images
/// of the two planes through the camera center tangent to the cylinder.
/// Throws CameraInsideCylinder when the center is within one radius of the axis.
std::pair<ImageLine, ImageLine> cylinder_silhouette(const Vec3& axis_point, const Vec3& axis_dir,
                                                    double radius, const CameraIntrinsics& K);

/// Silhouette lines of the chain's shaft under the given configuration.
std::pair<ImageLine, ImageLine> project_cylinder(const KinematicChain& chain,
                                                 const std::vector<double>& theta,
                                                 const HandEyeState& he,
                                                 const CameraIntrinsics& K);

/// Binary tool mask: pixels whose ray hits the capped shaft cylinder or a link-point
/// sphere, dilated by dilation_px (Chebyshev radius).
MaskImage render_tool_mask(const KinematicChain& chain, const std::vector<double>& theta,
                           const HandEyeState& he, const CameraIntrinsics& K, int dilation_px);

MaskImage dilate_mask(const MaskImage& mask, int radius_px);

KinematicChain load_chain(const std::filesystem::path& path);
void save_chain(const KinematicChain& chain, const std::filesystem::path& path);

}  // namespace super
