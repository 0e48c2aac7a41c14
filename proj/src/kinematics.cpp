#include "super/kinematics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "super/errors.hpp"

namespace super {

namespace {

using nlohmann::json;

json mat_to_json(const Mat4& m) {
  json a = json::array();
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) a.push_back(m(r, c));
  return a;
}

Mat4 mat_from_json(const json& a) {
  if (!a.is_array() || a.size() != 16) throw IOFailure("expected 16-element matrix");
  Mat4 m;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) m(r, c) = a[4 * r + c].get<double>();
  return m;
}

Vec3 vec3_from_json(const json& a) {
  if (!a.is_array() || a.size() != 3) throw IOFailure("expected 3-element vector");
  return Vec3(a[0].get<double>(), a[1].get<double>(), a[2].get<double>());
}

json vec3_to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

RigidTransform joint_motion(const Joint& j, double theta) {
  RigidTransform m = RigidTransform::identity();
  if (j.type == JointType::Revolute)
    m.R = rotation_from_axis_angle(theta * j.axis.normalized());
  else
    m.t = theta * j.axis.normalized();
  return m;
}

// Boolean ray-cast from the origin along unit direction r.
bool ray_hits_capped_cylinder(const Vec3& r, const Vec3& p0, const Vec3& d, double radius,
                              double length) {
  const Vec3 m = -p0;
  const Vec3 mc = m - m.dot(d) * d;
  const Vec3 rc = r - r.dot(d) * d;
  const double a = rc.squaredNorm();
  const double b = mc.dot(rc);
  const double c = mc.squaredNorm() - radius * radius;
  if (a > 1e-18) {
    const double disc = b * b - a * c;
    if (disc >= 0) {
      const double sq = std::sqrt(disc);
      for (double s : {(-b - sq) / a, (-b + sq) / a}) {
        if (s <= 0) continue;
        const double h = (m + s * r).dot(d);
        if (h >= 0 && h <= length) return true;
      }
    }
  }
  for (double h0 : {0.0, length}) {
    const double denom = r.dot(d);
    if (std::abs(denom) < 1e-15) continue;
    const double s = (p0 + h0 * d).dot(d) / denom;
    if (s <= 0) continue;
    const Vec3 q = s * r - (p0 + h0 * d);
    if ((q - q.dot(d) * d).squaredNorm() <= radius * radius) return true;
  }
  return false;
}

bool ray_hits_sphere(const Vec3& r, const Vec3& center, double radius) {
  const double b = r.dot(center);
  const double c = center.squaredNorm() - radius * radius;
  const double disc = b * b - c;
  if (disc < 0) return false;
  const double sq = std::sqrt(disc);
  return b + sq > 0;
}

}  // namespace

ImageLine canonical_line(double a, double b, double c) {
  const double n = std::hypot(a, b);
  if (n < 1e-15) throw DimensionMismatch("degenerate line coefficients");
  double phi = std::atan2(b, a);
  double rho = -c / n;
  if (phi < 0) {
    phi += M_PI;
    rho = -rho;
  }
  if (phi >= M_PI) {
    phi -= M_PI;
    rho = -rho;
  }
  return {rho, phi};
}

double line_distance(const ImageLine& l1, const ImageLine& l2, double gamma_phi,
                     double gamma_rho) {
  const double dphi = std::abs(l1.phi - l2.phi);
  const double direct = gamma_phi * dphi + gamma_rho * std::abs(l1.rho - l2.rho);
  const double wrapped = gamma_phi * (M_PI - dphi) + gamma_rho * std::abs(l1.rho + l2.rho);
  return std::min(direct, wrapped);
}

std::vector<RigidTransform> forward_kinematics(const KinematicChain& chain,
                                               const std::vector<double>& theta) {
  if (theta.size() != chain.joints.size())
    throw DimensionMismatch("theta size does not match joint count");
  std::vector<RigidTransform> poses(chain.joints.size() + 1);
  poses[0] = RigidTransform::identity();
  for (size_t i = 0; i < chain.joints.size(); ++i)
    poses[i + 1] = poses[i] * chain.joints[i].home * joint_motion(chain.joints[i], theta[i]);
  return poses;
}

Vec3 point_to_camera(const KinematicChain& chain, const std::vector<double>& theta,
                     const HandEyeState& he, const LinkPoint& lp) {
  const auto poses = forward_kinematics(chain, theta);
  if (lp.link < 0 || lp.link >= static_cast<int>(poses.size()))
    throw DimensionMismatch("link index out of range");
  return he.compose() * (poses[lp.link] * lp.p);
}

Vec2 project_marker(const KinematicChain& chain, const std::vector<double>& theta,
                    const HandEyeState& he, int marker_id, const CameraIntrinsics& K) {
  for (const auto& lp : chain.link_points) {
    if (lp.marker_id != marker_id) continue;
    const Vec3 pc = point_to_camera(chain, theta, he, lp);
    if (pc.z() <= 0) throw BehindCamera();
    return project_point(K, pc);
  }
  throw DimensionMismatch("unknown marker id");
}

std::pair<ImageLine, ImageLine> cylinder_silhouette(const Vec3& axis_point, const Vec3& axis_dir,
                                                    double radius, const CameraIntrinsics& K) {
  const Vec3 d = axis_dir.normalized();
  const Vec3 a_perp = axis_point - axis_point.dot(d) * d;
  const double alpha = a_perp.norm();
  if (alpha <= radius) throw CameraInsideCylinder();
  const Vec3 e1 = a_perp / alpha;
  const Vec3 e2 = d.cross(e1);
  const double s = radius / alpha;
  const double t = std::sqrt(1.0 - s * s);

  auto to_line = [&](double sign) {
    const Vec3 n = s * e1 + sign * t * e2;
    const double a = n.x() / K.fx;
    const double b = n.y() / K.fy;
    const double c = n.z() - n.x() * K.cx / K.fx - n.y() * K.cy / K.fy;
    return canonical_line(a, b, c);
  };

  ImageLine l1 = to_line(+1.0);
  ImageLine l2 = to_line(-1.0);
  if (l1.phi > l2.phi || (l1.phi == l2.phi && l1.rho > l2.rho)) std::swap(l1, l2);
  return {l1, l2};
}

std::pair<ImageLine, ImageLine> project_cylinder(const KinematicChain& chain,
                                                 const std::vector<double>& theta,
                                                 const HandEyeState& he,
                                                 const CameraIntrinsics& K) {
  const auto poses = forward_kinematics(chain, theta);
  if (chain.shaft.link < 0 || chain.shaft.link >= static_cast<int>(poses.size()))
    throw DimensionMismatch("shaft link index out of range");
  const RigidTransform T = he.compose() * poses[chain.shaft.link];
  return cylinder_silhouette(T * chain.shaft.axis_point, T.R * chain.shaft.axis_dir.normalized(),
                             chain.shaft.radius, K);
}

MaskImage render_tool_mask(const KinematicChain& chain, const std::vector<double>& theta,
                           const HandEyeState& he, const CameraIntrinsics& K, int dilation_px) {
  const auto poses = forward_kinematics(chain, theta);
  const RigidTransform T_cam = he.compose();
  const RigidTransform Ts = T_cam * poses[chain.shaft.link];
  const Vec3 p0 = Ts * chain.shaft.axis_point;
  const Vec3 d = (Ts.R * chain.shaft.axis_dir.normalized()).normalized();

  std::vector<Vec3> spheres;
  spheres.reserve(chain.link_points.size());
  for (const auto& lp : chain.link_points) spheres.push_back(T_cam * (poses[lp.link] * lp.p));

  MaskImage mask(K.width, K.height, 0);
  for (int v = 0; v < K.height; ++v) {
    for (int u = 0; u < K.width; ++u) {
      const Vec3 r =
          Vec3((u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0).normalized();
      bool hit = ray_hits_capped_cylinder(r, p0, d, chain.shaft.radius, chain.shaft.length);
      for (size_t i = 0; !hit && i < spheres.size(); ++i)
        hit = ray_hits_sphere(r, spheres[i], chain.mask_point_radius);
      mask.at(u, v) = hit ? 1 : 0;
    }
  }
  return dilation_px > 0 ? dilate_mask(mask, dilation_px) : mask;
}

MaskImage dilate_mask(const MaskImage& mask, int radius_px) {
  if (radius_px <= 0) return mask;
  MaskImage tmp(mask.width, mask.height, 0);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      uint8_t v = 0;
      for (int k = -radius_px; k <= radius_px && !v; ++k) {
        const int xx = x + k;
        if (xx >= 0 && xx < mask.width) v = mask.at(xx, y);
      }
      tmp.at(x, y) = v;
    }
  }
  MaskImage out(mask.width, mask.height, 0);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      uint8_t v = 0;
      for (int k = -radius_px; k <= radius_px && !v; ++k) {
        const int yy = y + k;
        if (yy >= 0 && yy < mask.height) v = tmp.at(x, yy);
      }
      out.at(x, y) = v;
    }
  }
  return out;
}

KinematicChain load_chain(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IOFailure("cannot open " + path.string());
  json j;
  in >> j;

  KinematicChain chain;
  for (const auto& jj : j.at("joints")) {
    Joint joint;
    const std::string type = jj.at("type").get<std::string>();
    if (type == "revolute")
      joint.type = JointType::Revolute;
    else if (type == "prismatic")
      joint.type = JointType::Prismatic;
    else
      throw IOFailure("unknown joint type " + type);
    joint.axis = vec3_from_json(jj.at("axis")).normalized();
    joint.home = RigidTransform::from_matrix(mat_from_json(jj.at("home")));
    chain.joints.push_back(joint);
  }
  for (const auto& jp : j.at("link_points")) {
    LinkPoint lp;
    lp.link = jp.at("link").get<int>();
    lp.p = vec3_from_json(jp.at("p"));
    lp.marker_id = jp.at("marker_id").get<int>();
    chain.link_points.push_back(lp);
  }
  const auto& js = j.at("shaft");
  chain.shaft.link = js.at("link").get<int>();
  chain.shaft.axis_point = vec3_from_json(js.at("point"));
  chain.shaft.axis_dir = vec3_from_json(js.at("dir")).normalized();
  chain.shaft.radius = js.at("radius").get<double>();
  chain.shaft.length = js.at("length").get<double>();
  chain.mask_point_radius = j.at("mask_point_radius").get<double>();
  chain.nominal_hand_eye = RigidTransform::from_matrix(mat_from_json(j.at("hand_eye_nominal")));
  return chain;
}

void save_chain(const KinematicChain& chain, const std::filesystem::path& path) {
  json j;
  j["joints"] = json::array();
  for (const auto& joint : chain.joints) {
    json jj;
    jj["type"] = joint.type == JointType::Revolute ? "revolute" : "prismatic";
    jj["axis"] = vec3_to_json(joint.axis);
    jj["home"] = mat_to_json(joint.home.matrix());
    j["joints"].push_back(jj);
  }
  j["link_points"] = json::array();
  for (const auto& lp : chain.link_points) {
    json jp;
    jp["link"] = lp.link;
    jp["p"] = vec3_to_json(lp.p);
    jp["marker_id"] = lp.marker_id;
    j["link_points"].push_back(jp);
  }
  j["shaft"] = {{"link", chain.shaft.link},
                {"point", vec3_to_json(chain.shaft.axis_point)},
                {"dir", vec3_to_json(chain.shaft.axis_dir)},
                {"radius", chain.shaft.radius},
                {"length", chain.shaft.length}};
  j["mask_point_radius"] = chain.mask_point_radius;
  j["hand_eye_nominal"] = mat_to_json(chain.nominal_hand_eye.matrix());

  std::ofstream out(path);
  if (!out) throw IOFailure("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

}  // namespace super
