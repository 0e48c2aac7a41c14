#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "super/core_math.hpp"
#include "super/errors.hpp"

using namespace super;

namespace {

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

// Textbook Rodrigues formula, written independently of the library path.
Mat3 rodrigues_reference(const Vec3& w) {
  const double theta = w.norm();
  if (theta == 0) return Mat3::Identity();
  const Mat3 K = skew(w / theta);
  return Mat3::Identity() + std::sin(theta) * K + (1 - std::cos(theta)) * K * K;
}

KnnWeights knn_reference(const Vec3& p, const std::vector<Vec3>& nodes, int k) {
  std::vector<std::pair<double, int>> d(nodes.size());
  for (size_t i = 0; i < nodes.size(); ++i) d[i] = {(nodes[i] - p).norm(), static_cast<int>(i)};
  std::sort(d.begin(), d.end());
  const double d_max = d[std::min(nodes.size() - 1, static_cast<size_t>(k))].first;
  KnnWeights out;
  double sum = 0;
  for (int i = 0; i < k; ++i) {
    out.indices.push_back(d[i].second);
    const double w = d_max > 0 ? std::pow(1.0 - d[i].first / d_max, 2.0) : 0.0;
    out.weights.push_back(w);
    sum += w;
  }
  for (double& w : out.weights) w = sum > 0 ? w / sum : 1.0 / k;
  return out;
}

}  // namespace

TEST_CASE("axis-angle exponential matches Rodrigues formula") {
  CHECK(rotation_from_axis_angle(Vec3::Zero()).isApprox(Mat3::Identity(), 1e-15));

  const Mat3 half_turn_x = rotation_from_axis_angle(Vec3(M_PI, 0, 0));
  Mat3 expected;
  expected << 1, 0, 0, 0, -1, 0, 0, 0, -1;
  CHECK(half_turn_x.isApprox(expected, 1e-12));

  const Mat3 quarter_z = rotation_from_axis_angle(Vec3(0, 0, M_PI / 2));
  Mat3 qz;
  qz << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  CHECK(quarter_z.isApprox(qz, 1e-12));

  std::mt19937_64 rng(7);
  std::normal_distribution<double> g;
  for (int i = 0; i < 200; ++i) {
    const Vec3 w(g(rng), g(rng), g(rng));
    const Mat3 R = rotation_from_axis_angle(w);
    CHECK(R.isApprox(rodrigues_reference(w), 1e-12));
    CHECK((R.transpose() * R).isApprox(Mat3::Identity(), 1e-12));
    CHECK(R.determinant() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK((R * rotation_from_axis_angle(-w)).isApprox(Mat3::Identity(), 1e-12));
  }
}

TEST_CASE("se3 from axis-angle applies rotation then adds translation") {
  AxisAngleTranslation p;
  p.w = Vec3(0, 0, M_PI / 2);
  p.b = Vec3(1, 2, 3);
  const RigidTransform T = se3_from_axis_angle(p);
  CHECK((T * Vec3(1, 0, 0)).isApprox(Vec3(1, 3, 3), 1e-12));

  const Vec6 v = p.stacked();
  const AxisAngleTranslation q = AxisAngleTranslation::from_stacked(v);
  CHECK(q.w.isApprox(p.w));
  CHECK(q.b.isApprox(p.b));
}

TEST_CASE("rigid transform compose, inverse, matrix round trip") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g;
  for (int i = 0; i < 50; ++i) {
    RigidTransform T;
    T.R = rotation_from_axis_angle(Vec3(g(rng), g(rng), g(rng)));
    T.t = Vec3(g(rng), g(rng), g(rng));
    const RigidTransform I = T * T.inverse();
    CHECK(I.R.isApprox(Mat3::Identity(), 1e-12));
    CHECK(I.t.norm() < 1e-12);

    const RigidTransform U = RigidTransform::from_matrix(T.matrix());
    CHECK(U.R.isApprox(T.R));
    CHECK(U.t.isApprox(T.t));

    const Vec3 p(g(rng), g(rng), g(rng));
    const RigidTransform V{rotation_from_axis_angle(Vec3(g(rng), g(rng), g(rng))),
                           Vec3(g(rng), g(rng), g(rng))};
    CHECK(((T * V) * p).isApprox(T * (V * p), 1e-12));
  }
}

TEST_CASE("quaternion to rotation, raw and normalized forms") {
  CHECK(quat_to_rotation(Vec4(1, 0, 0, 0)).isApprox(Mat3::Identity(), 1e-15));

  Mat3 flip_x;
  flip_x << 1, 0, 0, 0, -1, 0, 0, 0, -1;
  CHECK(quat_to_rotation(Vec4(0, 1, 0, 0)).isApprox(flip_x, 1e-15));

  std::mt19937_64 rng(13);
  std::normal_distribution<double> g;
  for (int i = 0; i < 100; ++i) {
    Vec4 q(g(rng), g(rng), g(rng), g(rng));
    if (q.norm() < 1e-3) continue;
    const Mat3 Rn = quat_to_rotation(q);
    CHECK((Rn.transpose() * Rn).isApprox(Mat3::Identity(), 1e-12));
    CHECK(Rn.determinant() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(quat_to_rotation(3.5 * q).isApprox(Rn, 1e-12));

    // Homogeneous form scales like |q|^2 and agrees on unit quaternions.
    const Vec4 u = quat_normalized(q);
    CHECK(quat_to_rotation_raw(u).isApprox(Rn, 1e-12));
    CHECK(quat_to_rotation_raw(q).isApprox(q.squaredNorm() * Rn, 1e-9));
  }

  QuatTranslation qt;
  qt.q = Vec4(0, 0, 2, 0);
  qt.b = Vec3(1, 0, 0);
  const RigidTransform T = transform_from_quat(qt);
  Mat3 flip_y;
  flip_y << -1, 0, 0, 0, 1, 0, 0, 0, -1;
  CHECK(T.R.isApprox(flip_y, 1e-12));
  CHECK(T.t.isApprox(Vec3(1, 0, 0)));
}

TEST_CASE("pinhole projection and back-projection") {
  CameraIntrinsics K{600, 600, 320, 240, 640, 480};
  const Vec2 uv = project_point(K, Vec3(0.1, -0.05, 0.5));
  CHECK(uv.x() == doctest::Approx(440).epsilon(1e-12));
  CHECK(uv.y() == doctest::Approx(180).epsilon(1e-12));

  CHECK_THROWS_AS(project_point(K, Vec3(0, 0, 0)), NonPositiveDepth);
  CHECK_THROWS_AS(project_point(K, Vec3(0.1, 0.1, -0.4)), NonPositiveDepth);

  CHECK(unproject(K, 440, 180, 0.5).isApprox(Vec3(0.1, -0.05, 0.5), 1e-12));
  CHECK_THROWS_AS(unproject(K, 320, 240, 0.0), InvalidDepth);
  CHECK_THROWS_AS(unproject(K, 320, 240, -0.2), InvalidDepth);
  CHECK_THROWS_AS(unproject(K, 320, 240, std::nan("")), InvalidDepth);

  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> ux(-0.3, 0.3), uz(0.2, 2.0);
  for (int i = 0; i < 100; ++i) {
    const Vec3 p(ux(rng), ux(rng), uz(rng));
    const Vec2 q = project_point(K, p);
    CHECK(unproject(K, q.x(), q.y(), p.z()).isApprox(p, 1e-10));
  }
}

TEST_CASE("knn skinning weights") {
  SUBCASE("hand-worked distances") {
    const std::vector<Vec3> nodes = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}};
    const auto w = knn_weights(Vec3(0, 0, 0), nodes, 2);
    REQUIRE(w.indices.size() == 2);
    CHECK(w.indices[0] == 0);
    CHECK(w.indices[1] == 1);
    // d_max is the third-nearest distance, 2: raw weights 1 and 1/4.
    CHECK(w.weights[0] == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(w.weights[1] == doctest::Approx(0.2).epsilon(1e-12));
  }

  SUBCASE("equidistant pair splits evenly") {
    const std::vector<Vec3> nodes = {{1, 0, 0}, {-1, 0, 0}, {3, 0, 0}};
    const auto w = knn_weights(Vec3(0, 0, 0), nodes, 2);
    CHECK(w.weights[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(w.weights[1] == doctest::Approx(0.5).epsilon(1e-12));
  }

  SUBCASE("n equal to k uses the k-th distance as falloff") {
    const std::vector<Vec3> nodes = {{1, 0, 0}, {2, 0, 0}};
    const auto w = knn_weights(Vec3(0, 0, 0), nodes, 2);
    CHECK(w.weights[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(w.weights[1] == doctest::Approx(0.0).epsilon(1e-12));
  }

  SUBCASE("throws when nodes are fewer than k") {
    const std::vector<Vec3> nodes = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
    CHECK_THROWS_AS(knn_weights(Vec3::Zero(), nodes, 4), InsufficientNodes);
  }

  SUBCASE("matches brute-force reference on random clouds") {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> u(-1, 1);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<Vec3> nodes(50);
      for (auto& n : nodes) n = Vec3(u(rng), u(rng), u(rng));
      const Vec3 p(u(rng), u(rng), u(rng));
      const auto a = knn_weights(p, nodes, 4);
      const auto b = knn_reference(p, nodes, 4);
      REQUIRE(a.indices == b.indices);
      double sum = 0;
      for (int i = 0; i < 4; ++i) {
        CHECK(a.weights[i] == doctest::Approx(b.weights[i]).epsilon(1e-10));
        CHECK(a.weights[i] >= 0);
        sum += a.weights[i];
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  }

  SUBCASE("weights follow the node, not its index") {
    std::mt19937_64 rng(29);
    std::uniform_real_distribution<double> u(-1, 1);
    std::vector<Vec3> nodes(30);
    for (auto& n : nodes) n = Vec3(u(rng), u(rng), u(rng));
    const Vec3 p(0.1, -0.2, 0.05);
    const auto a = knn_weights(p, nodes, 4);

    std::vector<Vec3> reversed(nodes.rbegin(), nodes.rend());
    const auto b = knn_weights(p, reversed, 4);
    for (int i = 0; i < 4; ++i) {
      CHECK(nodes[a.indices[i]].isApprox(reversed[b.indices[i]]));
      CHECK(a.weights[i] == doctest::Approx(b.weights[i]).epsilon(1e-12));
    }
  }
}
