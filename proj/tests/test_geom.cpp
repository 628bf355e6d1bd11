#include "cocosplat/geom.hpp"

#include "doctest.h"

#include <cmath>
#include <numbers>
#include <random>

using namespace cocosplat;
using Q = Quaternion<double>;

namespace {

Q random_unit_quaternion(std::mt19937& rng) {
  std::normal_distribution<double> n;
  return Q(n(rng), n(rng), n(rng), n(rng)).normalized();
}

Eigen::Matrix3d random_psd(std::mt19937& rng) {
  std::normal_distribution<double> n;
  Eigen::Matrix3d a;
  for (int i = 0; i < 9; ++i) a.data()[i] = n(rng);
  return a * a.transpose();
}

// Element-by-element triple product, independent of Eigen's expression evaluation.
Eigen::Matrix2d dense_projection_oracle(const Eigen::Matrix3d& s, const Eigen::Matrix3d& w,
                                        const Eigen::Matrix<double, 2, 3>& j) {
  double t[2][3] = {};
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 3; ++c)
      for (int k = 0; k < 3; ++k) t[r][c] += j(r, k) * w(k, c);
  Eigen::Matrix2d out = Eigen::Matrix2d::Zero();
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c)
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) out(r, c) += t[r][a] * s(a, b) * t[c][b];
  return out;
}

// Real SH degree 0/1 written out per basis function.
Eigen::Vector3d sh_oracle(const double* sh, const Eigen::Vector3d& d) {
  const double y00 = 0.5 * std::sqrt(1.0 / std::numbers::pi);
  const double y1 = std::sqrt(3.0 / (4.0 * std::numbers::pi));
  Eigen::Vector3d rgb;
  for (int c = 0; c < 3; ++c) {
    rgb[c] = 0.5 + y00 * sh[c * 4 + 0] - y1 * d.y() * sh[c * 4 + 1] + y1 * d.z() * sh[c * 4 + 2] -
             y1 * d.x() * sh[c * 4 + 3];
  }
  return rgb;
}

}  // namespace

TEST_CASE("build_covariance examples") {
  CHECK(build_covariance<double>({1, 2, 3}, Q::identity()).isApprox(Eigen::Vector3d(1, 4, 9).asDiagonal().toDenseMatrix()));

  std::mt19937 rng(1);
  for (int i = 0; i < 10; ++i) {
    const Eigen::Matrix3d c = build_covariance<double>({1, 1, 1}, random_unit_quaternion(rng));
    CHECK((c - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-12);
  }

  const Q rz = Q::from_axis_angle({0, 0, 1}, std::numbers::pi / 2);
  const Eigen::Matrix3d c = build_covariance<double>({2, 1, 1}, rz);
  CHECK((c - Eigen::Vector3d(1, 4, 1).asDiagonal().toDenseMatrix()).cwiseAbs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(build_covariance<double>({NAN, 1, 1}, Q::identity()), std::invalid_argument);
}

TEST_CASE("build_covariance eigenvalues are the squared scales") {
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> u(0.05, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Vector3d s(u(rng), u(rng), u(rng));
    const Eigen::Matrix3d c = build_covariance<double>(s, random_unit_quaternion(rng));
    CHECK((c - c.transpose()).cwiseAbs().maxCoeff() < 1e-9);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(c);
    Eigen::Vector3d expected = s.array().square();
    std::sort(expected.data(), expected.data() + 3);
    CHECK((es.eigenvalues() - expected).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("project_covariance examples") {
  Eigen::Matrix<double, 2, 3> j;
  j << 1, 0, 0, 0, 1, 0;
  const Eigen::Matrix3d w = Eigen::Matrix3d::Identity();
  const double dil = kLowPassDilation;
  CHECK(project_covariance<double>(Eigen::Matrix3d::Identity(), w, j)
            .isApprox(Eigen::Matrix2d::Identity() * (1 + dil)));
  const Eigen::Matrix2d p = project_covariance<double>(Eigen::Vector3d(4, 1, 1).asDiagonal().toDenseMatrix(), w, j);
  CHECK(p(0, 0) == doctest::Approx(4 + dil));
  CHECK(p(1, 1) == doctest::Approx(1 + dil));
  CHECK(p(0, 1) == 0.0);

  std::mt19937 rng(3);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::Matrix3d s = random_psd(rng);
    const Eigen::Matrix3d rot = random_unit_quaternion(rng).rotation();
    Eigen::Matrix<double, 2, 3> jac;
    for (int i = 0; i < 6; ++i) jac.data()[i] = n(rng);
    const Eigen::Matrix2d got = project_covariance<double>(s, rot, jac, 0.0);
    CHECK((got - dense_projection_oracle(s, rot, jac)).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("project_covariance is linear without dilation") {
  std::mt19937 rng(11);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Matrix3d s1 = random_psd(rng), s2 = random_psd(rng);
    const Eigen::Matrix3d w = random_unit_quaternion(rng).rotation();
    Eigen::Matrix<double, 2, 3> j;
    for (int i = 0; i < 6; ++i) j.data()[i] = n(rng);
    const double a = n(rng), b = n(rng);
    const Eigen::Matrix2d lhs = project_covariance<double>(a * s1 + b * s2, w, j, 0.0);
    const Eigen::Matrix2d rhs = a * project_covariance<double>(s1, w, j, 0.0) + b * project_covariance<double>(s2, w, j, 0.0);
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("quaternion normalize") {
  const Q q(1, 2, 3, 4);
  const Q a = q.normalized();
  const Q b = a.normalized();
  CHECK(std::abs(a.norm() - 1.0) < 1e-6);
  CHECK((a.coeffs() - b.coeffs()).cwiseAbs().maxCoeff() < 1e-15);
  CHECK_THROWS_AS(Q(0, 0, 0, 0).normalized(), std::invalid_argument);
}

TEST_CASE("rotation_backward matches finite differences") {
  std::mt19937 rng(5);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Vector4d q = random_unit_quaternion(rng).coeffs();
    Eigen::Matrix3d g;
    for (int i = 0; i < 9; ++i) g.data()[i] = n(rng);
    const Eigen::Vector4d analytic = rotation_backward<double>(q, g);
    for (int k = 0; k < 4; ++k) {
      Eigen::Vector4d qp = q, qm = q;
      qp[k] += 1e-6;
      qm[k] -= 1e-6;
      const double fd = ((Q::quat_to_rotation(qp) - Q::quat_to_rotation(qm)).cwiseProduct(g)).sum() / 2e-6;
      CHECK(analytic[k] == doctest::Approx(fd).epsilon(1e-6));
    }
  }
}

TEST_CASE("sh_to_color") {
  double sh[12] = {};
  const Eigen::Vector3d d(0, 0, 1);
  CHECK(sh_to_color<double>(sh, d).isApprox(Eigen::Vector3d::Constant(0.5)));

  double sh1[12] = {0, 0.1, -0.2, 0.3, 0, 0.05, 0.1, -0.1, 0, -0.2, 0.2, 0.15};
  const Eigen::Vector3d dir = Eigen::Vector3d(0.3, -0.5, 0.8).normalized();
  const Eigen::Vector3d plus = sh_to_color_unclamped<double>(sh1, dir);
  const Eigen::Vector3d minus = sh_to_color_unclamped<double>(sh1, Eigen::Vector3d(-dir));
  CHECK(((plus.array() - 0.5) + (minus.array() - 0.5)).abs().maxCoeff() < 1e-15);

  std::mt19937 rng(9);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 100; ++trial) {
    double c[12];
    for (double& v : c) v = 0.2 * n(rng);
    const Eigen::Vector3d v = Eigen::Vector3d(n(rng), n(rng), n(rng)).normalized();
    CHECK((sh_to_color_unclamped<double>(c, v) - sh_oracle(c, v)).cwiseAbs().maxCoeff() < 1e-12);
    const Eigen::Vector3d clamped = sh_to_color<double>(c, v);
    CHECK(clamped.minCoeff() >= 0.0);
    CHECK(clamped.maxCoeff() <= 1.0);
  }
}

TEST_CASE("scalar activations") {
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(softplus(inverse_softplus(0.01)) == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(softplus(100.0) == 100.0);
  CHECK(sigmoid(logit(0.3)) == doctest::Approx(0.3));
}
