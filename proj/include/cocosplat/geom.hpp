#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <stdexcept>

namespace cocosplat {

template <typename Scalar>
using Vec2 = Eigen::Matrix<Scalar, 2, 1>;
template <typename Scalar>
using Vec3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using Vec4 = Eigen::Matrix<Scalar, 4, 1>;
template <typename Scalar>
using Mat2 = Eigen::Matrix<Scalar, 2, 2>;
template <typename Scalar>
using Mat3 = Eigen::Matrix<Scalar, 3, 3>;
template <typename Scalar>
using Mat23 = Eigen::Matrix<Scalar, 2, 3>;

/// Anti-aliasing floor added to both diagonal entries of every projected covariance.
inline constexpr double kLowPassDilation = 0.3;

/// Number of SH coefficients per colour channel (degree 0 and degree 1).
inline constexpr int kShCoeffs = 4;
inline constexpr double kShC0 = 0.28209479177387814;
inline constexpr double kShC1 = 0.4886025119029199;

/// Rotation quaternion stored as (w, x, y, z).
template <typename Scalar>
struct Quaternion {
  Scalar w{1}, x{0}, y{0}, z{0};

  Quaternion() = default;
  Quaternion(Scalar w_, Scalar x_, Scalar y_, Scalar z_) : w(w_), x(x_), y(y_), z(z_) {}
  explicit Quaternion(const Vec4<Scalar>& v) : w(v[0]), x(v[1]), y(v[2]), z(v[3]) {}

  static Quaternion identity() { return {}; }

  /// Rotation of `angle` radians about the unit axis `axis`.
  static Quaternion from_axis_angle(const Vec3<Scalar>& axis, Scalar angle) {
    const Vec3<Scalar> a = axis.normalized();
    const Scalar s = std::sin(angle / 2);
    return {std::cos(angle / 2), a.x() * s, a.y() * s, a.z() * s};
  }

  Vec4<Scalar> coeffs() const { return {w, x, y, z}; }
  Scalar norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

  Quaternion normalized() const {
    const Scalar n = norm();
    if (!(n > Scalar(0)) || !std::isfinite(n)) {
      throw std::invalid_argument("quaternion: cannot normalize zero or non-finite quaternion");
    }
    return {w / n, x / n, y / n, z / n};
  }

  /// Rotation matrix of the normalized quaternion.
  Mat3<Scalar> rotation() const {
    const Quaternion q = normalized();
    return quat_to_rotation(q.coeffs());
  }

  static Mat3<Scalar> quat_to_rotation(const Vec4<Scalar>& q) {
    const Scalar w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3<Scalar> r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
  }
};

/// Backward of `quat_to_rotation`: gradient w.r.t. the (already unit) quaternion coefficients.
template <typename Scalar>
Vec4<Scalar> rotation_backward(const Vec4<Scalar>& q, const Mat3<Scalar>& d_rot) {
  const Scalar w = q[0], x = q[1], y = q[2], z = q[3];
  const Mat3<Scalar>& g = d_rot;
  Vec4<Scalar> dq;
  dq[0] = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
  dq[1] = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) +
               w * g(2, 1) - 2 * x * g(2, 2));
  dq[2] = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) +
               z * g(2, 1) - 2 * y * g(2, 2));
  dq[3] = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) + y * g(1, 2) +
               x * g(2, 0) + y * g(2, 1));
  return dq;
}

/// Backward of v / |v| for any fixed-size vector.
template <typename Derived>
typename Derived::PlainObject normalize_backward(const Eigen::MatrixBase<Derived>& raw,
                                                 const Eigen::MatrixBase<Derived>& d_unit) {
  using Scalar = typename Derived::Scalar;
  const Scalar n = raw.norm();
  const typename Derived::PlainObject u = raw / n;
  return (d_unit - u * u.dot(d_unit)) / n;
}

/// Sigma = R S S^T R^T for per-axis standard deviations `scale`.
template <typename Scalar>
Mat3<Scalar> build_covariance(const Vec3<Scalar>& scale, const Quaternion<Scalar>& rot) {
  if (!scale.allFinite() || !rot.coeffs().allFinite()) {
    throw std::invalid_argument("build_covariance: non-finite input");
  }
  const Mat3<Scalar> m = rot.rotation() * scale.asDiagonal();
  return m * m.transpose();
}

/// Sigma2D = J W Sigma W^T J^T, plus the low-pass diagonal floor unless `dilation` is zero.
template <typename Scalar>
Mat2<Scalar> project_covariance(const Mat3<Scalar>& cov, const Mat3<Scalar>& view_rot,
                                const Mat23<Scalar>& jac, Scalar dilation = Scalar(kLowPassDilation)) {
  if (!cov.allFinite() || !view_rot.allFinite() || !jac.allFinite()) {
    throw std::invalid_argument("project_covariance: non-finite input");
  }
  const Mat23<Scalar> t = jac * view_rot;
  Mat2<Scalar> out = t * cov * t.transpose();
  out(0, 1) = out(1, 0) = Scalar(0.5) * (out(0, 1) + out(1, 0));
  out.diagonal().array() += dilation;
  return out;
}

/// Jacobian of the pinhole projection (fx X/Z, fy Y/Z) at camera-space point `p`.
template <typename Scalar>
Mat23<Scalar> projection_jacobian(const Vec3<Scalar>& p, Scalar fx, Scalar fy) {
  const Scalar iz = Scalar(1) / p.z();
  Mat23<Scalar> j;
  j << fx * iz, 0, -fx * p.x() * iz * iz, 0, fy * iz, -fy * p.y() * iz * iz;
  return j;
}

/// Degree-0/1 real SH basis at unit direction `dir`.
template <typename Scalar>
Vec4<Scalar> sh_basis(const Vec3<Scalar>& dir) {
  return {Scalar(kShC0), Scalar(-kShC1) * dir.y(), Scalar(kShC1) * dir.z(), Scalar(-kShC1) * dir.x()};
}

/// Per-channel colour 0.5 + SH(dir) before clamping. `sh` is channel-major: sh[c * 4 + k].
template <typename Scalar, typename ShVec>
Vec3<Scalar> sh_to_color_unclamped(const ShVec& sh, const Vec3<Scalar>& dir) {
  const Vec4<Scalar> b = sh_basis(dir);
  Vec3<Scalar> rgb;
  for (int c = 0; c < 3; ++c) {
    Scalar v = Scalar(0.5);
    for (int k = 0; k < kShCoeffs; ++k) v += b[k] * sh[c * kShCoeffs + k];
    rgb[c] = v;
  }
  return rgb;
}

template <typename Scalar, typename ShVec>
Vec3<Scalar> sh_to_color(const ShVec& sh, const Vec3<Scalar>& dir) {
  return sh_to_color_unclamped<Scalar>(sh, dir).cwiseMax(Scalar(0)).cwiseMin(Scalar(1));
}

/// Gradient of the SH basis contraction w.r.t. the view direction, for one set of channel gradients.
template <typename Scalar, typename ShVec>
Vec3<Scalar> sh_dir_backward(const ShVec& sh, const Vec3<Scalar>& d_rgb) {
  Vec3<Scalar> d_dir = Vec3<Scalar>::Zero();
  for (int c = 0; c < 3; ++c) {
    d_dir.x() += Scalar(-kShC1) * sh[c * kShCoeffs + 3] * d_rgb[c];
    d_dir.y() += Scalar(-kShC1) * sh[c * kShCoeffs + 1] * d_rgb[c];
    d_dir.z() += Scalar(kShC1) * sh[c * kShCoeffs + 2] * d_rgb[c];
  }
  return d_dir;
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

/// log(1 + e^x) without overflow.
template <typename Scalar>
Scalar softplus(Scalar x) {
  return x > Scalar(30) ? x : std::log1p(std::exp(x));
}

template <typename Scalar>
Scalar inverse_softplus(Scalar y) {
  return y > Scalar(30) ? y : std::log(std::expm1(y));
}

template <typename Scalar>
Scalar logit(Scalar p) {
  return std::log(p / (Scalar(1) - p));
}

}  // namespace cocosplat
