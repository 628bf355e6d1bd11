#pragma once

#include "cocosplat/geom.hpp"

#include <Eigen/Dense>

#include <vector>

namespace cocosplat {

using RowMatX3 = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using RowMatX4 = Eigen::Matrix<double, Eigen::Dynamic, 4, Eigen::RowMajor>;
using RowMatX12 = Eigen::Matrix<double, Eigen::Dynamic, 12, Eigen::RowMajor>;
using RowMatXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Structure-of-arrays Gaussian scene. Scales are log-space, opacities are logits and
/// `sh` is channel-major (row n: r0..r3, g0..g3, b0..b3).
struct GaussianSet {
  RowMatX3 mean;
  RowMatX3 log_scale;
  RowMatX4 rot;
  Eigen::VectorXd opacity_logit;
  RowMatX12 sh;

  GaussianSet() = default;
  explicit GaussianSet(Eigen::Index n) { resize(n); }

  Eigen::Index size() const { return mean.rows(); }
  bool empty() const { return size() == 0; }

  void resize(Eigen::Index n) {
    mean.resize(n, 3);
    log_scale.resize(n, 3);
    rot.resize(n, 4);
    opacity_logit.resize(n);
    sh.resize(n, 12);
  }

  void set_zero() {
    mean.setZero();
    log_scale.setZero();
    rot.setZero();
    opacity_logit.setZero();
    sh.setZero();
  }

  static GaussianSet zeros_like(const GaussianSet& other) {
    GaussianSet g(other.size());
    g.set_zero();
    return g;
  }

  bool all_finite() const {
    return mean.allFinite() && log_scale.allFinite() && rot.allFinite() && opacity_logit.allFinite() &&
           sh.allFinite();
  }

  GaussianSet& operator+=(const GaussianSet& o) {
    mean += o.mean;
    log_scale += o.log_scale;
    rot += o.rot;
    opacity_logit += o.opacity_logit;
    sh += o.sh;
    return *this;
  }

  bool operator==(const GaussianSet& o) const {
    return mean == o.mean && log_scale == o.log_scale && rot == o.rot && opacity_logit == o.opacity_logit &&
           sh == o.sh;
  }
};

/// Gradients share the parameter layout.
using GaussianGrads = GaussianSet;

/// Pinhole camera: x right, y down, z forward. Pixel (x, y) is sampled at (x + 0.5, y + 0.5).
struct CameraView {
  Eigen::Matrix4d world_to_camera = Eigen::Matrix4d::Identity();
  double fx = 1, fy = 1, cx = 0, cy = 0;
  int width = 0, height = 0;
  /// Focus-plane distance in world units; zero when unknown.
  double focus_plane = 0;

  Eigen::Matrix3d rotation() const { return world_to_camera.topLeftCorner<3, 3>(); }
  Eigen::Vector3d translation() const { return world_to_camera.topRightCorner<3, 1>(); }
  Eigen::Vector3d center() const { return -rotation().transpose() * translation(); }
  Eigen::Vector3d to_camera(const Eigen::Vector3d& p) const { return rotation() * p + translation(); }

  /// Throws std::invalid_argument unless the intrinsics and image size are usable.
  void validate(bool require_focus = false) const;

  /// Same pose, intrinsics rescaled to a new image width (aspect preserved).
  CameraView resized(int new_width) const;
};

/// Look-at pose helper used by scene generators and tests.
Eigen::Matrix4d look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                        const Eigen::Vector3d& down = Eigen::Vector3d(0, -1, 0));

/// H x W x 3 float image, one row per pixel (index y * width + x).
struct Image {
  int width = 0;
  int height = 0;
  Eigen::Array<double, Eigen::Dynamic, 3, Eigen::RowMajor> rgb;

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<Eigen::Index>(w) * h, 3) { rgb.setZero(); }

  Eigen::Index pixels() const { return static_cast<Eigen::Index>(width) * height; }
  bool same_shape(const Image& o) const { return width == o.width && height == o.height; }
  auto at(int x, int y) { return rgb.row(static_cast<Eigen::Index>(y) * width + x); }
  auto at(int x, int y) const { return rgb.row(static_cast<Eigen::Index>(y) * width + x); }
};

void require_same_shape(const Image& a, const Image& b, const char* what);

}  // namespace cocosplat
