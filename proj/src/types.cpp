#include "cocosplat/types.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace cocosplat {

void CameraView::validate(bool require_focus) const {
  if (width < 8 || height < 8) {
    throw std::invalid_argument("camera: image size must be at least 8x8, got " + std::to_string(width) + "x" +
                                std::to_string(height));
  }
  if (!(fx > 0) || !(fy > 0) || !std::isfinite(fx) || !std::isfinite(fy)) {
    throw std::invalid_argument("camera: focal lengths must be positive");
  }
  if (!world_to_camera.allFinite() || !std::isfinite(cx) || !std::isfinite(cy)) {
    throw std::invalid_argument("camera: non-finite pose or principal point");
  }
  if (require_focus && !(focus_plane > 0)) {
    throw std::invalid_argument("camera: focus plane must be positive");
  }
}

CameraView CameraView::resized(int new_width) const {
  if (new_width <= 0 || new_width == width) return *this;
  const double s = static_cast<double>(new_width) / width;
  CameraView out = *this;
  out.width = new_width;
  out.height = std::max(1, static_cast<int>(std::lround(height * s)));
  out.fx = fx * s;
  out.fy = fy * static_cast<double>(out.height) / height;
  out.cx = cx * s;
  out.cy = cy * static_cast<double>(out.height) / height;
  return out;
}

Eigen::Matrix4d look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target, const Eigen::Vector3d& down) {
  const Eigen::Vector3d z = (target - eye).normalized();
  const Eigen::Vector3d x = down.cross(z).normalized();
  const Eigen::Vector3d y = z.cross(x);
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.block<1, 3>(0, 0) = x.transpose();
  m.block<1, 3>(1, 0) = y.transpose();
  m.block<1, 3>(2, 0) = z.transpose();
  m.topRightCorner<3, 1>() = -m.topLeftCorner<3, 3>() * eye;
  return m;
}

void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(what) + ": image shapes differ (" + std::to_string(a.width) + "x" +
                                std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                                std::to_string(b.height) + ")");
  }
}

}  // namespace cocosplat
