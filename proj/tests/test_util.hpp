#pragma once

#include "cocosplat/renderer.hpp"
#include "cocosplat/types.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>

namespace testutil {

using namespace cocosplat;

/// Camera at the origin looking down +z.
inline CameraView front_camera(int w = 16, int h = 16, double f = 16.0) {
  CameraView v;
  v.world_to_camera = Eigen::Matrix4d::Identity();
  v.fx = v.fy = f;
  v.cx = w / 2.0;
  v.cy = h / 2.0;
  v.width = w;
  v.height = h;
  v.focus_plane = 4.0;
  return v;
}

inline GaussianSet random_scene(int n, std::uint32_t seed, double spread = 1.2) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  GaussianSet s(n);
  for (int i = 0; i < n; ++i) {
    s.mean.row(i) << spread * u(rng), spread * u(rng), 4.5 + 1.5 * u(rng);
    s.log_scale.row(i) << std::log(0.25 + 0.15 * u(rng)), std::log(0.25 + 0.15 * u(rng)),
        std::log(0.25 + 0.15 * u(rng));
    Eigen::Vector4d q(1.0 + 0.5 * u(rng), 0.6 * u(rng), 0.6 * u(rng), 0.6 * u(rng));
    s.rot.row(i) = q.transpose();
    s.opacity_logit[i] = 0.5 + 1.2 * u(rng);
    for (int k = 0; k < 12; ++k) s.sh(i, k) = 0.35 * u(rng);
  }
  return s;
}

inline Image random_image(int w, int h, std::uint32_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Image img(w, h);
  for (Eigen::Index i = 0; i < img.rgb.size(); ++i) img.rgb.data()[i] = u(rng);
  return img;
}

inline double dot(const Image& a, const Image& b) { return (a.rgb * b.rgb).sum(); }

/// Relative agreement with an absolute floor.
inline bool grad_close(double analytic, double numeric, double rel = 1e-3, double abs_floor = 1e-6) {
  const double err = std::abs(analytic - numeric);
  return err <= abs_floor || err <= rel * std::max(std::abs(analytic), std::abs(numeric));
}

struct Probe {
  double value;
  std::uint64_t signature;
};

/// Central difference of `eval` w.r.t. `*param`. When the discrete branch signature differs across the
/// stencil (a sort swap or cutoff was crossed), the step is shrunk until the stencil is smooth.
inline double central_difference(double* param, const std::function<Probe()>& eval, double h = 1e-4) {
  const double saved = *param;
  double result = 0.0;
  for (int attempt = 0; attempt < 4; ++attempt, h *= 0.1) {
    *param = saved + h;
    const Probe plus = eval();
    *param = saved - h;
    const Probe minus = eval();
    *param = saved;
    result = (plus.value - minus.value) / (2.0 * h);
    if (plus.signature == minus.signature) break;
  }
  *param = saved;
  return result;
}

/// Hash of the sign pattern of a set of pre-activation matrices (ReLU branch decisions).
template <typename Mats>
std::uint64_t relu_signature(const Mats& mats) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& m : mats) {
    for (Eigen::Index i = 0; i < m.size(); ++i) h = (h ^ static_cast<std::uint64_t>(m.data()[i] > 0.0)) * 1099511628211ULL;
  }
  return h;
}

}  // namespace testutil
