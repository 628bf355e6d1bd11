#pragma once

#include "cocosplat/oracle.hpp"
#include "cocosplat/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace testutil {

using namespace cocosplat;

/// In-memory dataset from a generated scene: defocused train targets, sharp held-out targets.
inline Dataset toy_dataset(const ToyScene& scene, int samples = 16) {
  Dataset d;
  for (const auto& v : scene.train) {
    d.train.push_back(v);
    d.train_images.push_back(render_defocused_oracle(scene.gaussians, v, scene.spec.lens, v.focus_plane, samples));
  }
  for (const auto& v : scene.eval) {
    d.eval.push_back(v);
    d.eval_images.push_back(render(scene.gaussians, v));
  }
  d.points = scene.points;
  return d;
}

inline ToyScene small_scene(int n = 60, int width = 16, int views = 3, std::uint64_t seed = 1,
                            const char* preset = "planes3") {
  SceneSpec spec;
  spec.preset = preset;
  spec.n = n;
  spec.width = width;
  spec.train_views = views;
  spec.eval_views = 1;
  spec.seed = seed;
  return gen_scene(spec);
}

/// A state whose base set is the ground truth; the networks keep their initial weights.
inline TrainState gt_state(const ToyScene& scene, int sets = 5) {
  Dataset d;
  for (const auto& v : scene.train) {
    d.train.push_back(v);
    d.train_images.push_back(render(scene.gaussians, v));
  }
  d.points = scene.gaussians.mean;
  TrainConfig cfg;
  cfg.sets = sets;
  TrainState s = init_state(d, cfg);
  s.set_gaussians(scene.gaussians);
  return s;
}

/// Network weights with a predictable response: every head weight zero, K = k_act * k_unit for all
/// Gaussians, beta = 1/2, set m displaced along (cos, sin, 0) of 2 pi m / M, delta = 1 and uniform
/// composition weights.
inline void plain_networks(TrainState& s, double k_act) {
  for (auto& t : s.store.tensors()) {
    if (t.name.starts_with("mlp.head_") || t.name.starts_with("cnn.out.")) t.value.setZero();
  }
  s.store.at("mlp.head_k.b").value.setConstant(std::log(std::expm1(k_act)));
  s.store.at("mlp.head_delta.b").value.setConstant(-40.0);
  Eigen::VectorXd& dir = s.store.at("mlp.head_dir.b").value;
  const int m = s.cfg.sets;
  for (int i = 0; i < m; ++i) {
    const double a = 2 * EIGEN_PI * i / m;
    dir.segment<3>(3 * i) << std::cos(a), std::sin(a), 0.0;
  }
}

/// Band index per pixel: b when the depth lies within 15% of centres[b], -1 otherwise.
inline std::vector<int> depth_bands(const Eigen::ArrayXd& depth, const std::vector<double>& centres) {
  std::vector<int> band(static_cast<std::size_t>(depth.size()), -1);
  for (Eigen::Index i = 0; i < depth.size(); ++i) {
    for (std::size_t b = 0; b < centres.size(); ++b) {
      if (std::abs(depth[i] - centres[b]) <= 0.15 * centres[b]) band[static_cast<std::size_t>(i)] = static_cast<int>(b);
    }
  }
  return band;
}

/// Share of the sharp image's luminance-gradient energy retained per depth band:
/// sum <grad img, grad sharp> / sum |grad sharp|^2 with forward differences. Blur shrinks it toward 0,
/// edges that are not in the sharp image do not raise it. Only pixels whose whole
/// (2 margin + 1)^2 neighbourhood is in one band count.
inline std::vector<double> band_sharpness(const Image& img, const Image& sharp, const Eigen::ArrayXd& depth,
                                          const std::vector<double>& centres, int margin = 2) {
  const std::vector<int> band = depth_bands(depth, centres);
  std::vector<double> num(centres.size(), 0.0), den(centres.size(), 0.0);
  auto lum = [](const Image& im, int x, int y) {
    const auto p = im.at(x, y);
    return 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
  };
  for (int y = margin; y + margin < img.height; ++y) {
    for (int x = margin; x + margin < img.width; ++x) {
      const int b = band[static_cast<std::size_t>(y) * img.width + x];
      if (b < 0) continue;
      bool inside = true;
      for (int dy = -margin; dy <= margin && inside; ++dy) {
        for (int dx = -margin; dx <= margin; ++dx) {
          if (band[static_cast<std::size_t>(y + dy) * img.width + x + dx] != b) {
            inside = false;
            break;
          }
        }
      }
      if (!inside) continue;
      const auto bi = static_cast<std::size_t>(b);
      const double gx = lum(img, x + 1, y) - lum(img, x, y), gy = lum(img, x, y + 1) - lum(img, x, y);
      const double sx = lum(sharp, x + 1, y) - lum(sharp, x, y), sy = lum(sharp, x, y + 1) - lum(sharp, x, y);
      num[bi] += gx * sx + gy * sy;
      den[bi] += sx * sx + sy * sy;
    }
  }
  std::vector<double> out(centres.size(), 0.0);
  for (std::size_t b = 0; b < centres.size(); ++b) out[b] = den[b] > 0 ? num[b] / den[b] : 0.0;
  return out;
}

inline std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace testutil
