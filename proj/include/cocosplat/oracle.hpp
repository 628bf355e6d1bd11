#pragma once

#include "cocosplat/renderer.hpp"
#include "cocosplat/types.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace cocosplat {

struct LensParams {
  double focal_length = 0.05;
  double aperture = 2.0;  // diameter D, world units

  double k() const { return focal_length * aperture; }
};

struct SceneSpec {
  std::string preset = "planes3";
  int n = 500;
  int train_views = 8;
  int eval_views = 2;
  int width = 64;
  std::uint64_t seed = 0;
  LensParams lens;
  /// Nominal focus distance; per-view values are drawn within +-10% of it.
  double focus = 20.0;
};

/// Procedural ground truth. Train views carry their true focus distance in `focus_plane`.
struct ToyScene {
  SceneSpec spec;
  GaussianSet gaussians;
  std::vector<CameraView> train;
  std::vector<CameraView> eval;
  /// Noisy copy of the Gaussian centres standing in for a structure-from-motion point cloud.
  RowMatX3 points;
};

/// Presets: "planes3", "sphere-cluster", "reflectance-stress". Deterministic in the seed.
ToyScene gen_scene(const SceneSpec& spec);

/// i-th point of the (2, 3) Halton sequence mapped concentrically onto the unit disk.
Eigen::Vector2d halton_disk(int i);

/// Pinhole view whose centre is moved by `offset` (camera-frame x/y, world units) with the
/// principal point shifted so that the plane at camera depth `focus` projects unchanged.
CameraView sheared_view(const CameraView& view, const Eigen::Vector2d& offset, double focus);

/// Thin-lens Monte-Carlo reference: the mean of `samples` sheared pinhole renders over the
/// aperture disk of diameter `lens.aperture`, focused at camera depth `focus`.
Image render_defocused_oracle(const GaussianSet& set, const CameraView& view, const LensParams& lens, double focus,
                              int samples, const RenderOptions& opts = {});

/// Blur-disk diameter in pixels from intensity second moments: 4 sqrt(var_blurred - var_sharp),
/// var being the per-axis average of the luminance-weighted spatial variance.
double second_moment_diameter(const Image& sharp, const Image& blurred);

/// Thin-lens blur diameter in pixels for a point at camera depth `depth`.
double blur_diameter_px(const CameraView& view, const LensParams& lens, double focus, double depth);

/// Writes scene.json, views.json, points.json, train/defocus_%03d.png, eval/sharp_%03d.png and
/// manifest.json under `dir`.
void emit_dataset(const std::filesystem::path& dir, const ToyScene& scene, int samples);

}  // namespace cocosplat
