#pragma once

#include "cocosplat/types.hpp"

#include <cstdint>

namespace cocosplat {

struct RenderOptions {
  Eigen::Vector3d background = Eigen::Vector3d::Zero();
  /// Contributions with alpha below this are skipped.
  double alpha_cutoff = 1.0 / 255.0;
  /// Screen-space footprint half-width in standard deviations of the projected covariance.
  double footprint_sigmas = 3.0;
  /// Gaussians with camera-space depth at or below this are culled.
  double near_plane = 0.01;
  double dilation = kLowPassDilation;
};

/// Diagnostics of one forward pass. `signature` hashes the ordered (pixel, gaussian) contribution
/// pairs, so two renders with equal signatures went through the same discrete branch decisions.
struct RenderStats {
  std::size_t visible = 0;
  std::size_t contributions = 0;
  std::uint64_t signature = 0;
};

/// Front-to-back alpha compositing of depth-sorted splats.
Image render(const GaussianSet& set, const CameraView& view, const RenderOptions& opts = {},
             RenderStats* stats = nullptr);

/// Gradient of <upstream, render(set, view)> w.r.t. every field of `set`. The forward pass is
/// recomputed per pixel; nothing is cached between calls.
GaussianGrads render_backward(const GaussianSet& set, const CameraView& view, const Image& upstream,
                              const RenderOptions& opts = {});

/// Alpha-weighted expected camera-space depth per pixel (row-major H*W); +inf where nothing contributes.
Eigen::ArrayXd depth_map(const GaussianSet& set, const CameraView& view, const RenderOptions& opts = {});

}  // namespace cocosplat
