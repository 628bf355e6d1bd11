#pragma once

#include "cocosplat/nnet.hpp"
#include "cocosplat/types.hpp"

#include <vector>

namespace cocosplat {

struct CocConfig {
  int sets = 5;
  double delta_s_max = 1.1;
  double delta_q_max = 1.1;
  /// Render-time multiplier on K. Values below 1 also pull the scale/rotation factors toward 1,
  /// so a multiplier of 0 reproduces the base set exactly.
  double k_multiplier = 1.0;
  bool use_coc = true;
  bool learn_direction = true;
  bool use_beta = true;
  bool use_aperture = true;

  /// Scene-dependent constants, filled in by the trainer from the initial point cloud.
  /// K = softplus(raw) * k_unit, so the network works with a dimensionless aperture.
  double k_unit = 1.0;
  /// Diameter ceiling when the aperture is not learned.
  double sigma_ceiling = 1.0;
  /// Offset radius used when CoC offsets are disabled.
  double fixed_radius = 0.5;

  void validate() const;
};

/// Affine frame mapping world points into the network's input range: (p - center) / radius.
struct EncodingFrame {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double radius = 1.0;

  Eigen::Vector3d to_local(const Eigen::Vector3d& p) const { return (p - center) / radius; }
  /// Frame centred on the bounding box of `points` with radius equal to its half-diagonal.
  static EncodingFrame fit(const RowMatX3& points);
};

/// Activated head outputs for N Gaussians and M sets.
struct CocOutputs {
  Eigen::VectorXd k;  // N, including k_unit and k_multiplier
  RowMatXd beta;      // N x M in (0, 1)
  RowMatXd dir;       // N x 3M unit vectors
  RowMatXd ds;        // N x 3M in [1, delta_s_max]
  RowMatXd dq;        // N x 4M in [1, delta_q_max]
};

/// |mu_n - x_cam| per Gaussian.
Eigen::VectorXd gaussian_depth(const RowMatX3& mean, const Eigen::Vector3d& camera);

/// Thin-lens CoC diameter on the sensor: f D |depth - d_F| / (depth (d_F - f)).
double coc_diameter_exact(double depth, double focus, double focal_length, double aperture);

/// Approximate CoC diameter K |1/depth - 1/d_F| per Gaussian.
Eigen::VectorXd coc_diameter(const Eigen::VectorXd& depth, double focus, const Eigen::VectorXd& k);

/// Maps raw head outputs into their ranges. The multiplier is folded into `k`.
CocOutputs activate(const CocRaw& raw, const CocConfig& cfg);

/// Unit vectors spread evenly on a circle perpendicular to the camera-to-Gaussian axis, N x 3M.
RowMatXd circular_directions(const RowMatX3& mean, const Eigen::Vector3d& camera, int sets);
RowMatX3 circular_directions_backward(const RowMatX3& mean, const Eigen::Vector3d& camera, int sets,
                                      const RowMatXd& d_dirs);

/// Delta mu for every set: (sigma / 2) beta d. Returns one N x 3 block per set.
std::vector<RowMatX3> make_coc_offsets(const Eigen::VectorXd& sigma, const CocOutputs& out, const CocConfig& cfg);

/// Everything generate_coc_sets needs to run its backward pass.
struct CocTape {
  CocMlp::Input input;
  CocMlp::Tape mlp;
  CocRaw raw;
  CocOutputs out;
  Eigen::VectorXd depth;
  Eigen::VectorXd sigma;
  Eigen::VectorXd sigma_raw;  // before the ceiling clamp
  RowMatX4 quat_unit;
  double focus = 0;
  Eigen::Vector3d camera = Eigen::Vector3d::Zero();
};

struct CocGrads {
  GaussianGrads base;
  double focus = 0;
};

/// M CoC Gaussian sets for `base` as seen from `view` with focus distance `focus`. Rotations are
/// stored as the unnormalized product q_B * dq; normalization happens where they are consumed.
std::vector<GaussianSet> generate_coc_sets(const GaussianSet& base, const CameraView& view, double focus,
                                           const CocMlp& net, const ParamStore& store, const EncodingFrame& frame,
                                           const CocConfig& cfg, CocTape* tape = nullptr);

/// Chains per-set gradients back to the base set, the focus distance and the network weights in `store`.
CocGrads generate_coc_sets_backward(const GaussianSet& base, const std::vector<GaussianGrads>& d_sets,
                                    const CocMlp& net, ParamStore& store, const EncodingFrame& frame,
                                    const CocConfig& cfg, const CocTape& tape);

}  // namespace cocosplat
