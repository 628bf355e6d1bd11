#pragma once

#include "cocosplat/types.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cocosplat {

/// One named parameter tensor with its gradient and Adam state.
struct Tensor {
  std::string name;
  std::vector<Eigen::Index> shape;
  Eigen::VectorXd value;
  Eigen::VectorXd grad;
  Eigen::VectorXd adam_m;
  Eigen::VectorXd adam_v;
  double adam_step = 0;
  double lr = 1e-3;
  double eps = 1e-8;
  /// Set when a gradient was written since the last zero_grads(); only touched tensors are stepped.
  bool touched = false;

  Eigen::Index size() const { return value.size(); }
  /// Marks the tensor as receiving a gradient this step and returns the buffer.
  Eigen::VectorXd& accumulate() {
    touched = true;
    return grad;
  }
};

/// Flat named tensors. References returned by add()/at() stay valid for the store's lifetime.
class ParamStore {
 public:
  Tensor& add(std::string name, std::vector<Eigen::Index> shape, double lr, double eps = 1e-8);
  Tensor& at(std::string_view name);
  const Tensor& at(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::deque<Tensor>& tensors() { return tensors_; }
  const std::deque<Tensor>& tensors() const { return tensors_; }

  void zero_grads();
  /// Order-sensitive hash of parameter values whose names start with `prefix`.
  std::uint64_t checksum(std::string_view prefix = {}) const;

 private:
  std::deque<Tensor> tensors_;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
};

struct AdamReport {
  std::size_t updated = 0;
  std::vector<std::string> skipped_non_finite;
};

/// Learning rate for a tensor at the current step; defaults to the tensor's own `lr`.
using LrSchedule = std::function<double(const Tensor&)>;

/// Bias-corrected Adam over every touched tensor, then zero_grads(). Tensors whose gradient
/// contains a non-finite value are left untouched and reported.
AdamReport adam_step(ParamStore& store, const LrSchedule& schedule = {}, const AdamConfig& cfg = {});

/// (sin(2^k pi p), cos(2^k pi p)) for k < frequencies, interleaved per component:
/// out[(c * L + k) * 2] = sin, out[(c * L + k) * 2 + 1] = cos.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> positional_encode(const Vec3<Scalar>& p, int frequencies) {
  if (frequencies < 1) throw std::invalid_argument("positional_encode: frequency count must be >= 1");
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out(6 * frequencies);
  for (int c = 0; c < 3; ++c) {
    Scalar f = Scalar(EIGEN_PI);
    for (int k = 0; k < frequencies; ++k, f *= 2) {
      out[(c * frequencies + k) * 2] = std::sin(f * p[c]);
      out[(c * frequencies + k) * 2 + 1] = std::cos(f * p[c]);
    }
  }
  return out;
}

template <typename Scalar, typename GradVec>
Vec3<Scalar> positional_encode_backward(const Vec3<Scalar>& p, int frequencies, const GradVec& d_out) {
  Vec3<Scalar> d = Vec3<Scalar>::Zero();
  for (int c = 0; c < 3; ++c) {
    Scalar f = Scalar(EIGEN_PI);
    for (int k = 0; k < frequencies; ++k, f *= 2) {
      d[c] += f * (std::cos(f * p[c]) * d_out[(c * frequencies + k) * 2] -
                   std::sin(f * p[c]) * d_out[(c * frequencies + k) * 2 + 1]);
    }
  }
  return d;
}

/// Raw (pre-activation) head outputs of the CoC network for N Gaussians and M sets.
struct CocRaw {
  Eigen::VectorXd k;  // N
  RowMatXd beta;      // N x M
  RowMatXd dir;       // N x 3M, set m at columns [3m, 3m+3)
  RowMatXd delta;     // N x 7M, set m at columns [7m, 7m+7): 3 scale factors then 4 quaternion factors

  static CocRaw zeros(Eigen::Index n, int sets);
};

/// Shared MLP trunk (3 x 64, ReLU) with four linear heads: K, beta, direction, delta(s, q).
/// Per-Gaussian input: [gamma(x_cam), gamma(mean), log_scale, unit quaternion].
class CocMlp {
 public:
  struct Input {
    Eigen::Vector3d camera;  // encoding-frame coordinates
    RowMatX3 mean;           // encoding-frame coordinates
    RowMatX3 log_scale;
    RowMatX4 quat;           // unit quaternions
  };
  struct InputGrads {
    RowMatX3 mean;
    RowMatX3 log_scale;
    RowMatX4 quat;
  };
  struct Tape {
    RowMatXd x;
    std::vector<RowMatXd> pre;   // pre-activations of the trunk layers
    std::vector<RowMatXd> post;  // post-ReLU activations of the trunk layers
  };

  static constexpr std::string_view kPrefix = "mlp.";

  explicit CocMlp(int sets, int frequencies = 4, int hidden = 64, int depth = 3);

  int sets() const { return sets_; }
  int frequencies() const { return frequencies_; }
  int input_width() const { return 12 * frequencies_ + 7; }

  /// Adds the network tensors; K-head bias starts at softplus^-1(k_init).
  void register_params(ParamStore& store, std::uint64_t seed, double lr = 1e-3, double k_init = 0.01) const;

  CocRaw forward(const ParamStore& store, const Input& in, Tape* tape = nullptr) const;

  /// Accumulates weight gradients into `store` and returns gradients w.r.t. the inputs.
  InputGrads backward(ParamStore& store, const Input& in, const Tape& tape, const CocRaw& d_raw) const;

 private:
  int sets_, frequencies_, hidden_, depth_;
  std::vector<int> head_widths_;
};

/// Shallow CNN producing per-pixel logits over the (M+1) rendered images: four 3x3 conv layers
/// with ReLU and zero padding, then a 1x1 projection to M+1 channels.
class WeightCnn {
 public:
  struct Tape {
    int width = 0, height = 0;
    std::vector<Eigen::MatrixXd> inputs;  // input of each 3x3 layer (C x HW)
    std::vector<Eigen::MatrixXd> pre;   // pre-activations (C x HW)
    Eigen::MatrixXd last;               // input of the 1x1 layer
  };

  static constexpr std::string_view kPrefix = "cnn.";

  explicit WeightCnn(int sets, int channels = 64, int conv_layers = 4);

  int outputs() const { return sets_ + 1; }
  void register_params(ParamStore& store, std::uint64_t seed, double lr = 1e-3) const;

  /// Logits, (M+1) x (H*W), column p is pixel p.
  Eigen::MatrixXd forward(const ParamStore& store, const std::vector<Image>& images, Tape* tape = nullptr) const;

  /// Accumulates weight gradients and returns gradients w.r.t. each input image.
  std::vector<Image> backward(ParamStore& store, const Tape& tape, const Eigen::MatrixXd& d_logits) const;

 private:
  int sets_, channels_, conv_layers_;
};

}  // namespace cocosplat
