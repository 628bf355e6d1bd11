#pragma once

#include "cocosplat/types.hpp"

#include <vector>

namespace cocosplat {

/// Per-pixel softmax over the channel axis of (M+1) x HW logits.
Eigen::MatrixXd softmax_weights(const Eigen::MatrixXd& logits);

/// Pixelwise sum of images weighted by softmax(logits). The last image is the base render; the
/// sum is evaluated as base + sum_m w_m (I_m - base), which reproduces the base exactly when every
/// input is identical.
Image weighted_sum(const std::vector<Image>& images, const Eigen::MatrixXd& logits);

/// Unweighted mean, i.e. weighted_sum with zero logits.
Image average_fallback(const std::vector<Image>& images);

struct CompositeGrads {
  std::vector<Image> images;
  Eigen::MatrixXd logits;
};

CompositeGrads weighted_sum_backward(const std::vector<Image>& images, const Eigen::MatrixXd& logits,
                                     const Image& d_out);
std::vector<Image> average_fallback_backward(std::size_t count, const Image& d_out);

}  // namespace cocosplat
