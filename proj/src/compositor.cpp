#include "cocosplat/compositor.hpp"

#include <stdexcept>
#include <string>

namespace cocosplat {
namespace {

void check_stack(const std::vector<Image>& images, const char* what) {
  if (images.empty()) throw std::invalid_argument(std::string(what) + ": no images");
  for (const Image& img : images) require_same_shape(images.front(), img, what);
}

}  // namespace

Eigen::MatrixXd softmax_weights(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd w = logits.rowwise() - logits.colwise().maxCoeff();
  w = w.array().exp();
  w.array().rowwise() /= w.colwise().sum().array();
  return w;
}

Image weighted_sum(const std::vector<Image>& images, const Eigen::MatrixXd& logits) {
  check_stack(images, "weighted_sum");
  const Image& base = images.back();
  if (logits.rows() != static_cast<Eigen::Index>(images.size()) || logits.cols() != base.pixels()) {
    throw std::invalid_argument("weighted_sum: logits must be (M+1) x HW");
  }
  const Eigen::MatrixXd w = softmax_weights(logits);
  Image out = base;
  for (std::size_t j = 0; j + 1 < images.size(); ++j) {
    out.rgb += (images[j].rgb - base.rgb).colwise() * w.row(static_cast<Eigen::Index>(j)).transpose().array();
  }
  return out;
}

Image average_fallback(const std::vector<Image>& images) {
  check_stack(images, "average_fallback");
  const Image& base = images.back();
  const double w = 1.0 / static_cast<double>(images.size());
  Image out = base;
  for (std::size_t j = 0; j + 1 < images.size(); ++j) out.rgb += w * (images[j].rgb - base.rgb);
  return out;
}

CompositeGrads weighted_sum_backward(const std::vector<Image>& images, const Eigen::MatrixXd& logits,
                                     const Image& d_out) {
  check_stack(images, "weighted_sum_backward");
  require_same_shape(images.front(), d_out, "weighted_sum_backward");
  const Eigen::MatrixXd w = softmax_weights(logits);
  CompositeGrads g;
  Eigen::MatrixXd d_w(w.rows(), w.cols());
  for (std::size_t j = 0; j < images.size(); ++j) {
    const auto row = static_cast<Eigen::Index>(j);
    Image gi(d_out.width, d_out.height);
    gi.rgb = d_out.rgb.colwise() * w.row(row).transpose().array();
    g.images.push_back(std::move(gi));
    d_w.row(row) = (images[j].rgb * d_out.rgb).rowwise().sum().matrix().transpose();
  }
  const Eigen::RowVectorXd mix = (w.array() * d_w.array()).colwise().sum();
  g.logits = w.array() * (d_w.rowwise() - mix).array();
  return g;
}

std::vector<Image> average_fallback_backward(std::size_t count, const Image& d_out) {
  Image gi = d_out;
  gi.rgb /= static_cast<double>(count);
  return std::vector<Image>(count, gi);
}

}  // namespace cocosplat
