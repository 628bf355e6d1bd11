#include "cocosplat/nnet.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace cocosplat {
namespace {

using ConstWeightMap = Eigen::Map<const RowMatXd>;
using WeightMap = Eigen::Map<RowMatXd>;

std::string conv_name(int i) { return std::string(WeightCnn::kPrefix) + "conv" + std::to_string(i); }
std::string out_name() { return std::string(WeightCnn::kPrefix) + "out"; }

/// dst(:, (x, y)) = src(:, (x + dx, y + dy)), zero outside the image. With `adjoint`, scatters instead:
/// dst(:, (x + dx, y + dy)) += src(:, (x, y)).
void shift(const Eigen::MatrixXd& src, Eigen::MatrixXd& dst, int w, int h, int dx, int dy, bool adjoint) {
  if (!adjoint) dst.setZero(src.rows(), src.cols());
  const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
  if (x0 >= x1) return;
  for (int y = std::max(0, -dy); y < std::min(h, h - dy); ++y) {
    const Eigen::Index to = static_cast<Eigen::Index>(y) * w + x0;
    const Eigen::Index from = static_cast<Eigen::Index>(y + dy) * w + x0 + dx;
    if (adjoint) {
      dst.middleCols(from, x1 - x0) += src.middleCols(to, x1 - x0);
    } else {
      dst.middleCols(to, x1 - x0) = src.middleCols(from, x1 - x0);
    }
  }
}

/// 3x3 zero-padded convolution as nine shifted GEMMs; weights are (Cout x 9*Cin), tap-major.
Eigen::MatrixXd conv3x3(const Eigen::MatrixXd& act, const ConstWeightMap& wm, const Eigen::VectorXd& bias, int w, int h) {
  const Eigen::Index cin = act.rows();
  Eigen::MatrixXd out = bias.replicate(1, act.cols());
  Eigen::MatrixXd shifted;
  for (int k = 0; k < 9; ++k) {
    shift(act, shifted, w, h, k % 3 - 1, k / 3 - 1, false);
    out.noalias() += wm.middleCols(k * cin, cin) * shifted;
  }
  return out;
}

void init_uniform(Eigen::VectorXd& v, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = u(rng);
}

}  // namespace

WeightCnn::WeightCnn(int sets, int channels, int conv_layers)
    : sets_(sets), channels_(channels), conv_layers_(conv_layers) {
  if (sets < 1 || channels < 1 || conv_layers < 1) throw std::invalid_argument("WeightCnn: bad architecture");
}

void WeightCnn::register_params(ParamStore& store, std::uint64_t seed, double lr) const {
  std::mt19937_64 rng(seed);
  int cin = 3 * outputs();
  for (int i = 0; i < conv_layers_; ++i) {
    Tensor& w = store.add(conv_name(i) + ".w", {channels_, 9 * cin}, lr);
    init_uniform(w.value, std::sqrt(6.0 / (9.0 * cin)), rng);
    store.add(conv_name(i) + ".b", {channels_}, lr);
    cin = channels_;
  }
  Tensor& w = store.add(out_name() + ".w", {outputs(), channels_}, lr);
  init_uniform(w.value, std::sqrt(6.0 / channels_), rng);
  store.add(out_name() + ".b", {outputs()}, lr);
}

Eigen::MatrixXd WeightCnn::forward(const ParamStore& store, const std::vector<Image>& images, Tape* tape) const {
  if (static_cast<int>(images.size()) != outputs()) {
    throw std::invalid_argument("WeightCnn: expected " + std::to_string(outputs()) + " images, got " +
                                std::to_string(images.size()));
  }
  const int w = images.front().width, h = images.front().height;
  for (const Image& img : images) require_same_shape(images.front(), img, "WeightCnn");
  const Eigen::Index hw = static_cast<Eigen::Index>(w) * h;

  Eigen::MatrixXd act(3 * outputs(), hw);
  for (int j = 0; j < outputs(); ++j) act.middleRows(3 * j, 3) = images[static_cast<std::size_t>(j)].rgb.matrix().transpose();

  if (tape) {
    tape->width = w;
    tape->height = h;
    tape->inputs.clear();
    tape->pre.clear();
  }
  for (int i = 0; i < conv_layers_; ++i) {
    const Tensor& wt = store.at(conv_name(i) + ".w");
    const Tensor& bt = store.at(conv_name(i) + ".b");
    Eigen::MatrixXd pre = conv3x3(act, ConstWeightMap(wt.value.data(), wt.shape[0], wt.shape[1]), bt.value, w, h);
    if (tape) tape->inputs.push_back(std::move(act));
    act = pre.cwiseMax(0.0);
    if (tape) tape->pre.push_back(std::move(pre));
  }
  const Tensor& wo = store.at(out_name() + ".w");
  const Tensor& bo = store.at(out_name() + ".b");
  Eigen::MatrixXd logits = bo.value.replicate(1, hw);
  logits.noalias() += ConstWeightMap(wo.value.data(), wo.shape[0], wo.shape[1]) * act;
  if (tape) tape->last = std::move(act);
  return logits;
}

std::vector<Image> WeightCnn::backward(ParamStore& store, const Tape& tape, const Eigen::MatrixXd& d_logits) const {
  const int w = tape.width, h = tape.height;
  Tensor& wo = store.at(out_name() + ".w");
  Tensor& bo = store.at(out_name() + ".b");
  WeightMap(wo.accumulate().data(), wo.shape[0], wo.shape[1]).noalias() += d_logits * tape.last.transpose();
  bo.accumulate() += d_logits.rowwise().sum();
  Eigen::MatrixXd d_act = ConstWeightMap(wo.value.data(), wo.shape[0], wo.shape[1]).transpose() * d_logits;

  Eigen::MatrixXd shifted, tap_grad;
  for (int i = conv_layers_ - 1; i >= 0; --i) {
    const auto idx = static_cast<std::size_t>(i);
    const Eigen::MatrixXd d_pre = (tape.pre[idx].array() > 0.0).cast<double>() * d_act.array();
    const Eigen::MatrixXd& input = tape.inputs[idx];
    const Eigen::Index cin = input.rows();
    Tensor& wt = store.at(conv_name(i) + ".w");
    Tensor& bt = store.at(conv_name(i) + ".b");
    WeightMap d_w(wt.accumulate().data(), wt.shape[0], wt.shape[1]);
    const ConstWeightMap wm(wt.value.data(), wt.shape[0], wt.shape[1]);
    bt.accumulate() += d_pre.rowwise().sum();
    Eigen::MatrixXd d_input = Eigen::MatrixXd::Zero(cin, input.cols());
    for (int k = 0; k < 9; ++k) {
      const int dx = k % 3 - 1, dy = k / 3 - 1;
      shift(input, shifted, w, h, dx, dy, false);
      d_w.middleCols(k * cin, cin).noalias() += d_pre * shifted.transpose();
      tap_grad.noalias() = wm.middleCols(k * cin, cin).transpose() * d_pre;
      shift(tap_grad, d_input, w, h, dx, dy, true);
    }
    d_act = std::move(d_input);
  }

  std::vector<Image> grads;
  for (int j = 0; j < outputs(); ++j) {
    Image g(w, h);
    g.rgb = d_act.middleRows(3 * j, 3).transpose().array();
    grads.push_back(std::move(g));
  }
  return grads;
}

}  // namespace cocosplat
