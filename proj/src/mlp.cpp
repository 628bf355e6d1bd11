#include "cocosplat/nnet.hpp"

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace cocosplat {
namespace {

using WeightMap = Eigen::Map<RowMatXd>;
using ConstWeightMap = Eigen::Map<const RowMatXd>;

const char* const kHeadNames[] = {"head_k", "head_beta", "head_dir", "head_delta"};

std::string layer_name(int i) { return std::string(CocMlp::kPrefix) + "trunk" + std::to_string(i); }
std::string head_name(int h) { return std::string(CocMlp::kPrefix) + kHeadNames[h]; }

void init_uniform(Eigen::VectorXd& v, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = u(rng);
}

RowMatXd relu(const RowMatXd& x) { return x.cwiseMax(0.0); }

}  // namespace

CocRaw CocRaw::zeros(Eigen::Index n, int sets) {
  CocRaw r;
  r.k = Eigen::VectorXd::Zero(n);
  r.beta = RowMatXd::Zero(n, sets);
  r.dir = RowMatXd::Zero(n, 3 * sets);
  r.delta = RowMatXd::Zero(n, 7 * sets);
  return r;
}

CocMlp::CocMlp(int sets, int frequencies, int hidden, int depth)
    : sets_(sets), frequencies_(frequencies), hidden_(hidden), depth_(depth), head_widths_{1, sets, 3 * sets, 7 * sets} {
  if (sets < 1) throw std::invalid_argument("CocMlp: set count must be >= 1");
  if (frequencies < 1 || hidden < 1 || depth < 1) throw std::invalid_argument("CocMlp: bad architecture");
}

void CocMlp::register_params(ParamStore& store, std::uint64_t seed, double lr, double k_init) const {
  std::mt19937_64 rng(seed);
  int fan_in = input_width();
  for (int i = 0; i < depth_; ++i) {
    Tensor& w = store.add(layer_name(i) + ".w", {hidden_, fan_in}, lr);
    init_uniform(w.value, std::sqrt(6.0 / fan_in), rng);
    store.add(layer_name(i) + ".b", {hidden_}, lr);
    fan_in = hidden_;
  }
  for (int h = 0; h < 4; ++h) {
    Tensor& w = store.add(head_name(h) + ".w", {head_widths_[static_cast<std::size_t>(h)], hidden_}, lr);
    init_uniform(w.value, std::sqrt(6.0 / hidden_), rng);
    Tensor& b = store.add(head_name(h) + ".b", {head_widths_[static_cast<std::size_t>(h)]}, lr);
    if (h == 0) b.value.setConstant(inverse_softplus(k_init));
  }
}

CocRaw CocMlp::forward(const ParamStore& store, const Input& in, Tape* tape) const {
  const Eigen::Index n = in.mean.rows();
  if (n == 0) throw std::invalid_argument("CocMlp: no Gaussians");
  if (in.log_scale.rows() != n || in.quat.rows() != n) {
    throw std::invalid_argument("CocMlp: per-Gaussian inputs differ in length");
  }
  if (!in.camera.allFinite()) throw std::invalid_argument("CocMlp: non-finite camera position");

  const int enc = 6 * frequencies_;
  RowMatXd x(n, input_width());
  const Eigen::VectorXd cam_enc = positional_encode<double>(in.camera, frequencies_);
  for (Eigen::Index i = 0; i < n; ++i) {
    x.row(i).segment(0, enc) = cam_enc.transpose();
    x.row(i).segment(enc, enc) = positional_encode<double>(in.mean.row(i).transpose(), frequencies_).transpose();
    x.row(i).segment(2 * enc, 3) = in.log_scale.row(i);
    x.row(i).segment(2 * enc + 3, 4) = in.quat.row(i);
  }

  RowMatXd h = x;
  std::vector<RowMatXd> pre, post;
  for (int i = 0; i < depth_; ++i) {
    const Tensor& w = store.at(layer_name(i) + ".w");
    const Tensor& b = store.at(layer_name(i) + ".b");
    const ConstWeightMap wm(w.value.data(), w.shape[0], w.shape[1]);
    RowMatXd z = h * wm.transpose();
    z.rowwise() += b.value.transpose();
    h = relu(z);
    if (tape) {
      pre.push_back(std::move(z));
      post.push_back(h);
    }
  }

  CocRaw out;
  RowMatXd heads[4];
  for (int k = 0; k < 4; ++k) {
    const Tensor& w = store.at(head_name(k) + ".w");
    const Tensor& b = store.at(head_name(k) + ".b");
    const ConstWeightMap wm(w.value.data(), w.shape[0], w.shape[1]);
    heads[k] = h * wm.transpose();
    heads[k].rowwise() += b.value.transpose();
  }
  out.k = heads[0].col(0);
  out.beta = std::move(heads[1]);
  out.dir = std::move(heads[2]);
  out.delta = std::move(heads[3]);

  if (tape) {
    tape->x = std::move(x);
    tape->pre = std::move(pre);
    tape->post = std::move(post);
  }
  return out;
}

CocMlp::InputGrads CocMlp::backward(ParamStore& store, const Input& in, const Tape& tape, const CocRaw& d_raw) const {
  const Eigen::Index n = tape.x.rows();
  const RowMatXd& top = tape.post.back();
  RowMatXd d_h = RowMatXd::Zero(n, hidden_);

  const RowMatXd d_heads[4] = {RowMatXd(d_raw.k), d_raw.beta, d_raw.dir, d_raw.delta};
  for (int k = 0; k < 4; ++k) {
    Tensor& w = store.at(head_name(k) + ".w");
    Tensor& b = store.at(head_name(k) + ".b");
    const ConstWeightMap wm(w.value.data(), w.shape[0], w.shape[1]);
    WeightMap(w.accumulate().data(), w.shape[0], w.shape[1]) += d_heads[k].transpose() * top;
    b.accumulate() += d_heads[k].colwise().sum().transpose();
    d_h += d_heads[k] * wm;
  }

  for (int i = depth_ - 1; i >= 0; --i) {
    const RowMatXd d_z = (tape.pre[static_cast<std::size_t>(i)].array() > 0.0).cast<double>() * d_h.array();
    const RowMatXd& below = i == 0 ? tape.x : tape.post[static_cast<std::size_t>(i - 1)];
    Tensor& w = store.at(layer_name(i) + ".w");
    Tensor& b = store.at(layer_name(i) + ".b");
    const ConstWeightMap wm(w.value.data(), w.shape[0], w.shape[1]);
    WeightMap(w.accumulate().data(), w.shape[0], w.shape[1]) += d_z.transpose() * below;
    b.accumulate() += d_z.colwise().sum().transpose();
    d_h = d_z * wm;
  }

  const int enc = 6 * frequencies_;
  InputGrads g;
  g.mean.resize(n, 3);
  g.log_scale = d_h.middleCols(2 * enc, 3);
  g.quat = d_h.middleCols(2 * enc + 3, 4);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::VectorXd d_enc = d_h.row(i).segment(enc, enc).transpose();
    g.mean.row(i) = positional_encode_backward<double>(in.mean.row(i).transpose(), frequencies_, d_enc).transpose();
  }
  return g;
}

}  // namespace cocosplat
