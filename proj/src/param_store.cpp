#include "cocosplat/nnet.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

namespace cocosplat {

Tensor& ParamStore::add(std::string name, std::vector<Eigen::Index> shape, double lr, double eps) {
  if (contains(name)) throw std::invalid_argument("ParamStore: duplicate tensor '" + name + "'");
  const Eigen::Index n =
      std::accumulate(shape.begin(), shape.end(), Eigen::Index{1}, [](Eigen::Index a, Eigen::Index b) { return a * b; });
  Tensor& t = tensors_.emplace_back();
  t.name = std::move(name);
  t.shape = std::move(shape);
  t.value = Eigen::VectorXd::Zero(n);
  t.grad = Eigen::VectorXd::Zero(n);
  t.adam_m = Eigen::VectorXd::Zero(n);
  t.adam_v = Eigen::VectorXd::Zero(n);
  t.lr = lr;
  t.eps = eps;
  return t;
}

Tensor& ParamStore::at(std::string_view name) {
  for (auto& t : tensors_) {
    if (t.name == name) return t;
  }
  throw std::out_of_range("ParamStore: no tensor named '" + std::string(name) + "'");
}

const Tensor& ParamStore::at(std::string_view name) const { return const_cast<ParamStore*>(this)->at(name); }

bool ParamStore::contains(std::string_view name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return true;
  }
  return false;
}

void ParamStore::zero_grads() {
  for (auto& t : tensors_) {
    t.grad.setZero();
    t.touched = false;
  }
}

std::uint64_t ParamStore::checksum(std::string_view prefix) const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& t : tensors_) {
    if (!t.name.starts_with(prefix)) continue;
    for (Eigen::Index i = 0; i < t.value.size(); ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, t.value.data() + i, sizeof bits);
      h = (h ^ bits) * 1099511628211ULL;
    }
  }
  return h;
}

AdamReport adam_step(ParamStore& store, const LrSchedule& schedule, const AdamConfig& cfg) {
  AdamReport report;
  for (auto& t : store.tensors()) {
    if (!t.touched) continue;
    if (!t.grad.allFinite()) {
      report.skipped_non_finite.push_back(t.name);
      continue;
    }
    const double lr = schedule ? schedule(t) : t.lr;
    t.adam_step += 1.0;
    t.adam_m = cfg.beta1 * t.adam_m + (1.0 - cfg.beta1) * t.grad;
    t.adam_v = cfg.beta2 * t.adam_v + (1.0 - cfg.beta2) * t.grad.cwiseAbs2();
    const double bc1 = 1.0 - std::pow(cfg.beta1, t.adam_step);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t.adam_step);
    t.value.array() -= lr * (t.adam_m.array() / bc1) / ((t.adam_v.array() / bc2).sqrt() + t.eps);
    ++report.updated;
  }
  store.zero_grads();
  return report;
}

}  // namespace cocosplat
