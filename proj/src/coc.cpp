#include "cocosplat/coc.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace cocosplat {
namespace {

constexpr double kMinDepth = 1e-6;
constexpr double kMinDirNorm = 1e-8;

double attenuation(const CocConfig& cfg) { return std::min(cfg.k_multiplier, 1.0); }

double sign_of(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

}  // namespace

void CocConfig::validate() const {
  if (sets < 1) throw std::invalid_argument("coc: set count must be >= 1");
  if (!(delta_s_max >= 1.0) || !(delta_q_max >= 1.0)) throw std::invalid_argument("coc: delta maxima must be >= 1");
  if (!(k_multiplier >= 0.0) || !std::isfinite(k_multiplier)) {
    throw std::invalid_argument("coc: k multiplier must be finite and >= 0");
  }
  if (!(k_unit > 0.0) || !(sigma_ceiling > 0.0) || !(fixed_radius >= 0.0)) {
    throw std::invalid_argument("coc: scene constants must be positive");
  }
}

EncodingFrame EncodingFrame::fit(const RowMatX3& points) {
  EncodingFrame f;
  if (points.rows() == 0) return f;
  const Eigen::Vector3d lo = points.colwise().minCoeff().transpose();
  const Eigen::Vector3d hi = points.colwise().maxCoeff().transpose();
  f.center = 0.5 * (lo + hi);
  const double r = 0.5 * (hi - lo).norm();
  f.radius = r > 1e-9 ? r : 1.0;
  return f;
}

Eigen::VectorXd gaussian_depth(const RowMatX3& mean, const Eigen::Vector3d& camera) {
  return (mean.rowwise() - camera.transpose()).rowwise().norm();
}

double coc_diameter_exact(double depth, double focus, double focal_length, double aperture) {
  if (!(focus > focal_length) || !(focal_length > 0)) {
    throw std::invalid_argument("coc_diameter_exact: focus distance must exceed the focal length");
  }
  if (!(depth > 0) || !(aperture >= 0)) throw std::invalid_argument("coc_diameter_exact: bad depth or aperture");
  return focal_length * aperture * std::abs(depth - focus) / (depth * (focus - focal_length));
}

Eigen::VectorXd coc_diameter(const Eigen::VectorXd& depth, double focus, const Eigen::VectorXd& k) {
  if (depth.size() != k.size()) throw std::invalid_argument("coc_diameter: depth and K differ in length");
  return k.array() * (depth.array().max(kMinDepth).inverse() - 1.0 / focus).abs();
}

CocOutputs activate(const CocRaw& raw, const CocConfig& cfg) {
  const Eigen::Index n = raw.k.size();
  const int m = cfg.sets;
  if (raw.beta.cols() != m || raw.dir.cols() != 3 * m || raw.delta.cols() != 7 * m) {
    throw std::invalid_argument("coc: head widths do not match the set count");
  }
  const double a = attenuation(cfg);
  CocOutputs out;
  out.k.resize(n);
  out.beta.resize(n, m);
  out.dir.resize(n, 3 * m);
  out.ds.resize(n, 3 * m);
  out.dq.resize(n, 4 * m);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.k[i] = (cfg.use_aperture ? softplus(raw.k[i]) : 1.0) * cfg.k_unit * cfg.k_multiplier;
    for (int s = 0; s < m; ++s) {
      out.beta(i, s) = cfg.use_beta ? sigmoid(raw.beta(i, s)) : 1.0;
      const Eigen::Vector3d d = raw.dir.row(i).segment<3>(3 * s).transpose();
      const double len = d.norm();
      const Eigen::Vector3d unit = len < kMinDirNorm ? Eigen::Vector3d::UnitX() : Eigen::Vector3d(d / len);
      out.dir.row(i).segment<3>(3 * s) = unit.transpose();
      for (int c = 0; c < 3; ++c) {
        out.ds(i, 3 * s + c) = 1.0 + a * (cfg.delta_s_max - 1.0) * sigmoid(raw.delta(i, 7 * s + c));
      }
      for (int c = 0; c < 4; ++c) {
        out.dq(i, 4 * s + c) = 1.0 + a * (cfg.delta_q_max - 1.0) * sigmoid(raw.delta(i, 7 * s + 3 + c));
      }
    }
  }
  return out;
}

RowMatXd circular_directions(const RowMatX3& mean, const Eigen::Vector3d& camera, int sets) {
  RowMatXd dirs(mean.rows(), 3 * sets);
  for (Eigen::Index i = 0; i < mean.rows(); ++i) {
    Eigen::Vector3d axis = mean.row(i).transpose() - camera;
    axis = axis.norm() > kMinDepth ? axis.normalized() : Eigen::Vector3d::UnitZ();
    Eigen::Index least;
    axis.cwiseAbs().minCoeff(&least);
    const Eigen::Vector3d u = axis.cross(Eigen::Vector3d::Unit(least)).normalized();
    const Eigen::Vector3d v = axis.cross(u);
    for (int s = 0; s < sets; ++s) {
      const double t = 2.0 * std::numbers::pi * s / sets;
      dirs.row(i).segment<3>(3 * s) = (std::cos(t) * u + std::sin(t) * v).transpose();
    }
  }
  return dirs;
}

RowMatX3 circular_directions_backward(const RowMatX3& mean, const Eigen::Vector3d& camera, int sets,
                                      const RowMatXd& d_dirs) {
  RowMatX3 d_mean = RowMatX3::Zero(mean.rows(), 3);
  for (Eigen::Index i = 0; i < mean.rows(); ++i) {
    const Eigen::Vector3d rel = mean.row(i).transpose() - camera;
    if (rel.norm() <= kMinDepth) continue;
    const Eigen::Vector3d axis = rel.normalized();
    Eigen::Index least;
    axis.cwiseAbs().minCoeff(&least);
    const Eigen::Vector3d e = Eigen::Vector3d::Unit(least);
    const Eigen::Vector3d w = axis.cross(e);
    const Eigen::Vector3d u = w.normalized();
    Eigen::Vector3d du = Eigen::Vector3d::Zero(), dv = Eigen::Vector3d::Zero();
    for (int s = 0; s < sets; ++s) {
      const double t = 2.0 * std::numbers::pi * s / sets;
      const Eigen::Vector3d g = d_dirs.row(i).segment<3>(3 * s).transpose();
      du += std::cos(t) * g;
      dv += std::sin(t) * g;
    }
    // v = axis x u, u = normalize(axis x e)
    Eigen::Vector3d d_axis = u.cross(dv);
    du += dv.cross(axis);
    const Eigen::Vector3d dw = normalize_backward(w, du);
    d_axis += e.cross(dw);
    d_mean.row(i) = normalize_backward(rel, d_axis).transpose();
  }
  return d_mean;
}

std::vector<RowMatX3> make_coc_offsets(const Eigen::VectorXd& sigma, const CocOutputs& out, const CocConfig& cfg) {
  std::vector<RowMatX3> offsets;
  offsets.reserve(static_cast<std::size_t>(cfg.sets));
  for (int s = 0; s < cfg.sets; ++s) {
    RowMatX3 d(sigma.size(), 3);
    for (Eigen::Index i = 0; i < sigma.size(); ++i) {
      const double beta = cfg.use_beta ? out.beta(i, s) : 1.0;
      d.row(i) = 0.5 * sigma[i] * beta * out.dir.row(i).segment<3>(3 * s);
    }
    offsets.push_back(std::move(d));
  }
  return offsets;
}

std::vector<GaussianSet> generate_coc_sets(const GaussianSet& base, const CameraView& view, double focus,
                                           const CocMlp& net, const ParamStore& store, const EncodingFrame& frame,
                                           const CocConfig& cfg, CocTape* tape) {
  cfg.validate();
  if (base.empty()) throw std::invalid_argument("generate_coc_sets: empty base set");
  if (net.sets() != cfg.sets) throw std::invalid_argument("generate_coc_sets: network set count differs from config");
  if (!(focus > 0) || !std::isfinite(focus)) throw std::invalid_argument("generate_coc_sets: focus must be > 0");
  const Eigen::Index n = base.size();
  const Eigen::Vector3d camera = view.center();

  CocTape local;
  CocTape& t = tape ? *tape : local;
  t.focus = focus;
  t.camera = camera;
  t.quat_unit.resize(n, 4);
  for (Eigen::Index i = 0; i < n; ++i) {
    t.quat_unit.row(i) = Quaternion<double>(Eigen::Vector4d(base.rot.row(i).transpose())).normalized().coeffs();
  }
  t.input.camera = frame.to_local(camera);
  t.input.mean = (base.mean.rowwise() - frame.center.transpose()) / frame.radius;
  t.input.log_scale = base.log_scale;
  t.input.quat = t.quat_unit;

  t.raw = net.forward(store, t.input, &t.mlp);
  t.out = activate(t.raw, cfg);
  if (!cfg.learn_direction) t.out.dir = circular_directions(base.mean, camera, cfg.sets);

  t.depth = gaussian_depth(base.mean, camera);
  if (cfg.use_coc) {
    t.sigma_raw = coc_diameter(t.depth, focus, t.out.k);
    t.sigma = cfg.use_aperture ? t.sigma_raw : t.sigma_raw.cwiseMin(cfg.sigma_ceiling);
  } else {
    t.sigma_raw = Eigen::VectorXd::Constant(n, 2.0 * cfg.fixed_radius * cfg.k_multiplier);
    t.sigma = t.sigma_raw;
  }

  const std::vector<RowMatX3> offsets = make_coc_offsets(t.sigma, t.out, cfg);
  std::vector<GaussianSet> sets;
  sets.reserve(static_cast<std::size_t>(cfg.sets));
  for (int s = 0; s < cfg.sets; ++s) {
    GaussianSet g = base;
    g.mean += offsets[static_cast<std::size_t>(s)];
    g.log_scale.array() += t.out.ds.middleCols(3 * s, 3).array().log();
    // Stored unnormalized; the renderer normalizes, so this is normalize(q_B * dq) on use.
    g.rot.array() *= t.out.dq.middleCols(4 * s, 4).array();
    sets.push_back(std::move(g));
  }
  return sets;
}

CocGrads generate_coc_sets_backward(const GaussianSet& base, const std::vector<GaussianGrads>& d_sets,
                                    const CocMlp& net, ParamStore& store, const EncodingFrame& frame,
                                    const CocConfig& cfg, const CocTape& t) {
  if (static_cast<int>(d_sets.size()) != cfg.sets) {
    throw std::invalid_argument("generate_coc_sets_backward: expected " + std::to_string(cfg.sets) + " gradient sets");
  }
  const Eigen::Index n = base.size();
  const double a = attenuation(cfg);
  CocGrads g;
  g.base = GaussianSet::zeros_like(base);
  CocRaw d_raw = CocRaw::zeros(n, cfg.sets);
  Eigen::VectorXd d_sigma = Eigen::VectorXd::Zero(n);
  RowMatXd d_fixed_dirs = RowMatXd::Zero(n, cfg.learn_direction ? 0 : 3 * cfg.sets);

  for (int s = 0; s < cfg.sets; ++s) {
    const GaussianGrads& gs = d_sets[static_cast<std::size_t>(s)];
    if (gs.size() != n) throw std::invalid_argument("generate_coc_sets_backward: gradient set size mismatch");
    g.base.mean += gs.mean;
    g.base.log_scale += gs.log_scale;
    g.base.opacity_logit += gs.opacity_logit;
    g.base.sh += gs.sh;
    for (Eigen::Index i = 0; i < n; ++i) {
      // Offsets: (sigma / 2) beta d.
      const Eigen::Vector3d gm = gs.mean.row(i).transpose();
      const Eigen::Vector3d dir = t.out.dir.row(i).segment<3>(3 * s).transpose();
      const double beta = t.out.beta(i, s);
      const double sig = t.sigma[i];
      d_sigma[i] += 0.5 * beta * dir.dot(gm);
      if (cfg.use_beta) d_raw.beta(i, s) = 0.5 * sig * dir.dot(gm) * beta * (1.0 - beta);
      const Eigen::Vector3d d_dir = 0.5 * sig * beta * gm;
      if (cfg.learn_direction) {
        const Eigen::Vector3d rd = t.raw.dir.row(i).segment<3>(3 * s).transpose();
        if (rd.norm() >= kMinDirNorm) d_raw.dir.row(i).segment<3>(3 * s) = normalize_backward(rd, d_dir).transpose();
      } else {
        d_fixed_dirs.row(i).segment<3>(3 * s) = d_dir.transpose();
      }

      // Scales: log s_B + log ds.
      for (int c = 0; c < 3; ++c) {
        const double ds = t.out.ds(i, 3 * s + c);
        const double sg = sigmoid(t.raw.delta(i, 7 * s + c));
        d_raw.delta(i, 7 * s + c) = gs.log_scale(i, c) / ds * a * (cfg.delta_s_max - 1.0) * sg * (1.0 - sg);
      }

      // Rotations: q_B * dq.
      const Eigen::Vector4d q = base.rot.row(i).transpose();
      const Eigen::Vector4d dq = t.out.dq.row(i).segment<4>(4 * s).transpose();
      const Eigen::Vector4d gr = gs.rot.row(i).transpose();
      g.base.rot.row(i) += gr.cwiseProduct(dq).transpose();
      for (int c = 0; c < 4; ++c) {
        const double sg = sigmoid(t.raw.delta(i, 7 * s + 3 + c));
        d_raw.delta(i, 7 * s + 3 + c) = gr[c] * q[c] * a * (cfg.delta_q_max - 1.0) * sg * (1.0 - sg);
      }
    }
  }

  // sigma = K |1/d - 1/d_F|, only when it depends on anything learnable.
  if (cfg.use_coc) {
    for (Eigen::Index i = 0; i < n; ++i) {
      if (!cfg.use_aperture && t.sigma_raw[i] > cfg.sigma_ceiling) continue;
      const double d = t.depth[i];
      if (d <= kMinDepth) continue;
      const double gap = 1.0 / d - 1.0 / t.focus;
      const double sgn = sign_of(gap);
      const double k = t.out.k[i];
      g.focus += d_sigma[i] * k * sgn / (t.focus * t.focus);
      const double d_depth = -d_sigma[i] * k * sgn / (d * d);
      g.base.mean.row(i) += d_depth * (base.mean.row(i) - t.camera.transpose()) / d;
      if (cfg.use_aperture) {
        d_raw.k[i] = d_sigma[i] * std::abs(gap) * cfg.k_unit * cfg.k_multiplier * sigmoid(t.raw.k[i]);
      }
    }
  }

  if (!cfg.learn_direction) g.base.mean += circular_directions_backward(base.mean, t.camera, cfg.sets, d_fixed_dirs);

  const CocMlp::InputGrads gin = net.backward(store, t.input, t.mlp, d_raw);
  g.base.mean += gin.mean / frame.radius;
  g.base.log_scale += gin.log_scale;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Vector4d raw = base.rot.row(i).transpose();
    g.base.rot.row(i) += normalize_backward(raw, Eigen::Vector4d(gin.quat.row(i).transpose())).transpose();
  }
  return g;
}

}  // namespace cocosplat
