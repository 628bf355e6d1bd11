#include "cocosplat/renderer.hpp"

#include "cocosplat/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace cocosplat {
namespace {

constexpr int kTile = 16;
constexpr double kMinDet = 1e-12;

struct Splat {
  bool valid = false;
  Eigen::Vector3d cam;
  Eigen::Vector2d mean2d;
  Eigen::Matrix<double, 2, 3> jac;
  Eigen::Matrix3d cov3;
  Eigen::Matrix3d rotm;
  Eigen::Vector3d scale;
  Eigen::Vector4d qhat;
  Eigen::Matrix2d conic;
  double opacity = 0;
  Eigen::Vector3d color;
  Eigen::Vector3d color_raw;
  Eigen::Vector3d dir_raw;
  int x0 = 0, x1 = 0, y0 = 0, y1 = 0;  // half-open pixel box
};

struct Frame {
  std::vector<Splat> splats;
  std::vector<int> order;                   // visible splats, ascending depth
  std::vector<std::vector<int>> tile_lists; // per tile, indices into `splats` in depth order
  int tiles_x = 0, tiles_y = 0;
};

Splat project_one(const GaussianSet& set, Eigen::Index i, const CameraView& view, const Eigen::Matrix3d& w,
                  const Eigen::Vector3d& center, const RenderOptions& opts) {
  Splat s;
  const Eigen::Vector3d mu = set.mean.row(i).transpose();
  s.cam = w * mu + view.translation();
  if (!(s.cam.z() > opts.near_plane)) return s;

  const Eigen::Vector4d q = set.rot.row(i).transpose();
  const double qn = q.norm();
  if (!(qn > 0) || !std::isfinite(qn)) return s;
  s.qhat = q / qn;
  s.rotm = Quaternion<double>::quat_to_rotation(s.qhat);
  s.scale = set.log_scale.row(i).transpose().array().exp();
  const Eigen::Matrix3d m = s.rotm * s.scale.asDiagonal();
  s.cov3 = m * m.transpose();

  s.jac = projection_jacobian<double>(s.cam, view.fx, view.fy);
  const Eigen::Matrix<double, 2, 3> t = s.jac * w;
  Eigen::Matrix2d cov2 = t * s.cov3 * t.transpose();
  cov2(0, 1) = cov2(1, 0) = 0.5 * (cov2(0, 1) + cov2(1, 0));
  cov2.diagonal().array() += opts.dilation;
  const double det = cov2.determinant();
  if (!(det > kMinDet)) return s;
  s.conic << cov2(1, 1) / det, -cov2(0, 1) / det, -cov2(1, 0) / det, cov2(0, 0) / det;

  s.mean2d << view.fx * s.cam.x() / s.cam.z() + view.cx, view.fy * s.cam.y() / s.cam.z() + view.cy;
  const double mid = 0.5 * (cov2(0, 0) + cov2(1, 1));
  const double lambda_max = mid + std::sqrt(std::max(0.0, mid * mid - det));
  const double radius = std::ceil(opts.footprint_sigmas * std::sqrt(lambda_max));
  s.x0 = std::max(0, static_cast<int>(std::ceil(s.mean2d.x() - radius - 0.5)));
  s.x1 = std::min(view.width, static_cast<int>(std::floor(s.mean2d.x() + radius - 0.5)) + 1);
  s.y0 = std::max(0, static_cast<int>(std::ceil(s.mean2d.y() - radius - 0.5)));
  s.y1 = std::min(view.height, static_cast<int>(std::floor(s.mean2d.y() + radius - 0.5)) + 1);
  if (s.x0 >= s.x1 || s.y0 >= s.y1) return s;

  s.opacity = sigmoid(set.opacity_logit[i]);
  s.dir_raw = mu - center;
  const double dn = s.dir_raw.norm();
  const Eigen::Vector3d dir = dn > 0 ? Eigen::Vector3d(s.dir_raw / dn) : Eigen::Vector3d::UnitZ();
  s.color_raw = sh_to_color_unclamped<double>(set.sh.row(i), dir);
  s.color = s.color_raw.cwiseMax(0.0).cwiseMin(1.0);
  s.valid = std::isfinite(s.mean2d.x()) && std::isfinite(s.mean2d.y()) && s.conic.allFinite();
  return s;
}

Frame prepare(const GaussianSet& set, const CameraView& view, const RenderOptions& opts) {
  view.validate();
  Frame f;
  const Eigen::Index n = set.size();
  const Eigen::Matrix3d w = view.rotation();
  const Eigen::Vector3d center = view.center();
  f.splats.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) f.splats[static_cast<std::size_t>(i)] = project_one(set, i, view, w, center, opts);

  for (Eigen::Index i = 0; i < n; ++i) {
    if (f.splats[static_cast<std::size_t>(i)].valid) f.order.push_back(static_cast<int>(i));
  }
  std::stable_sort(f.order.begin(), f.order.end(), [&](int a, int b) {
    return f.splats[static_cast<std::size_t>(a)].cam.z() < f.splats[static_cast<std::size_t>(b)].cam.z();
  });

  f.tiles_x = (view.width + kTile - 1) / kTile;
  f.tiles_y = (view.height + kTile - 1) / kTile;
  f.tile_lists.resize(static_cast<std::size_t>(f.tiles_x) * f.tiles_y);
  for (int idx : f.order) {
    const Splat& s = f.splats[static_cast<std::size_t>(idx)];
    for (int ty = s.y0 / kTile; ty <= (s.y1 - 1) / kTile; ++ty) {
      for (int tx = s.x0 / kTile; tx <= (s.x1 - 1) / kTile; ++tx) {
        f.tile_lists[static_cast<std::size_t>(ty) * f.tiles_x + tx].push_back(idx);
      }
    }
  }
  return f;
}

/// One accepted contribution at a pixel.
struct Hit {
  int index;
  double alpha;
  double gauss;
  Eigen::Vector2d delta;
};

template <typename Visit>
void for_each_hit(const Frame& f, const std::vector<int>& list, int x, int y, const RenderOptions& opts,
                  Visit&& visit) {
  const Eigen::Vector2d p(x + 0.5, y + 0.5);
  for (int idx : list) {
    const Splat& s = f.splats[static_cast<std::size_t>(idx)];
    if (x < s.x0 || x >= s.x1 || y < s.y0 || y >= s.y1) continue;
    const Eigen::Vector2d d = p - s.mean2d;
    const double power = 0.5 * d.dot(s.conic * d);
    if (power < 0) continue;
    const double g = std::exp(-power);
    const double alpha = s.opacity * g;
    if (alpha < opts.alpha_cutoff) continue;
    visit(Hit{idx, alpha, g, d});
  }
}

std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h;
}

}  // namespace

Image render(const GaussianSet& set, const CameraView& view, const RenderOptions& opts, RenderStats* stats) {
  const Frame f = prepare(set, view, opts);
  Image out(view.width, view.height);
  const auto rows = static_cast<std::size_t>(f.tiles_y);
  std::vector<std::size_t> counts(rows, 0);
  std::vector<std::uint64_t> sigs(rows, 0);

  parallel_chunks(rows, [&](std::size_t ty) {
    std::uint64_t sig = 0;
    std::size_t count = 0;
    const int ylo = static_cast<int>(ty) * kTile;
    const int yhi = std::min(view.height, ylo + kTile);
    for (int y = ylo; y < yhi; ++y) {
      for (int x = 0; x < view.width; ++x) {
        const auto& list = f.tile_lists[ty * static_cast<std::size_t>(f.tiles_x) + static_cast<std::size_t>(x / kTile)];
        double trans = 1.0;
        Eigen::Vector3d c = Eigen::Vector3d::Zero();
        const auto pix = static_cast<std::uint64_t>(y) * static_cast<std::uint64_t>(view.width) + static_cast<std::uint64_t>(x);
        for_each_hit(f, list, x, y, opts, [&](const Hit& h) {
          c += f.splats[static_cast<std::size_t>(h.index)].color * (h.alpha * trans);
          trans *= 1.0 - h.alpha;
          ++count;
          if (stats) sig = mix(sig, (pix << 24) ^ static_cast<std::uint64_t>(h.index));
        });
        c += opts.background * trans;
        out.at(x, y) = c.transpose().array();
      }
    }
    counts[ty] = count;
    sigs[ty] = sig;
  });

  if (stats) {
    stats->visible = f.order.size();
    stats->contributions = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
    std::uint64_t sig = 0;
    for (auto s : sigs) sig = mix(sig, s);
    stats->signature = sig;
  }
  return out;
}

Eigen::ArrayXd depth_map(const GaussianSet& set, const CameraView& view, const RenderOptions& opts) {
  const Frame f = prepare(set, view, opts);
  Eigen::ArrayXd depth(static_cast<Eigen::Index>(view.width) * view.height);
  parallel_chunks(static_cast<std::size_t>(f.tiles_y), [&](std::size_t ty) {
    const int ylo = static_cast<int>(ty) * kTile;
    const int yhi = std::min(view.height, ylo + kTile);
    for (int y = ylo; y < yhi; ++y) {
      for (int x = 0; x < view.width; ++x) {
        const auto& list = f.tile_lists[ty * static_cast<std::size_t>(f.tiles_x) + static_cast<std::size_t>(x / kTile)];
        double trans = 1.0, weight = 0.0, acc = 0.0;
        for_each_hit(f, list, x, y, opts, [&](const Hit& h) {
          const double wgt = h.alpha * trans;
          acc += wgt * f.splats[static_cast<std::size_t>(h.index)].cam.z();
          weight += wgt;
          trans *= 1.0 - h.alpha;
        });
        depth[static_cast<Eigen::Index>(y) * view.width + x] =
            weight > 0 ? acc / weight : std::numeric_limits<double>::infinity();
      }
    }
  });
  return depth;
}

GaussianGrads render_backward(const GaussianSet& set, const CameraView& view, const Image& upstream,
                              const RenderOptions& opts) {
  if (upstream.width != view.width || upstream.height != view.height) {
    throw std::invalid_argument("render_backward: upstream gradient shape does not match the view");
  }
  const Frame f = prepare(set, view, opts);
  const Eigen::Index n = set.size();
  const auto rows = static_cast<std::size_t>(f.tiles_y);

  // Per-chunk screen-space partials: mean2d(2), conic a/b/c (3), opacity (1), colour (3).
  constexpr int kCols = 9;
  std::vector<Eigen::Matrix<double, Eigen::Dynamic, kCols, Eigen::RowMajor>> partials(rows);

  parallel_chunks(rows, [&](std::size_t ty) {
    auto& acc = partials[ty];
    acc.setZero(n, kCols);
    std::vector<Hit> hits;
    std::vector<double> trans_before;
    const int ylo = static_cast<int>(ty) * kTile;
    const int yhi = std::min(view.height, ylo + kTile);
    for (int y = ylo; y < yhi; ++y) {
      for (int x = 0; x < view.width; ++x) {
        const Eigen::Vector3d g_up = upstream.at(x, y).transpose().matrix();
        if (g_up.isZero(0.0)) continue;
        const auto& list = f.tile_lists[ty * static_cast<std::size_t>(f.tiles_x) + static_cast<std::size_t>(x / kTile)];
        hits.clear();
        trans_before.clear();
        double trans = 1.0;
        for_each_hit(f, list, x, y, opts, [&](const Hit& h) {
          hits.push_back(h);
          trans_before.push_back(trans);
          trans *= 1.0 - h.alpha;
        });
        Eigen::Vector3d behind = opts.background;
        for (std::size_t k = hits.size(); k-- > 0;) {
          const Hit& h = hits[k];
          const Splat& s = f.splats[static_cast<std::size_t>(h.index)];
          const double t_i = trans_before[k];
          auto row = acc.row(h.index);
          row.segment<3>(6) += (g_up * (h.alpha * t_i)).transpose();
          const double d_alpha = t_i * g_up.dot(s.color - behind);
          behind = h.alpha * s.color + (1.0 - h.alpha) * behind;
          row[5] += d_alpha * h.gauss;
          const double d_power = -d_alpha * h.alpha;
          const Eigen::Vector2d cd = s.conic * h.delta;
          row[0] -= cd.x() * d_power;
          row[1] -= cd.y() * d_power;
          row[2] += 0.5 * h.delta.x() * h.delta.x() * d_power;
          row[3] += h.delta.x() * h.delta.y() * d_power;
          row[4] += 0.5 * h.delta.y() * h.delta.y() * d_power;
        }
      }
    }
  });

  Eigen::Matrix<double, Eigen::Dynamic, kCols, Eigen::RowMajor> total;
  total.setZero(n, kCols);
  for (const auto& p : partials) total += p;

  GaussianGrads grads = GaussianGrads::zeros_like(set);
  const Eigen::Matrix3d w = view.rotation();
  for (Eigen::Index i = 0; i < n; ++i) {
    const Splat& s = f.splats[static_cast<std::size_t>(i)];
    if (!s.valid) continue;
    const auto row = total.row(i);
    if (row.isZero(0.0)) continue;

    // Colour through the clamp, SH coefficients and view direction.
    Eigen::Vector3d d_rgb = row.segment<3>(6).transpose();
    for (int c = 0; c < 3; ++c) {
      if (s.color_raw[c] < 0.0 || s.color_raw[c] > 1.0) d_rgb[c] = 0.0;
    }
    const Eigen::Vector3d dir = s.dir_raw.normalized();
    const Eigen::Vector4d basis = sh_basis<double>(dir);
    for (int c = 0; c < 3; ++c) {
      for (int k = 0; k < kShCoeffs; ++k) grads.sh(i, c * kShCoeffs + k) = d_rgb[c] * basis[k];
    }
    const Eigen::Vector3d d_dir = sh_dir_backward<double>(set.sh.row(i), d_rgb);
    Eigen::Vector3d d_mu = normalize_backward(s.dir_raw, d_dir);

    grads.opacity_logit[i] = row[5] * s.opacity * (1.0 - s.opacity);

    // Conic -> 2D covariance -> 3D covariance and Jacobian.
    Eigen::Matrix2d d_conic;
    d_conic << row[2], 0.5 * row[3], 0.5 * row[3], row[4];
    const Eigen::Matrix2d d_cov2 = -s.conic * d_conic * s.conic;
    const Eigen::Matrix<double, 2, 3> t = s.jac * w;
    const Eigen::Matrix3d d_cov3 = t.transpose() * d_cov2 * t;
    const Eigen::Matrix<double, 2, 3> d_t = 2.0 * d_cov2 * t * s.cov3;
    const Eigen::Matrix<double, 2, 3> d_jac = d_t * w.transpose();

    const double x = s.cam.x(), y = s.cam.y(), z = s.cam.z();
    const double iz = 1.0 / z, iz2 = iz * iz, iz3 = iz2 * iz;
    const double fx = view.fx, fy = view.fy;
    Eigen::Vector3d d_cam;
    d_cam.x() = fx * iz * row[0] - fx * iz2 * d_jac(0, 2);
    d_cam.y() = fy * iz * row[1] - fy * iz2 * d_jac(1, 2);
    d_cam.z() = -fx * x * iz2 * row[0] - fy * y * iz2 * row[1] - fx * iz2 * d_jac(0, 0) -
                fy * iz2 * d_jac(1, 1) + 2.0 * fx * x * iz3 * d_jac(0, 2) + 2.0 * fy * y * iz3 * d_jac(1, 2);
    d_mu += w.transpose() * d_cam;
    grads.mean.row(i) = d_mu.transpose();

    // Sigma = M M^T with M = R diag(s).
    const Eigen::Matrix3d mm = s.rotm * s.scale.asDiagonal();
    const Eigen::Matrix3d d_m = 2.0 * d_cov3 * mm;
    Eigen::Vector3d d_scale;
    Eigen::Matrix3d d_rot;
    for (int col = 0; col < 3; ++col) {
      d_scale[col] = d_m.col(col).dot(s.rotm.col(col));
      d_rot.col(col) = d_m.col(col) * s.scale[col];
    }
    grads.log_scale.row(i) = d_scale.cwiseProduct(s.scale).transpose();
    const Eigen::Vector4d d_qhat = rotation_backward<double>(s.qhat, d_rot);
    const Eigen::Vector4d q_raw = set.rot.row(i).transpose();
    grads.rot.row(i) = normalize_backward(q_raw, d_qhat).transpose();
  }
  return grads;
}

}  // namespace cocosplat
