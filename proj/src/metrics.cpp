#include "cocosplat/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace cocosplat {
namespace {

using Plane = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::ArrayXd gaussian_taps() {
  Eigen::ArrayXd t(kSsimWindow);
  const int r = kSsimWindow / 2;
  for (int i = 0; i < kSsimWindow; ++i) t[i] = std::exp(-0.5 * (i - r) * (i - r) / (kSsimSigma * kSsimSigma));
  return t / t.sum();
}

/// Separable "valid" Gaussian filter: output is (H - 10) x (W - 10).
Plane filter_valid(const Plane& in, const Eigen::ArrayXd& t) {
  const Eigen::Index oh = in.rows() - kSsimWindow + 1, ow = in.cols() - kSsimWindow + 1;
  Plane rows = Plane::Zero(in.rows(), ow);
  for (int k = 0; k < kSsimWindow; ++k) rows += t[k] * in.middleCols(k, ow);
  Plane out = Plane::Zero(oh, ow);
  for (int k = 0; k < kSsimWindow; ++k) out += t[k] * rows.middleRows(k, oh);
  return out;
}

Plane filter_valid_adjoint(const Plane& g, Eigen::Index h, Eigen::Index w, const Eigen::ArrayXd& t) {
  const Eigen::Index oh = g.rows(), ow = g.cols();
  Plane rows = Plane::Zero(h, ow);
  for (int k = 0; k < kSsimWindow; ++k) rows.middleRows(k, oh) += t[k] * g;
  Plane out = Plane::Zero(h, w);
  for (int k = 0; k < kSsimWindow; ++k) out.middleCols(k, ow) += t[k] * rows;
  return out;
}

Plane channel(const Image& img, int c) {
  Plane p(img.height, img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) p(y, x) = img.at(x, y)[c];
  }
  return p;
}

void check_pair(const Image& a, const Image& b, const char* what) {
  require_same_shape(a, b, what);
  if (a.pixels() == 0) throw std::invalid_argument(std::string(what) + ": empty image");
}

LossValue ssim_impl(const Image& a, const Image& b, bool want_grad) {
  check_pair(a, b, "ssim");
  if (a.width < kSsimWindow || a.height < kSsimWindow) {
    throw std::invalid_argument("ssim: image is smaller than the 11x11 window");
  }
  const Eigen::ArrayXd t = gaussian_taps();
  const Eigen::Index h = a.height, w = a.width;
  const double count = 3.0 * static_cast<double>((h - kSsimWindow + 1) * (w - kSsimWindow + 1));
  LossValue r;
  if (want_grad) r.grad = Image(a.width, a.height);
  for (int c = 0; c < 3; ++c) {
    const Plane x = channel(a, c), y = channel(b, c);
    const Plane mx = filter_valid(x, t), my = filter_valid(y, t);
    const Plane sxx = filter_valid(x * x, t) - mx * mx;
    const Plane syy = filter_valid(y * y, t) - my * my;
    const Plane sxy = filter_valid(x * y, t) - mx * my;
    const Plane a1 = 2 * mx * my + kSsimC1, a2 = 2 * sxy + kSsimC2;
    const Plane b1 = mx * mx + my * my + kSsimC1, b2 = sxx + syy + kSsimC2;
    const Plane s = (a1 * a2) / (b1 * b2);
    r.value += s.sum() / count;
    if (!want_grad) continue;
    const Plane d_mx = 2 * my * a2 / (b1 * b2) - s * 2 * mx / b1;
    const Plane d_sxy = 2 * a1 / (b1 * b2);
    const Plane d_sxx = -s / b2;
    // sxx = G(x^2) - mx^2 and sxy = G(xy) - mx my fold into the mean term.
    const Plane g_mean = (d_mx - 2 * mx * d_sxx - my * d_sxy) / count;
    const Plane gx = filter_valid_adjoint(g_mean, h, w, t) +
                     2 * x * filter_valid_adjoint(d_sxx / count, h, w, t) +
                     y * filter_valid_adjoint(d_sxy / count, h, w, t);
    for (int yy = 0; yy < a.height; ++yy) {
      for (int xx = 0; xx < a.width; ++xx) r.grad.at(xx, yy)[c] = gx(yy, xx);
    }
  }
  return r;
}

}  // namespace

double l1_loss(const Image& a, const Image& b) {
  check_pair(a, b, "l1_loss");
  return (a.rgb - b.rgb).abs().mean();
}

double mse(const Image& a, const Image& b) {
  check_pair(a, b, "mse");
  return (a.rgb - b.rgb).square().mean();
}

double ssim(const Image& a, const Image& b) { return ssim_impl(a, b, false).value; }

LossValue ssim_with_grad(const Image& a, const Image& b) { return ssim_impl(a, b, true); }

LossValue training_loss(const Image& pred, const Image& gt) {
  LossValue s = ssim_with_grad(pred, gt);
  LossValue r;
  const double n = static_cast<double>(pred.rgb.size());
  r.value = (1.0 - kDssimWeight) * l1_loss(pred, gt) + kDssimWeight * 0.5 * (1.0 - s.value);
  r.grad = Image(pred.width, pred.height);
  r.grad.rgb = (1.0 - kDssimWeight) / n * (pred.rgb - gt.rgb).sign() - 0.5 * kDssimWeight * s.grad.rgb;
  return r;
}

double psnr(const Image& a, const Image& b) {
  const double e = mse(a, b);
  if (e <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / e));
}

}  // namespace cocosplat
