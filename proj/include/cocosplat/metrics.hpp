#pragma once

#include "cocosplat/types.hpp"

namespace cocosplat {

inline constexpr double kSsimC1 = 1e-4;
inline constexpr double kSsimC2 = 9e-4;
inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kDssimWeight = 0.3;
inline constexpr double kPsnrCap = 100.0;

double l1_loss(const Image& a, const Image& b);
double mse(const Image& a, const Image& b);

/// Mean SSIM over all full 11x11 windows (Gaussian, sigma 1.5) and the three channels.
double ssim(const Image& a, const Image& b);

struct LossValue {
  double value = 0;
  Image grad;  // w.r.t. the first argument
};

LossValue ssim_with_grad(const Image& a, const Image& b);

/// 0.7 L1 + 0.3 (1 - SSIM) / 2, with its gradient w.r.t. `pred`.
LossValue training_loss(const Image& pred, const Image& gt);

/// 10 log10(1 / MSE), capped at 100 dB.
double psnr(const Image& a, const Image& b);

}  // namespace cocosplat
