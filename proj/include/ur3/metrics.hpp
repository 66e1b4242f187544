#pragma once

#include "ur3/image.hpp"

namespace ur3 {

inline constexpr double kPsnrCap = 100.0;

/// 10 log10(peak^2 / MSE) over all pixels and channels; `cap` when MSE is 0.
double psnr(const Image& a, const Image& b, double peak = 1.0, double cap = kPsnrCap);

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

/// Mean SSIM over every fully-contained Gaussian window of the luma images.
double ssim(const Image& a, const Image& b, const SsimParams& params = {});

}  // namespace ur3
