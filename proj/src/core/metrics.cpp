#include "ur3/metrics.hpp"

#include <cmath>

namespace ur3 {

double psnr(const Image& a, const Image& b, double peak, double cap) {
  require_same_shape(a, b, "psnr");
  const auto da = a.data();
  const auto db = b.data();
  double sum = 0;
  for (std::size_t i = 0; i < da.size(); ++i) {
    const double d = da[i] - db[i];
    sum += d * d;
  }
  const double mse = sum / static_cast<double>(da.size());
  if (mse == 0.0) return cap;
  return std::min(cap, 10.0 * std::log10(peak * peak / mse));
}

namespace {

// "Valid" correlation of a plane with a separable normalized Gaussian window.
Plane filter_valid(const Plane& p, const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  const int oh = p.height() - n + 1;
  const int ow = p.width() - n + 1;
  Plane rows(p.height(), ow);
  for (int y = 0; y < p.height(); ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0;
      for (int i = 0; i < n; ++i) acc += k[i] * p.at(y, x + i);
      rows.at(y, x) = acc;
    }
  Plane out(oh, ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0;
      for (int i = 0; i < n; ++i) acc += k[i] * rows.at(y + i, x);
      out.at(y, x) = acc;
    }
  return out;
}

Plane product(const Plane& a, const Plane& b) {
  Plane out(a.height(), a.width());
  for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  return out;
}

}  // namespace

double ssim(const Image& a, const Image& b, const SsimParams& params) {
  require_same_shape(a, b, "ssim");
  if (std::min(a.height(), a.width()) < params.window) {
    throw DimensionError("ssim: image smaller than the " + std::to_string(params.window) +
                         "px window");
  }
  std::vector<double> k(params.window);
  double ksum = 0;
  const int r = params.window / 2;
  for (int i = 0; i < params.window; ++i) {
    const double d = i - r;
    k[i] = std::exp(-0.5 * d * d / (params.sigma * params.sigma));
    ksum += k[i];
  }
  for (double& v : k) v /= ksum;

  const Plane ga = to_gray(a);
  const Plane gb = to_gray(b);
  const Plane mu_a = filter_valid(ga, k);
  const Plane mu_b = filter_valid(gb, k);
  const Plane e_aa = filter_valid(product(ga, ga), k);
  const Plane e_bb = filter_valid(product(gb, gb), k);
  const Plane e_ab = filter_valid(product(ga, gb), k);

  const double c1 = std::pow(params.k1 * params.dynamic_range, 2);
  const double c2 = std::pow(params.k2 * params.dynamic_range, 2);
  double total = 0;
  const std::size_t n = mu_a.data().size();
  for (std::size_t i = 0; i < n; ++i) {
    const double ma = mu_a.data()[i];
    const double mb = mu_b.data()[i];
    const double va = e_aa.data()[i] - ma * ma;
    const double vb = e_bb.data()[i] - mb * mb;
    const double cov = e_ab.data()[i] - ma * mb;
    total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(n);
}

}  // namespace ur3
