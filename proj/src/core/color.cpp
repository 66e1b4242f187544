#include "ur3/color.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ur3 {

ColorMethod parse_color_method(const std::string& name) {
  if (name == "normalization") return ColorMethod::kNormalization;
  if (name == "wavelet") return ColorMethod::kWavelet;
  if (name == "none") return ColorMethod::kNone;
  throw std::invalid_argument("unknown color correction method '" + name +
                              "' (expected normalization|wavelet|none)");
}

std::string to_string(ColorMethod method) {
  switch (method) {
    case ColorMethod::kNormalization: return "normalization";
    case ColorMethod::kWavelet: return "wavelet";
    case ColorMethod::kNone: return "none";
  }
  return "none";
}

void ColorCorrectConfig::validate() const {
  if (patch < 8) throw std::invalid_argument("color correction patch must be >= 8");
  if (!(eps > 0)) throw std::invalid_argument("color correction eps must be > 0");
  if (wavelet_levels < 1) throw std::invalid_argument("wavelet levels must be >= 1");
}

namespace {

std::vector<int> window_starts(int length, int patch) {
  if (length <= patch) return {0};
  std::vector<int> starts;
  const int stride = patch / 2;
  for (int s = 0; s + patch <= length; s += stride) starts.push_back(s);
  if (starts.back() + patch < length) starts.push_back(length - patch);
  return starts;
}

double tent(int u, int n) { return 1.0 - std::abs(2.0 * (u + 0.5) / n - 1.0); }

struct Stats {
  double mean[3];
  double std[3];
};

Stats window_stats(const Image& img, int top, int left, int h, int w) {
  Stats s{};
  const double n = static_cast<double>(h) * w;
  for (int c = 0; c < 3; ++c) {
    double sum = 0;
    for (int y = top; y < top + h; ++y)
      for (int x = left; x < left + w; ++x) sum += img.at(y, x, c);
    const double mean = sum / n;
    double var = 0;
    for (int y = top; y < top + h; ++y)
      for (int x = left; x < left + w; ++x) {
        const double d = img.at(y, x, c) - mean;
        var += d * d;
      }
    s.mean[c] = mean;
    s.std[c] = std::sqrt(var / n);
  }
  return s;
}

}  // namespace

Image color_normalize(const Image& out, const Image& ref, const ColorCorrectConfig& cfg, bool clip) {
  require_same_shape(out, ref, "color_normalize");
  cfg.validate();
  const int h = out.height();
  const int w = out.width();
  Image acc(h, w, 0.0);
  Plane weight(h, w, 0.0);
  const int ph = std::min(cfg.patch, h);
  const int pw = std::min(cfg.patch, w);
  for (int top : window_starts(h, cfg.patch))
    for (int left : window_starts(w, cfg.patch)) {
      const Stats so = window_stats(out, top, left, ph, pw);
      const Stats sr = window_stats(ref, top, left, ph, pw);
      for (int y = 0; y < ph; ++y)
        for (int x = 0; x < pw; ++x) {
          const double wt = tent(y, ph) * tent(x, pw);
          weight.at(top + y, left + x) += wt;
          for (int c = 0; c < 3; ++c) {
            const double v = (out.at(top + y, left + x, c) - so.mean[c]) /
                                 std::max(so.std[c], cfg.eps) * sr.std[c] +
                             sr.mean[c];
            acc.at(top + y, left + x, c) += wt * v;
          }
        }
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) acc.at(y, x, c) /= weight.at(y, x);
  if (clip) acc.clip();
  return acc;
}

HaarPyramid haar_decompose(const Image& img, int levels) {
  const int f = 1 << levels;
  if (img.height() % f != 0 || img.width() % f != 0) {
    throw DimensionError("haar_decompose: dims must be divisible by 2^levels");
  }
  HaarPyramid pyr;
  Image cur = img;
  for (int l = 0; l < levels; ++l) {
    const int h = cur.height() / 2;
    const int w = cur.width() / 2;
    HaarLevel lvl;
    lvl.height = h;
    lvl.width = w;
    const std::size_t n = static_cast<std::size_t>(h) * w * 3;
    lvl.lh.resize(n);
    lvl.hl.resize(n);
    lvl.hh.resize(n);
    Image low(h, w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) {
          const double a = cur.at(2 * y, 2 * x, c);
          const double b = cur.at(2 * y, 2 * x + 1, c);
          const double cc = cur.at(2 * y + 1, 2 * x, c);
          const double d = cur.at(2 * y + 1, 2 * x + 1, c);
          const std::size_t i = (static_cast<std::size_t>(y) * w + x) * 3 + c;
          low.at(y, x, c) = (a + b + cc + d) / 4;
          lvl.lh[i] = (a - b + cc - d) / 4;
          lvl.hl[i] = (a + b - cc - d) / 4;
          lvl.hh[i] = (a - b - cc + d) / 4;
        }
    pyr.details.push_back(std::move(lvl));
    cur = std::move(low);
  }
  pyr.low = std::move(cur);
  return pyr;
}

Image haar_reconstruct(const HaarPyramid& pyr) {
  Image cur = pyr.low;
  for (auto it = pyr.details.rbegin(); it != pyr.details.rend(); ++it) {
    const HaarLevel& lvl = *it;
    if (cur.height() != lvl.height || cur.width() != lvl.width) {
      throw DimensionError("haar_reconstruct: band shape mismatch");
    }
    Image up(lvl.height * 2, lvl.width * 2);
    for (int y = 0; y < lvl.height; ++y)
      for (int x = 0; x < lvl.width; ++x)
        for (int c = 0; c < 3; ++c) {
          const std::size_t i = (static_cast<std::size_t>(y) * lvl.width + x) * 3 + c;
          const double ll = cur.at(y, x, c);
          const double lh = lvl.lh[i], hl = lvl.hl[i], hh = lvl.hh[i];
          up.at(2 * y, 2 * x, c) = ll + lh + hl + hh;
          up.at(2 * y, 2 * x + 1, c) = ll - lh + hl - hh;
          up.at(2 * y + 1, 2 * x, c) = ll + lh - hl - hh;
          up.at(2 * y + 1, 2 * x + 1, c) = ll - lh - hl + hh;
        }
    cur = std::move(up);
  }
  return cur;
}

Image wavelet_correct(const Image& out, const Image& ref, const ColorCorrectConfig& cfg, bool clip) {
  require_same_shape(out, ref, "wavelet_correct");
  cfg.validate();
  const int f = 1 << cfg.wavelet_levels;
  const Image po = pad_to_multiple(out, f);
  const Image pr = pad_to_multiple(ref, f);
  HaarPyramid pyr = haar_decompose(po, cfg.wavelet_levels);
  pyr.low = haar_decompose(pr, cfg.wavelet_levels).low;
  Image full = haar_reconstruct(pyr);
  Image result = full.height() == out.height() && full.width() == out.width()
                     ? std::move(full)
                     : crop_region(full, 0, 0, out.height(), out.width());
  if (clip) result.clip();
  return result;
}

Image color_correct(const Image& out, const Image& ref, const ColorCorrectConfig& cfg) {
  switch (cfg.method) {
    case ColorMethod::kNormalization: return color_normalize(out, ref, cfg);
    case ColorMethod::kWavelet: return wavelet_correct(out, ref, cfg);
    case ColorMethod::kNone: return out;
  }
  return out;
}

HueSat rgb_to_hue_sat(double r, double g, double b) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double delta = mx - mn;
  HueSat hs;
  hs.sat = mx > 0 ? delta / mx : 0.0;
  if (delta <= 0) return hs;
  double h;
  if (mx == r) {
    h = (g - b) / delta;
  } else if (mx == g) {
    h = 2.0 + (b - r) / delta;
  } else {
    h = 4.0 + (r - g) / delta;
  }
  h /= 6.0;
  if (h < 0) h += 1.0;
  hs.hue = h;
  return hs;
}

Plane color_error_map(const Image& a, const Image& b) {
  require_same_shape(a, b, "color_error_map");
  Plane map(a.height(), a.width());
  for (int y = 0; y < a.height(); ++y)
    for (int x = 0; x < a.width(); ++x) {
      const HueSat p = rgb_to_hue_sat(a.at(y, x, 0), a.at(y, x, 1), a.at(y, x, 2));
      const HueSat q = rgb_to_hue_sat(b.at(y, x, 0), b.at(y, x, 1), b.at(y, x, 2));
      double dh = 0;
      if (p.sat > 0 && q.sat > 0) {
        dh = std::abs(p.hue - q.hue);
        dh = std::min(dh, 1.0 - dh);
      }
      map.at(y, x) = 0.5 * (dh + std::abs(p.sat - q.sat));
    }
  return map;
}

}  // namespace ur3
