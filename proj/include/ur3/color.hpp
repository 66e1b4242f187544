#pragma once

#include <string>
#include <vector>

#include "ur3/image.hpp"

namespace ur3 {

enum class ColorMethod { kNormalization, kWavelet, kNone };

ColorMethod parse_color_method(const std::string& name);
std::string to_string(ColorMethod method);

struct ColorCorrectConfig {
  ColorMethod method = ColorMethod::kNormalization;
  int patch = 64;
  double eps = 1e-6;
  int wavelet_levels = 3;

  void validate() const;
};

/// Patch-wise per-channel mean/std transfer from `ref` onto `out`.
/// Windows of side `patch` at stride patch/2, blended with separable tent
/// weights; an image no larger than one patch is handled as a single window.
/// `clip = false` exposes the pre-clipping result.
Image color_normalize(const Image& out, const Image& ref, const ColorCorrectConfig& cfg,
                      bool clip = true);

/// Haar band for one channel set. Averaging normalization:
/// LL = (a+b+c+d)/4, so constants live entirely in LL.
struct HaarLevel {
  int height = 0;  // of each band
  int width = 0;
  std::vector<double> lh, hl, hh;  // interleaved RGB
};

struct HaarPyramid {
  std::vector<HaarLevel> details;  // details[0] is the finest level
  Image low;                       // coarsest LL band
};

/// Requires both dims divisible by 2^levels.
HaarPyramid haar_decompose(const Image& img, int levels);
Image haar_reconstruct(const HaarPyramid& pyr);

/// Swaps the coarsest low band of `out` for that of `ref`. Pads internally
/// when the dims are not divisible by 2^levels.
Image wavelet_correct(const Image& out, const Image& ref, const ColorCorrectConfig& cfg,
                      bool clip = true);

/// Dispatches on cfg.method.
Image color_correct(const Image& out, const Image& ref, const ColorCorrectConfig& cfg);

/// Hue in [0,1) and saturation of an RGB triple (HSV).
struct HueSat {
  double hue = 0;
  double sat = 0;
};
HueSat rgb_to_hue_sat(double r, double g, double b);

/// Per pixel: mean of the shortest-arc hue distance (fraction of a full turn,
/// zero when either saturation is zero) and the absolute saturation difference.
Plane color_error_map(const Image& a, const Image& b);

}  // namespace ur3
