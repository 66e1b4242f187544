#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "ur3/color.hpp"

using namespace ur3;
using ur3::testing::max_abs_diff;
using ur3::testing::random_image;

namespace {

// Pixel values that are multiples of 1/256 keep Haar arithmetic exact.
Image dyadic_image(int h, int w, std::uint64_t seed, int lo = 64, int hi = 192) {
  std::mt19937_64 rng(seed);
  Image img(h, w);
  for (double& v : img.data()) v = (lo + static_cast<int>(rng() % (hi - lo))) / 256.0;
  return img;
}

}  // namespace

TEST_CASE("color_normalize fixed point on matched statistics") {
  const Image ref = random_image(64, 64, 1);
  CHECK(max_abs_diff(color_normalize(ref, ref, {}), ref) < 1e-6);
  const Image big = random_image(150, 97, 2);
  CHECK(max_abs_diff(color_normalize(big, big, {}), big) < 1e-6);
}

TEST_CASE("color_normalize removes a global offset on a single patch") {
  const Image ref = random_image(64, 64, 3, 0.1, 0.8);
  Image out = ref;
  for (double& v : out.data()) v += 0.1;
  CHECK(max_abs_diff(color_normalize(out, ref, {}), ref) < 1e-6);
}

TEST_CASE("color_normalize matches per-patch statistics on an unblended patch") {
  const Image ref = random_image(48, 56, 4, 0.2, 0.7);
  const Image out = random_image(48, 56, 5, 0.0, 1.0);
  ColorCorrectConfig cfg;
  const Image y = color_normalize(out, ref, cfg, false);
  for (int c = 0; c < 3; ++c) {
    double my = 0, mr = 0;
    for (int i = 0; i < 48; ++i)
      for (int j = 0; j < 56; ++j) {
        my += y.at(i, j, c);
        mr += ref.at(i, j, c);
      }
    my /= 48 * 56;
    mr /= 48 * 56;
    double vy = 0, vr = 0;
    for (int i = 0; i < 48; ++i)
      for (int j = 0; j < 56; ++j) {
        vy += (y.at(i, j, c) - my) * (y.at(i, j, c) - my);
        vr += (ref.at(i, j, c) - mr) * (ref.at(i, j, c) - mr);
      }
    CHECK(std::abs(my - mr) < 1e-5);
    CHECK(std::abs(std::sqrt(vy / (48 * 56)) - std::sqrt(vr / (48 * 56))) < 1e-5);
  }
}

TEST_CASE("color_normalize is idempotent on single-patch images") {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Image ref = random_image(64, 40, 10 + s);
    const Image out = random_image(64, 40, 20 + s, 0.2, 0.9);
    ColorCorrectConfig cfg;
    const Image once = color_normalize(out, ref, cfg, false);
    const Image twice = color_normalize(once, ref, cfg, false);
    CHECK(max_abs_diff(once, twice) < 1e-5);
  }
}

TEST_CASE("color_normalize blends multi-patch images without seams") {
  const Image ref = random_image(130, 130, 6);
  Image out = ref;
  for (double& v : out.data()) v = 0.5 * v + 0.2;
  const Image y = color_normalize(out, ref, {}, false);
  // affine distortion is undone everywhere, blended or not
  CHECK(max_abs_diff(y, ref) < 1e-6);
  CHECK_THROWS_AS(color_normalize(out, random_image(10, 10, 1), {}), DimensionError);
}

TEST_CASE("haar decomposition reconstructs exactly") {
  const Image img = dyadic_image(32, 24, 7);
  CHECK(haar_reconstruct(haar_decompose(img, 3)) == img);
  CHECK_THROWS_AS(haar_decompose(random_image(30, 24, 1), 3), DimensionError);
}

TEST_CASE("wavelet_correct: identity, DC shift, detail preservation") {
  ColorCorrectConfig cfg;
  cfg.method = ColorMethod::kWavelet;
  const Image out = dyadic_image(32, 32, 8);
  CHECK(wavelet_correct(out, out, cfg) == out);

  Image ref = out;
  for (double& v : ref.data()) v += 0.125;
  CHECK(max_abs_diff(wavelet_correct(out, ref, cfg), ref) < 1e-6);

  const Image other = dyadic_image(32, 32, 9);
  const Image corrected = wavelet_correct(out, other, cfg, false);
  const auto d_out = haar_decompose(out, cfg.wavelet_levels);
  const auto d_cor = haar_decompose(corrected, cfg.wavelet_levels);
  CHECK(d_cor.details[0].lh == d_out.details[0].lh);
  CHECK(d_cor.details[0].hl == d_out.details[0].hl);
  CHECK(d_cor.details[0].hh == d_out.details[0].hh);
  // and the low band is the reference's
  CHECK(d_cor.low == haar_decompose(other, cfg.wavelet_levels).low);
}

TEST_CASE("wavelet_correct pads indivisible sizes and crops back") {
  ColorCorrectConfig cfg;
  const Image out = random_image(30, 27, 10, 0.2, 0.6);
  Image ref = out;
  for (double& v : ref.data()) v += 0.1;
  const Image y = wavelet_correct(out, ref, cfg);
  CHECK(y.height() == 30);
  CHECK(y.width() == 27);
  CHECK(max_abs_diff(y, ref) < 1e-6);
}

TEST_CASE("color_error_map hand oracles") {
  Image red(1, 1), cyan(1, 1);
  red.at(0, 0, 0) = 1;
  cyan.at(0, 0, 1) = 1;
  cyan.at(0, 0, 2) = 1;
  CHECK(color_error_map(red, cyan).at(0, 0) == 0.25);

  const Image a = random_image(9, 9, 11);
  const Plane self = color_error_map(a, a);
  for (double v : self.data()) CHECK(v == 0.0);

  Image g1(3, 3), g2(3, 3);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x)
      for (int c = 0; c < 3; ++c) {
        g1.at(y, x, c) = 0.1 * (y + 1);
        g2.at(y, x, c) = 0.3 * (x + 1);
      }
  const Plane gray = color_error_map(g1, g2);
  for (double v : gray.data()) CHECK(v == 0.0);
}

TEST_CASE("color_error_map is symmetric") {
  const Image a = random_image(16, 16, 12);
  const Image b = random_image(16, 16, 13);
  CHECK(color_error_map(a, b) == color_error_map(b, a));
}

TEST_CASE("parse_color_method") {
  CHECK(parse_color_method("wavelet") == ColorMethod::kWavelet);
  CHECK(to_string(parse_color_method("normalization")) == "normalization");
  CHECK_THROWS(parse_color_method("histogram"));
}
