#include "ur3/degradation.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace ur3 {

namespace {

constexpr double kRefractionBlurSigma = 1.5;
constexpr double kRefractionMinify = 3.0;

void require_plane_shape(const Image& img, const AlphaMap& a, const char* what) {
  if (img.height() != a.height() || img.width() != a.width()) {
    throw DimensionError(std::string(what) + ": alpha map shape mismatch");
  }
}

// Standard normal CDF.
double phi(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double feathered(double signed_distance, double opacity, double sigma) {
  if (sigma <= 0) return signed_distance <= 0 ? opacity : 0.0;
  return opacity * phi(-signed_distance / sigma);
}

// Approximate signed distance (pixels) to an ellipse boundary; negative inside.
double ellipse_distance(const Drop& d, double x, double y) {
  const double dx = x - d.center_x;
  const double dy = y - d.center_y;
  const double c = std::cos(d.rotation);
  const double s = std::sin(d.rotation);
  const double u = (c * dx + s * dy) / d.axis_a;
  const double v = (-s * dx + c * dy) / d.axis_b;
  const double rho = std::sqrt(u * u + v * v);
  return (rho - 1.0) * std::min(d.axis_a, d.axis_b);
}

double segment_distance(const TraceSegment& t, double x, double y) {
  const double vx = t.x1 - t.x0;
  const double vy = t.y1 - t.y0;
  const double len2 = vx * vx + vy * vy;
  double u = 0;
  if (len2 > 0) u = std::clamp(((x - t.x0) * vx + (y - t.y0) * vy) / len2, 0.0, 1.0);
  const double px = t.x0 + u * vx - x;
  const double py = t.y0 + u * vy - y;
  return std::sqrt(px * px + py * py) - t.radius;
}

template <typename Shape, typename Dist>
void rasterize(AlphaMap& a, const Shape& shape, double reach_x0, double reach_y0, double reach_x1,
               double reach_y1, Dist dist) {
  const int x0 = std::max(0, static_cast<int>(std::floor(reach_x0)));
  const int y0 = std::max(0, static_cast<int>(std::floor(reach_y0)));
  const int x1 = std::min(a.width() - 1, static_cast<int>(std::ceil(reach_x1)));
  const int y1 = std::min(a.height() - 1, static_cast<int>(std::ceil(reach_y1)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double v = feathered(dist(x, y), shape.opacity, shape.blur_sigma);
      a.at(y, x) = std::max(a.at(y, x), v);
    }
}

Image blend(const Image& b, const AlphaMap& a, const Image& layer) {
  Image out(b.height(), b.width());
  for (int y = 0; y < b.height(); ++y)
    for (int x = 0; x < b.width(); ++x) {
      const double w = a.at(y, x);
      for (int c = 0; c < Image::kChannels; ++c)
        out.at(y, x, c) = (1.0 - w) * b.at(y, x, c) + w * layer.at(y, x, c);
    }
  return out.clip();
}

double bilinear(const Image& img, double fx, double fy, int c) {
  fx = std::clamp(fx, 0.0, img.width() - 1.0);
  fy = std::clamp(fy, 0.0, img.height() - 1.0);
  const int x0 = static_cast<int>(fx);
  const int y0 = static_cast<int>(fy);
  const int x1 = std::min(x0 + 1, img.width() - 1);
  const int y1 = std::min(y0 + 1, img.height() - 1);
  const double wx = fx - x0;
  const double wy = fy - y0;
  return (img.at(y0, x0, c) * (1 - wx) + img.at(y0, x1, c) * wx) * (1 - wy) +
         (img.at(y1, x0, c) * (1 - wx) + img.at(y1, x1, c) * wx) * wy;
}

}  // namespace

void RaindropField::validate() const {
  for (const auto& d : drops) {
    if (!(d.axis_a > 0 && d.axis_b > 0)) throw std::invalid_argument("drop axes must be > 0");
    if (!(d.opacity > 0 && d.opacity <= 1)) throw std::invalid_argument("drop opacity must be in (0,1]");
    if (d.blur_sigma < 0) throw std::invalid_argument("drop blur must be >= 0");
  }
  for (const auto& t : trace_segments) {
    if (!(t.radius > 0)) throw std::invalid_argument("trace radius must be > 0");
    if (!(t.opacity > 0 && t.opacity <= 1)) throw std::invalid_argument("trace opacity must be in (0,1]");
    if (t.blur_sigma < 0) throw std::invalid_argument("trace blur must be >= 0");
  }
}

void DegradationRecipe::validate() const {
  raindrop.validate();
  if (reflection_image.empty()) {
    throw DimensionError("degradation recipe: reflection image is empty");
  }
  if (!(reflection_strength >= 0 && reflection_strength <= 1)) {
    throw std::invalid_argument("reflection strength must be in [0,1]");
  }
  if (reflection_blur_sigma < 0) throw std::invalid_argument("reflection blur must be >= 0");
}

AlphaMap render_alpha(const RaindropField& field, int height, int width) {
  if (height <= 0 || width <= 0) throw DimensionError("render_alpha: non-positive size");
  AlphaMap a(height, width, 0.0);
  for (const auto& d : field.drops) {
    const double reach = std::max(d.axis_a, d.axis_b) + 4.0 * d.blur_sigma + 1.0;
    rasterize(a, d, d.center_x - reach, d.center_y - reach, d.center_x + reach,
              d.center_y + reach, [&](int x, int y) { return ellipse_distance(d, x, y); });
  }
  for (const auto& t : field.trace_segments) {
    const double reach = t.radius + 4.0 * t.blur_sigma + 1.0;
    rasterize(a, t, std::min(t.x0, t.x1) - reach, std::min(t.y0, t.y1) - reach,
              std::max(t.x0, t.x1) + reach, std::max(t.y0, t.y1) + reach,
              [&](int x, int y) { return segment_distance(t, x, y); });
  }
  return a;
}

Image apply_raindrop(const Image& background, const AlphaMap& alpha, const Image& raindrop_layer) {
  require_same_shape(background, raindrop_layer, "apply_raindrop");
  require_plane_shape(background, alpha, "apply_raindrop");
  return blend(background, alpha, raindrop_layer);
}

Image apply_reflection(const Image& background, const AlphaMap& amplitude,
                       const Image& reflection_layer) {
  require_same_shape(background, reflection_layer, "apply_reflection");
  require_plane_shape(background, amplitude, "apply_reflection");
  return blend(background, amplitude, reflection_layer);
}

Image refraction_layer(const Image& background, const RaindropField& field) {
  const Image soft = gaussian_blur(background, kRefractionBlurSigma);
  Image rd = soft;
  // Strongest-covering drop owns each pixel.
  Plane owner_strength(background.height(), background.width(), 0.0);
  for (const auto& d : field.drops) {
    const double reach = std::max(d.axis_a, d.axis_b) + 4.0 * d.blur_sigma + 1.0;
    const int x0 = std::max(0, static_cast<int>(std::floor(d.center_x - reach)));
    const int y0 = std::max(0, static_cast<int>(std::floor(d.center_y - reach)));
    const int x1 = std::min(background.width() - 1, static_cast<int>(std::ceil(d.center_x + reach)));
    const int y1 = std::min(background.height() - 1, static_cast<int>(std::ceil(d.center_y + reach)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double a = feathered(ellipse_distance(d, x, y), d.opacity, d.blur_sigma);
        if (a <= owner_strength.at(y, x)) continue;
        owner_strength.at(y, x) = a;
        // A drop acts as a small fish-eye lens: inverted and minified.
        const double sx = d.center_x - (x - d.center_x) * kRefractionMinify;
        const double sy = d.center_y - (y - d.center_y) * kRefractionMinify;
        for (int c = 0; c < Image::kChannels; ++c) rd.at(y, x, c) = bilinear(soft, sx, sy, c);
      }
  }
  return rd;
}

Image reflection_layer(const DegradationRecipe& recipe, int height, int width) {
  if (recipe.reflection_image.empty()) {
    throw DimensionError("reflection_layer: reflection image is empty");
  }
  return gaussian_blur(resize_bilinear(recipe.reflection_image, height, width),
                       recipe.reflection_blur_sigma);
}

DegradedPair synthesize_pair(const Image& background, const DegradationRecipe& recipe) {
  recipe.validate();
  const int h = background.height();
  const int w = background.width();
  const AlphaMap amplitude(h, w, recipe.reflection_strength);
  const Image reflected =
      apply_reflection(background, amplitude, reflection_layer(recipe, h, w));
  const AlphaMap alpha = render_alpha(recipe.raindrop, h, w);
  Image degraded = apply_raindrop(reflected, alpha, refraction_layer(reflected, recipe.raindrop));
  return {background, std::move(degraded)};
}

RaindropField random_raindrop_field(int height, int width, std::uint64_t seed,
                                    const RecipeRanges& ranges) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const double side = std::min(height, width);

  RaindropField field;
  const int n_drops = ranges.min_drops +
                      static_cast<int>(rng() % static_cast<std::uint64_t>(
                                                   ranges.max_drops - ranges.min_drops + 1));
  for (int i = 0; i < n_drops; ++i) {
    Drop d;
    d.center_x = uniform(0, width - 1);
    d.center_y = uniform(0, height - 1);
    const double r = side * uniform(ranges.min_radius_frac, ranges.max_radius_frac);
    // roughly a third circular, the rest elliptical
    const double aspect = unit(rng) < 0.33 ? 1.0 : uniform(0.55, 0.95);
    d.axis_a = r;
    d.axis_b = r * aspect;
    d.rotation = uniform(0, std::numbers::pi);
    d.opacity = uniform(0.6, 1.0);
    d.blur_sigma = uniform(0.5, 2.0);
    field.drops.push_back(d);
  }
  const int n_traces = static_cast<int>(rng() % static_cast<std::uint64_t>(ranges.max_traces + 1));
  for (int i = 0; i < n_traces; ++i) {
    TraceSegment t;
    t.x0 = uniform(0, width - 1);
    t.y0 = uniform(0, height * 0.5);
    t.x1 = t.x0 + uniform(-0.05, 0.05) * width;
    t.y1 = t.y0 + uniform(0.1, 0.4) * height;
    t.radius = side * uniform(0.008, 0.02) + 0.5;
    t.opacity = uniform(0.4, 0.8);
    t.blur_sigma = uniform(0.5, 1.5);
    field.trace_segments.push_back(t);
  }
  return field;
}

DegradationRecipe random_recipe(int height, int width, const Image& reflection_source,
                                std::uint64_t seed, const RecipeRanges& ranges) {
  DegradationRecipe r;
  r.seed = seed;
  r.raindrop = random_raindrop_field(height, width, seed, ranges);
  r.reflection_image = reflection_source;
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  r.reflection_strength = ranges.min_strength + (ranges.max_strength - ranges.min_strength) * unit(rng);
  r.reflection_blur_sigma = 1.0 + 2.0 * unit(rng);
  return r;
}

Image procedural_scene(int height, int width, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Image img(height, width);
  double base[3], gx[3], gy[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = 0.25 + 0.5 * unit(rng);
    gx[c] = 0.3 * (unit(rng) - 0.5);
    gy[c] = 0.3 * (unit(rng) - 0.5);
  }
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = base[c] + gx[c] * x / width + gy[c] * y / height;

  // dead-leaves layer: overlapping hard-edged discs and rectangles
  const int leaves = 40 + static_cast<int>(rng() % 40);
  const double side = std::min(height, width);
  for (int b = 0; b < leaves; ++b) {
    const double cx = unit(rng) * width;
    const double cy = unit(rng) * height;
    const double rad = side * (0.03 + 0.12 * std::pow(unit(rng), 2.0));
    const bool disc = unit(rng) < 0.5;
    const double aspect = 0.5 + unit(rng);
    double col[3];
    for (double& v : col) v = 0.05 + 0.9 * unit(rng);
    const int y0 = std::max(0, static_cast<int>(cy - 2 * rad));
    const int y1 = std::min(height - 1, static_cast<int>(cy + 2 * rad));
    const int x0 = std::max(0, static_cast<int>(cx - 2 * rad));
    const int x1 = std::min(width - 1, static_cast<int>(cx + 2 * rad));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = (x - cx) / rad;
        const double dy = (y - cy) / (rad * aspect);
        const bool inside = disc ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
        if (!inside) continue;
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = 0.15 * img.at(y, x, c) + 0.85 * col[c];
      }
  }
  // faint oriented stripes add high frequencies
  const double angle = unit(rng) * std::numbers::pi;
  const double freq = 2 * std::numbers::pi / (6.0 + 10.0 * unit(rng));
  const double amp = 0.02 + 0.03 * unit(rng);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double s = amp * std::sin(freq * (std::cos(angle) * x + std::sin(angle) * y));
      for (int c = 0; c < 3; ++c) img.at(y, x, c) += s;
    }
  return img.clip();
}

nlohmann::json to_json(const RaindropField& field) {
  nlohmann::json drops = nlohmann::json::array();
  for (const auto& d : field.drops) {
    drops.push_back({{"center_x", d.center_x}, {"center_y", d.center_y}, {"axis_a", d.axis_a},
                     {"axis_b", d.axis_b}, {"rotation", d.rotation}, {"opacity", d.opacity},
                     {"blur_sigma", d.blur_sigma}});
  }
  nlohmann::json traces = nlohmann::json::array();
  for (const auto& t : field.trace_segments) {
    traces.push_back({{"x0", t.x0}, {"y0", t.y0}, {"x1", t.x1}, {"y1", t.y1},
                      {"radius", t.radius}, {"opacity", t.opacity}, {"blur_sigma", t.blur_sigma}});
  }
  return {{"drops", drops}, {"trace_segments", traces}};
}

RaindropField raindrop_field_from_json(const nlohmann::json& j) {
  RaindropField f;
  for (const auto& d : j.at("drops")) {
    f.drops.push_back({d.at("center_x"), d.at("center_y"), d.at("axis_a"), d.at("axis_b"),
                       d.at("rotation"), d.at("opacity"), d.at("blur_sigma")});
  }
  for (const auto& t : j.at("trace_segments")) {
    f.trace_segments.push_back({t.at("x0"), t.at("y0"), t.at("x1"), t.at("y1"), t.at("radius"),
                                t.at("opacity"), t.at("blur_sigma")});
  }
  f.validate();
  return f;
}

std::vector<DegradedPair> synthetic_pairs(int count, int height, int width, std::uint64_t seed,
                                          const RecipeRanges& ranges) {
  std::vector<DegradedPair> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    const std::uint64_t s = seed * 1000003ULL + static_cast<std::uint64_t>(i) * 7919ULL;
    const Image background = procedural_scene(height, width, s);
    const Image reflection = procedural_scene(height, width, s + 1);
    out.push_back(synthesize_pair(background, random_recipe(height, width, reflection, s + 2, ranges)));
  }
  return out;
}

}  // namespace ur3
