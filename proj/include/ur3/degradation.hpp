#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "ur3/image.hpp"

namespace ur3 {

/// Per-pixel blending weight in [0,1]. Holds both the raindrop transparency
/// map and the reflection amplitude map.
using AlphaMap = Plane;

/// Elliptical drop. Center and axes in pixels, rotation in radians.
struct Drop {
  double center_x = 0;
  double center_y = 0;
  double axis_a = 1;
  double axis_b = 1;
  double rotation = 0;
  double opacity = 1;
  double blur_sigma = 0;  // edge feathering width, pixels
};

/// Streak left by a sliding drop: a capsule around a segment.
struct TraceSegment {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double radius = 1;
  double opacity = 1;
  double blur_sigma = 0;
};

struct RaindropField {
  std::vector<Drop> drops;
  std::vector<TraceSegment> trace_segments;

  /// Throws std::invalid_argument on non-positive axes or opacity outside (0,1].
  void validate() const;
};

struct DegradationRecipe {
  RaindropField raindrop;
  Image reflection_image;
  double reflection_strength = 0.0;
  double reflection_blur_sigma = 2.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Rasterizes drops and traces with Gaussian-feathered edges; overlaps combine by max.
AlphaMap render_alpha(const RaindropField& field, int height, int width);

/// clip((1 - A) * B + A * Rd), alpha broadcast over channels.
Image apply_raindrop(const Image& background, const AlphaMap& alpha, const Image& raindrop_layer);

/// clip((1 - W) * B + W * Rf), same blend with the reflection layer.
Image apply_reflection(const Image& background, const AlphaMap& amplitude,
                       const Image& reflection_layer);

/// Inside-drop content: each drop shows a flipped, minified, blurred view of
/// the background around its center. Pixels outside every drop carry the
/// blurred background (their alpha is zero anyway).
Image refraction_layer(const Image& background, const RaindropField& field);

/// Reflection source resized to (height, width) and blurred.
Image reflection_layer(const DegradationRecipe& recipe, int height, int width);

struct DegradedPair {
  Image clean;
  Image degraded;
};

/// Reflection is blended first, raindrops second (drops sit on the glass
/// closest to the camera and occlude the already-blended scene).
DegradedPair synthesize_pair(const Image& background, const DegradationRecipe& recipe);

struct RecipeRanges {
  int min_drops = 4;
  int max_drops = 14;
  int max_traces = 3;
  double min_radius_frac = 0.03;  // of the shorter side
  double max_radius_frac = 0.10;
  double min_strength = 0.1;
  double max_strength = 0.4;
};

/// Draws a random raindrop field (circular, elliptical and streak-shaped drops).
RaindropField random_raindrop_field(int height, int width, std::uint64_t seed,
                                    const RecipeRanges& ranges = {});

DegradationRecipe random_recipe(int height, int width, const Image& reflection_source,
                                std::uint64_t seed, const RecipeRanges& ranges = {});

/// Deterministic textured test scene: smooth gradients, colored blobs and stripes.
Image procedural_scene(int height, int width, std::uint64_t seed);

/// `count` procedural backgrounds degraded with random recipes; the reflection
/// source of pair i is another procedural scene.
std::vector<DegradedPair> synthetic_pairs(int count, int height, int width, std::uint64_t seed,
                                          const RecipeRanges& ranges = {});

nlohmann::json to_json(const RaindropField& field);
RaindropField raindrop_field_from_json(const nlohmann::json& j);

}  // namespace ur3
