#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <cmath>

#include "test_util.hpp"
#include "ur3/degradation.hpp"

using namespace ur3;
using ur3::testing::random_image;

namespace {

AlphaMap random_alpha(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  AlphaMap a(h, w);
  for (double& v : a.data()) v = u(rng);
  return a;
}

}  // namespace

TEST_CASE("render_alpha: empty field is zero everywhere") {
  const AlphaMap a = render_alpha({}, 20, 30);
  for (double v : a.data()) CHECK(v == 0.0);
}

TEST_CASE("render_alpha: a hard opaque drop is an indicator") {
  RaindropField f;
  f.drops.push_back({15, 10, 6, 4, 0.3, 1.0, 0.0});
  const AlphaMap a = render_alpha(f, 20, 30);
  CHECK(a.at(10, 15) == 1.0);
  CHECK(a.at(0, 0) == 0.0);
  CHECK(a.at(19, 29) == 0.0);
}

TEST_CASE("render_alpha: overlapping drops combine by max") {
  RaindropField f;
  f.drops.push_back({10, 10, 5, 5, 0, 0.5, 0.0});
  f.drops.push_back({13, 10, 5, 5, 0, 0.5, 0.0});
  const AlphaMap a = render_alpha(f, 20, 24);
  // oracle: pointwise max of the two single-drop maps
  RaindropField f1, f2;
  f1.drops.push_back(f.drops[0]);
  f2.drops.push_back(f.drops[1]);
  const AlphaMap a1 = render_alpha(f1, 20, 24);
  const AlphaMap a2 = render_alpha(f2, 20, 24);
  CHECK(a.at(10, 11) == 0.5);  // overlap center
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 24; ++x) CHECK(a.at(y, x) == std::max(a1.at(y, x), a2.at(y, x)));
}

TEST_CASE("render_alpha: feathering stays in [0,1] and traces render") {
  RaindropField f = random_raindrop_field(48, 64, 11);
  f.trace_segments.push_back({5, 5, 8, 40, 2.0, 0.7, 1.0});
  const AlphaMap a = render_alpha(f, 48, 64);
  for (double v : a.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(a.at(20, 6) > 0.5);
}

TEST_CASE("apply_raindrop / apply_reflection limits") {
  const Image b = random_image(8, 9, 1);
  const Image layer = random_image(8, 9, 2);
  CHECK(apply_raindrop(b, AlphaMap(8, 9, 0.0), layer) == b);
  CHECK(apply_raindrop(b, AlphaMap(8, 9, 1.0), layer) == layer);
  CHECK(apply_reflection(b, AlphaMap(8, 9, 0.0), layer) == b);
  CHECK(apply_reflection(b, AlphaMap(8, 9, 1.0), layer) == layer);

  const Image half = apply_raindrop(Image(4, 4, 0.2), AlphaMap(4, 4, 0.5), Image(4, 4, 0.8));
  for (double v : half.data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-15));
  const Image refl = apply_reflection(Image(4, 4, 1.0), AlphaMap(4, 4, 0.3), Image(4, 4, 0.0));
  for (double v : refl.data()) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));

  CHECK_THROWS_AS(apply_raindrop(b, AlphaMap(8, 8, 0.0), layer), DimensionError);
  CHECK_THROWS_AS(apply_reflection(b, AlphaMap(8, 9, 0.0), random_image(9, 9, 3)), DimensionError);
}

TEST_CASE("blending is affine in the background before clipping") {
  const Image b1 = random_image(10, 10, 4, 0.1, 0.6);
  const Image b2 = random_image(10, 10, 5, 0.1, 0.6);
  const Image rd = random_image(10, 10, 6, 0.2, 0.8);
  const AlphaMap a = random_alpha(10, 10, 7);
  const double lam = 0.37;
  Image mix(10, 10);
  for (std::size_t i = 0; i < mix.data().size(); ++i)
    mix.data()[i] = lam * b1.data()[i] + (1 - lam) * b2.data()[i];
  const Image o1 = apply_raindrop(b1, a, rd);
  const Image o2 = apply_raindrop(b2, a, rd);
  const Image om = apply_raindrop(mix, a, rd);
  for (std::size_t i = 0; i < om.data().size(); ++i)
    CHECK(om.data()[i] == doctest::Approx(lam * o1.data()[i] + (1 - lam) * o2.data()[i]).epsilon(1e-12));
}

TEST_CASE("synthesize_pair: null degradation and reflection-only recipes") {
  const Image b = procedural_scene(40, 48, 1);
  DegradationRecipe r;
  r.reflection_image = procedural_scene(30, 30, 2);
  r.reflection_strength = 0.0;
  auto pair = synthesize_pair(b, r);
  CHECK(pair.clean == b);
  CHECK(pair.degraded == b);

  r.reflection_strength = 0.3;
  pair = synthesize_pair(b, r);
  const Image expected = apply_reflection(b, AlphaMap(40, 48, 0.3), reflection_layer(r, 40, 48));
  CHECK(pair.degraded == expected);
}

TEST_CASE("synthesize_pair: deterministic under a fixed recipe seed") {
  const Image b = procedural_scene(48, 48, 3);
  const Image refl = procedural_scene(48, 48, 4);
  const auto r1 = random_recipe(48, 48, refl, 42);
  const auto r2 = random_recipe(48, 48, refl, 42);
  const auto p1 = synthesize_pair(b, r1);
  const auto p2 = synthesize_pair(b, r2);
  CHECK(p1.degraded == p2.degraded);
  CHECK(!(p1.degraded == b));
  for (double v : p1.degraded.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("synthesize_pair: empty reflection source is rejected") {
  DegradationRecipe r;
  CHECK_THROWS_AS(synthesize_pair(procedural_scene(16, 16, 1), r), DimensionError);
}

TEST_CASE("reflection degradation grows monotonically with strength where Rf > B") {
  const Image b = random_image(12, 12, 8, 0.1, 0.5);
  const Image rf = random_image(12, 12, 9, 0.0, 1.0);
  Image prev_err(12, 12, 0.0);
  for (double s = 0.0; s <= 1.0; s += 0.1) {
    const Image out = apply_reflection(b, AlphaMap(12, 12, s), rf);
    for (int y = 0; y < 12; ++y)
      for (int x = 0; x < 12; ++x)
        for (int c = 0; c < 3; ++c) {
          if (!(rf.at(y, x, c) > b.at(y, x, c))) continue;
          const double err = std::abs(out.at(y, x, c) - b.at(y, x, c));
          CHECK(err >= prev_err.at(y, x, c) - 1e-15);
          prev_err.at(y, x, c) = err;
        }
  }
}

TEST_CASE("raindrop field json round trip keeps every parameter") {
  const RaindropField f = random_raindrop_field(64, 64, 5);
  const RaindropField g = raindrop_field_from_json(to_json(f));
  REQUIRE(g.drops.size() == f.drops.size());
  REQUIRE(g.trace_segments.size() == f.trace_segments.size());
  CHECK(render_alpha(g, 64, 64) == render_alpha(f, 64, 64));
}

TEST_CASE("invalid drop parameters are rejected") {
  RaindropField f;
  f.drops.push_back({0, 0, 0.0, 1, 0, 1, 0});
  CHECK_THROWS(f.validate());
  f.drops[0] = {0, 0, 1, 1, 0, 0.0, 0};
  CHECK_THROWS(f.validate());
}
