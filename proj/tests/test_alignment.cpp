#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "test_util.hpp"
#include "ur3/alignment.hpp"
#include "ur3/degradation.hpp"
#include "ur3/metrics.hpp"

using namespace ur3;

namespace {

Homography sample_homography() {
  return Homography(Homography::Matrix{{{1.02, 0.03, 12.0}, {-0.02, 0.98, -7.0}, {2e-5, -1e-5, 1.0}}});
}

std::vector<Correspondence> synthetic_set(const Homography& h, int n_inliers, int n_outliers,
                                          double noise, std::uint64_t seed,
                                          std::vector<bool>* labels = nullptr) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(0, 640), uy(0, 480);
  std::normal_distribution<double> gn(0.0, noise > 0 ? noise : 1.0);
  std::vector<Correspondence> pts;
  for (int i = 0; i < n_inliers; ++i) {
    const Point2 s{ux(rng), uy(rng)};
    Point2 d = h.apply(s);
    if (noise > 0) {
      d.x += gn(rng);
      d.y += gn(rng);
    }
    pts.push_back({s, d, 0});
    if (labels) labels->push_back(true);
  }
  for (int i = 0; i < n_outliers; ++i) {
    pts.push_back({{ux(rng), uy(rng)}, {ux(rng), uy(rng)}, 0});
    if (labels) labels->push_back(false);
  }
  // interleave so that inliers are not a prefix
  std::vector<std::size_t> order(pts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Correspondence> out;
  std::vector<bool> lab;
  for (auto i : order) {
    out.push_back(pts[i]);
    if (labels) lab.push_back((*labels)[i]);
  }
  if (labels) *labels = lab;
  return out;
}

double max_corner_error(const Homography& a, const Homography& b, double w, double h) {
  double m = 0;
  for (const Point2 p : {Point2{0, 0}, Point2{w, 0}, Point2{0, h}, Point2{w, h}}) {
    const Point2 pa = a.apply(p);
    const Point2 pb = b.apply(p);
    m = std::max(m, std::hypot(pa.x - pb.x, pa.y - pb.y));
  }
  return m;
}

double matrix_diff(const Homography& a, const Homography& b) {
  double m = 0;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m = std::max(m, std::abs(a(r, c) - b(r, c)));
  return m;
}

Image smooth_image(int h, int w) {
  Image img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      img.at(y, x, 0) = 0.5 + 0.4 * std::sin(x * 0.07) * std::cos(y * 0.05);
      img.at(y, x, 1) = 0.5 + 0.3 * std::cos(x * 0.04 + y * 0.03);
      img.at(y, x, 2) = 0.3 + 0.002 * x + 0.001 * y;
    }
  return img;
}

}  // namespace

TEST_CASE("detect_and_match on identical images maps every point to itself") {
  const Image a = procedural_scene(128, 128, 21);
  const auto m = detect_and_match(a, a);
  CHECK(m.size() >= 4);
  for (const auto& c : m) {
    CHECK(std::abs(c.src.x - c.dst.x) <= 0.5);
    CHECK(std::abs(c.src.y - c.dst.y) <= 0.5);
  }
}

TEST_CASE("detect_and_match recovers a pure translation") {
  const Image scene = procedural_scene(160, 200, 22);
  const Image a = crop_region(scene, 16, 20, 128, 160);
  const Image b = crop_region(scene, 16, 10, 128, 160);  // b(x) = a(x - 10)
  const auto m = detect_and_match(a, b);
  REQUIRE(m.size() >= 4);
  std::vector<double> dx, dy;
  for (const auto& c : m) {
    dx.push_back(c.dst.x - c.src.x);
    dy.push_back(c.dst.y - c.src.y);
  }
  std::nth_element(dx.begin(), dx.begin() + dx.size() / 2, dx.end());
  std::nth_element(dy.begin(), dy.begin() + dy.size() / 2, dy.end());
  CHECK(std::abs(dx[dx.size() / 2] - 10.0) <= 0.5);
  CHECK(std::abs(dy[dy.size() / 2]) <= 0.5);
}

TEST_CASE("detect_and_match reports insufficient features on a flat image") {
  const Image flat(64, 64, 0.5);
  CHECK_THROWS_AS(detect_and_match(flat, flat), InsufficientFeaturesError);
  CHECK_THROWS_AS(detect_and_match(Image(20, 64, 0.5), flat), DimensionError);
}

TEST_CASE("DLT exact cases") {
  std::vector<Correspondence> id;
  for (const Point2 p : {Point2{0, 0}, Point2{10, 0}, Point2{0, 10}, Point2{10, 12}})
    id.push_back({p, p, 0});
  CHECK(matrix_diff(estimate_homography_dlt(id), Homography()) < 1e-9);

  std::vector<Correspondence> tr;
  for (const auto& c : id) tr.push_back({c.src, {c.src.x + 5, c.src.y - 3}, 0});
  CHECK(matrix_diff(estimate_homography_dlt(tr), Homography::translation(5, -3)) < 1e-7);

  std::vector<Correspondence> line;
  for (int i = 0; i < 4; ++i) line.push_back({{1.0 * i, 2.0 * i}, {1.0 * i, 2.0 * i}, 0});
  CHECK_THROWS_AS(estimate_homography_dlt(line), DegenerateConfigurationError);
  line.push_back({{3, 1}, {3, 1}, 0});  // still only two distinct directions
  CHECK_THROWS_AS(estimate_homography_dlt(line), DegenerateConfigurationError);
  CHECK_THROWS_AS(estimate_homography_dlt({id[0], id[1], id[2]}), std::invalid_argument);
}

TEST_CASE("DLT is equivariant under similarity conjugation") {
  const Homography h = sample_homography();
  const auto pts = synthetic_set(h, 30, 0, 0.0, 5);
  const Homography s(Homography::Matrix{{{0.8 * std::cos(0.3), -0.8 * std::sin(0.3), 40},
                                         {0.8 * std::sin(0.3), 0.8 * std::cos(0.3), -15},
                                         {0, 0, 1}}});
  std::vector<Correspondence> moved;
  for (const auto& c : pts) moved.push_back({s.apply(c.src), s.apply(c.dst), 0});
  const Homography direct = estimate_homography_dlt(moved);
  const Homography conj = (s * estimate_homography_dlt(pts) * s.inverse()).normalized();
  CHECK(matrix_diff(direct, conj) < 1e-6);
}

TEST_CASE("RANSAC recovers an all-inlier model") {
  const Homography h = sample_homography();
  const auto pts = synthetic_set(h, 60, 0, 0.0, 6);
  RansacConfig cfg;
  cfg.seed = 3;
  const auto res = ransac_homography(pts, cfg);
  CHECK(max_corner_error(res.model, h, 640, 480) < 0.1);
  CHECK(res.inlier_count == 60);
  CHECK(matrix_diff(res.model, estimate_homography_dlt(pts)) < 1e-6);
}

TEST_CASE("RANSAC labels inliers among 30% outliers") {
  const Homography h = sample_homography();
  std::vector<bool> labels;
  const auto pts = synthetic_set(h, 140, 60, 0.3, 7, &labels);
  RansacConfig cfg;
  cfg.seed = 11;
  const auto res = ransac_homography(pts, cfg);
  int tp = 0, pos = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (!labels[i]) continue;
    ++pos;
    if (res.inlier_mask[i]) ++tp;
  }
  CHECK(static_cast<double>(tp) / pos >= 0.99);
  CHECK(max_corner_error(res.model, h, 640, 480) < 0.5);

  const auto again = ransac_homography(pts, cfg);
  CHECK(matrix_diff(again.model, res.model) == 0.0);
  CHECK(again.inlier_mask == res.inlier_mask);
}

TEST_CASE("RANSAC preconditions and failure") {
  const auto pts = synthetic_set(sample_homography(), 3, 0, 0.0, 8);
  CHECK_THROWS_AS(ransac_homography(pts, {}), std::invalid_argument);
  const auto noise = synthetic_set(sample_homography(), 0, 40, 0.0, 9);
  RansacConfig cfg;
  cfg.iterations = 200;
  cfg.min_inliers = 20;
  CHECK_THROWS_AS(ransac_homography(noise, cfg), NoModelError);
}

TEST_CASE("warp_perspective identity and integer translation are exact") {
  const Image img = ur3::testing::random_image(20, 24, 1);
  CHECK(warp_perspective(img, Homography(), 20, 24) == img);
  const Image shifted = warp_perspective(img, Homography::translation(3, -2), 20, 24);
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 24; ++x)
      for (int c = 0; c < 3; ++c) {
        const int sx = x - 3, sy = y + 2;
        const bool inside = sx >= 0 && sx < 24 && sy >= 0 && sy < 20;
        CHECK(shifted.at(y, x, c) == (inside ? img.at(sy, sx, c) : 0.0));
      }
  Homography::Matrix singular{{{1, 2, 0}, {2, 4, 0}, {0, 0, 1}}};
  CHECK_THROWS_AS(warp_perspective(img, Homography(singular), 4, 4), DegenerateConfigurationError);
}

TEST_CASE("warp round trip and composition on a smooth image") {
  const Image img = smooth_image(120, 160);
  const Homography h(Homography::Matrix{{{1.01, 0.02, 3.5}, {-0.015, 0.99, 2.25}, {1e-5, 0, 1}}});
  const Image back = warp_perspective(warp_perspective(img, h, 120, 160), h.inverse(), 120, 160);
  const Image a = crop_region(img, 15, 15, 90, 130);
  const Image b = crop_region(back, 15, 15, 90, 130);
  CHECK(psnr(a, b) >= 35.0);

  const Homography h2 = Homography::translation(-2.5, 1.75) * Homography(Homography::Matrix{
                            {{0.995, 0.01, 0}, {0.0, 1.005, 0}, {0, 0, 1}}});
  const Image two_step = warp_perspective(warp_perspective(img, h, 120, 160), h2, 120, 160);
  const Image one_step = warp_perspective(img, h2 * h, 120, 160);
  CHECK(ur3::testing::mean_abs_diff(crop_region(two_step, 15, 15, 90, 130),
                                    crop_region(one_step, 15, 15, 90, 130)) < 1e-2);
}

TEST_CASE("correspondence CSV round trip") {
  const auto pts = synthetic_set(sample_homography(), 10, 0, 0.0, 10);
  const auto path = std::filesystem::temp_directory_path() / "ur3_corr.csv";
  write_correspondences_csv(path, pts);
  const auto back = read_correspondences_csv(path);
  REQUIRE(back.size() == pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    CHECK(back[i].src.x == pts[i].src.x);
    CHECK(back[i].dst.y == pts[i].dst.y);
  }
  std::filesystem::remove(path);
}
