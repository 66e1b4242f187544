#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "ur3/image.hpp"

namespace ur3 {

struct Point2 {
  double x = 0;
  double y = 0;
};

struct Correspondence {
  Point2 src;
  Point2 dst;
  double score = 0;  // descriptor L2 distance
};

class InsufficientFeaturesError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DegenerateConfigurationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NoModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 3x3 projective transform, row-major, mapping src -> dst.
class Homography {
 public:
  using Matrix = std::array<std::array<double, 3>, 3>;

  Homography();  // identity
  explicit Homography(const Matrix& m);

  static Homography translation(double tx, double ty);

  const Matrix& matrix() const { return m_; }
  double operator()(int r, int c) const { return m_[r][c]; }

  Point2 apply(const Point2& p) const;
  double determinant() const;
  /// Throws DegenerateConfigurationError when |det| <= 1e-12.
  Homography inverse() const;
  /// Scales so that m[2][2] == 1.
  Homography normalized() const;

  /// this * other (apply `other` first).
  Homography operator*(const Homography& other) const;

 private:
  Matrix m_;
};

struct Keypoint {
  double x = 0;
  double y = 0;
  double scale = 1;
  double orientation = 0;
  std::array<float, 128> descriptor{};
};

struct DetectorConfig {
  int intervals = 3;
  double base_sigma = 1.6;
  double contrast_threshold = 0.015;
  double edge_ratio = 10.0;
  int min_octave_side = 16;
  double ratio_test = 0.75;
};

/// Difference-of-Gaussians extrema with sub-pixel refinement, dominant
/// orientations, and 4x4x8 gradient-histogram descriptors.
std::vector<Keypoint> detect_keypoints(const Image& img, const DetectorConfig& cfg = {});

/// Mutual nearest neighbours under L2 that also pass the ratio test.
std::vector<Correspondence> match_keypoints(const std::vector<Keypoint>& a,
                                            const std::vector<Keypoint>& b, double ratio = 0.75);

/// Detects in both images and matches a -> b. Throws InsufficientFeaturesError
/// below 4 matches.
std::vector<Correspondence> detect_and_match(const Image& a, const Image& b,
                                             const DetectorConfig& cfg = {});

/// Normalized DLT, least squares over all correspondences; result has m[2][2] == 1.
Homography estimate_homography_dlt(const std::vector<Correspondence>& pts);

struct RansacConfig {
  int iterations = 2000;
  double inlier_threshold = 3.0;
  int min_inliers = 10;
  std::uint64_t seed = 0;

  void validate() const;
};

struct RansacResult {
  Homography model;
  std::vector<bool> inlier_mask;
  int inlier_count = 0;
  double mean_reprojection_error = 0;  // over inliers, forward direction
};

/// RMS of the forward and backward transfer distances of one correspondence.
double symmetric_transfer_error(const Homography& h, const Homography& h_inv,
                                const Correspondence& c);

RansacResult ransac_homography(const std::vector<Correspondence>& pts, const RansacConfig& cfg);

/// Inverse-mapped bilinear warp; samples outside the source are 0.
Image warp_perspective(const Image& img, const Homography& h, int out_height, int out_width);

void write_correspondences_csv(const std::filesystem::path& path,
                               const std::vector<Correspondence>& pts);
std::vector<Correspondence> read_correspondences_csv(const std::filesystem::path& path);

}  // namespace ur3
