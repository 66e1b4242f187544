#include "ur3/alignment.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

namespace ur3 {

// ---------------------------------------------------------------------------
// Homography

Homography::Homography() : m_{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}} {}

Homography::Homography(const Matrix& m) : m_(m) {
  for (const auto& row : m_)
    for (double v : row)
      if (!std::isfinite(v)) throw std::invalid_argument("homography has non-finite entries");
}

Homography Homography::translation(double tx, double ty) {
  return Homography(Matrix{{{1, 0, tx}, {0, 1, ty}, {0, 0, 1}}});
}

Point2 Homography::apply(const Point2& p) const {
  const double w = m_[2][0] * p.x + m_[2][1] * p.y + m_[2][2];
  return {(m_[0][0] * p.x + m_[0][1] * p.y + m_[0][2]) / w,
          (m_[1][0] * p.x + m_[1][1] * p.y + m_[1][2]) / w};
}

double Homography::determinant() const {
  const auto& m = m_;
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
         m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

Homography Homography::inverse() const {
  const double det = determinant();
  if (!(std::abs(det) > 1e-12)) throw DegenerateConfigurationError("homography is singular");
  const auto& m = m_;
  Matrix inv{};
  inv[0][0] = m[1][1] * m[2][2] - m[1][2] * m[2][1];
  inv[0][1] = m[0][2] * m[2][1] - m[0][1] * m[2][2];
  inv[0][2] = m[0][1] * m[1][2] - m[0][2] * m[1][1];
  inv[1][0] = m[1][2] * m[2][0] - m[1][0] * m[2][2];
  inv[1][1] = m[0][0] * m[2][2] - m[0][2] * m[2][0];
  inv[1][2] = m[0][2] * m[1][0] - m[0][0] * m[1][2];
  inv[2][0] = m[1][0] * m[2][1] - m[1][1] * m[2][0];
  inv[2][1] = m[0][1] * m[2][0] - m[0][0] * m[2][1];
  inv[2][2] = m[0][0] * m[1][1] - m[0][1] * m[1][0];
  for (auto& row : inv)
    for (double& v : row) v /= det;
  return Homography(inv);
}

Homography Homography::normalized() const {
  const double s = m_[2][2];
  if (std::abs(s) < 1e-15) throw DegenerateConfigurationError("homography has m[2][2] == 0");
  Matrix out = m_;
  for (auto& row : out)
    for (double& v : row) v /= s;
  return Homography(out);
}

Homography Homography::operator*(const Homography& other) const {
  Matrix out{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      for (int k = 0; k < 3; ++k) out[r][c] += m_[r][k] * other.m_[k][c];
  return Homography(out);
}

// ---------------------------------------------------------------------------
// Detector

namespace {

struct Octave {
  std::vector<Plane> gauss;
  std::vector<Plane> dog;
};

Plane downsample_half(const Plane& p) {
  Plane out(p.height() / 2, p.width() / 2);
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x) out.at(y, x) = p.at(2 * y, 2 * x);
  return out;
}

Plane subtract(const Plane& a, const Plane& b) {
  Plane out(a.height(), a.width());
  for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  return out;
}

std::vector<Octave> build_pyramid(const Image& img, const DetectorConfig& cfg) {
  const int levels = cfg.intervals + 3;
  const double k = std::pow(2.0, 1.0 / cfg.intervals);
  // incremental blur between consecutive levels
  std::vector<double> inc(levels, 0.0);
  for (int i = 1; i < levels; ++i) {
    const double prev = cfg.base_sigma * std::pow(k, i - 1);
    inc[i] = std::sqrt(prev * k * prev * k - prev * prev);
  }
  constexpr double kAssumedInputBlur = 0.5;
  Plane base = gaussian_blur(
      to_gray(img), std::sqrt(cfg.base_sigma * cfg.base_sigma - kAssumedInputBlur * kAssumedInputBlur));

  std::vector<Octave> pyr;
  while (std::min(base.height(), base.width()) >= cfg.min_octave_side) {
    Octave oct;
    oct.gauss.push_back(base);
    for (int i = 1; i < levels; ++i) oct.gauss.push_back(gaussian_blur(oct.gauss.back(), inc[i]));
    for (int i = 0; i + 1 < levels; ++i) oct.dog.push_back(subtract(oct.gauss[i + 1], oct.gauss[i]));
    base = downsample_half(oct.gauss[cfg.intervals]);
    pyr.push_back(std::move(oct));
  }
  return pyr;
}

bool is_extremum(const std::vector<Plane>& dog, int s, int y, int x) {
  const double v = dog[s].at(y, x);
  const bool is_max = v > 0;
  for (int ds = -1; ds <= 1; ++ds)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        if (ds == 0 && dy == 0 && dx == 0) continue;
        const double n = dog[s + ds].at(y + dy, x + dx);
        if (is_max ? n >= v : n <= v) return false;
      }
  return true;
}

struct Refined {
  double x, y, s, value;
};

// Quadratic fit in (x, y, scale); fails if the peak drifts out or is an edge.
bool refine(const std::vector<Plane>& dog, int s, int y, int x, const DetectorConfig& cfg,
            Refined& out) {
  const int h = dog[0].height();
  const int w = dog[0].width();
  Eigen::Vector3d offset = Eigen::Vector3d::Zero();
  for (int iter = 0; iter < 5; ++iter) {
    const auto& d0 = dog[s];
    const auto& dm = dog[s - 1];
    const auto& dp = dog[s + 1];
    const Eigen::Vector3d grad(0.5 * (d0.at(y, x + 1) - d0.at(y, x - 1)),
                               0.5 * (d0.at(y + 1, x) - d0.at(y - 1, x)),
                               0.5 * (dp.at(y, x) - dm.at(y, x)));
    const double v2 = 2 * d0.at(y, x);
    const double dxx = d0.at(y, x + 1) + d0.at(y, x - 1) - v2;
    const double dyy = d0.at(y + 1, x) + d0.at(y - 1, x) - v2;
    const double dss = dp.at(y, x) + dm.at(y, x) - v2;
    const double dxy = 0.25 * (d0.at(y + 1, x + 1) - d0.at(y + 1, x - 1) -
                               d0.at(y - 1, x + 1) + d0.at(y - 1, x - 1));
    const double dxs = 0.25 * (dp.at(y, x + 1) - dp.at(y, x - 1) - dm.at(y, x + 1) + dm.at(y, x - 1));
    const double dys = 0.25 * (dp.at(y + 1, x) - dp.at(y - 1, x) - dm.at(y + 1, x) + dm.at(y - 1, x));
    Eigen::Matrix3d hess;
    hess << dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss;
    const double det3 = hess.determinant();
    if (std::abs(det3) < 1e-18) return false;
    offset = -hess.inverse() * grad;
    if (offset.cwiseAbs().maxCoeff() < 0.5) {
      const double value = d0.at(y, x) + 0.5 * grad.dot(offset);
      if (std::abs(value) * cfg.intervals < cfg.contrast_threshold) return false;
      const double tr = dxx + dyy;
      const double det = dxx * dyy - dxy * dxy;
      const double r = cfg.edge_ratio;
      if (det <= 0 || tr * tr * r >= (r + 1) * (r + 1) * det) return false;
      out = {x + offset.x(), y + offset.y(), s + offset.z(), value};
      return true;
    }
    x += static_cast<int>(std::lround(offset.x()));
    y += static_cast<int>(std::lround(offset.y()));
    s += static_cast<int>(std::lround(offset.z()));
    if (s < 1 || s > cfg.intervals || x < 1 || x >= w - 1 || y < 1 || y >= h - 1) return false;
  }
  return false;
}

std::vector<double> dominant_orientations(const Plane& g, double x, double y, double sigma) {
  constexpr int kBins = 36;
  std::array<double, kBins> hist{};
  const int radius = static_cast<int>(std::lround(3 * 1.5 * sigma));
  const double weight_sigma = 1.5 * sigma;
  const int cx = static_cast<int>(std::lround(x));
  const int cy = static_cast<int>(std::lround(y));
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) {
      const int px = cx + dx;
      const int py = cy + dy;
      if (px < 1 || py < 1 || px >= g.width() - 1 || py >= g.height() - 1) continue;
      const double gx = g.at(py, px + 1) - g.at(py, px - 1);
      const double gy = g.at(py + 1, px) - g.at(py - 1, px);
      const double mag = std::hypot(gx, gy);
      const double ang = std::atan2(gy, gx);
      const double wgt = std::exp(-(dx * dx + dy * dy) / (2 * weight_sigma * weight_sigma));
      int bin = static_cast<int>(std::lround(kBins * (ang + std::numbers::pi) / (2 * std::numbers::pi)));
      bin = ((bin % kBins) + kBins) % kBins;
      hist[bin] += wgt * mag;
    }
  std::array<double, kBins> smooth{};
  for (int i = 0; i < kBins; ++i) {
    smooth[i] = (hist[(i + kBins - 2) % kBins] + hist[(i + 2) % kBins]) / 16.0 +
                (hist[(i + kBins - 1) % kBins] + hist[(i + 1) % kBins]) * 4.0 / 16.0 +
                hist[i] * 6.0 / 16.0;
  }
  const double peak = *std::max_element(smooth.begin(), smooth.end());
  std::vector<double> out;
  if (peak <= 0) return {0.0};
  for (int i = 0; i < kBins; ++i) {
    const double l = smooth[(i + kBins - 1) % kBins];
    const double r = smooth[(i + 1) % kBins];
    if (smooth[i] > l && smooth[i] > r && smooth[i] >= 0.8 * peak) {
      const double off = 0.5 * (l - r) / (l - 2 * smooth[i] + r);
      const double bin = i + off;
      out.push_back(bin * 2 * std::numbers::pi / kBins - std::numbers::pi);
    }
  }
  return out;
}

std::array<float, 128> describe(const Plane& g, double x, double y, double sigma, double ori) {
  constexpr int kD = 4;
  constexpr int kN = 8;
  std::array<double, (kD + 2) * (kD + 2) * (kN + 2)> hist{};
  auto idx = [](int r, int c, int o) { return (r * (kD + 2) + c) * (kN + 2) + o; };

  const double cos_t = std::cos(ori);
  const double sin_t = std::sin(ori);
  const double hist_width = 3.0 * sigma;
  const int radius = static_cast<int>(std::lround(hist_width * std::numbers::sqrt2 * (kD + 1) * 0.5));
  const int cx = static_cast<int>(std::lround(x));
  const int cy = static_cast<int>(std::lround(y));
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) {
      const double rx = (cos_t * dx + sin_t * dy) / hist_width;
      const double ry = (-sin_t * dx + cos_t * dy) / hist_width;
      const double rbin = ry + kD / 2.0 - 0.5;
      const double cbin = rx + kD / 2.0 - 0.5;
      if (rbin <= -1 || rbin >= kD || cbin <= -1 || cbin >= kD) continue;
      const int px = cx + dx;
      const int py = cy + dy;
      if (px < 1 || py < 1 || px >= g.width() - 1 || py >= g.height() - 1) continue;
      const double gx = g.at(py, px + 1) - g.at(py, px - 1);
      const double gy = g.at(py + 1, px) - g.at(py - 1, px);
      const double mag = std::hypot(gx, gy) *
                         std::exp(-(rx * rx + ry * ry) / (0.5 * kD * kD));
      double ang = std::atan2(gy, gx) - ori;
      while (ang < 0) ang += 2 * std::numbers::pi;
      while (ang >= 2 * std::numbers::pi) ang -= 2 * std::numbers::pi;
      const double obin = ang * kN / (2 * std::numbers::pi);

      const int r0 = static_cast<int>(std::floor(rbin));
      const int c0 = static_cast<int>(std::floor(cbin));
      const int o0 = static_cast<int>(std::floor(obin));
      const double fr = rbin - r0;
      const double fc = cbin - c0;
      const double fo = obin - o0;
      for (int ir = 0; ir <= 1; ++ir)
        for (int ic = 0; ic <= 1; ++ic)
          for (int io = 0; io <= 1; ++io) {
            const double w = (ir ? fr : 1 - fr) * (ic ? fc : 1 - fc) * (io ? fo : 1 - fo);
            hist[idx(r0 + ir + 1, c0 + ic + 1, o0 + io)] += w * mag;
          }
    }

  std::array<double, 128> raw{};
  for (int r = 0; r < kD; ++r)
    for (int c = 0; c < kD; ++c) {
      for (int o = 0; o < kN; ++o) raw[(r * kD + c) * kN + o] = hist[idx(r + 1, c + 1, o)];
      // wrap orientation bins
      raw[(r * kD + c) * kN] += hist[idx(r + 1, c + 1, kN)];
      raw[(r * kD + c) * kN + 1] += hist[idx(r + 1, c + 1, kN + 1)];
    }
  auto normalize = [&raw] {
    double n = 0;
    for (double v : raw) n += v * v;
    n = std::sqrt(n);
    if (n > 0)
      for (double& v : raw) v /= n;
  };
  normalize();
  for (double& v : raw) v = std::min(v, 0.2);
  normalize();
  std::array<float, 128> out{};
  for (int i = 0; i < 128; ++i) out[i] = static_cast<float>(raw[i]);
  return out;
}

double descriptor_distance(const std::array<float, 128>& a, const std::array<float, 128>& b) {
  double s = 0;
  for (int i = 0; i < 128; ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace

std::vector<Keypoint> detect_keypoints(const Image& img, const DetectorConfig& cfg) {
  const auto pyr = build_pyramid(img, cfg);
  std::vector<Keypoint> kps;
  constexpr int kBorder = 5;
  for (std::size_t o = 0; o < pyr.size(); ++o) {
    const auto& oct = pyr[o];
    const double scale = std::pow(2.0, static_cast<double>(o));
    const int h = oct.dog[0].height();
    const int w = oct.dog[0].width();
    const double prelim = 0.5 * cfg.contrast_threshold / cfg.intervals;
    for (int s = 1; s <= cfg.intervals; ++s)
      for (int y = kBorder; y < h - kBorder; ++y)
        for (int x = kBorder; x < w - kBorder; ++x) {
          if (std::abs(oct.dog[s].at(y, x)) < prelim) continue;
          if (!is_extremum(oct.dog, s, y, x)) continue;
          Refined r{};
          if (!refine(oct.dog, s, y, x, cfg, r)) continue;
          const double oct_sigma = cfg.base_sigma * std::pow(2.0, r.s / cfg.intervals);
          const int level = std::clamp(static_cast<int>(std::lround(r.s)), 0,
                                       static_cast<int>(oct.gauss.size()) - 1);
          const Plane& g = oct.gauss[level];
          for (double ori : dominant_orientations(g, r.x, r.y, oct_sigma)) {
            Keypoint kp;
            kp.x = r.x * scale;
            kp.y = r.y * scale;
            kp.scale = oct_sigma * scale;
            kp.orientation = ori;
            kp.descriptor = describe(g, r.x, r.y, oct_sigma, ori);
            kps.push_back(kp);
          }
        }
  }
  return kps;
}

std::vector<Correspondence> match_keypoints(const std::vector<Keypoint>& a,
                                            const std::vector<Keypoint>& b, double ratio) {
  std::vector<Correspondence> out;
  if (a.empty() || b.empty()) return out;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<int> best_ab(a.size(), -1);
  std::vector<double> d1(a.size(), inf), d2(a.size(), inf);
  std::vector<int> best_ba(b.size(), -1);
  std::vector<double> db(b.size(), inf);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) {
      const double d = descriptor_distance(a[i].descriptor, b[j].descriptor);
      if (d < d1[i]) {
        d2[i] = d1[i];
        d1[i] = d;
        best_ab[i] = static_cast<int>(j);
      } else if (d < d2[i]) {
        d2[i] = d;
      }
      if (d < db[j]) {
        db[j] = d;
        best_ba[j] = static_cast<int>(i);
      }
    }
  for (std::size_t i = 0; i < a.size(); ++i) {
    const int j = best_ab[i];
    if (j < 0 || best_ba[j] != static_cast<int>(i)) continue;
    if (!(d1[i] < ratio * d2[i]) && d2[i] != inf) continue;
    out.push_back({{a[i].x, a[i].y}, {b[j].x, b[j].y}, d1[i]});
  }
  return out;
}

std::vector<Correspondence> detect_and_match(const Image& a, const Image& b,
                                             const DetectorConfig& cfg) {
  if (std::min(a.height(), a.width()) < 32 || std::min(b.height(), b.width()) < 32) {
    throw DimensionError("detect_and_match: images must be at least 32x32");
  }
  auto matches = match_keypoints(detect_keypoints(a, cfg), detect_keypoints(b, cfg), cfg.ratio_test);
  if (matches.size() < 4) {
    throw InsufficientFeaturesError("detect_and_match: only " + std::to_string(matches.size()) +
                                    " matches, need at least 4");
  }
  return matches;
}

// ---------------------------------------------------------------------------
// DLT

namespace {

// Similarity taking the centroid to the origin and the mean distance to sqrt(2).
Eigen::Matrix3d hartley_transform(const std::vector<Point2>& pts) {
  double cx = 0, cy = 0;
  for (const auto& p : pts) {
    cx += p.x;
    cy += p.y;
  }
  cx /= pts.size();
  cy /= pts.size();
  double mean_dist = 0;
  for (const auto& p : pts) mean_dist += std::hypot(p.x - cx, p.y - cy);
  mean_dist /= pts.size();
  if (mean_dist < 1e-12) throw DegenerateConfigurationError("DLT: all points coincide");
  const double s = std::numbers::sqrt2 / mean_dist;
  Eigen::Matrix3d t;
  t << s, 0, -s * cx, 0, s, -s * cy, 0, 0, 1;
  return t;
}

bool collinear(const Point2& a, const Point2& b, const Point2& c) {
  const double ux = b.x - a.x, uy = b.y - a.y;
  const double vx = c.x - a.x, vy = c.y - a.y;
  const double cross = ux * vy - uy * vx;
  const double scale = std::hypot(ux, uy) * std::hypot(vx, vy);
  return std::abs(cross) <= 1e-9 * std::max(scale, 1e-300);
}

bool any_three_collinear(const std::array<Point2, 4>& p) {
  return collinear(p[0], p[1], p[2]) || collinear(p[0], p[1], p[3]) ||
         collinear(p[0], p[2], p[3]) || collinear(p[1], p[2], p[3]);
}

bool minimal_set_degenerate(const std::vector<Correspondence>& pts) {
  std::array<Point2, 4> s{}, d{};
  for (int i = 0; i < 4; ++i) {
    s[i] = pts[i].src;
    d[i] = pts[i].dst;
  }
  return any_three_collinear(s) || any_three_collinear(d);
}

}  // namespace

Homography estimate_homography_dlt(const std::vector<Correspondence>& pts) {
  if (pts.size() < 4) throw std::invalid_argument("DLT needs at least 4 correspondences");
  if (pts.size() == 4 && minimal_set_degenerate(pts)) {
    throw DegenerateConfigurationError("DLT: three of the four points are collinear");
  }
  std::vector<Point2> src, dst;
  for (const auto& c : pts) {
    src.push_back(c.src);
    dst.push_back(c.dst);
  }
  const Eigen::Matrix3d ts = hartley_transform(src);
  const Eigen::Matrix3d td = hartley_transform(dst);

  const int n = static_cast<int>(pts.size());
  Eigen::MatrixXd a(2 * n, 9);
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector3d p = ts * Eigen::Vector3d(src[i].x, src[i].y, 1);
    const Eigen::Vector3d q = td * Eigen::Vector3d(dst[i].x, dst[i].y, 1);
    const double x = p.x(), y = p.y(), u = q.x(), v = q.y();
    a.row(2 * i) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
    a.row(2 * i + 1) << x, y, 1, 0, 0, 0, -u * x, -u * y, -u;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  // A rank below 8 leaves more than one null direction.
  if (sv.size() < 8 || sv(7) <= 1e-9 * sv(0)) {
    throw DegenerateConfigurationError("DLT: correspondence matrix is rank deficient");
  }
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Eigen::Matrix3d hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  const Eigen::Matrix3d full = td.inverse() * hn * ts;
  Homography::Matrix m{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m[r][c] = full(r, c);
  Homography out = Homography(m).normalized();
  if (!(std::abs(out.determinant()) > 1e-12)) {
    throw DegenerateConfigurationError("DLT: estimated homography is singular");
  }
  return out;
}

// ---------------------------------------------------------------------------
// RANSAC

void RansacConfig::validate() const {
  if (iterations < 1) throw std::invalid_argument("RANSAC iterations must be >= 1");
  if (!(inlier_threshold > 0)) throw std::invalid_argument("RANSAC threshold must be > 0");
  if (min_inliers < 4) throw std::invalid_argument("RANSAC min_inliers must be >= 4");
}

double symmetric_transfer_error(const Homography& h, const Homography& h_inv,
                                const Correspondence& c) {
  const Point2 f = h.apply(c.src);
  const Point2 b = h_inv.apply(c.dst);
  const double df = (f.x - c.dst.x) * (f.x - c.dst.x) + (f.y - c.dst.y) * (f.y - c.dst.y);
  const double db = (b.x - c.src.x) * (b.x - c.src.x) + (b.y - c.src.y) * (b.y - c.src.y);
  const double e = std::sqrt(0.5 * (df + db));
  return std::isfinite(e) ? e : std::numeric_limits<double>::infinity();
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

int count_inliers(const Homography& h, const std::vector<Correspondence>& pts, double thr,
                  std::vector<bool>* mask) {
  Homography inv;
  try {
    inv = h.inverse();
  } catch (const DegenerateConfigurationError&) {
    return -1;
  }
  int n = 0;
  if (mask) mask->assign(pts.size(), false);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (symmetric_transfer_error(h, inv, pts[i]) <= thr) {
      ++n;
      if (mask) (*mask)[i] = true;
    }
  }
  return n;
}

}  // namespace

RansacResult ransac_homography(const std::vector<Correspondence>& pts, const RansacConfig& cfg) {
  cfg.validate();
  if (pts.size() < 4) throw std::invalid_argument("RANSAC needs at least 4 correspondences");
  const auto n = static_cast<std::uint64_t>(pts.size());

  int best_count = -1;
  Homography best;
  std::vector<Correspondence> sample(4);
  for (int it = 0; it < cfg.iterations; ++it) {
    // independent substream per iteration keeps results order-free and reproducible
    std::mt19937_64 rng(splitmix64(cfg.seed ^ splitmix64(static_cast<std::uint64_t>(it))));
    std::array<std::uint64_t, 4> idx{};
    for (int k = 0; k < 4; ++k) {
      bool fresh = false;
      while (!fresh) {
        idx[k] = rng() % n;
        fresh = std::find(idx.begin(), idx.begin() + k, idx[k]) == idx.begin() + k;
      }
      sample[k] = pts[idx[k]];
    }
    if (minimal_set_degenerate(sample)) continue;
    Homography h;
    try {
      h = estimate_homography_dlt(sample);
    } catch (const DegenerateConfigurationError&) {
      continue;
    }
    const int count = count_inliers(h, pts, cfg.inlier_threshold, nullptr);
    if (count > best_count) {
      best_count = count;
      best = h;
    }
  }
  if (best_count < cfg.min_inliers) {
    throw NoModelError("RANSAC: best consensus " + std::to_string(std::max(best_count, 0)) +
                       " below min_inliers " + std::to_string(cfg.min_inliers));
  }

  RansacResult result;
  count_inliers(best, pts, cfg.inlier_threshold, &result.inlier_mask);
  result.model = best;
  // refit on the consensus set until the mask settles
  for (int round = 0; round < 5; ++round) {
    std::vector<Correspondence> inliers;
    for (std::size_t i = 0; i < pts.size(); ++i)
      if (result.inlier_mask[i]) inliers.push_back(pts[i]);
    Homography refit;
    try {
      refit = estimate_homography_dlt(inliers);
    } catch (const DegenerateConfigurationError&) {
      break;
    }
    std::vector<bool> mask;
    const int count = count_inliers(refit, pts, cfg.inlier_threshold, &mask);
    if (count < cfg.min_inliers) break;
    result.model = refit;
    const bool settled = mask == result.inlier_mask;
    result.inlier_mask = std::move(mask);
    if (settled) break;
  }

  double err = 0;
  int cnt = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (!result.inlier_mask[i]) continue;
    const Point2 p = result.model.apply(pts[i].src);
    err += std::hypot(p.x - pts[i].dst.x, p.y - pts[i].dst.y);
    ++cnt;
  }
  result.inlier_count = cnt;
  result.mean_reprojection_error = cnt ? err / cnt : 0.0;
  return result;
}

// ---------------------------------------------------------------------------
// Warp

Image warp_perspective(const Image& img, const Homography& h, int out_height, int out_width) {
  const Homography inv = h.inverse();
  Image out(out_height, out_width, 0.0);
  const double max_x = img.width() - 1.0;
  const double max_y = img.height() - 1.0;
  constexpr double kEdge = 1e-9;
  for (int y = 0; y < out_height; ++y)
    for (int x = 0; x < out_width; ++x) {
      const auto& m = inv.matrix();
      const double w = m[2][0] * x + m[2][1] * y + m[2][2];
      if (!(w > 0)) continue;
      const double sx = (m[0][0] * x + m[0][1] * y + m[0][2]) / w;
      const double sy = (m[1][0] * x + m[1][1] * y + m[1][2]) / w;
      if (!(sx >= -kEdge && sx <= max_x + kEdge && sy >= -kEdge && sy <= max_y + kEdge)) continue;
      const double fx = std::clamp(sx, 0.0, max_x);
      const double fy = std::clamp(sy, 0.0, max_y);
      const int x0 = static_cast<int>(fx);
      const int y0 = static_cast<int>(fy);
      const int x1 = std::min(x0 + 1, img.width() - 1);
      const int y1 = std::min(y0 + 1, img.height() - 1);
      const double wx = fx - x0;
      const double wy = fy - y0;
      for (int c = 0; c < Image::kChannels; ++c) {
        if (wx == 0.0 && wy == 0.0) {
          out.at(y, x, c) = img.at(y0, x0, c);
          continue;
        }
        out.at(y, x, c) = (img.at(y0, x0, c) * (1 - wx) + img.at(y0, x1, c) * wx) * (1 - wy) +
                          (img.at(y1, x0, c) * (1 - wx) + img.at(y1, x1, c) * wx) * wy;
      }
    }
  return out;
}

void write_correspondences_csv(const std::filesystem::path& path,
                               const std::vector<Correspondence>& pts) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.precision(17);
  f << "src_x,src_y,dst_x,dst_y\n";
  for (const auto& c : pts) f << c.src.x << ',' << c.src.y << ',' << c.dst.x << ',' << c.dst.y << '\n';
}

std::vector<Correspondence> read_correspondences_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::vector<Correspondence> out;
  std::string line;
  bool first = true;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (line.find("src_x") != std::string::npos) continue;
    }
    std::stringstream ss(line);
    std::string cell;
    std::array<double, 4> v{};
    for (double& x : v) {
      if (!std::getline(ss, cell, ',')) throw std::runtime_error("malformed correspondence row: " + line);
      x = std::stod(cell);
    }
    out.push_back({{v[0], v[1]}, {v[2], v[3]}, 0.0});
  }
  return out;
}

}  // namespace ur3
