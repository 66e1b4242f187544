#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ur3 {

/// Thrown when two operands (or an operand and a precondition) disagree on shape.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// H x W x 3 RGB image, interleaved, intensities nominally in [0,1].
///
/// Storage is double so that the blending and metric code can be checked
/// against scalar oracles to ~1e-12. File I/O quantizes to 8 bits.
class Image {
 public:
  static constexpr int kChannels = 3;

  Image() = default;
  Image(int height, int width, double fill = 0.0);

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& at(int y, int x, int c) { return data_[index(y, x, c)]; }
  double at(int y, int x, int c) const { return data_[index(y, x, c)]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool same_shape(const Image& other) const {
    return height_ == other.height_ && width_ == other.width_;
  }

  /// Clamps every value to [0,1] in place.
  Image& clip();
  Image clipped() const;

  bool operator==(const Image& other) const = default;

 private:
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * kChannels + c;
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

/// Single-channel H x W map (alpha masks, error maps, grayscale).
class Plane {
 public:
  Plane() = default;
  Plane(int height, int width, double fill = 0.0)
      : height_(height), width_(width),
        data_(static_cast<std::size_t>(height) * width, fill) {}

  int height() const { return height_; }
  int width() const { return width_; }
  double& at(int y, int x) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  double at(int y, int x) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool operator==(const Plane& other) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<double> data_;
};

struct PatchSpec {
  int top = 0;
  int left = 0;
  int size = 0;
};

void require_same_shape(const Image& a, const Image& b, const char* what);

Image crop(const Image& img, const PatchSpec& patch);
Image crop_region(const Image& img, int top, int left, int height, int width);

/// Picks a uniformly random square patch of side `size`. Same seed, same patch.
PatchSpec random_patch(int height, int width, int size, std::uint64_t seed);
Image random_crop(const Image& img, int size, std::uint64_t seed);

/// Flips are applied first (horizontal, then vertical), then `rot90`
/// counter-clockwise quarter turns.
Image augment(const Image& img, bool flip_h, bool flip_v, int rot90);

Image resize_bilinear(const Image& img, int height, int width);

/// Separable Gaussian blur with edge replication. sigma <= 0 returns a copy.
Image gaussian_blur(const Image& img, double sigma);
Plane gaussian_blur(const Plane& plane, double sigma);

/// Luma (0.299, 0.587, 0.114).
Plane to_gray(const Image& img);

/// Edge-replicating pad so both dims become multiples of `multiple`.
Image pad_to_multiple(const Image& img, int multiple);

std::vector<double> channel_means(const Image& img);

// PNG I/O (8-bit RGB). Reading drops alpha and expands grayscale.
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& img);
void write_png(const std::filesystem::path& path, const Plane& plane);
std::vector<std::uint8_t> encode_png(const Image& img);

}  // namespace ur3
