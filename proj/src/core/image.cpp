#include "ur3/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <random>

namespace ur3 {

Image::Image(int height, int width, double fill) : height_(height), width_(width) {
  if (height <= 0 || width <= 0) {
    throw DimensionError("image dimensions must be positive, got " + std::to_string(height) +
                         "x" + std::to_string(width));
  }
  data_.assign(static_cast<std::size_t>(height) * width * kChannels, fill);
}

Image& Image::clip() {
  for (double& v : data_) v = std::clamp(v, 0.0, 1.0);
  return *this;
}

Image Image::clipped() const {
  Image out = *this;
  out.clip();
  return out;
}

void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(what) + ": shape mismatch " + std::to_string(a.height()) +
                         "x" + std::to_string(a.width()) + " vs " + std::to_string(b.height()) +
                         "x" + std::to_string(b.width()));
  }
}

Image crop(const Image& img, const PatchSpec& patch) {
  if (patch.size <= 0 || patch.top < 0 || patch.left < 0 ||
      patch.top + patch.size > img.height() || patch.left + patch.size > img.width()) {
    throw DimensionError("crop: patch does not lie inside the image");
  }
  Image out(patch.size, patch.size);
  for (int y = 0; y < patch.size; ++y)
    for (int x = 0; x < patch.size; ++x)
      for (int c = 0; c < Image::kChannels; ++c)
        out.at(y, x, c) = img.at(patch.top + y, patch.left + x, c);
  return out;
}

Image crop_region(const Image& img, int top, int left, int height, int width) {
  if (height <= 0 || width <= 0 || top < 0 || left < 0 || top + height > img.height() ||
      left + width > img.width()) {
    throw DimensionError("crop_region: region does not lie inside the image");
  }
  Image out(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < Image::kChannels; ++c) out.at(y, x, c) = img.at(top + y, left + x, c);
  return out;
}

PatchSpec random_patch(int height, int width, int size, std::uint64_t seed) {
  if (size <= 0 || size > std::min(height, width)) {
    throw DimensionError("random_crop: size " + std::to_string(size) + " exceeds image " +
                         std::to_string(height) + "x" + std::to_string(width));
  }
  std::mt19937_64 rng(seed);
  const auto top_range = static_cast<std::uint64_t>(height - size + 1);
  const auto left_range = static_cast<std::uint64_t>(width - size + 1);
  PatchSpec p;
  p.top = static_cast<int>(rng() % top_range);
  p.left = static_cast<int>(rng() % left_range);
  p.size = size;
  return p;
}

Image random_crop(const Image& img, int size, std::uint64_t seed) {
  return crop(img, random_patch(img.height(), img.width(), size, seed));
}

Image augment(const Image& img, bool flip_h, bool flip_v, int rot90) {
  const int h = img.height();
  const int w = img.width();
  Image flipped(h, w);
  for (int y = 0; y < h; ++y) {
    const int sy = flip_v ? h - 1 - y : y;
    for (int x = 0; x < w; ++x) {
      const int sx = flip_h ? w - 1 - x : x;
      for (int c = 0; c < Image::kChannels; ++c) flipped.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  const int turns = ((rot90 % 4) + 4) % 4;
  Image cur = std::move(flipped);
  for (int t = 0; t < turns; ++t) {
    const int ch = cur.height();
    const int cw = cur.width();
    Image next(cw, ch);
    // counter-clockwise quarter turn
    for (int y = 0; y < cw; ++y)
      for (int x = 0; x < ch; ++x)
        for (int c = 0; c < Image::kChannels; ++c) next.at(y, x, c) = cur.at(x, cw - 1 - y, c);
    cur = std::move(next);
  }
  return cur;
}

Image resize_bilinear(const Image& img, int height, int width) {
  if (height == img.height() && width == img.width()) return img;
  Image out(height, width);
  const double sy = static_cast<double>(img.height()) / height;
  const double sx = static_cast<double>(img.width()) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height() - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.height() - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width() - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.width() - 1);
      const double wx = fx - x0;
      for (int c = 0; c < Image::kChannels; ++c) {
        const double top = img.at(y0, x0, c) * (1 - wx) + img.at(y0, x1, c) * wx;
        const double bot = img.at(y1, x0, c) * (1 - wx) + img.at(y1, x1, c) * wx;
        out.at(y, x, c) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

namespace {

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Blurs `channels` interleaved planes of an h x w buffer.
void blur_buffer(std::span<double> buf, int h, int w, int channels, double sigma) {
  const auto k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(buf.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) {
          const int xx = std::clamp(x + i, 0, w - 1);
          acc += k[i + r] * buf[(static_cast<std::size_t>(y) * w + xx) * channels + c];
        }
        tmp[(static_cast<std::size_t>(y) * w + x) * channels + c] = acc;
      }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) {
          const int yy = std::clamp(y + i, 0, h - 1);
          acc += k[i + r] * tmp[(static_cast<std::size_t>(yy) * w + x) * channels + c];
        }
        buf[(static_cast<std::size_t>(y) * w + x) * channels + c] = acc;
      }
}

}  // namespace

Image gaussian_blur(const Image& img, double sigma) {
  Image out = img;
  if (sigma > 0) blur_buffer(out.data(), out.height(), out.width(), Image::kChannels, sigma);
  return out;
}

Plane gaussian_blur(const Plane& plane, double sigma) {
  Plane out = plane;
  if (sigma > 0) blur_buffer(out.data(), out.height(), out.width(), 1, sigma);
  return out;
}

Plane to_gray(const Image& img) {
  Plane g(img.height(), img.width());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      g.at(y, x) = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
  return g;
}

Image pad_to_multiple(const Image& img, int multiple) {
  const int h = (img.height() + multiple - 1) / multiple * multiple;
  const int w = (img.width() + multiple - 1) / multiple * multiple;
  if (h == img.height() && w == img.width()) return img;
  Image out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < Image::kChannels; ++c)
        out.at(y, x, c) = img.at(std::min(y, img.height() - 1), std::min(x, img.width() - 1), c);
  return out;
}

std::vector<double> channel_means(const Image& img) {
  std::vector<double> m(Image::kChannels, 0.0);
  const auto d = img.data();
  for (std::size_t i = 0; i < d.size(); ++i) m[i % Image::kChannels] += d[i];
  const double n = static_cast<double>(img.height()) * img.width();
  for (double& v : m) v /= n;
  return m;
}

namespace {

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::vector<std::uint8_t> to_bytes(const Image& img) {
  std::vector<std::uint8_t> bytes(img.size());
  const auto d = img.data();
  std::transform(d.begin(), d.end(), bytes.begin(), quantize);
  return bytes;
}

}  // namespace

Image read_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw std::runtime_error("read_png: " + path.string() + ": " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    throw std::runtime_error("read_png: " + path.string() + ": " + msg);
  }
  Image img(static_cast<int>(png.height), static_cast<int>(png.width));
  auto d = img.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = buf[i] / 255.0;
  return img;
}

void write_png(const std::filesystem::path& path, const Image& img) {
  const auto bytes = to_bytes(img);
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width());
  png.height = static_cast<png_uint_32>(img.height());
  png.format = PNG_FORMAT_RGB;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!png_image_write_to_file(&png, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw std::runtime_error("write_png: " + path.string() + ": " + png.message);
  }
}

void write_png(const std::filesystem::path& path, const Plane& plane) {
  std::vector<std::uint8_t> bytes(plane.data().size());
  std::transform(plane.data().begin(), plane.data().end(), bytes.begin(), quantize);
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(plane.width());
  png.height = static_cast<png_uint_32>(plane.height());
  png.format = PNG_FORMAT_GRAY;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!png_image_write_to_file(&png, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw std::runtime_error("write_png: " + path.string() + ": " + png.message);
  }
}

std::vector<std::uint8_t> encode_png(const Image& img) {
  const auto bytes = to_bytes(img);
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width());
  png.height = static_cast<png_uint_32>(img.height());
  png.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, bytes.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("encode_png: ") + png.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, bytes.data(), 0, nullptr)) {
    throw std::runtime_error(std::string("encode_png: ") + png.message);
  }
  out.resize(size);
  return out;
}

}  // namespace ur3
