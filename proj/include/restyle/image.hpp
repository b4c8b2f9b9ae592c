#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace restyle {

/// Row-major interleaved image. Pixel (x, y) channel c lives at
/// ((y * width) + x) * channels + c.
class ImageBuffer {
 public:
  ImageBuffer() = default;
  ImageBuffer(int width, int height, int channels, double fill = 0.0);

  [[nodiscard]] int width() const { return width_; }
  [[nodiscard]] int height() const { return height_; }
  [[nodiscard]] int channels() const { return channels_; }
  [[nodiscard]] std::size_t pixel_count() const {
    return static_cast<std::size_t>(width_) * static_cast<std::size_t>(height_);
  }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  double& at(int x, int y, int c = 0) { return data_[index(x, y, c)]; }
  [[nodiscard]] double at(int x, int y, int c = 0) const { return data_[index(x, y, c)]; }

  [[nodiscard]] std::span<double> samples() { return data_; }
  [[nodiscard]] std::span<const double> samples() const { return data_; }

  [[nodiscard]] bool same_shape(const ImageBuffer& other) const {
    return width_ == other.width_ && height_ == other.height_ && channels_ == other.channels_;
  }
  [[nodiscard]] bool same_size(const ImageBuffer& other) const {
    return width_ == other.width_ && height_ == other.height_;
  }

  /// Copies the window [x0, x0 + w) x [y0, y0 + h); the window must lie inside.
  [[nodiscard]] ImageBuffer crop(int x0, int y0, int w, int h) const;

  /// All samples finite.
  [[nodiscard]] bool finite() const;

  bool operator==(const ImageBuffer& other) const = default;

 private:
  [[nodiscard]] std::size_t index(int x, int y, int c) const {
    return (static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
            static_cast<std::size_t>(x)) *
               static_cast<std::size_t>(channels_) +
           static_cast<std::size_t>(c);
  }

  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

/// Throws std::invalid_argument when the two images differ in width/height.
void require_same_size(const ImageBuffer& a, const ImageBuffer& b, const char* what);

/// 64-bit FNV-1a over the raw sample bytes plus the shape. Used for content
/// addressing and golden checksums.
std::uint64_t content_hash(const ImageBuffer& image);

}  // namespace restyle
