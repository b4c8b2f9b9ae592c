#include "restyle/image.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include <fmt/format.h>

#include "restyle/hashing.hpp"

namespace restyle {

ImageBuffer::ImageBuffer(int width, int height, int channels, double fill)
    : width_(width), height_(height), channels_(channels) {
  if (width < 0 || height < 0 || channels < 1) {
    throw std::invalid_argument(
        fmt::format("invalid image shape {}x{}x{}", width, height, channels));
  }
  data_.assign(pixel_count() * static_cast<std::size_t>(channels), fill);
}

ImageBuffer ImageBuffer::crop(int x0, int y0, int w, int h) const {
  if (x0 < 0 || y0 < 0 || w < 0 || h < 0 || x0 + w > width_ || y0 + h > height_) {
    throw std::out_of_range(fmt::format("crop window ({},{}) {}x{} outside {}x{} image", x0,
                                        y0, w, h, width_, height_));
  }
  ImageBuffer out(w, h, channels_);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < channels_; ++c) {
        out.at(x, y, c) = at(x0 + x, y0 + y, c);
      }
    }
  }
  return out;
}

bool ImageBuffer::finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) {
      return false;
    }
  }
  return true;
}

void require_same_size(const ImageBuffer& a, const ImageBuffer& b, const char* what) {
  if (!a.same_size(b)) {
    throw std::invalid_argument(fmt::format("{}: dimension mismatch {}x{} vs {}x{}", what,
                                            a.width(), a.height(), b.width(), b.height()));
  }
}

std::uint64_t content_hash(const ImageBuffer& image) {
  Fnv1a hash;
  const int shape[3] = {image.width(), image.height(), image.channels()};
  hash.update(shape, sizeof(shape));
  const auto samples = image.samples();
  hash.update(samples.data(), samples.size_bytes());
  return hash.value();
}

}  // namespace restyle
