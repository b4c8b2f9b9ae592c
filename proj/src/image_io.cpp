#include "restyle/image_io.hpp"

#include <png.h>

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>

namespace restyle {

namespace {

std::uint8_t quantize8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::uint16_t quantize16(double v) {
  return static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
}

void png_write_to_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<Bytes*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

void png_flush_noop(png_structp) {}

[[noreturn]] void png_error_throw(png_structp, png_const_charp message) {
  throw std::runtime_error(fmt::format("png: {}", message));
}

void png_warning_ignore(png_structp, png_const_charp) {}

// Owns the libpng write structs for the duration of one encode.
class PngWriter {
 public:
  PngWriter() {
    png_ = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_throw,
                                   png_warning_ignore);
    if (png_ == nullptr) {
      throw std::runtime_error("png: cannot create write struct");
    }
    info_ = png_create_info_struct(png_);
    if (info_ == nullptr) {
      png_destroy_write_struct(&png_, nullptr);
      throw std::runtime_error("png: cannot create info struct");
    }
  }
  ~PngWriter() { png_destroy_write_struct(&png_, &info_); }
  PngWriter(const PngWriter&) = delete;
  PngWriter& operator=(const PngWriter&) = delete;

  Bytes write(int width, int height, int bit_depth, int color_type,
              std::vector<png_bytep>& rows) {
    Bytes out;
    png_set_write_fn(png_, &out, png_write_to_vector, png_flush_noop);
    png_set_IHDR(png_, info_, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height),
                 bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png_, info_);
    if (bit_depth == 16 && std::endian::native == std::endian::little) {
      png_set_swap(png_);
    }
    png_write_image(png_, rows.data());
    png_write_end(png_, nullptr);
    return out;
  }

 private:
  png_structp png_ = nullptr;
  png_infop info_ = nullptr;
};

struct PngSource {
  const Bytes* bytes;
  std::size_t offset;
};

void png_read_from_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* src = static_cast<PngSource*>(png_get_io_ptr(png));
  if (src->offset + length > src->bytes->size()) {
    png_error(png, "truncated stream");
  }
  std::memcpy(data, src->bytes->data() + src->offset, length);
  src->offset += length;
}

}  // namespace

Bytes encode_png8(const ImageBuffer& image) {
  if (image.channels() != 1 && image.channels() != 3) {
    throw std::invalid_argument("encode_png8: expected 1 or 3 channels");
  }
  const int w = image.width();
  const int h = image.height();
  const int ch = image.channels();
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(w) * h * ch);
  const auto samples = image.samples();
  std::transform(samples.begin(), samples.end(), pixels.begin(), quantize8);
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) {
    rows[y] = pixels.data() + static_cast<std::size_t>(y) * w * ch;
  }
  PngWriter writer;
  return writer.write(w, h, 8, ch == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, rows);
}

Bytes encode_png16(const ImageBuffer& gray) {
  if (gray.channels() != 1) {
    throw std::invalid_argument("encode_png16: expected 1 channel");
  }
  const int w = gray.width();
  const int h = gray.height();
  std::vector<std::uint16_t> pixels(gray.pixel_count());
  const auto samples = gray.samples();
  std::transform(samples.begin(), samples.end(), pixels.begin(), quantize16);
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) {
    rows[y] = reinterpret_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(y) * w);
  }
  PngWriter writer;
  return writer.write(w, h, 16, PNG_COLOR_TYPE_GRAY, rows);
}

ImageBuffer decode_png(const Bytes& png_bytes) {
  if (png_bytes.size() < 8 || png_sig_cmp(png_bytes.data(), 0, 8) != 0) {
    throw std::runtime_error("png: bad signature");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_throw,
                                           png_warning_ignore);
  if (png == nullptr) {
    throw std::runtime_error("png: cannot create read struct");
  }
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("png: cannot create info struct");
  }
  PngSource source{&png_bytes, 0};
  try {
    png_set_read_fn(png, &source, png_read_from_vector);
    png_read_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int bit_depth = png_get_bit_depth(png, info);
    const int color_type = png_get_color_type(png, info);
    if (color_type == PNG_COLOR_TYPE_PALETTE) {
      png_set_palette_to_rgb(png);
    }
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) {
      png_set_expand_gray_1_2_4_to_8(png);
    }
    if ((color_type & PNG_COLOR_MASK_ALPHA) != 0) {
      png_set_strip_alpha(png);
    }
    if (bit_depth == 16 && std::endian::native == std::endian::little) {
      png_set_swap(png);
    }
    png_read_update_info(png, info);
    const int channels = png_get_channels(png, info);
    const int out_depth = png_get_bit_depth(png, info);
    const std::size_t row_bytes = png_get_rowbytes(png, info);
    std::vector<std::uint8_t> pixels(row_bytes * static_cast<std::size_t>(h));
    std::vector<png_bytep> rows(static_cast<std::size_t>(h));
    for (int y = 0; y < h; ++y) {
      rows[y] = pixels.data() + static_cast<std::size_t>(y) * row_bytes;
    }
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    ImageBuffer out(w, h, channels);
    auto samples = out.samples();
    if (out_depth == 16) {
      for (int y = 0; y < h; ++y) {
        const auto* row = reinterpret_cast<const std::uint16_t*>(rows[y]);
        for (int i = 0; i < w * channels; ++i) {
          samples[static_cast<std::size_t>(y) * w * channels + i] = row[i] / 65535.0;
        }
      }
    } else {
      for (int y = 0; y < h; ++y) {
        for (int i = 0; i < w * channels; ++i) {
          samples[static_cast<std::size_t>(y) * w * channels + i] = rows[y][i] / 255.0;
        }
      }
    }
    return out;
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
}

Bytes encode_pfm(const ImageBuffer& image) {
  if (image.channels() != 1 && image.channels() != 3) {
    throw std::invalid_argument("encode_pfm: expected 1 or 3 channels");
  }
  const std::string header = fmt::format("{}\n{} {}\n-1.0\n", image.channels() == 3 ? "PF" : "Pf",
                                         image.width(), image.height());
  Bytes out(header.begin(), header.end());
  out.reserve(out.size() + image.pixel_count() * image.channels() * sizeof(float));
  for (int y = image.height() - 1; y >= 0; --y) {
    for (int x = 0; x < image.width(); ++x) {
      for (int c = 0; c < image.channels(); ++c) {
        auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(image.at(x, y, c)));
        for (int b = 0; b < 4; ++b) {
          out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
        }
      }
    }
  }
  return out;
}

ImageBuffer decode_pfm(const Bytes& pfm) {
  // Header: three whitespace-separated tokens followed by one whitespace byte.
  std::size_t pos = 0;
  auto next_token = [&]() {
    while (pos < pfm.size() && std::isspace(pfm[pos]) != 0) {
      ++pos;
    }
    const std::size_t start = pos;
    while (pos < pfm.size() && std::isspace(pfm[pos]) == 0) {
      ++pos;
    }
    if (start == pos) {
      throw std::runtime_error("pfm: truncated header");
    }
    return std::string(pfm.begin() + static_cast<std::ptrdiff_t>(start),
                       pfm.begin() + static_cast<std::ptrdiff_t>(pos));
  };
  const std::string magic = next_token();
  int channels = 0;
  if (magic == "PF") {
    channels = 3;
  } else if (magic == "Pf") {
    channels = 1;
  } else {
    throw std::runtime_error("pfm: bad magic");
  }
  int w = 0;
  int h = 0;
  double scale = 0.0;
  try {
    w = std::stoi(next_token());
    h = std::stoi(next_token());
    scale = std::stod(next_token());
  } catch (const std::logic_error&) {
    throw std::runtime_error("pfm: malformed header");
  }
  ++pos;  // single whitespace byte after scale
  if (w <= 0 || h <= 0 || scale == 0.0) {
    throw std::runtime_error("pfm: invalid dimensions or scale");
  }
  const bool little = scale < 0.0;
  const std::size_t need = static_cast<std::size_t>(w) * h * channels * 4;
  if (pfm.size() < pos || pfm.size() - pos < need) {
    throw std::runtime_error("pfm: truncated data");
  }
  ImageBuffer out(w, h, channels);
  for (int y = h - 1; y >= 0; --y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < channels; ++c) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) {
          const int shift = little ? 8 * b : 8 * (3 - b);
          bits |= static_cast<std::uint32_t>(pfm[pos++]) << shift;
        }
        out.at(x, y, c) = std::bit_cast<float>(bits);
      }
    }
  }
  return out;
}

std::string base64_encode(const Bytes& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

Bytes base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) {
    throw std::runtime_error("base64: length not a multiple of 4");
  }
  Bytes out(3 * text.size() / 4);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) {
    throw std::runtime_error("base64: invalid input");
  }
  // EVP_DecodeBlock keeps the zero bytes produced by '=' padding.
  std::size_t padding = 0;
  if (!text.empty() && text.back() == '=') {
    ++padding;
    if (text.size() > 1 && text[text.size() - 2] == '=') {
      ++padding;
    }
  }
  out.resize(static_cast<std::size_t>(n) - padding);
  return out;
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error(fmt::format("cannot open {}", path.string()));
  }
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, const Bytes& bytes) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw std::runtime_error(fmt::format("write failed for {}", path.string()));
  }
}

void dump_image(const std::filesystem::path& path, const ImageBuffer& image) {
  std::filesystem::path target = path;
  if (!target.has_extension()) {
    target += image.channels() == 3 ? ".png" : ".pfm";
  }
  if (target.extension() == ".png") {
    write_file(target, encode_png8(image));
  } else {
    write_file(target, encode_pfm(image));
  }
}

}  // namespace restyle
