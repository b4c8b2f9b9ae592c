#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "restyle/image.hpp"

namespace restyle {

using Bytes = std::vector<std::uint8_t>;

// 8-bit PNG. Samples are clamped to [0,1] and rounded to the nearest level.
// Accepts 1- or 3-channel images; decoding always yields 3 channels for RGB
// input and 1 channel for gray input.
Bytes encode_png8(const ImageBuffer& image);
ImageBuffer decode_png(const Bytes& png);

// 16-bit single-channel PNG, samples in [0,1]. Used for normalized condition maps.
Bytes encode_png16(const ImageBuffer& gray);

// Portable float map, little-endian (negative scale), bottom-to-top rows.
Bytes encode_pfm(const ImageBuffer& image);
ImageBuffer decode_pfm(const Bytes& pfm);

std::string base64_encode(const Bytes& bytes);
Bytes base64_decode(std::string_view text);

Bytes read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const Bytes& bytes);

/// Writes 8-bit PNG for 3-channel images and PFM for 1-channel images,
/// picking the extension from the channel count when `path` has none.
void dump_image(const std::filesystem::path& path, const ImageBuffer& image);

}  // namespace restyle
