#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "cut/core/tensor.hpp"

namespace cut::data {

// 8-bit RGB readers; PNG (any colour type) and JPEG. Values scaled to [0, 1].
Tensor3 read_image(const std::filesystem::path& path);

// 8-bit grayscale read, values / 255.
Map2D read_gray(const std::filesystem::path& path);

// Pixels are clamped to [0, 1] and rounded to 8 bits.
void write_png_rgb(const std::filesystem::path& path, const Tensor3& image);
void write_png_gray(const std::filesystem::path& path, const Map2D& values);

// Raw 8-bit buffers, row-major, channels interleaved.
void write_png_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes, int width,
                     int height, int channels);

inline std::uint8_t to_byte(double v) {
  const double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return static_cast<std::uint8_t>(c * 255.0 + 0.5);
}

}  // namespace cut::data
