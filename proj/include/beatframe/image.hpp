#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace beatframe {

/// 8-bit RGB raster, row-major, interleaved.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h, std::uint8_t fill = 0);

  std::uint8_t& at(int x, int y, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int x, int y, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  bool empty() const { return width == 0 || height == 0; }
  bool operator==(const Image&) const = default;
};

std::vector<std::uint8_t> encode_png(const Image& image);
/// Throws DecodeError for bytes that are not a decodable image.
Image decode_png(std::span<const std::uint8_t> bytes);
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

/// Bilinear resize (area averaging when shrinking).
Image resize(const Image& image, int width, int height);

/// Mean absolute per-channel difference, in 0..255 units.
double mean_abs_diff(const Image& a, const Image& b);

/// SHA-256 over width, height and raw RGB bytes.
std::string pixel_digest(const Image& image);

}  // namespace beatframe
