#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace idmorph {

/// 8-bit interleaved RGB image.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;
};

Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& img);

/// Bilinear resampling with pixel-center alignment.
Image resize_bilinear(const Image& img, std::size_t width, std::size_t height);

/// RGB bytes -> planar [3,H,W] floats in [-1, 1], and back (with rounding).
std::vector<float> to_planar(const Image& img);
Image from_planar(std::span<const float> chw, std::size_t width, std::size_t height);

}  // namespace idmorph
