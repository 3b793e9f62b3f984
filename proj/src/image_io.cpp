#include "idmorph/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "idmorph/error.hpp"

namespace idmorph {

Image read_png(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw IoError("cannot read PNG '" + path.string() + "': " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  Image img;
  img.width = png.width;
  img.height = png.height;
  img.rgb.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, img.rgb.data(), 0, nullptr)) {
    png_image_free(&png);
    throw IoError("cannot decode PNG '" + path.string() + "': " + png.message);
  }
  return img;
}

void write_png(const std::filesystem::path& path, const Image& img) {
  if (img.rgb.size() != img.width * img.height * 3 || img.width == 0 || img.height == 0) {
    throw DimensionError("write_png: buffer does not match " + std::to_string(img.width) + "x" +
                         std::to_string(img.height) + " RGB");
  }
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width);
  png.height = static_cast<png_uint_32>(img.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, img.rgb.data(), 0, nullptr)) {
    throw IoError("cannot write PNG '" + path.string() + "': " + png.message);
  }
}

Image resize_bilinear(const Image& img, std::size_t width, std::size_t height) {
  if (img.width == width && img.height == height) return img;
  Image out{width, height, std::vector<std::uint8_t>(width * height * 3)};
  const double sx = double(img.width) / double(width), sy = double(img.height) / double(height);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((double(y) + 0.5) * sy - 0.5, 0.0, double(img.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - double(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((double(x) + 0.5) * sx - 0.5, 0.0, double(img.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - double(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        auto at = [&](std::size_t yy, std::size_t xx) { return double(img.rgb[(yy * img.width + xx) * 3 + c]); };
        const double v = (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) + wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
        out.rgb[(y * width + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  return out;
}

std::vector<float> to_planar(const Image& img) {
  const std::size_t plane = img.width * img.height;
  std::vector<float> out(3 * plane);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) out[c * plane + p] = float(img.rgb[p * 3 + c]) / 127.5f - 1.0f;
  return out;
}

Image from_planar(std::span<const float> chw, std::size_t width, std::size_t height) {
  const std::size_t plane = width * height;
  if (chw.size() != 3 * plane) throw DimensionError("from_planar: buffer does not match image size");
  Image img{width, height, std::vector<std::uint8_t>(3 * plane)};
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      const float v = std::clamp((chw[c * plane + p] + 1.0f) * 127.5f, 0.0f, 255.0f);
      img.rgb[p * 3 + c] = static_cast<std::uint8_t>(std::lround(v));
    }
  return img;
}

}  // namespace idmorph
