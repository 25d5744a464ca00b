#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace lacap {

// 8-bit interleaved raster (gray or RGB) as stored on disk.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;

  bool operator==(const Image&) const = default;
};

// Planar C x H x W real-valued image, values nominally in [0, 1].
struct Tensor3 {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  double& at(std::size_t c, std::size_t y, std::size_t x) { return values[(c * height + y) * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return values[(c * height + y) * width + x]; }
  bool operator==(const Tensor3&) const = default;
};

Image read_png(const std::filesystem::path& file);
void write_png(const Image& image, const std::filesystem::path& file);

Tensor3 to_tensor(const Image& image);
// Clamps to [0,1] and rounds to the nearest 8-bit level.
Image to_image(const Tensor3& t);

// Half-pixel-centre bilinear resampling of every channel.
Tensor3 resize_bilinear(const Tensor3& t, std::size_t height, std::size_t width);
Tensor3 crop(const Tensor3& t, std::size_t top, std::size_t left, std::size_t height, std::size_t width);
Tensor3 flip_horizontal(const Tensor3& t);

}  // namespace lacap
