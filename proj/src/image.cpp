#include "lacap/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace lacap {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

int color_type_for(std::size_t channels) {
  switch (channels) {
    case 1: return PNG_COLOR_TYPE_GRAY;
    case 3: return PNG_COLOR_TYPE_RGB;
    case 4: return PNG_COLOR_TYPE_RGBA;
    default: throw std::invalid_argument("write_png: unsupported channel count " + std::to_string(channels));
  }
}

}  // namespace

Image read_png(const std::filesystem::path& file) {
  FilePtr fp(std::fopen(file.c_str(), "rb"));
  if (!fp) throw std::runtime_error("cannot open image " + file.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("corrupt PNG " + file.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_packing(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  png_read_update_info(png, info);
  Image img;
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = png_get_channels(png, info);
  img.pixels.resize(img.width * img.height * img.channels);
  std::vector<png_bytep> rows(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + y * img.width * img.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png(const Image& image, const std::filesystem::path& file) {
  if (image.pixels.size() != image.width * image.height * image.channels) {
    throw std::invalid_argument("write_png: pixel buffer does not match dimensions");
  }
  const int color_type = color_type_for(image.channels);
  FilePtr fp(std::fopen(file.c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot write image " + file.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("PNG encoding failed for " + file.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(image.height);
  for (std::size_t y = 0; y < image.height; ++y) {
    rows[y] = const_cast<png_bytep>(image.pixels.data() + y * image.width * image.channels);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Tensor3 to_tensor(const Image& image) {
  Tensor3 t{image.channels, image.height, image.width, {}};
  t.values.resize(image.pixels.size());
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x)
      for (std::size_t c = 0; c < image.channels; ++c) {
        t.at(c, y, x) = image.pixels[(y * image.width + x) * image.channels + c] / 255.0;
      }
  return t;
}

Image to_image(const Tensor3& t) {
  Image img{t.width, t.height, t.channels, std::vector<std::uint8_t>(t.values.size())};
  for (std::size_t y = 0; y < t.height; ++y)
    for (std::size_t x = 0; x < t.width; ++x)
      for (std::size_t c = 0; c < t.channels; ++c) {
        const double v = std::clamp(t.at(c, y, x), 0.0, 1.0);
        img.pixels[(y * t.width + x) * t.channels + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  return img;
}

Tensor3 resize_bilinear(const Tensor3& t, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0 || t.height == 0 || t.width == 0) {
    throw std::invalid_argument("resize_bilinear: empty extent");
  }
  Tensor3 out{t.channels, height, width, std::vector<double>(t.channels * height * width)};
  const double sy = static_cast<double>(t.height) / static_cast<double>(height);
  const double sx = static_cast<double>(t.width) / static_cast<double>(width);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(t.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, t.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(t.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, t.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < t.channels; ++c) {
        const double top = t.at(c, y0, x0) * (1.0 - wx) + t.at(c, y0, x1) * wx;
        const double bottom = t.at(c, y1, x0) * (1.0 - wx) + t.at(c, y1, x1) * wx;
        out.at(c, y, x) = top * (1.0 - wy) + bottom * wy;
      }
    }
  }
  return out;
}

Tensor3 crop(const Tensor3& t, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
  if (top + height > t.height || left + width > t.width || height == 0 || width == 0) {
    throw std::invalid_argument("crop: window outside image");
  }
  Tensor3 out{t.channels, height, width, std::vector<double>(t.channels * height * width)};
  for (std::size_t c = 0; c < t.channels; ++c)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) out.at(c, y, x) = t.at(c, top + y, left + x);
  return out;
}

Tensor3 flip_horizontal(const Tensor3& t) {
  Tensor3 out = t;
  for (std::size_t c = 0; c < t.channels; ++c)
    for (std::size_t y = 0; y < t.height; ++y)
      for (std::size_t x = 0; x < t.width; ++x) out.at(c, y, x) = t.at(c, y, t.width - 1 - x);
  return out;
}

}  // namespace lacap
