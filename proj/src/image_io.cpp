#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <string>

#include <unistd.h>

#include "diffex/image.hpp"

namespace diffex {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_rgb_file(const std::filesystem::path& path, int width, int height,
                    const std::vector<unsigned char>& rgb) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot open for writing: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng init failed: " + path.string());
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png write failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, width, height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(rgb.data() + static_cast<std::size_t>(y) * width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fflush(fp.get()) != 0) throw IoError("flush failed: " + path.string());
}

// temp file + rename so a reader never sees half an image
void write_rgb(const std::filesystem::path& path, int width, int height,
               const std::vector<unsigned char>& rgb) {
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  try {
    write_rgb_file(tmp, width, height, rgb);
  } catch (...) {
    std::error_code ec;
    std::filesystem::remove(tmp, ec);
    throw;
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

Rgb8 read_rgb(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open for reading: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng init failed: " + path.string());
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("png read failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  if (png_get_bit_depth(png, info) != 8 || png_get_color_type(png, info) != PNG_COLOR_TYPE_RGB) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("expected 8-bit RGB png: " + path.string());
  }
  Rgb8 out;
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.data.resize(static_cast<std::size_t>(out.width) * out.height * 3);
  for (int y = 0; y < out.height; ++y)
    png_read_row(png, out.data.data() + static_cast<std::size_t>(y) * out.width * 3, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

}  // namespace

void write_png(const std::filesystem::path& path, const Rgb8& image) {
  write_rgb(path, image.width, image.height, image.data);
}

Rgb8 read_png_rgb8(const std::filesystem::path& path) { return read_rgb(path); }

void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.channels() != 3) throw InputError("write_png: expected 3 channels");
  std::vector<unsigned char> rgb(static_cast<std::size_t>(image.side) * image.side * 3);
  for (int p = 0; p < image.side * image.side; ++p)
    for (int c = 0; c < 3; ++c) {
      const float v = std::clamp(image.pixels(c, p), 0.0f, 1.0f);
      rgb[static_cast<std::size_t>(p) * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
  write_rgb(path, image.side, image.side, rgb);
}

Image read_png(const std::filesystem::path& path) {
  const Rgb8 raw = read_rgb(path);
  if (raw.width != raw.height) throw IoError("expected square image: " + path.string());
  Image img{Mat<float>(3, static_cast<Eigen::Index>(raw.width) * raw.height), raw.width};
  for (int p = 0; p < raw.width * raw.height; ++p)
    for (int c = 0; c < 3; ++c)
      img.pixels(c, p) = static_cast<float>(raw.data[static_cast<std::size_t>(p) * 3 + c]) / 255.0f;
  return img;
}

}  // namespace diffex
