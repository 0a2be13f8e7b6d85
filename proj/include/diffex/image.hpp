#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "diffex/autodiff.hpp"

namespace diffex {

/// A square multi-channel image, values nominally in [0,1].  Stored as
/// (channels x side*side) with pixel p = y * side + x, the same layout the
/// autodiff image batches use, so a batch is a column concatenation.
struct Image {
  Mat<float> pixels;
  int side = 0;

  int channels() const { return static_cast<int>(pixels.rows()); }
  float at(int c, int y, int x) const { return pixels(c, static_cast<Eigen::Index>(y) * side + x); }
  float& at(int c, int y, int x) { return pixels(c, static_cast<Eigen::Index>(y) * side + x); }
};

/// Column-concatenates same-sized images into one batch matrix.
template <typename S = float>
Mat<S> stack_images(const std::vector<const Image*>& images) {
  if (images.empty()) throw InputError("stack_images: empty batch");
  const auto rows = images.front()->pixels.rows();
  const auto hw = images.front()->pixels.cols();
  Mat<S> out(rows, hw * static_cast<Eigen::Index>(images.size()));
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->pixels.rows() != rows || images[i]->pixels.cols() != hw)
      throw InputError("stack_images: shape mismatch");
    out.middleCols(static_cast<Eigen::Index>(i) * hw, hw) = images[i]->pixels.template cast<S>();
  }
  return out;
}

/// Inverse of stack_images for one sample.
inline Image unstack_image(const Mat<float>& batch, int side, Eigen::Index index) {
  const Eigen::Index hw = static_cast<Eigen::Index>(side) * side;
  return Image{batch.middleCols(index * hw, hw), side};
}

/// Writes an 8-bit RGB PNG (channels 0,1,2 -> R,G,B); values are clamped
/// to [0,1] and rounded.  Output bytes are a pure function of the pixels.
void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

/// Raw 8-bit RGB buffer (row-major, interleaved) for composite outputs.
struct Rgb8 {
  int width = 0;
  int height = 0;
  std::vector<unsigned char> data;
};
void write_png(const std::filesystem::path& path, const Rgb8& image);
Rgb8 read_png_rgb8(const std::filesystem::path& path);

}  // namespace diffex
