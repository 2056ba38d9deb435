#pragma once

#include <filesystem>
#include <stdexcept>
#include <vector>

#include "nerftap/diff/tensor.hpp"

namespace nerftap {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes a [C x H x W] image (C = 1 or 3) with values in [0, 1] as an 8-bit PNG.
/// Values are scaled by 255 and rounded half-to-even.
void save_png(const std::filesystem::path& path, const diff::Tensor& image);

/// Reads an 8-bit gray or RGB(A) PNG as a [3 x H x W] tensor in [0, 1].
diff::Tensor load_png(const std::filesystem::path& path);

/// Binary grid [H x W] of 0/1 values as a 1-bit grayscale PNG.
void save_mask_png(const std::filesystem::path& path, const diff::Tensor& grid);
diff::Tensor load_mask_png(const std::filesystem::path& path);

/// round_half_even(clamp(v, 0, 1) * 255).
unsigned char quantize_unit(float v);

}  // namespace nerftap
