#include "nerftap/util/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace nerftap {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_rows(const std::filesystem::path& path, int width, int height, int color_type, int bit_depth,
                std::vector<std::vector<png_byte>>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw ImageError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw ImageError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageError("failed encoding " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  // Fixed settings and no timestamps so identical pixels give identical files.
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  std::vector<png_bytep> ptrs;
  for (auto& r : rows) ptrs.push_back(r.data());
  png_write_image(png, ptrs.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

struct Decoded {
  int width = 0, height = 0, channels = 0;
  std::vector<png_byte> pixels;
};

Decoded read_png(const std::filesystem::path& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw ImageError("cannot open " + path.string());
  png_byte header[8] = {};
  if (std::fread(header, 1, 8, f.get()) != 8 || png_sig_cmp(header, 0, 8) != 0) {
    throw ImageError("not a PNG file: " + path.string());
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("libpng initialisation failed");
  }
  Decoded d;
  std::vector<png_bytep> ptrs;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("corrupted PNG data in " + path.string());
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  d.width = static_cast<int>(png_get_image_width(png, info));
  d.height = static_cast<int>(png_get_image_height(png, info));
  d.channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  d.pixels.resize(stride * d.height);
  for (int y = 0; y < d.height; ++y) ptrs.push_back(d.pixels.data() + stride * y);
  png_read_image(png, ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return d;
}

}  // namespace

unsigned char quantize_unit(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f) * 255.0f;
  return static_cast<unsigned char>(std::nearbyint(c));
}

void save_png(const std::filesystem::path& path, const diff::Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw diff::ShapeError("save_png", diff::Shape{3, -1, -1}, image.shape);
  }
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<std::vector<png_byte>> rows(h, std::vector<png_byte>(std::size_t(w) * c));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch)
        rows[y][std::size_t(x) * c + ch] = quantize_unit(image.data[(std::size_t(ch) * h + y) * w + x]);
  write_rows(path, w, h, c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, 8, rows);
}

diff::Tensor load_png(const std::filesystem::path& path) {
  const Decoded d = read_png(path);
  diff::Tensor out(diff::Shape{3, d.height, d.width});
  const std::size_t plane = std::size_t(d.height) * d.width;
  for (int y = 0; y < d.height; ++y)
    for (int x = 0; x < d.width; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        const int src = d.channels >= 3 ? ch : 0;
        const png_byte b = d.pixels[(std::size_t(y) * d.width + x) * d.channels + src];
        out.data[ch * plane + std::size_t(y) * d.width + x] = float(b) / 255.0f;
      }
  return out;
}

void save_mask_png(const std::filesystem::path& path, const diff::Tensor& grid) {
  if (grid.rank() != 2) throw diff::ShapeError("save_mask_png", diff::Shape{-1, -1}, grid.shape);
  const int h = grid.dim(0), w = grid.dim(1);
  std::vector<std::vector<png_byte>> rows(h, std::vector<png_byte>((w + 7) / 8, 0));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (grid.data[std::size_t(y) * w + x] >= 0.5f) rows[y][x / 8] |= png_byte(0x80u >> (x % 8));
  write_rows(path, w, h, PNG_COLOR_TYPE_GRAY, 1, rows);
}

diff::Tensor load_mask_png(const std::filesystem::path& path) {
  const Decoded d = read_png(path);
  diff::Tensor out(diff::Shape{d.height, d.width});
  for (int y = 0; y < d.height; ++y)
    for (int x = 0; x < d.width; ++x)
      out.data[std::size_t(y) * d.width + x] = d.pixels[(std::size_t(y) * d.width + x) * d.channels] >= 128 ? 1.0f : 0.0f;
  return out;
}

}  // namespace nerftap
