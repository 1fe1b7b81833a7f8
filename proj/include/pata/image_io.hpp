#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "pata/errors.hpp"
#include "pata/metrics.hpp"
#include "pata/tensor.hpp"

namespace pata {

namespace image_io_detail {

struct FileCloser {
  void operator()(std::FILE* f) const noexcept {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw InputError("cannot open " + path);
  return f;
}

inline std::string lower_extension(const std::string& path) {
  std::string ext = std::filesystem::path(path).extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext;
}

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

[[noreturn]] inline void png_fail(png_structp png, png_const_charp msg) {
  auto* what = static_cast<std::string*>(png_get_error_ptr(png));
  if (what) *what = msg;
  png_longjmp(png, 1);
}

inline void png_warn(png_structp, png_const_charp) {}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

inline void jpeg_fail(j_common_ptr info) {
  auto* err = reinterpret_cast<JpegError*>(info->err);
  info->err->format_message(info, err->message);
  std::longjmp(err->jump, 1);
}

}  // namespace image_io_detail

/// Decodes a PNG into RGB values in [0,1]. Gray, palette, alpha and 16-bit
/// inputs are converted; alpha is dropped.
inline ImageTensor read_png(const std::string& path) {
  using namespace image_io_detail;
  FilePtr f = open_file(path, "rb");
  std::array<unsigned char, 8> sig{};
  if (std::fread(sig.data(), 1, sig.size(), f.get()) != sig.size() || png_sig_cmp(sig.data(), 0, sig.size()) != 0) {
    throw InputError(path + ": not a PNG file");
  }
  std::string error;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error, png_fail, png_warn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw InputError(path + ": libpng initialization failed");
  }
  ImageTensor img;
  std::vector<png_bytep> rows;
  std::vector<std::uint8_t> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw InputError(path + ": " + (error.empty() ? "PNG decode error" : error));
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, static_cast<int>(sig.size()));
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const std::size_t stride = png_get_rowbytes(png, info);
  buffer.resize(stride * static_cast<std::size_t>(h));
  rows.resize(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = buffer.data() + stride * static_cast<std::size_t>(y);
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  img = ImageTensor(h, w, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = rows[static_cast<std::size_t>(y)][x * 3 + c] / 255.0;
  return img;
}

namespace image_io_detail {

inline void write_png_rows(const std::string& path, int width, int height, int color_type, int bit_depth,
                           const std::vector<std::vector<std::uint8_t>>& rows) {
  FilePtr f = open_file(path, "wb");
  std::string error;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error, png_fail, png_warn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw InputError(path + ": libpng initialization failed");
  }
  std::vector<png_const_bytep> ptrs;
  for (const auto& r : rows) ptrs.push_back(r.data());
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw InputError(path + ": " + (error.empty() ? "PNG encode error" : error));
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_rows(png, const_cast<png_bytepp>(ptrs.data()), static_cast<png_uint_32>(ptrs.size()));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace image_io_detail

/// Writes an 8-bit RGB PNG (values rounded to the nearest 1/255).
inline void write_png(const std::string& path, const ImageTensor& img) {
  if (img.channels != 3 && img.channels != 1) throw InputError("write_png: expected 1 or 3 channels");
  std::vector<std::vector<std::uint8_t>> rows(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) {
    auto& r = rows[static_cast<std::size_t>(y)];
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) r.push_back(image_io_detail::to_byte(img.at(y, x, c)));
  }
  image_io_detail::write_png_rows(path, img.width, img.height,
                                  img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, 8, rows);
}

/// Writes a 1-bit grayscale PNG: white where the mask is set.
inline void write_mask_png(const std::string& path, const BinaryMask& mask) {
  std::vector<std::vector<std::uint8_t>> rows(static_cast<std::size_t>(mask.height));
  for (int y = 0; y < mask.height; ++y) {
    auto& r = rows[static_cast<std::size_t>(y)];
    r.assign(static_cast<std::size_t>((mask.width + 7) / 8), 0);
    for (int x = 0; x < mask.width; ++x)
      if (mask.at(y, x)) r[static_cast<std::size_t>(x / 8)] |= static_cast<std::uint8_t>(0x80u >> (x % 8));
  }
  image_io_detail::write_png_rows(path, mask.width, mask.height, PNG_COLOR_TYPE_GRAY, 1, rows);
}

/// Reads a mask PNG; any nonzero gray value counts as set.
inline BinaryMask read_mask_png(const std::string& path) {
  const ImageTensor img = read_png(path);
  BinaryMask m;
  m.height = img.height;
  m.width = img.width;
  m.bits.resize(static_cast<std::size_t>(img.height) * img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) m.bits[static_cast<std::size_t>(y) * img.width + x] = img.at(y, x, 0) > 0.0;
  return m;
}

inline ImageTensor read_jpeg(const std::string& path) {
  using namespace image_io_detail;
  FilePtr f = open_file(path, "rb");
  jpeg_decompress_struct info{};
  JpegError err{};
  info.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_fail;
  std::vector<std::uint8_t> buffer;
  int w = 0, h = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&info);
    throw InputError(path + ": " + err.message);
  }
  jpeg_create_decompress(&info);
  jpeg_stdio_src(&info, f.get());
  jpeg_read_header(&info, TRUE);
  info.out_color_space = JCS_RGB;
  jpeg_start_decompress(&info);
  w = static_cast<int>(info.output_width);
  h = static_cast<int>(info.output_height);
  buffer.resize(static_cast<std::size_t>(w) * h * 3);
  while (info.output_scanline < info.output_height) {
    JSAMPROW row = buffer.data() + static_cast<std::size_t>(info.output_scanline) * w * 3;
    jpeg_read_scanlines(&info, &row, 1);
  }
  jpeg_finish_decompress(&info);
  jpeg_destroy_decompress(&info);
  ImageTensor img(h, w, 3);
  for (std::size_t i = 0; i < buffer.size(); ++i) img.data[i] = buffer[i] / 255.0;
  return img;
}

inline bool is_image_file(const std::string& path) {
  const auto ext = image_io_detail::lower_extension(path);
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

/// Dispatches on the file extension (.png, .jpg, .jpeg).
inline ImageTensor read_image(const std::string& path) {
  const auto ext = image_io_detail::lower_extension(path);
  if (ext == ".png") return read_png(path);
  if (ext == ".jpg" || ext == ".jpeg") return read_jpeg(path);
  throw InputError(path + ": unsupported image format");
}

// Lossless storage for audit: "PXF64\n", then height, width, channels as
// little-endian int32, then the values as little-endian float64.

inline constexpr char kRawImageMagic[6] = {'P', 'X', 'F', '6', '4', '\n'};

inline void write_raw_image(const std::string& path, const ImageTensor& img) {
  static_assert(std::endian::native == std::endian::little, "raw image format assumes a little-endian host");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  out.write(kRawImageMagic, sizeof kRawImageMagic);
  const std::int32_t dims[3] = {img.height, img.width, img.channels};
  out.write(reinterpret_cast<const char*>(dims), sizeof dims);
  out.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.data.size() * sizeof(double)));
  if (!out) throw InputError("short write to " + path);
}

inline ImageTensor read_raw_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  char magic[sizeof kRawImageMagic];
  std::int32_t dims[3];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kRawImageMagic, sizeof magic) != 0) {
    throw InputError(path + ": not a raw image file");
  }
  if (!in.read(reinterpret_cast<char*>(dims), sizeof dims) || dims[0] < 1 || dims[1] < 1 || dims[2] < 1) {
    throw InputError(path + ": bad raw image header");
  }
  ImageTensor img(dims[0], dims[1], dims[2]);
  if (!in.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size() * sizeof(double)))) {
    throw InputError(path + ": truncated raw image");
  }
  return img;
}

}  // namespace pata
