#include "ftmtl/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

#include "ftmtl/errors.hpp"

namespace ftmtl {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void fail(const std::string& path, const char* what) {
  throw IoError("png: " + std::string(what) + ": " + path);
}

void write_gray(const std::string& path, int width, int height, int bit_depth,
                const std::vector<png_byte>& bytes) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) fail(path, "cannot open for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail(path, "create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    fail(path, "create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(path, "write error");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(width) * static_cast<std::size_t>(bit_depth / 8);
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y)
    rows[static_cast<std::size_t>(y)] = const_cast<png_bytep>(bytes.data()) + static_cast<std::size_t>(y) * stride;
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::vector<png_byte> read_gray(const std::string& path, int& width, int& height, int expect_depth) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) fail(path, "cannot open for reading");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) fail(path, "create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    fail(path, "create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(path, "read error (corrupt file?)");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  const int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);
  if (color != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(path, "expected a grayscale image");
  }
  if (depth < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
    depth = 8;
  }
  if (expect_depth == 16 && depth == 8) {
    // promote so callers always see 16-bit samples
    png_set_expand_16(png);
    depth = 16;
  }
  if (depth != expect_depth) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(path, expect_depth == 8 ? "expected an 8-bit image" : "expected a 16-bit image");
  }
  png_read_update_info(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  std::vector<png_byte> bytes(stride * static_cast<std::size_t>(height));
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y)
    rows[static_cast<std::size_t>(y)] = bytes.data() + static_cast<std::size_t>(y) * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return bytes;
}

}  // namespace

void write_png_gray16(const std::string& path, int width, int height, const std::vector<std::uint16_t>& pixels) {
  if (static_cast<long>(pixels.size()) != static_cast<long>(width) * height)
    throw IoError("png: pixel count does not match dimensions: " + path);
  std::vector<png_byte> bytes(pixels.size() * 2);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    bytes[2 * i] = static_cast<png_byte>(pixels[i] >> 8);
    bytes[2 * i + 1] = static_cast<png_byte>(pixels[i] & 0xff);
  }
  write_gray(path, width, height, 16, bytes);
}

std::vector<std::uint16_t> read_png_gray16(const std::string& path, int& width, int& height) {
  const auto bytes = read_gray(path, width, height, 16);
  std::vector<std::uint16_t> pixels(bytes.size() / 2);
  for (std::size_t i = 0; i < pixels.size(); ++i)
    pixels[i] = static_cast<std::uint16_t>((bytes[2 * i] << 8) | bytes[2 * i + 1]);
  return pixels;
}

void write_png_gray8(const std::string& path, int width, int height, const std::vector<std::uint8_t>& pixels) {
  if (static_cast<long>(pixels.size()) != static_cast<long>(width) * height)
    throw IoError("png: pixel count does not match dimensions: " + path);
  write_gray(path, width, height, 8, std::vector<png_byte>(pixels.begin(), pixels.end()));
}

std::vector<std::uint8_t> read_png_gray8(const std::string& path, int& width, int& height) {
  const auto bytes = read_gray(path, width, height, 8);
  return {bytes.begin(), bytes.end()};
}

}  // namespace ftmtl
