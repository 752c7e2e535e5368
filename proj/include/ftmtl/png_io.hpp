#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ftmtl {

// Grayscale PNG I/O. 16-bit samples are packed big-endian by hand so the
// emitted bytes do not depend on host endianness.

void write_png_gray16(const std::string& path, int width, int height, const std::vector<std::uint16_t>& pixels);
std::vector<std::uint16_t> read_png_gray16(const std::string& path, int& width, int& height);

void write_png_gray8(const std::string& path, int width, int height, const std::vector<std::uint8_t>& pixels);
std::vector<std::uint8_t> read_png_gray8(const std::string& path, int& width, int& height);

}  // namespace ftmtl
