#pragma once

#include <cstdint>
#include <string>

#include "camo/image.hpp"

namespace camo::io {

// 8-bit PNG persistence. Images are quantized with round(v*255); masks are
// stored as 0 or 255.
void write_png_rgb8(const std::string& path, const RgbImage& img);
RgbImage read_png_rgb8(const std::string& path);
void write_png_gray8(const std::string& path, const Mask& m);
Mask read_png_gray8(const std::string& path);

// Quantize a float image onto the 8-bit grid it will be stored on.
RgbImage quantize8(const RgbImage& img);

// CRC32 over the quantized pixel bytes (RGB row-major, then mask bytes).
uint32_t pixel_crc32(const RgbImage& img, const Mask& m);

}  // namespace camo::io
