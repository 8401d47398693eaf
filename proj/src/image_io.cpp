#include "camo/image_io.hpp"

#include <png.h>
#include <zlib.h>

#include <cstdio>
#include <vector>

namespace camo::io {

namespace {

struct FileCloser {
    FILE* f;
    ~FileCloser() {
        if (f) std::fclose(f);
    }
};

std::vector<unsigned char> to_bytes_rgb(const RgbImage& img) {
    const int h = img.height(), w = img.width();
    const int64_t hw = static_cast<int64_t>(h) * w;
    std::vector<unsigned char> bytes(static_cast<size_t>(hw) * 3);
    for (int64_t i = 0; i < hw; ++i)
        for (int c = 0; c < 3; ++c) {
            double v = img.chw.data[c * hw + i];
            int q = static_cast<int>(std::lround(v * 255.0));
            q = std::min(255, std::max(0, q));
            bytes[static_cast<size_t>(i) * 3 + c] = static_cast<unsigned char>(q);
        }
    return bytes;
}

void write_png(const std::string& path, const unsigned char* data, int h, int w, int channels) {
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw LoadError("write_png: cannot open " + path);
    FileCloser closer{f};
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw LoadError("write_png: libpng failure writing " + path);
    }
    png_init_io(png, f);
    png_set_IHDR(png, info, w, h, 8,
                 channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y)
        rows[y] = const_cast<png_bytep>(data + static_cast<size_t>(y) * w * channels);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

std::vector<unsigned char> read_png(const std::string& path, int expect_channels, int& h, int& w) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw LoadError("read_png: cannot open " + path);
    FileCloser closer{f};
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw LoadError("read_png: libpng failure reading " + path);
    }
    png_init_io(png, f);
    png_read_info(png, info);
    w = static_cast<int>(png_get_image_width(png, info));
    h = static_cast<int>(png_get_image_height(png, info));
    const int bit_depth = png_get_bit_depth(png, info);
    const int color_type = png_get_color_type(png, info);
    if (bit_depth != 8) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw LoadError("read_png: expected 8-bit depth in " + path);
    }
    if ((expect_channels == 3 && color_type != PNG_COLOR_TYPE_RGB) ||
        (expect_channels == 1 && color_type != PNG_COLOR_TYPE_GRAY)) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw LoadError("read_png: unexpected color type in " + path);
    }
    std::vector<unsigned char> bytes(static_cast<size_t>(h) * w * expect_channels);
    std::vector<png_bytep> rows(h);
    for (int y = 0; y < h; ++y)
        rows[y] = bytes.data() + static_cast<size_t>(y) * w * expect_channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return bytes;
}

}  // namespace

void write_png_rgb8(const std::string& path, const RgbImage& img) {
    img.validate();
    auto bytes = to_bytes_rgb(img);
    write_png(path, bytes.data(), img.height(), img.width(), 3);
}

RgbImage read_png_rgb8(const std::string& path) {
    int h = 0, w = 0;
    auto bytes = read_png(path, 3, h, w);
    RgbImage img(h, w);
    const int64_t hw = static_cast<int64_t>(h) * w;
    for (int64_t i = 0; i < hw; ++i)
        for (int c = 0; c < 3; ++c)
            img.chw.data[c * hw + i] = bytes[static_cast<size_t>(i) * 3 + c] / 255.0;
    return img;
}

void write_png_gray8(const std::string& path, const Mask& m) {
    m.validate();
    const int h = m.height(), w = m.width();
    std::vector<unsigned char> bytes(static_cast<size_t>(h) * w);
    for (size_t i = 0; i < bytes.size(); ++i)
        bytes[i] = m.hw.data[i] != 0.0 ? 255 : 0;
    write_png(path, bytes.data(), h, w, 1);
}

Mask read_png_gray8(const std::string& path) {
    int h = 0, w = 0;
    auto bytes = read_png(path, 1, h, w);
    Mask m(h, w);
    for (size_t i = 0; i < bytes.size(); ++i) {
        if (bytes[i] != 0 && bytes[i] != 255)
            throw LoadError("read_png_gray8: non-binary mask value in " + path);
        m.hw.data[i] = bytes[i] == 255 ? 1.0 : 0.0;
    }
    return m;
}

RgbImage quantize8(const RgbImage& img) {
    RgbImage out(img.height(), img.width());
    for (size_t i = 0; i < img.chw.data.size(); ++i) {
        int q = static_cast<int>(std::lround(img.chw.data[i] * 255.0));
        q = std::min(255, std::max(0, q));
        out.chw.data[i] = q / 255.0;
    }
    return out;
}

uint32_t pixel_crc32(const RgbImage& img, const Mask& m) {
    auto bytes = to_bytes_rgb(img);
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
    std::vector<unsigned char> mb(m.hw.data.size());
    for (size_t i = 0; i < mb.size(); ++i) mb[i] = m.hw.data[i] != 0.0 ? 255 : 0;
    crc = crc32(crc, mb.data(), static_cast<uInt>(mb.size()));
    return static_cast<uint32_t>(crc);
}

}  // namespace camo::io
