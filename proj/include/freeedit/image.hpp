#ifndef FREEEDIT_IMAGE_HPP
#define FREEEDIT_IMAGE_HPP

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "freeedit/errors.hpp"

namespace freeedit {

// H x W x 3 image, channel values in [0,1], row-major.
struct Image {
    int h = 0;
    int w = 0;
    std::vector<float> px;  // size h*w*3

    Image() = default;
    Image(int h_, int w_, float fill = 0.0f) : h(h_), w(w_), px(std::size_t(h_) * w_ * 3, fill) {}

    float& at(int y, int x, int c) { return px[(std::size_t(y) * w + x) * 3 + c]; }
    float at(int y, int x, int c) const { return px[(std::size_t(y) * w + x) * 3 + c]; }

    bool same_dims(const Image& o) const { return h == o.h && w == o.w; }
};

// H x W single-channel plane (masks, difference maps, flow components).
struct Plane {
    int h = 0;
    int w = 0;
    std::vector<float> v;

    Plane() = default;
    Plane(int h_, int w_, float fill = 0.0f) : h(h_), w(w_), v(std::size_t(h_) * w_, fill) {}

    float& at(int y, int x) { return v[std::size_t(y) * w + x]; }
    float at(int y, int x) const { return v[std::size_t(y) * w + x]; }

    bool same_dims(const Plane& o) const { return h == o.h && w == o.w; }
};

inline std::uint8_t quantize8(float v) {
    float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
    return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

namespace detail {

struct PngFile {
    std::FILE* f = nullptr;
    explicit PngFile(const std::filesystem::path& p, const char* mode) {
        f = std::fopen(p.string().c_str(), mode);
    }
    ~PngFile() {
        if (f) std::fclose(f);
    }
    PngFile(const PngFile&) = delete;
    PngFile& operator=(const PngFile&) = delete;
};

}  // namespace detail

// 8-bit PNG io. color_type is PNG_COLOR_TYPE_RGB (3 ch) or _GRAY (1 ch).
inline void write_png(const std::filesystem::path& path, const std::uint8_t* rows, int h, int w,
                      int channels) {
    detail::PngFile fp(path, "wb");
    if (!fp.f) throw IoError("cannot open for write: " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("png write failed: " + path.string());
    }
    png_init_io(png, fp.f);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rowptrs(h);
    for (int y = 0; y < h; ++y)
        rowptrs[y] = const_cast<png_bytep>(rows + std::size_t(y) * w * channels);
    png_write_image(png, rowptrs.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline std::vector<std::uint8_t> read_png(const std::filesystem::path& path, int& h, int& w,
                                          int expected_channels) {
    detail::PngFile fp(path, "rb");
    if (!fp.f) throw IoError("cannot open for read: " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("png read failed: " + path.string());
    }
    png_init_io(png, fp.f);
    png_read_info(png, info);
    w = static_cast<int>(png_get_image_width(png, info));
    h = static_cast<int>(png_get_image_height(png, info));
    png_byte color = png_get_color_type(png, info);
    png_byte depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (expected_channels == 3) {
        if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
            png_set_gray_to_rgb(png);
        png_set_strip_alpha(png);
    } else {
        if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
            color == PNG_COLOR_TYPE_PALETTE)
            png_set_rgb_to_gray_fixed(png, 1, -1, -1);
        png_set_strip_alpha(png);
    }
    png_read_update_info(png, info);
    std::vector<std::uint8_t> out(std::size_t(h) * w * expected_channels);
    std::vector<png_bytep> rowptrs(h);
    for (int y = 0; y < h; ++y) rowptrs[y] = out.data() + std::size_t(y) * w * expected_channels;
    png_read_image(png, rowptrs.data());
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

inline void save_image_png(const Image& img, const std::filesystem::path& path) {
    std::vector<std::uint8_t> rows(std::size_t(img.h) * img.w * 3);
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = quantize8(img.px[i]);
    write_png(path, rows.data(), img.h, img.w, 3);
}

inline Image load_image_png(const std::filesystem::path& path) {
    int h = 0, w = 0;
    auto rows = read_png(path, h, w, 3);
    Image img(h, w);
    for (std::size_t i = 0; i < rows.size(); ++i) img.px[i] = rows[i] / 255.0f;
    return img;
}

}  // namespace freeedit

#endif
