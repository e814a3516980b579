#pragma once

// 8-bit image container plus PNG round-trip via libpng, and the conversions
// between pixel space and the [-1, 1] identity latent space.

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "mmtryon/errors.hpp"
#include "mmtryon/tensor.hpp"

namespace mmtryon {

struct Image8 {
    int height = 0, width = 0, channels = 0;  // channels: 1 (gray) or 3 (rgb)
    std::vector<uint8_t> data;                // HWC

    static Image8 make(int h, int w, int c, uint8_t fill = 0) {
        Image8 im;
        im.height = h;
        im.width = w;
        im.channels = c;
        im.data.assign(static_cast<size_t>(h) * w * c, fill);
        return im;
    }
    uint8_t& at(int y, int x, int c) {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    uint8_t at(int y, int x, int c) const {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    bool operator==(const Image8& o) const {
        return height == o.height && width == o.width && channels == o.channels && data == o.data;
    }
};

inline void write_png(const std::string& path, const Image8& im) {
    if (im.channels != 1 && im.channels != 3)
        throw std::invalid_argument("write_png: channels must be 1 or 3");
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw FormatError("write_png: cannot open " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        std::fclose(fp);
        throw FormatError("write_png: libpng failure for " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(im.width), static_cast<png_uint_32>(im.height),
                 8, im.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<size_t>(im.height));
    for (int y = 0; y < im.height; ++y)
        rows[static_cast<size_t>(y)] =
            const_cast<png_bytep>(im.data.data() + static_cast<size_t>(y) * im.width * im.channels);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

inline Image8 read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw FormatError("read_png: cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        std::fclose(fp);
        throw FormatError("read_png: libpng failure for " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    png_byte color = png_get_color_type(png, info);
    png_byte depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    int channels = static_cast<int>(png_get_channels(png, info));
    if (channels != 1 && channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw FormatError("read_png: unsupported channel count in " + path);
    }
    Image8 im = Image8::make(static_cast<int>(h), static_cast<int>(w), channels);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y)
        rows[y] = im.data.data() + static_cast<size_t>(y) * w * static_cast<size_t>(channels);
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return im;
}

// --------------------------------------------------------------------------
// pixel <-> tensor conversion
// --------------------------------------------------------------------------

// [C,H,W] in [0, 1]
template <class S>
Tensor<S> image_to_unit(const Image8& im) {
    Tensor<S> t(Shape{im.channels, im.height, im.width});
    int64_t hw = static_cast<int64_t>(im.height) * im.width;
    for (int y = 0; y < im.height; ++y)
        for (int x = 0; x < im.width; ++x)
            for (int c = 0; c < im.channels; ++c)
                t.data()[c * hw + y * im.width + x] = static_cast<S>(im.at(y, x, c)) / S(255);
    return t;
}

template <class S>
Image8 unit_to_image(const Tensor<S>& t) {
    if (t.ndim() != 3) throw std::invalid_argument("unit_to_image: expects [C,H,W]");
    int C = static_cast<int>(t.dim(0)), H = static_cast<int>(t.dim(1)), W = static_cast<int>(t.dim(2));
    Image8 im = Image8::make(H, W, C);
    int64_t hw = static_cast<int64_t>(H) * W;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < C; ++c) {
                double v = static_cast<double>(t.data()[c * hw + y * W + x]);
                v = std::min(1.0, std::max(0.0, v));
                im.at(y, x, c) = static_cast<uint8_t>(std::lround(v * 255.0));
            }
    return im;
}

// identity "latent" codec: pixels scaled to [-1, 1]
template <class S>
Tensor<S> image_to_latent(const Image8& im) {
    Tensor<S> t = image_to_unit<S>(im);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = t.data()[i] * S(2) - S(1);
    return t;
}

template <class S>
Image8 latent_to_image(const Tensor<S>& t) {
    Tensor<S> u = t.detached();
    for (int64_t i = 0; i < u.numel(); ++i) u.data()[i] = (u.data()[i] + S(1)) / S(2);
    return unit_to_image(u);
}

}  // namespace mmtryon
