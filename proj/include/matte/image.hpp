// SPDX-License-Identifier: Apache-2.0
#ifndef MATTE_IMAGE_HPP
#define MATTE_IMAGE_HPP

#include <png.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "matte/common.hpp"

namespace matte {

// Interleaved RGB, values in [0, 1], row-major.
struct Image {
    int width = 0;
    int height = 0;
    int channels = 3;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, int c = 3) : width(w), height(h), channels(c), data(static_cast<size_t>(w) * h * c, 0.0) {}

    double& at(int x, int y, int c) { return data[(static_cast<size_t>(y) * width + x) * channels + c]; }
    double at(int x, int y, int c) const { return data[(static_cast<size_t>(y) * width + x) * channels + c]; }

    bool empty() const { return width == 0 || height == 0; }

    bool operator==(const Image&) const = default;
};

using Rgb8 = std::array<uint8_t, 3>;

inline uint8_t to_u8(double v) {
    return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline std::vector<Rgb8> to_rgb8(const Image& img) {
    if (img.channels != 3) {
        throw std::invalid_argument("expected an RGB image");
    }
    std::vector<Rgb8> px(static_cast<size_t>(img.width) * img.height);
    for (size_t i = 0; i < px.size(); ++i) {
        px[i] = {to_u8(img.data[i * 3]), to_u8(img.data[i * 3 + 1]), to_u8(img.data[i * 3 + 2])};
    }
    return px;
}

inline Image from_rgb8(int w, int h, const std::vector<Rgb8>& px) {
    Image img(w, h, 3);
    for (size_t i = 0; i < px.size(); ++i) {
        for (int c = 0; c < 3; ++c) {
            img.data[i * 3 + c] = px[i][c] / 255.0;
        }
    }
    return img;
}

// Area-weighted resampling of one channel plane; preserves the mean value.
inline std::vector<double> resample_area(const std::vector<double>& src, int sw, int sh, int dw, int dh) {
    std::vector<double> dst(static_cast<size_t>(dw) * dh, 0.0);
    const double sx = static_cast<double>(sw) / dw;
    const double sy = static_cast<double>(sh) / dh;
    for (int y = 0; y < dh; ++y) {
        const double y0 = y * sy;
        const double y1 = (y + 1) * sy;
        for (int x = 0; x < dw; ++x) {
            const double x0 = x * sx;
            const double x1 = (x + 1) * sx;
            double acc = 0.0;
            double area = 0.0;
            for (int iy = static_cast<int>(std::floor(y0)); iy < std::min(sh, static_cast<int>(std::ceil(y1))); ++iy) {
                const double wy = std::min<double>(iy + 1, y1) - std::max<double>(iy, y0);
                if (wy <= 0) continue;
                for (int ix = static_cast<int>(std::floor(x0)); ix < std::min(sw, static_cast<int>(std::ceil(x1)));
                     ++ix) {
                    const double wx = std::min<double>(ix + 1, x1) - std::max<double>(ix, x0);
                    if (wx <= 0) continue;
                    acc += wx * wy * src[static_cast<size_t>(iy) * sw + ix];
                    area += wx * wy;
                }
            }
            dst[static_cast<size_t>(y) * dw + x] = area > 0 ? acc / area : 0.0;
        }
    }
    return dst;
}

inline Image resize_area(const Image& img, int w, int h) {
    if (img.width == w && img.height == h) {
        return img;
    }
    Image out(w, h, img.channels);
    for (int c = 0; c < img.channels; ++c) {
        std::vector<double> plane(static_cast<size_t>(img.width) * img.height);
        for (size_t i = 0; i < plane.size(); ++i) {
            plane[i] = img.data[i * img.channels + c];
        }
        auto r = resample_area(plane, img.width, img.height, w, h);
        for (size_t i = 0; i < r.size(); ++i) {
            out.data[i * img.channels + c] = r[i];
        }
    }
    return out;
}

inline Image upscale_nearest(const Image& img, int factor) {
    if (factor <= 1) {
        return img;
    }
    Image out(img.width * factor, img.height * factor, img.channels);
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            for (int c = 0; c < img.channels; ++c) {
                out.at(x, y, c) = img.at(x / factor, y / factor, c);
            }
        }
    }
    return out;
}

/*================================================== PNG ==================================================*/

namespace detail {
struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;
}  // namespace detail

// Any PNG color type is converted to 8-bit RGB.
inline Image read_png(const std::string& path) {
    detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) {
        throw std::runtime_error("cannot open image '" + path + "'");
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("libpng init failed");
    }
    std::vector<png_bytep> rows;
    std::vector<uint8_t> buffer;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("invalid PNG '" + path + "'");
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const size_t stride = png_get_rowbytes(png, info);
    buffer.resize(stride * h);
    rows.resize(h);
    for (int y = 0; y < h; ++y) {
        rows[y] = buffer.data() + stride * y;
    }
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);

    Image img(w, h, 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                img.at(x, y, c) = buffer[stride * y + x * 3 + c] / 255.0;
            }
        }
    }
    return img;
}

inline void write_png(const std::string& path, const Image& img) {
    if (img.channels != 3 && img.channels != 1) {
        throw std::invalid_argument("write_png supports 1 or 3 channels");
    }
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) {
        throw std::runtime_error("cannot write image '" + path + "'");
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng init failed");
    }
    std::vector<uint8_t> buffer(static_cast<size_t>(img.width) * img.height * img.channels);
    for (size_t i = 0; i < buffer.size(); ++i) {
        buffer[i] = to_u8(img.data[i]);
    }
    std::vector<png_bytep> rows(img.height);
    for (int y = 0; y < img.height; ++y) {
        rows[y] = buffer.data() + static_cast<size_t>(y) * img.width * img.channels;
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("failed writing PNG '" + path + "'");
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, 8, img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace matte

#endif  // MATTE_IMAGE_HPP
