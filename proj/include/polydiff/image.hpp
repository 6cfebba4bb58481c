#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "polydiff/errors.hpp"

// RGB images with float values in [-1, 1], row-major HWC. PPM (P6) is the
// on-disk format; the u8 mapping is round((v+1)/2*255) both ways so
// write-read round-trips are stable.

namespace polydiff {

struct Image {
    int w = 0, h = 0;
    std::vector<float> data;  // h*w*3, [-1,1]

    Image() = default;
    Image(int width, int height, float fill = 0.f)
        : w(width), h(height), data(static_cast<size_t>(width) * height * 3, fill) {}

    float* px(int y, int x) { return data.data() + (static_cast<size_t>(y) * w + x) * 3; }
    const float* px(int y, int x) const { return data.data() + (static_cast<size_t>(y) * w + x) * 3; }

    void set(int y, int x, const float* rgb) {
        float* p = px(y, x);
        p[0] = rgb[0];
        p[1] = rgb[1];
        p[2] = rgb[2];
    }
};

inline uint8_t float_to_u8(float v) {
    float c = std::clamp(v, -1.f, 1.f);
    return static_cast<uint8_t>(std::lround((c + 1.f) * 0.5f * 255.f));
}

inline float u8_to_float(uint8_t b) { return static_cast<float>(b) / 255.f * 2.f - 1.f; }

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw MissingFileError("cannot open image for write: " + path.string());
    os << "P6\n" << img.w << " " << img.h << "\n255\n";
    std::vector<uint8_t> buf(img.data.size());
    for (size_t i = 0; i < img.data.size(); ++i) buf[i] = float_to_u8(img.data[i]);
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!os) throw NumericError("image write failed: " + path.string());
}

inline Image read_ppm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingFileError("image not found: " + path.string());
    std::string magic;
    int w, h, maxv;
    is >> magic >> w >> h >> maxv;
    if (magic != "P6" || maxv != 255 || w <= 0 || h <= 0)
        throw ConfigError("unsupported PPM header in " + path.string());
    is.get();  // single whitespace after maxval
    Image img(w, h);
    std::vector<uint8_t> buf(img.data.size());
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!is) throw ConfigError("truncated PPM payload in " + path.string());
    for (size_t i = 0; i < buf.size(); ++i) img.data[i] = u8_to_float(buf[i]);
    return img;
}

// 2x2 mean pool; sides must be even
inline Image downsample2x(const Image& img) {
    if (img.w % 2 || img.h % 2) throw std::invalid_argument("downsample2x: odd image side");
    Image out(img.w / 2, img.h / 2);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x)
            for (int c = 0; c < 3; ++c)
                out.px(y, x)[c] = 0.25f * (img.px(2 * y, 2 * x)[c] + img.px(2 * y, 2 * x + 1)[c] +
                                           img.px(2 * y + 1, 2 * x)[c] + img.px(2 * y + 1, 2 * x + 1)[c]);
    return out;
}

inline Image upsample2x_nearest(const Image& img) {
    Image out(img.w * 2, img.h * 2);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x) out.set(y, x, img.px(y / 2, x / 2));
    return out;
}

inline double image_mse(const Image& a, const Image& b) {
    if (a.w != b.w || a.h != b.h) throw std::invalid_argument("image_mse: size mismatch");
    double acc = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double d = static_cast<double>(a.data[i]) - b.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.data.size());
}

// PSNR over the [-1,1] range (peak-to-peak 2)
inline double image_psnr(const Image& a, const Image& b) {
    double m = image_mse(a, b);
    if (m <= 0) return 1e9;
    return 10.0 * std::log10(4.0 / m);
}

}  // namespace polydiff
