#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>

#include "xfuse/tensor.hpp"

namespace xfuse {

// Images are CHW tensors with 3 channels and values in [0,1].
inline void check_image(const Tensor& img, const char* who) {
    if (img.rank() != 3 || img.dim(0) != 3)
        throw std::runtime_error(std::string(who) + ": expected [3,H,W] image");
    for (double v : img.v)
        if (!(v >= 0.0 && v <= 1.0))
            throw std::runtime_error(std::string(who) + ": pixel out of [0,1]");
}

inline uint8_t to_byte(double v) {
    const double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    return static_cast<uint8_t>(std::lround(c * 255.0));
}

// Binary portable pixmap, P6 max 255.
inline void save_ppm(const Tensor& img, const std::string& path) {
    check_image(img, "save_ppm");
    const int h = img.dim(1), w = img.dim(2);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_ppm: cannot write " + path);
    f << "P6\n" << w << " " << h << "\n255\n";
    const int64_t hw = static_cast<int64_t>(h) * w;
    std::string buf;
    buf.reserve(static_cast<size_t>(hw) * 3);
    for (int64_t p = 0; p < hw; ++p)
        for (int c = 0; c < 3; ++c)
            buf.push_back(static_cast<char>(to_byte(img.v[c * hw + p])));
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("save_ppm: write failed for " + path);
}

inline Tensor load_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_ppm: cannot open " + path);
    std::string magic;
    f >> magic;
    if (magic != "P6") throw std::runtime_error("load_ppm: not a P6 pixmap: " + path);
    int w = 0, h = 0, maxv = 0;
    f >> w >> h >> maxv;
    if (w <= 0 || h <= 0 || maxv != 255)
        throw std::runtime_error("load_ppm: bad header in " + path);
    f.get();  // single whitespace after header
    const int64_t hw = static_cast<int64_t>(h) * w;
    std::string buf(static_cast<size_t>(hw) * 3, '\0');
    f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (f.gcount() != static_cast<std::streamsize>(buf.size()))
        throw std::runtime_error("load_ppm: truncated pixel data in " + path);
    Tensor img({3, h, w});
    for (int64_t p = 0; p < hw; ++p)
        for (int c = 0; c < 3; ++c)
            img.v[c * hw + p] =
                static_cast<double>(static_cast<uint8_t>(buf[static_cast<size_t>(p * 3 + c)])) / 255.0;
    return img;
}

// Fixed luma weights used everywhere grayscale is needed.
inline Tensor to_gray(const Tensor& img) {
    check_image(img, "to_gray");
    const int h = img.dim(1), w = img.dim(2);
    const int64_t hw = static_cast<int64_t>(h) * w;
    Tensor g({h, w});
    for (int64_t p = 0; p < hw; ++p)
        g.v[p] = 0.299 * img.v[p] + 0.587 * img.v[hw + p] + 0.114 * img.v[2 * hw + p];
    return g;
}

}  // namespace xfuse
