#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "vicl/errors.hpp"

namespace vicl {

// RGB image, floats in [0,1], row-major [h, w, 3].
struct Image {
    int w = 0;
    int h = 0;
    std::vector<float> data;

    Image() = default;
    Image(int w_, int h_, float fill = 0.f) : w(w_), h(h_), data((size_t)w_ * h_ * 3, fill) {}

    float& at(int y, int x, int c) { return data[((size_t)y * w + x) * 3 + c]; }
    float at(int y, int x, int c) const { return data[((size_t)y * w + x) * 3 + c]; }
    size_t numel() const { return data.size(); }
};

// One in-context training item: exemplar pair (xs -> xt), query xq, answer yq.
struct Quadruplet {
    Image xs, xt, xq, yq;
};

// Rec.601 luma; the scalar reduction used by the grayscale-dependent tasks and metrics.
inline float luminance(float r, float g, float b) {
    return 0.299f * r + 0.587f * g + 0.114f * b;
}

inline std::vector<float> luminance_plane(const Image& img) {
    std::vector<float> out((size_t)img.w * img.h);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            out[(size_t)y * img.w + x] = luminance(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
    return out;
}

inline float clamp01(float v) { return v < 0.f ? 0.f : (v > 1.f ? 1.f : v); }

// Snap a channel value onto the 8-bit grid: the fixed point of a PPM round trip.
inline float quantize_u8(float v) { return std::round(clamp01(v) * 255.f) / 255.f; }

inline Image quantize_u8(Image img) {
    for (auto& v : img.data) v = quantize_u8(v);
    return img;
}

// Binary PPM (P6, maxval 255). Read maps byte b to b/255; write rounds
// clamp(v,0,1)*255 to the nearest byte.
Image load_ppm(const std::string& path);
void save_ppm(const std::string& path, const Image& img);

}  // namespace vicl
