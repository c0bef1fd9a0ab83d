#pragma once

#include "vicl/errors.hpp"
#include "vicl/image.hpp"
#include "vicl/tensor.hpp"

namespace vicl {

// Non-overlapping patch tokenizer. A [H, W, 3] image becomes tokens [L, p*p*3]
// with L = (H/p)*(W/p); tokens are ordered row-major over the patch grid and
// each patch flattens its pixels row-major with channels innermost.
struct TokenGrid {
    Tensor tokens;  // [L, p*p*3]
    int grid_h = 0;
    int grid_w = 0;
    int patch = 0;
};

inline TokenGrid patchify(const Image& img, int p) {
    if (p <= 0 || img.h % p != 0 || img.w % p != 0)
        throw shape_error("patchify: image " + std::to_string(img.w) + "x" + std::to_string(img.h) +
                          " not divisible by patch " + std::to_string(p));
    TokenGrid tg;
    tg.grid_h = img.h / p;
    tg.grid_w = img.w / p;
    tg.patch = p;
    const size_t L = (size_t)tg.grid_h * tg.grid_w;
    const size_t dim = (size_t)p * p * 3;
    tg.tokens = Tensor::zeros({L, dim});
    for (int gy = 0; gy < tg.grid_h; ++gy)
        for (int gx = 0; gx < tg.grid_w; ++gx) {
            float* tok = tg.tokens.data.data() + ((size_t)gy * tg.grid_w + gx) * dim;
            size_t k = 0;
            for (int py = 0; py < p; ++py)
                for (int px = 0; px < p; ++px)
                    for (int c = 0; c < 3; ++c) tok[k++] = img.at(gy * p + py, gx * p + px, c);
        }
    return tg;
}

inline Image unpatchify(const Tensor& tokens, int grid_h, int grid_w, int p) {
    const size_t L = (size_t)grid_h * grid_w;
    const size_t dim = (size_t)p * p * 3;
    if (tokens.shape.size() != 2 || tokens.shape[0] != L || tokens.shape[1] != dim)
        throw shape_error("unpatchify: tokens " + shape_str(tokens.shape) + " for grid " +
                          std::to_string(grid_w) + "x" + std::to_string(grid_h) + " patch " +
                          std::to_string(p));
    Image img(grid_w * p, grid_h * p);
    for (int gy = 0; gy < grid_h; ++gy)
        for (int gx = 0; gx < grid_w; ++gx) {
            const float* tok = tokens.data.data() + ((size_t)gy * grid_w + gx) * dim;
            size_t k = 0;
            for (int py = 0; py < p; ++py)
                for (int px = 0; px < p; ++px)
                    for (int c = 0; c < 3; ++c) img.at(gy * p + py, gx * p + px, c) = tok[k++];
        }
    return img;
}

}  // namespace vicl
