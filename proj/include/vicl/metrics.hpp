#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vicl/errors.hpp"
#include "vicl/image.hpp"

namespace vicl {

// Binarize both at luminance > 0.5; intersection over union. Empty/empty -> 1.
double iou(const Image& pred, const Image& gt);

// 10*log10(1/MSE) over all channels, capped at 99 dB.
double psnr(const Image& pred, const Image& gt);

// Structural similarity on luminance: 11x11 Gaussian window sigma 1.5,
// symmetric-reflect padding, C1=0.01^2, C2=0.03^2, mean over pixels.
// Images smaller than the window fall back to global single-window statistics.
double ssim(const Image& pred, const Image& gt);

// sqrt(mean squared error) on the 0-255 luminance scale.
double rmse255(const Image& pred, const Image& gt);

struct DepthResult {
    double absrel = 0.0;
    double delta1 = 0.0;
};

// Depth via luminance; least-squares affine alignment of pred to gt over
// pixels with gt > 0.01. No valid pixels -> data_error.
DepthResult depth_metrics(const Image& pred, const Image& gt);

struct NormalResult {
    double median_deg = 0.0;
    double mean_deg = 0.0;
};

// Normals decoded as normalize(2*rgb - 1); angular error per pixel in degrees.
// Zero-length vectors are excluded; nothing left -> data_error.
NormalResult normal_metrics(const Image& pred, const Image& gt);

struct MetricRow {
    uint64_t id = 0;
    std::string task;
    std::map<std::string, double> values;
};

// report.json: per-item rows plus per-task means (recomputable from the rows).
void write_report(const std::string& path, const std::vector<MetricRow>& rows);

}  // namespace vicl
