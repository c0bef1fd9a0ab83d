#include "vicl/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace vicl {
namespace {

constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;
constexpr int kWin = 11;
constexpr double kSigma = 1.5;

void require_same_dims(const Image& a, const Image& b, const char* op) {
    if (a.w != b.w || a.h != b.h)
        throw shape_error(std::string(op) + ": dimension mismatch " + std::to_string(a.w) + "x" +
                          std::to_string(a.h) + " vs " + std::to_string(b.w) + "x" +
                          std::to_string(b.h));
}

std::vector<double> lum_plane(const Image& img) {
    std::vector<double> out((size_t)img.w * img.h);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            out[(size_t)y * img.w + x] = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) +
                                         0.114 * img.at(y, x, 2);
    return out;
}

// symmetric reflection with edge repeat: -1 -> 0, n -> n-1
int reflect(int i, int n) {
    if (i < 0) i = -1 - i;
    if (i >= n) i = 2 * n - 1 - i;
    return i;
}

const std::vector<double>& gauss_taps() {
    static const std::vector<double> taps = [] {
        std::vector<double> t(kWin);
        double sum = 0.0;
        for (int i = 0; i < kWin; ++i) {
            const double d = i - (kWin - 1) / 2.0;
            t[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
            sum += t[i];
        }
        for (auto& v : t) v /= sum;
        return t;
    }();
    return taps;
}

// separable Gaussian blur with reflect padding
std::vector<double> blur(const std::vector<double>& p, int w, int h) {
    const auto& g = gauss_taps();
    const int r = kWin / 2;
    std::vector<double> tmp((size_t)w * h), out((size_t)w * h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int k = -r; k <= r; ++k) s += g[k + r] * p[(size_t)y * w + reflect(x + k, w)];
            tmp[(size_t)y * w + x] = s;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int k = -r; k <= r; ++k) s += g[k + r] * tmp[(size_t)reflect(y + k, h) * w + x];
            out[(size_t)y * w + x] = s;
        }
    return out;
}

double ssim_value(double mx, double my, double vx, double vy, double cov) {
    vx = std::max(vx, 0.0);
    vy = std::max(vy, 0.0);
    return ((2.0 * mx * my + kC1) * (2.0 * cov + kC2)) /
           ((mx * mx + my * my + kC1) * (vx + vy + kC2));
}

}  // namespace

double iou(const Image& pred, const Image& gt) {
    require_same_dims(pred, gt, "iou");
    const auto lp = lum_plane(pred), lg = lum_plane(gt);
    size_t inter = 0, uni = 0;
    for (size_t i = 0; i < lp.size(); ++i) {
        const bool a = lp[i] > 0.5, b = lg[i] > 0.5;
        inter += a && b;
        uni += a || b;
    }
    return uni == 0 ? 1.0 : (double)inter / (double)uni;
}

double psnr(const Image& pred, const Image& gt) {
    require_same_dims(pred, gt, "psnr");
    double mse = 0.0;
    for (size_t i = 0; i < pred.data.size(); ++i) {
        const double d = (double)pred.data[i] - (double)gt.data[i];
        mse += d * d;
    }
    mse /= (double)pred.data.size();
    if (mse == 0.0) return 99.0;
    return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Image& pred, const Image& gt) {
    require_same_dims(pred, gt, "ssim");
    const auto x = lum_plane(pred), y = lum_plane(gt);
    const int w = pred.w, h = pred.h;

    if (w < kWin || h < kWin) {  // global single-window statistics
        const double n = (double)x.size();
        double mx = 0, my = 0;
        for (size_t i = 0; i < x.size(); ++i) {
            mx += x[i];
            my += y[i];
        }
        mx /= n;
        my /= n;
        double vx = 0, vy = 0, cov = 0;
        for (size_t i = 0; i < x.size(); ++i) {
            vx += (x[i] - mx) * (x[i] - mx);
            vy += (y[i] - my) * (y[i] - my);
            cov += (x[i] - mx) * (y[i] - my);
        }
        return ssim_value(mx, my, vx / n, vy / n, cov / n);
    }

    std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    const auto mx = blur(x, w, h), my = blur(y, w, h);
    const auto mxx = blur(xx, w, h), myy = blur(yy, w, h), mxy = blur(xy, w, h);
    double acc = 0.0;
    for (size_t i = 0; i < x.size(); ++i)
        acc += ssim_value(mx[i], my[i], mxx[i] - mx[i] * mx[i], myy[i] - my[i] * my[i],
                          mxy[i] - mx[i] * my[i]);
    return acc / (double)x.size();
}

double rmse255(const Image& pred, const Image& gt) {
    require_same_dims(pred, gt, "rmse255");
    const auto lp = lum_plane(pred), lg = lum_plane(gt);
    double acc = 0.0;
    for (size_t i = 0; i < lp.size(); ++i) {
        const double d = 255.0 * (lp[i] - lg[i]);
        acc += d * d;
    }
    return std::sqrt(acc / (double)lp.size());
}

DepthResult depth_metrics(const Image& pred, const Image& gt) {
    require_same_dims(pred, gt, "depth_metrics");
    const auto lp = lum_plane(pred), lg = lum_plane(gt);
    std::vector<size_t> valid;
    for (size_t i = 0; i < lg.size(); ++i)
        if (lg[i] > 0.01) valid.push_back(i);
    if (valid.empty()) throw data_error("depth_metrics: no valid pixels (gt > 0.01)");

    const double n = (double)valid.size();
    double mp = 0, mg = 0;
    for (size_t i : valid) {
        mp += lp[i];
        mg += lg[i];
    }
    mp /= n;
    mg /= n;
    double varp = 0, cov = 0;
    for (size_t i : valid) {
        varp += (lp[i] - mp) * (lp[i] - mp);
        cov += (lp[i] - mp) * (lg[i] - mg);
    }
    // constant prediction: the best affine fit is the gt mean
    const double a = varp < 1e-12 ? 0.0 : cov / varp;
    const double b = mg - a * mp;

    DepthResult r;
    size_t ok = 0;
    for (size_t i : valid) {
        const double dhat = a * lp[i] + b, d = lg[i];
        r.absrel += std::abs(dhat - d) / d;
        if (dhat > 0.0 && std::max(dhat / d, d / dhat) < 1.25) ++ok;
    }
    r.absrel /= n;
    r.delta1 = (double)ok / n;
    return r;
}

NormalResult normal_metrics(const Image& pred, const Image& gt) {
    require_same_dims(pred, gt, "normal_metrics");
    std::vector<double> errs;
    for (int y = 0; y < pred.h; ++y)
        for (int x = 0; x < pred.w; ++x) {
            double a[3], b[3], na = 0, nb = 0;
            for (int c = 0; c < 3; ++c) {
                a[c] = 2.0 * pred.at(y, x, c) - 1.0;
                b[c] = 2.0 * gt.at(y, x, c) - 1.0;
                na += a[c] * a[c];
                nb += b[c] * b[c];
            }
            if (na < 1e-24 || nb < 1e-24) continue;  // zero-length: excluded
            na = std::sqrt(na);
            nb = std::sqrt(nb);
            double dot = 0;
            for (int c = 0; c < 3; ++c) dot += (a[c] / na) * (b[c] / nb);
            dot = std::clamp(dot, -1.0, 1.0);
            errs.push_back(std::acos(dot) * 180.0 / M_PI);
        }
    if (errs.empty()) throw data_error("normal_metrics: no decodable pixels");

    NormalResult r;
    for (double e : errs) r.mean_deg += e;
    r.mean_deg /= (double)errs.size();
    std::sort(errs.begin(), errs.end());
    const size_t n = errs.size();
    r.median_deg = (n % 2 == 1) ? errs[n / 2] : 0.5 * (errs[n / 2 - 1] + errs[n / 2]);
    return r;
}

void write_report(const std::string& path, const std::vector<MetricRow>& rows) {
    nlohmann::ordered_json items = nlohmann::ordered_json::array();
    std::map<std::string, std::map<std::string, std::pair<double, size_t>>> agg;
    for (const auto& row : rows) {
        nlohmann::ordered_json j;
        j["id"] = row.id;
        j["task"] = row.task;
        for (const auto& [k, v] : row.values) {
            j[k] = v;
            auto& [sum, count] = agg[row.task][k];
            sum += v;
            ++count;
        }
        items.push_back(std::move(j));
    }
    nlohmann::ordered_json tasks;
    for (const auto& [task, metrics] : agg) {
        nlohmann::ordered_json t;
        size_t count = 0;
        for (const auto& [k, sc] : metrics) {
            t[k] = sc.first / (double)sc.second;
            count = std::max(count, sc.second);
        }
        t["count"] = count;
        tasks[task] = std::move(t);
    }
    nlohmann::ordered_json out;
    out["tasks"] = std::move(tasks);
    out["items"] = std::move(items);
    std::ofstream f(path);
    if (!f) throw data_error("write_report: cannot open " + path);
    f << out.dump(2) << "\n";
}

}  // namespace vicl
