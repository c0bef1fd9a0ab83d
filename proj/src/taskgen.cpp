#include "vicl/taskgen.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <utility>

#include "vicl/threadpool.hpp"

namespace fs = std::filesystem;

namespace vicl {
namespace {

constexpr int kSide = 16;
constexpr int kLogo = 4;

using Pixel = std::array<int, 3>;  // u8 per channel

// flat u8 canvas; all task math happens here so results are integer-exact
struct Canvas {
    std::vector<Pixel> px;
    Canvas() : px((size_t)kSide * kSide, Pixel{0, 0, 0}) {}
    Pixel& at(int y, int x) { return px[(size_t)y * kSide + x]; }
    const Pixel& at(int y, int x) const { return px[(size_t)y * kSide + x]; }
};

Canvas to_canvas(const Image& img) {
    if (img.w != kSide || img.h != kSide)
        throw shape_error("apply_task: expected " + std::to_string(kSide) + "x" +
                          std::to_string(kSide) + " image, got " + std::to_string(img.w) + "x" +
                          std::to_string(img.h));
    Canvas c;
    for (int y = 0; y < kSide; ++y)
        for (int x = 0; x < kSide; ++x)
            for (int ch = 0; ch < 3; ++ch)
                c.at(y, x)[ch] = (int)std::lround(clamp01(img.at(y, x, ch)) * 255.f);
    return c;
}

Image to_image(const Canvas& c) {
    Image img(kSide, kSide);
    for (int y = 0; y < kSide; ++y)
        for (int x = 0; x < kSide; ++x)
            for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = (float)c.at(y, x)[ch] / 255.f;
    return img;
}

double lum8(const Pixel& p) {
    return 0.299 * (p[0] / 255.0) + 0.587 * (p[1] / 255.0) + 0.114 * (p[2] / 255.0);
}

// ---- scene generation ------------------------------------------------------

struct Shape {
    bool disc = false;
    int r0 = 0, c0 = 0, h = 0, w = 0;
    Pixel col{};
};

struct Scene {
    Pixel bg{};
    std::vector<Shape> shapes;
    Canvas canvas;
};

struct SceneOpts {
    int color_step = 1;     // draw channels from {0, step, 2*step, ...}
    int margin = 0;         // keep shapes this far from the border
    bool forbid_red = false;  // never emit pure red (reserved as a marker color)
};

Pixel draw_color(Rng& rng, const SceneOpts& o) {
    for (;;) {
        Pixel p;
        for (int ch = 0; ch < 3; ++ch) p[ch] = o.color_step * (int)rng.below(256 / o.color_step);
        if (o.forbid_red && p[0] == 255 && p[1] == 0 && p[2] == 0) continue;
        return p;
    }
}

void rasterize(Scene& s) {
    for (auto& p : s.canvas.px) p = s.bg;
    for (const auto& sh : s.shapes) {
        if (!sh.disc) {
            for (int y = sh.r0; y < sh.r0 + sh.h; ++y)
                for (int x = sh.c0; x < sh.c0 + sh.w; ++x) s.canvas.at(y, x) = sh.col;
        } else {
            // radius picked so discs strictly dominate their bounding box
            const double cy = sh.r0 + (sh.h - 1) / 2.0, cx = sh.c0 + (sh.w - 1) / 2.0;
            const double r2 = ((sh.h - 1) / 2.0) * ((sh.h - 1) / 2.0) + 0.25;
            for (int y = sh.r0; y < sh.r0 + sh.h; ++y)
                for (int x = sh.c0; x < sh.c0 + sh.w; ++x) {
                    const double dy = y - cy, dx = x - cx;
                    if (dy * dy + dx * dx <= r2) s.canvas.at(y, x) = sh.col;
                }
        }
    }
}

float visible_contrast(const Scene& s) {
    double best = 0.0;
    const double bg = lum8(s.bg);
    for (const auto& p : s.canvas.px)
        if (p != s.bg) best = std::max(best, std::abs(lum8(p) - bg));
    return (float)best;
}

Scene gen_scene_impl(Rng& rng, const SceneOpts& o) {
    for (int attempt = 0; attempt < 10000; ++attempt) {
        Scene s;
        s.bg = draw_color(rng, o);
        const int n = 1 + (int)rng.below(3);
        for (int i = 0; i < n; ++i) {
            Shape sh;
            sh.disc = rng.below(2) == 1;
            sh.h = 3 + (int)rng.below(5);
            sh.w = sh.disc ? sh.h : 3 + (int)rng.below(5);
            sh.r0 = o.margin + (int)rng.below((uint64_t)(kSide - sh.h - 2 * o.margin + 1));
            sh.c0 = o.margin + (int)rng.below((uint64_t)(kSide - sh.w - 2 * o.margin + 1));
            sh.col = draw_color(rng, o);
            s.shapes.push_back(sh);
        }
        rasterize(s);
        if (visible_contrast(s) > 0.3f) return s;
    }
    throw contract_error("gen_scene: could not satisfy the contrast constraint");
}

// ---- connected components --------------------------------------------------

struct Component {
    Pixel col{};
    int r0 = kSide, c0 = kSide, r1 = -1, c1 = -1;
    int count = 0;
};

Pixel plurality_color(const Canvas& c) {
    std::vector<std::pair<Pixel, int>> counts;
    for (const auto& p : c.px) {
        bool found = false;
        for (auto& [col, n] : counts)
            if (col == p) {
                ++n;
                found = true;
                break;
            }
        if (!found) counts.push_back({p, 1});
    }
    // ties resolve to the color seen first in scan order
    const std::pair<Pixel, int>* best = &counts[0];
    for (const auto& e : counts)
        if (e.second > best->second) best = &e;
    return best->first;
}

std::vector<Component> components(const Canvas& c, const Pixel& bg, std::vector<int>* labels_out) {
    std::vector<int> label((size_t)kSide * kSide, -1);
    std::vector<Component> comps;
    std::vector<int> stack;
    for (int i = 0; i < kSide * kSide; ++i) {
        if (label[i] != -1 || c.px[i] == bg) continue;
        const int id = (int)comps.size();
        Component comp;
        comp.col = c.px[i];
        stack.push_back(i);
        label[i] = id;
        while (!stack.empty()) {
            const int j = stack.back();
            stack.pop_back();
            const int y = j / kSide, x = j % kSide;
            comp.r0 = std::min(comp.r0, y);
            comp.r1 = std::max(comp.r1, y);
            comp.c0 = std::min(comp.c0, x);
            comp.c1 = std::max(comp.c1, x);
            ++comp.count;
            const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
            for (int d = 0; d < 4; ++d) {
                const int ny = y + dy[d], nx = x + dx[d];
                if (ny < 0 || ny >= kSide || nx < 0 || nx >= kSide) continue;
                const int nj = ny * kSide + nx;
                if (label[nj] == -1 && c.px[nj] == comp.col) {
                    label[nj] = id;
                    stack.push_back(nj);
                }
            }
        }
        comps.push_back(comp);
    }
    if (labels_out) *labels_out = std::move(label);
    return comps;
}

// highest-contrast component against the plurality background; first wins ties
int pick_target(const std::vector<Component>& comps, const Pixel& bg) {
    if (comps.empty()) return -1;
    int best = 0;
    double best_c = std::abs(lum8(comps[0].col) - lum8(bg));
    for (size_t i = 1; i < comps.size(); ++i) {
        const double c = std::abs(lum8(comps[i].col) - lum8(bg));
        if (c > best_c) {
            best = (int)i;
            best_c = c;
        }
    }
    return best;
}

// ---- the task registry -----------------------------------------------------

constexpr Pixel kRed{255, 0, 0};

Pixel logo_cell(int dy, int dx) {
    return ((dy + dx) % 2 == 0) ? Pixel{254, 0, 254} : Pixel{0, 254, 0};
}

Canvas task_invert(const Canvas& in) {
    Canvas out = in;
    for (auto& p : out.px)
        for (int ch = 0; ch < 3; ++ch) p[ch] = 255 - p[ch];
    return out;
}

Canvas task_desaturate(const Canvas& in) {
    Canvas out;
    for (size_t i = 0; i < in.px.size(); ++i) {
        const int g = (int)std::lround(lum8(in.px[i]) * 255.0);
        out.px[i] = Pixel{g, g, g};
    }
    return out;
}

Canvas task_edge(const Canvas& in, float threshold) {
    auto lum_at = [&](int y, int x) {  // replicate border
        y = std::clamp(y, 0, kSide - 1);
        x = std::clamp(x, 0, kSide - 1);
        return lum8(in.at(y, x));
    };
    Canvas out;
    const double t2 = (double)threshold * threshold;
    for (int y = 0; y < kSide; ++y)
        for (int x = 0; x < kSide; ++x) {
            const double gx = lum_at(y - 1, x + 1) + 2 * lum_at(y, x + 1) + lum_at(y + 1, x + 1) -
                              lum_at(y - 1, x - 1) - 2 * lum_at(y, x - 1) - lum_at(y + 1, x - 1);
            const double gy = lum_at(y + 1, x - 1) + 2 * lum_at(y + 1, x) + lum_at(y + 1, x + 1) -
                              lum_at(y - 1, x - 1) - 2 * lum_at(y - 1, x) - lum_at(y - 1, x + 1);
            const int v = (gx * gx + gy * gy > t2) ? 255 : 0;
            out.at(y, x) = Pixel{v, v, v};
        }
    return out;
}

Canvas task_boxfill(const Canvas& in) {
    const Pixel bg = plurality_color(in);
    const auto comps = components(in, bg, nullptr);
    Canvas out;
    const int t = pick_target(comps, bg);
    if (t >= 0) {
        const auto& c = comps[t];
        for (int y = c.r0; y <= c.r1; ++y)
            for (int x = c.c0; x <= c.c1; ++x) out.at(y, x) = Pixel{255, 255, 255};
    }
    return out;
}

Canvas task_redbox_segment(const Canvas& in) {
    int r0 = kSide, c0 = kSide, r1 = -1, c1 = -1;
    for (int y = 0; y < kSide; ++y)
        for (int x = 0; x < kSide; ++x)
            if (in.at(y, x) == kRed) {
                r0 = std::min(r0, y);
                r1 = std::max(r1, y);
                c0 = std::min(c0, x);
                c1 = std::max(c1, x);
            }
    Canvas out;
    if (r1 - r0 < 2 || c1 - c0 < 2) return out;  // no box found
    // plurality color inside the box is the marked shape; ties take the color
    // appearing first in scan order
    std::vector<std::pair<Pixel, int>> counts;
    for (int y = r0 + 1; y <= r1 - 1; ++y)
        for (int x = c0 + 1; x <= c1 - 1; ++x) {
            bool found = false;
            for (auto& [col, n] : counts)
                if (col == in.at(y, x)) {
                    ++n;
                    found = true;
                    break;
                }
            if (!found) counts.push_back({in.at(y, x), 1});
        }
    const std::pair<Pixel, int>* best = &counts[0];
    for (const auto& e : counts)
        if (e.second > best->second) best = &e;
    for (int y = r0 + 1; y <= r1 - 1; ++y)
        for (int x = c0 + 1; x <= c1 - 1; ++x)
            if (in.at(y, x) == best->first) out.at(y, x) = Pixel{255, 255, 255};
    return out;
}

Canvas task_enhance(const Canvas& in) {
    Canvas out = in;
    for (auto& p : out.px)
        for (int ch = 0; ch < 3; ++ch) p[ch] = std::min(255, 4 * p[ch]);
    return out;
}

Canvas task_channel_permute(const Canvas& in) {
    Canvas out;
    for (size_t i = 0; i < in.px.size(); ++i)
        out.px[i] = Pixel{in.px[i][1], in.px[i][2], in.px[i][0]};  // RGB -> GBR
    return out;
}

// watermarked pixels store (clean + logo) / 2 with both operands even, so the
// clean value 2w - logo is recovered exactly once the stamp is located
bool watermark_at(const Canvas& in, int py, int px) {
    for (int dy = 0; dy < kLogo; ++dy)
        for (int dx = 0; dx < kLogo; ++dx) {
            const Pixel l = logo_cell(dy, dx);
            const Pixel& w = in.at(py + dy, px + dx);
            for (int ch = 0; ch < 3; ++ch) {
                const int rec = 2 * w[ch] - l[ch];
                if (rec < 0 || rec > 254) return false;
            }
        }
    return true;
}

Canvas task_dewatermark(const Canvas& in) {
    Canvas out = in;
    for (int py = 0; py <= kSide - kLogo; ++py)
        for (int px = 0; px <= kSide - kLogo; ++px)
            if (watermark_at(in, py, px)) {
                for (int dy = 0; dy < kLogo; ++dy)
                    for (int dx = 0; dx < kLogo; ++dx) {
                        const Pixel l = logo_cell(dy, dx);
                        Pixel& w = out.at(py + dy, px + dx);
                        for (int ch = 0; ch < 3; ++ch)
                            w[ch] = std::clamp(2 * w[ch] - l[ch], 0, 255);
                    }
                return out;
            }
    return out;  // nothing detected; leave the image alone
}

Canvas apply_canvas(const TaskSpec& t, const Canvas& in) {
    if (t.name == "invert") return task_invert(in);
    if (t.name == "desaturate") return task_desaturate(in);
    if (t.name == "edge") return task_edge(in, t.sobel_threshold);
    if (t.name == "boxfill") return task_boxfill(in);
    if (t.name == "redbox-segment") return task_redbox_segment(in);
    if (t.name == "enhance") return task_enhance(in);
    if (t.name == "channel-permute") return task_channel_permute(in);
    if (t.name == "dewatermark") return task_dewatermark(in);
    throw config_error("unknown task: " + t.name);
}

// ---- quadruplet assembly ---------------------------------------------------

SceneOpts opts_for(const std::string& task) {
    SceneOpts o;
    if (task == "enhance") o.color_step = 4;      // keeps 4x brightening exact
    if (task == "dewatermark") o.color_step = 2;  // keeps the blend invertible
    if (task == "redbox-segment") {
        o.margin = 1;  // room for the outline
        o.forbid_red = true;
    }
    return o;
}

// one (input, output) pair; the input of decorated tasks is the decorated image
std::pair<Canvas, Canvas> gen_pair(const TaskSpec& t, Rng& rng) {
    const SceneOpts o = opts_for(t.name);
    for (int attempt = 0; attempt < 10000; ++attempt) {
        Scene s = gen_scene_impl(rng, o);
        if (t.name == "redbox-segment") {
            const Pixel bg = plurality_color(s.canvas);
            std::vector<int> labels;
            const auto comps = components(s.canvas, bg, &labels);
            const int ti = pick_target(comps, bg);
            if (ti < 0) continue;
            const auto& c = comps[ti];
            if (c.r0 < 1 || c.c0 < 1 || c.r1 > kSide - 2 || c.c1 > kSide - 2) continue;
            // the box interior must read unambiguously: only this component's
            // color and background, with the component in strict majority
            int mine = 0, other = 0;
            bool clean = true;
            for (int y = c.r0; y <= c.r1 && clean; ++y)
                for (int x = c.c0; x <= c.c1; ++x) {
                    const Pixel& p = s.canvas.at(y, x);
                    if (p == c.col && labels[y * kSide + x] == ti)
                        ++mine;
                    else if (p == bg)
                        ++other;
                    else {
                        clean = false;
                        break;
                    }
                }
            if (!clean || mine <= other) continue;
            Canvas input = s.canvas;
            for (int y = c.r0 - 1; y <= c.r1 + 1; ++y) {
                input.at(y, c.c0 - 1) = kRed;
                input.at(y, c.c1 + 1) = kRed;
            }
            for (int x = c.c0 - 1; x <= c.c1 + 1; ++x) {
                input.at(c.r0 - 1, x) = kRed;
                input.at(c.r1 + 1, x) = kRed;
            }
            Canvas truth;
            for (int y = c.r0; y <= c.r1; ++y)
                for (int x = c.c0; x <= c.c1; ++x)
                    if (s.canvas.at(y, x) == c.col && labels[y * kSide + x] == ti)
                        truth.at(y, x) = Pixel{255, 255, 255};
            if (apply_canvas(t, input).px != truth.px) continue;
            return {std::move(input), std::move(truth)};
        }
        if (t.name == "dewatermark") {
            const int py = (int)rng.below(kSide - kLogo + 1);
            const int px = (int)rng.below(kSide - kLogo + 1);
            Canvas input = s.canvas;
            for (int dy = 0; dy < kLogo; ++dy)
                for (int dx = 0; dx < kLogo; ++dx) {
                    const Pixel l = logo_cell(dy, dx);
                    Pixel& w = input.at(py + dy, px + dx);
                    for (int ch = 0; ch < 3; ++ch) w[ch] = (w[ch] + l[ch]) / 2;
                }
            if (apply_canvas(t, input).px != s.canvas.px) continue;
            return {std::move(input), s.canvas};
        }
        if (t.name == "enhance") {
            Canvas input = s.canvas;
            for (auto& p : input.px)
                for (int ch = 0; ch < 3; ++ch) p[ch] /= 4;  // exact: colors are multiples of 4
            if (apply_canvas(t, input).px != s.canvas.px) continue;
            return {std::move(input), s.canvas};
        }
        Canvas out = apply_canvas(t, s.canvas);
        return {s.canvas, std::move(out)};
    }
    throw contract_error("gen_pair: could not build a valid pair for " + t.name);
}

}  // namespace

const std::vector<std::string>& task_names() {
    static const std::vector<std::string> names = {
        "invert",         "desaturate", "edge",    "boxfill",
        "redbox-segment", "enhance",    "channel-permute", "dewatermark"};
    return names;
}

bool task_known(const std::string& name) {
    const auto& names = task_names();
    return std::find(names.begin(), names.end(), name) != names.end();
}

Image gen_scene(Rng& rng, SceneInfo* info) {
    Scene s = gen_scene_impl(rng, SceneOpts{});
    if (info) {
        info->shapes = (int)s.shapes.size();
        info->max_contrast = visible_contrast(s);
    }
    return to_image(s.canvas);
}

Image apply_task(const TaskSpec& t, const Image& img) {
    return to_image(apply_canvas(t, to_canvas(img)));
}

QuadRecord gen_quadruplet(const TaskSpec& t, Rng& rng) {
    if (!task_known(t.name)) throw config_error("unknown task: " + t.name);
    auto support = gen_pair(t, rng);
    for (int attempt = 0; attempt < 10000; ++attempt) {
        auto query = gen_pair(t, rng);
        if (query.first.px == support.first.px) continue;  // scenes must differ
        QuadRecord rec;
        rec.task = t.name;
        rec.q.xs = to_image(support.first);
        rec.q.xt = to_image(support.second);
        rec.q.xq = to_image(query.first);
        rec.q.yq = to_image(query.second);
        return rec;
    }
    throw contract_error("gen_quadruplet: could not draw a distinct query scene");
}

Split split_dataset(size_t n, double holdout, uint64_t seed) {
    if (!(holdout > 0.0 && holdout < 1.0))
        throw config_error("holdout fraction must lie in (0,1), got " + std::to_string(holdout));
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(seed);
    for (size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    size_t n_test = (size_t)std::llround((double)n * holdout);
    n_test = std::min(n_test, n);
    Split s;
    s.test.assign(idx.begin(), idx.begin() + (ptrdiff_t)n_test);
    s.train.assign(idx.begin() + (ptrdiff_t)n_test, idx.end());
    std::sort(s.test.begin(), s.test.end());
    std::sort(s.train.begin(), s.train.end());
    return s;
}

void write_dataset(const DatasetConfig& cfg) {
    std::vector<std::string> tasks = cfg.tasks.empty() ? task_names() : cfg.tasks;
    for (const auto& t : tasks)
        if (!task_known(t)) throw config_error("unknown task: " + t);
    if (cfg.per_task == 0) throw config_error("per_task must be positive");

    const size_t total = tasks.size() * cfg.per_task;
    std::vector<QuadRecord> records(total);
    parallel_for(total, cfg.threads, [&](size_t i) {
        TaskSpec spec;
        spec.name = tasks[i / cfg.per_task];
        Rng rng(cfg.seed ^ (uint64_t)i);  // per-item seed keeps output order-independent
        records[i] = gen_quadruplet(spec, rng);
        records[i].id = i;
        records[i].seed = cfg.seed ^ (uint64_t)i;
    });

    for (const char* part : {"train", "test"})
        fs::create_directories(fs::path(cfg.out_dir) / part / "images");

    std::ofstream train_mf(fs::path(cfg.out_dir) / "train" / "manifest.jsonl");
    std::ofstream test_mf(fs::path(cfg.out_dir) / "test" / "manifest.jsonl");
    if (!train_mf || !test_mf) throw data_error("write_dataset: cannot create manifests");

    for (size_t ti = 0; ti < tasks.size(); ++ti) {
        const Split split = split_dataset(cfg.per_task, cfg.holdout, cfg.seed + ti);
        auto emit = [&](const std::vector<size_t>& local_ids, const char* part,
                        std::ofstream& mf) {
            for (size_t li : local_ids) {
                const QuadRecord& rec = records[ti * cfg.per_task + li];
                char base[32];
                std::snprintf(base, sizeof base, "q%06llu", (unsigned long long)rec.id);
                nlohmann::ordered_json j;
                j["id"] = rec.id;
                j["task"] = rec.task;
                const std::array<std::pair<const char*, const Image*>, 4> imgs = {
                    {{"xs", &rec.q.xs}, {"xt", &rec.q.xt}, {"xq", &rec.q.xq}, {"yq", &rec.q.yq}}};
                for (const auto& [key, img] : imgs) {
                    const std::string rel = std::string("images/") + base + "_" + key + ".ppm";
                    save_ppm((fs::path(cfg.out_dir) / part / rel).string(), *img);
                    j[key] = rel;
                }
                mf << j.dump() << "\n";
            }
        };
        emit(split.train, "train", train_mf);
        emit(split.test, "test", test_mf);
    }
}

std::vector<ManifestEntry> read_manifest(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "manifest.jsonl");
    if (!in) throw data_error("read_manifest: cannot open " + dir + "/manifest.jsonl");
    std::vector<ManifestEntry> entries;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw data_error("read_manifest: bad JSON at line " + std::to_string(lineno) + ": " +
                             e.what());
        }
        try {
            ManifestEntry e;
            e.id = j.at("id").get<uint64_t>();
            e.task = j.at("task").get<std::string>();
            e.xs = j.at("xs").get<std::string>();
            e.xt = j.at("xt").get<std::string>();
            e.xq = j.at("xq").get<std::string>();
            e.yq = j.at("yq").get<std::string>();
            entries.push_back(std::move(e));
        } catch (const nlohmann::json::exception& e) {
            throw data_error("read_manifest: missing field at line " + std::to_string(lineno) +
                             ": " + e.what());
        }
    }
    return entries;
}

Quadruplet load_quadruplet(const std::string& dir, const ManifestEntry& e) {
    Quadruplet q;
    q.xs = load_ppm((fs::path(dir) / e.xs).string());
    q.xt = load_ppm((fs::path(dir) / e.xt).string());
    q.xq = load_ppm((fs::path(dir) / e.xq).string());
    q.yq = load_ppm((fs::path(dir) / e.yq).string());
    return q;
}

}  // namespace vicl
