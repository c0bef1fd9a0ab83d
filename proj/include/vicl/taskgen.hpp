#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vicl/errors.hpp"
#include "vicl/image.hpp"
#include "vicl/rng.hpp"

namespace vicl {

// A registered image-to-image transformation with its fixed parameters.
struct TaskSpec {
    std::string name;
    float sobel_threshold = 0.25f;  // edge binarization level on gradient magnitude
    float darken = 0.25f;           // low-light factor for "enhance"
};

const std::vector<std::string>& task_names();
bool task_known(const std::string& name);

struct SceneInfo {
    int shapes = 0;
    float max_contrast = 0.f;  // best |lum(pixel) - lum(background)| among visible shape pixels
};

// 16x16 scene: random background, 1-3 solid rectangles/discs, at least one
// visibly contrasting shape. All channel values sit on the u8 grid k/255.
Image gen_scene(Rng& rng, SceneInfo* info = nullptr);

// Pure deterministic u8-domain transform. Unknown task name -> config_error.
Image apply_task(const TaskSpec& t, const Image& img);

struct QuadRecord {
    uint64_t id = 0;
    std::string task;
    uint64_t seed = 0;
    Quadruplet q;
};

// Two independent scenes put through the same transform; inputs of decorated
// tasks (red box, watermark) carry their decoration. Guarantees
// apply_task(t, xs) == xt and apply_task(t, xq) == yq bit-exactly and xs != xq.
QuadRecord gen_quadruplet(const TaskSpec& t, Rng& rng);

struct Split {
    std::vector<size_t> train, test;
};

// Seed-deterministic disjoint index split; holdout must lie in (0,1).
Split split_dataset(size_t n, double holdout, uint64_t seed);

struct DatasetConfig {
    std::string out_dir;
    std::vector<std::string> tasks;  // empty -> all registered tasks
    size_t per_task = 100;
    double holdout = 0.1;
    uint64_t seed = 0;
    int threads = 1;
};

// Emits out_dir/{train,test}/manifest.jsonl plus PPM images; the split is
// stratified per task so every task keeps test items.
void write_dataset(const DatasetConfig& cfg);

struct ManifestEntry {
    uint64_t id = 0;
    std::string task;
    std::string xs, xt, xq, yq;  // paths relative to the manifest directory
};

std::vector<ManifestEntry> read_manifest(const std::string& dir);
Quadruplet load_quadruplet(const std::string& dir, const ManifestEntry& e);

}  // namespace vicl
