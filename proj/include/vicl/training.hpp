#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vicl/adapters.hpp"
#include "vicl/backbone.hpp"
#include "vicl/checkpoint.hpp"
#include "vicl/image.hpp"
#include "vicl/params.hpp"
#include "vicl/rng.hpp"

namespace vicl {

struct TaskWeight {
    std::string name;
    double weight = 1.0;
};

struct TrainConfig {
    uint64_t steps = 0;
    size_t batch = 8;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled; applied directly to the weights
    double lambda_aux = 0.01;
    bool adapter_only = false;  // phase: full | adapter-only
    std::vector<TaskWeight> tasks;
    uint64_t seed = 0;
    uint64_t ckpt_every = 1000;
    int threads = 1;

    void validate() const;
};

// In-memory training data: for each task, its quadruplets from one split.
struct Dataset {
    struct TaskData {
        std::string name;
        std::vector<Quadruplet> quads;
    };
    std::vector<TaskData> tasks;

    const TaskData& at(const std::string& name) const;
};

// Loads the quadruplets of `wanted` tasks from a split directory (the one
// holding manifest.jsonl). A wanted task with no rows is a data error.
Dataset load_split(const std::string& split_dir, const std::vector<std::string>& wanted);

struct BatchItem {
    size_t task = 0;  // index into dataset.tasks
    size_t quad = 0;
};

// Decoupled sampling: each slot independently draws a task by weight, then a
// quadruplet uniformly from that task's data.
std::vector<BatchItem> sample_batch(const TrainConfig& cfg, const Dataset& data, Rng& rng);

// Adam with decoupled weight decay. Moments are named tensors so checkpoints
// carry them and a resumed run continues bit-exact.
struct Adam {
    ParamStore moments;  // "opt.m.<name>" and "opt.v.<name>" per model tensor
    uint64_t t = 0;      // steps taken, for bias correction

    static Adam init(const ParamStore& params);
    static Adam from_checkpoint(const Checkpoint& ck, const ParamStore& params);
    void step(ParamStore& params, const std::vector<Tensor>& grads, const TrainConfig& cfg);
};

struct StepStats {
    double loss = 0.0;  // mean flow + lambda * batch balance loss
    double flow = 0.0;
    double aux = 0.0;  // batch-level balance loss (1.0 at perfect balance)
    std::vector<RoutingStats> routing;
};

// One optimization step over a sampled batch: per-item fresh t and noise,
// batch-level MoE balance penalty, fixed-order gradient reduction, Adam
// update of the non-frozen tensors. A non-finite loss aborts with diagnostics.
StepStats train_step(Model& model, Adam& opt, const Dataset& data,
                     const std::vector<BatchItem>& batch, const TrainConfig& cfg, Rng& rng,
                     const RopeTable& rope);

// Drives train_step for cfg.steps steps, appends `step,loss,aux` rows to
// <out_dir>/loss.csv, and writes checkpoints every ckpt_every steps plus
// <out_dir>/ckpt_final.ckpt at the end.
struct Trainer {
    Model model;
    Adam opt;
    Rng rng;
    uint64_t step = 0;
    TrainConfig cfg;
    std::string config_echo;

    // fresh run from an initialized model
    static Trainer fresh(Model model, const TrainConfig& cfg, std::string config_echo);
    // warm start: tensors from a checkpoint, fresh optimizer and rng (phase B)
    static Trainer fresh_from_checkpoint(const Checkpoint& ck, const TrainConfig& cfg,
                                         std::string config_echo);
    // bit-exact continuation of an interrupted run
    static Trainer resume(const Checkpoint& ck, const TrainConfig& cfg);

    Checkpoint snapshot() const;
    std::vector<std::array<double, 3>> run(const Dataset& data, const std::string& out_dir);
};

}  // namespace vicl
