#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vicl/errors.hpp"
#include "vicl/image.hpp"
#include "vicl/rng.hpp"

namespace vicl {

struct PairRecord {
    std::string id;
    std::string x, y;              // image paths relative to the corpus directory
    std::vector<float> instr_vec;  // optional instruction embedding
    std::string task;              // optional label; stands in for instructions when absent
};

// pairs.jsonl reader; malformed lines -> data_error
std::vector<PairRecord> read_pairs(const std::string& dir);

// 4x4 block means per channel, flattened to 48 dims, L2-normalized.
// All-zero input -> data_error (degenerate embedding).
std::vector<float> toy_embed(const Image& img);

// embeddings.bin: u32 count, then per entry u16 id_len + id bytes + u32 dim +
// dim f32 values, all little-endian. Vectors are normalized on load; ids key
// image paths as they appear in pairs.jsonl.
std::map<std::string, std::vector<float>> load_embeddings(const std::string& path);

// v = e(y) - e(x) on unit embeddings, no renormalization
std::vector<float> task_vector(const std::vector<float>& ex, const std::vector<float>& ey);

// override wins when nonzero; else 1500 below 25000 pairs, 3000 from there;
// always clamped to n
size_t choose_k(size_t n, size_t override_k);

struct KMeansResult {
    std::vector<int> assignments;
    std::vector<std::vector<float>> centroids;
    double objective = 0.0;
    std::vector<double> objective_trace;  // one entry per Lloyd iteration
};

// k-means++ seeding, Lloyd iterations, empty clusters re-seeded to the
// farthest point. Requires 1 <= K <= n.
KMeansResult kmeans(const std::vector<std::vector<float>>& vecs, size_t K, Rng& rng,
                    int max_iter = 100);

// Highest-cosine partner of i inside its cluster; ties take the lower id
// (ordered by length then lexicographically, i.e. numerically for canonical
// integers). Returns -1 for singleton clusters.
int retrieve_neighbor(const std::vector<std::vector<float>>& vecs,
                      const std::vector<int>& assignments, const std::vector<std::string>& ids,
                      int i);

struct FilterConfig {
    double tau_vis = 0.98;
    double tau_text = 0.9;
};

struct FilterDecision {
    bool accept = false;
    std::string reason;  // "visual-duplicate" | "instruction-mismatch" | empty
};

// Rejects near-identical sources (cosine strictly above tau_vis) and pairs
// whose instructions disagree; without instruction vectors the task labels
// must match (synthetic mode).
FilterDecision dual_filter(const std::vector<float>& ex_i, const std::vector<float>& ex_j,
                           const PairRecord& a, const PairRecord& b, const FilterConfig& cfg);

struct MiningConfig {
    std::string corpus_dir;
    std::string out_dir;
    std::string embedder = "toy";  // "toy" | "file"
    size_t k_override = 0;         // 0 = automatic
    FilterConfig filter;
    uint64_t seed = 0;
    int max_iter = 100;
    int threads = 1;
};

struct MiningStats {
    size_t pairs = 0;
    size_t degenerate = 0;  // skipped: zero embedding or zero task vector
    size_t K = 0;
    std::vector<size_t> cluster_sizes;
    size_t candidates = 0;
    size_t accepted = 0;
    std::map<std::string, size_t> rejected;
};

// Full pipeline: embed -> task vectors -> choose_k -> kmeans -> neighbor
// retrieval -> dual filter. Writes a taskgen-style manifest plus
// mining_report.json into out_dir. Deterministic given the seed.
MiningStats mine(const MiningConfig& cfg);

}  // namespace vicl
