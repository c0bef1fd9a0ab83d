#include "vicl/mining.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <utility>

#include "vicl/threadpool.hpp"

namespace fs = std::filesystem;

namespace vicl {
namespace {

double dot(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size())
        throw shape_error("cosine: vector sizes differ: " + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()));
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += (double)a[i] * (double)b[i];
    return s;
}

double dist2(const std::vector<float>& a, const std::vector<float>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = (double)a[i] - (double)b[i];
        s += d * d;
    }
    return s;
}

bool normalize(std::vector<float>& v) {
    double n = 0.0;
    for (float x : v) n += (double)x * (double)x;
    if (n <= 0.0) return false;
    n = std::sqrt(n);
    for (float& x : v) x = (float)(x / n);
    return true;
}

// numeric-friendly total order on ids: shorter first, then lexicographic
bool id_less(const std::string& a, const std::string& b) {
    if (a.size() != b.size()) return a.size() < b.size();
    return a < b;
}

}  // namespace

std::vector<PairRecord> read_pairs(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "pairs.jsonl");
    if (!in) throw data_error("read_pairs: cannot open " + dir + "/pairs.jsonl");
    std::vector<PairRecord> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw data_error("read_pairs: bad JSON at line " + std::to_string(lineno) + ": " +
                             e.what());
        }
        try {
            PairRecord r;
            if (j.at("id").is_number())
                r.id = std::to_string(j.at("id").get<uint64_t>());
            else
                r.id = j.at("id").get<std::string>();
            r.x = j.at("x").get<std::string>();
            r.y = j.at("y").get<std::string>();
            if (j.contains("instr_vec")) r.instr_vec = j["instr_vec"].get<std::vector<float>>();
            if (j.contains("task")) r.task = j["task"].get<std::string>();
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw data_error("read_pairs: bad record at line " + std::to_string(lineno) + ": " +
                             e.what());
        }
    }
    return out;
}

std::vector<float> toy_embed(const Image& img) {
    if (img.w % 4 != 0 || img.h % 4 != 0)
        throw shape_error("toy_embed: image dims must be divisible by 4, got " +
                          std::to_string(img.w) + "x" + std::to_string(img.h));
    const int bh = img.h / 4, bw = img.w / 4;
    std::vector<float> v;
    v.reserve(48);
    for (int c = 0; c < 3; ++c)
        for (int by = 0; by < 4; ++by)
            for (int bx = 0; bx < 4; ++bx) {
                double s = 0.0;
                for (int y = by * bh; y < (by + 1) * bh; ++y)
                    for (int x = bx * bw; x < (bx + 1) * bw; ++x) s += img.at(y, x, c);
                v.push_back((float)(s / (bh * bw)));
            }
    if (!normalize(v)) throw data_error("toy_embed: degenerate all-zero embedding");
    return v;
}

std::map<std::string, std::vector<float>> load_embeddings(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("load_embeddings: cannot open " + path);
    auto read_u16 = [&] {
        uint8_t b[2];
        in.read((char*)b, 2);
        return (uint16_t)(b[0] | (uint16_t)b[1] << 8);
    };
    auto read_u32 = [&] {
        uint8_t b[4];
        in.read((char*)b, 4);
        return (uint32_t)b[0] | (uint32_t)b[1] << 8 | (uint32_t)b[2] << 16 | (uint32_t)b[3] << 24;
    };
    const uint32_t count = read_u32();
    if (!in) throw data_error("load_embeddings: truncated header");
    std::map<std::string, std::vector<float>> table;
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t len = read_u16();
        std::string id(len, '\0');
        in.read(id.data(), len);
        const uint32_t dim = read_u32();
        std::vector<float> vec(dim);
        static_assert(sizeof(float) == 4);
        in.read((char*)vec.data(), (std::streamsize)dim * 4);
        if (!in) throw data_error("load_embeddings: truncated entry " + std::to_string(i));
        if (table.count(id)) throw data_error("load_embeddings: duplicate id " + id);
        if (!normalize(vec)) throw data_error("load_embeddings: zero vector for id " + id);
        table.emplace(std::move(id), std::move(vec));
    }
    return table;
}

std::vector<float> task_vector(const std::vector<float>& ex, const std::vector<float>& ey) {
    if (ex.size() != ey.size()) throw shape_error("task_vector: embedding sizes differ");
    std::vector<float> v(ex.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = ey[i] - ex[i];
    return v;
}

size_t choose_k(size_t n, size_t override_k) {
    if (n < 1) throw contract_error("choose_k: empty corpus");
    size_t k = override_k > 0 ? override_k : (n < 25000 ? 1500 : 3000);
    return std::min(k, n);
}

KMeansResult kmeans(const std::vector<std::vector<float>>& vecs, size_t K, Rng& rng,
                    int max_iter) {
    const size_t n = vecs.size();
    if (K < 1 || K > n)
        throw contract_error("kmeans: K=" + std::to_string(K) + " outside [1, " +
                             std::to_string(n) + "]");

    // k-means++ seeding
    std::vector<std::vector<float>> centroids;
    centroids.push_back(vecs[rng.below(n)]);
    std::vector<double> d2(n);
    while (centroids.size() < K) {
        double sum = 0.0;
        for (size_t i = 0; i < n; ++i) {
            double best = dist2(vecs[i], centroids[0]);
            for (size_t c = 1; c < centroids.size(); ++c)
                best = std::min(best, dist2(vecs[i], centroids[c]));
            d2[i] = best;
            sum += best;
        }
        size_t pick;
        if (sum <= 0.0) {
            pick = rng.below(n);  // all points already covered exactly
        } else {
            const double r = rng.uniform() * sum;
            double acc = 0.0;
            pick = n - 1;
            for (size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc > r) {
                    pick = i;
                    break;
                }
            }
        }
        centroids.push_back(vecs[pick]);
    }

    KMeansResult res;
    res.assignments.assign(n, -1);
    for (int iter = 0; iter < max_iter; ++iter) {
        // assignment; ties take the lowest cluster index
        bool changed = false;
        double objective = 0.0;
        for (size_t i = 0; i < n; ++i) {
            int best = 0;
            double bd = dist2(vecs[i], centroids[0]);
            for (size_t c = 1; c < K; ++c) {
                const double d = dist2(vecs[i], centroids[c]);
                if (d < bd) {
                    bd = d;
                    best = (int)c;
                }
            }
            if (res.assignments[i] != best) {
                res.assignments[i] = best;
                changed = true;
            }
            objective += bd;
        }
        res.objective = objective;
        res.objective_trace.push_back(objective);
        if (!changed) break;

        // centroid update in fixed index order
        const size_t dim = vecs[0].size();
        std::vector<std::vector<double>> acc(K, std::vector<double>(dim, 0.0));
        std::vector<size_t> count(K, 0);
        for (size_t i = 0; i < n; ++i) {
            const int c = res.assignments[i];
            ++count[(size_t)c];
            for (size_t d = 0; d < dim; ++d) acc[(size_t)c][d] += vecs[i][d];
        }
        for (size_t c = 0; c < K; ++c)
            if (count[c] > 0)
                for (size_t d = 0; d < dim; ++d)
                    centroids[c][d] = (float)(acc[c][d] / (double)count[c]);

        // empty clusters grab the globally farthest point, one each
        std::vector<bool> used(n, false);
        for (size_t c = 0; c < K; ++c) {
            if (count[c] > 0) continue;
            double worst = -1.0;
            size_t worst_i = 0;
            for (size_t i = 0; i < n; ++i) {
                if (used[i]) continue;
                const double d = dist2(vecs[i], centroids[(size_t)res.assignments[i]]);
                if (d > worst) {
                    worst = d;
                    worst_i = i;
                }
            }
            centroids[c] = vecs[worst_i];
            used[worst_i] = true;
        }
    }
    res.centroids = std::move(centroids);
    return res;
}

int retrieve_neighbor(const std::vector<std::vector<float>>& vecs,
                      const std::vector<int>& assignments, const std::vector<std::string>& ids,
                      int i) {
    if (vecs.size() != assignments.size() || vecs.size() != ids.size())
        throw shape_error("retrieve_neighbor: index arrays disagree");
    int best = -1;
    double best_cos = 0.0;
    for (size_t j = 0; j < vecs.size(); ++j) {
        if ((int)j == i || assignments[j] != assignments[(size_t)i]) continue;
        const double c = dot(vecs[(size_t)i], vecs[j]);
        if (best == -1 || c > best_cos ||
            (c == best_cos && id_less(ids[j], ids[(size_t)best]))) {
            best = (int)j;
            best_cos = c;
        }
    }
    return best;
}

FilterDecision dual_filter(const std::vector<float>& ex_i, const std::vector<float>& ex_j,
                           const PairRecord& a, const PairRecord& b, const FilterConfig& cfg) {
    if (dot(ex_i, ex_j) > cfg.tau_vis) return {false, "visual-duplicate"};
    if (!a.instr_vec.empty() && !b.instr_vec.empty()) {
        if (dot(a.instr_vec, b.instr_vec) < cfg.tau_text) return {false, "instruction-mismatch"};
    } else if (a.task != b.task) {
        return {false, "instruction-mismatch"};  // synthetic mode: labels stand in
    }
    return {true, ""};
}

MiningStats mine(const MiningConfig& cfg) {
    const auto pairs = read_pairs(cfg.corpus_dir);
    if (pairs.size() < 2) throw data_error("mine: need at least 2 pairs");
    if (cfg.embedder != "toy" && cfg.embedder != "file")
        throw config_error("mine: unknown embedder " + cfg.embedder);

    std::map<std::string, std::vector<float>> table;
    if (cfg.embedder == "file")
        table = load_embeddings((fs::path(cfg.corpus_dir) / "embeddings.bin").string());
    auto embed = [&](const std::string& ref) -> std::vector<float> {
        if (cfg.embedder == "file") {
            auto it = table.find(ref);
            if (it == table.end()) throw data_error("mine: no embedding for " + ref);
            return it->second;
        }
        return toy_embed(load_ppm((fs::path(cfg.corpus_dir) / ref).string()));
    };

    MiningStats stats;
    stats.pairs = pairs.size();

    // embeddings and normalized task vectors; degenerate pairs drop out
    struct Entry {
        size_t pair = 0;
        std::vector<float> ex, tv;
    };
    std::vector<Entry> entries(pairs.size());
    std::vector<uint8_t> ok(pairs.size(), 0);
    parallel_for(pairs.size(), cfg.threads, [&](size_t i) {
        try {
            Entry e;
            e.pair = i;
            e.ex = embed(pairs[i].x);
            e.tv = task_vector(e.ex, embed(pairs[i].y));
            if (!normalize(e.tv)) return;  // x and y embed identically
            entries[i] = std::move(e);
            ok[i] = 1;
        } catch (const data_error&) {
            // degenerate embedding: logged below, pair skipped
        }
    });
    std::vector<Entry> active;
    for (size_t i = 0; i < pairs.size(); ++i)
        if (ok[i])
            active.push_back(std::move(entries[i]));
        else
            ++stats.degenerate;
    if (active.size() < 2) throw data_error("mine: fewer than 2 usable pairs after embedding");

    std::vector<std::vector<float>> tvs;
    std::vector<std::string> ids;
    for (const auto& e : active) {
        tvs.push_back(e.tv);
        ids.push_back(pairs[e.pair].id);
    }

    stats.K = choose_k(active.size(), cfg.k_override);
    Rng rng(cfg.seed);
    const KMeansResult km = kmeans(tvs, stats.K, rng, cfg.max_iter);
    stats.cluster_sizes.assign(stats.K, 0);
    for (int a : km.assignments) ++stats.cluster_sizes[(size_t)a];

    // candidates as unordered pairs, deduplicated
    std::vector<std::pair<size_t, size_t>> candidates;
    for (size_t i = 0; i < active.size(); ++i) {
        const int j = retrieve_neighbor(tvs, km.assignments, ids, (int)i);
        if (j < 0) continue;
        candidates.emplace_back(std::min(i, (size_t)j), std::max(i, (size_t)j));
    }
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
    stats.candidates = candidates.size();

    fs::create_directories(fs::path(cfg.out_dir) / "images");
    std::ofstream mf(fs::path(cfg.out_dir) / "manifest.jsonl");
    if (!mf) throw data_error("mine: cannot create manifest");

    uint64_t next_id = 0;
    for (const auto& [i, j] : candidates) {
        const PairRecord& a = pairs[active[i].pair];
        const PairRecord& b = pairs[active[j].pair];
        const FilterDecision d = dual_filter(active[i].ex, active[j].ex, a, b, cfg.filter);
        if (!d.accept) {
            ++stats.rejected[d.reason];
            continue;
        }
        char base[32];
        std::snprintf(base, sizeof base, "q%06llu", (unsigned long long)next_id);
        nlohmann::ordered_json row;
        row["id"] = next_id;
        row["task"] = a.task.empty() ? "mined" : a.task;
        const std::array<std::pair<const char*, const std::string*>, 4> imgs = {
            {{"xs", &a.x}, {"xt", &a.y}, {"xq", &b.x}, {"yq", &b.y}}};
        for (const auto& [key, src] : imgs) {
            const std::string rel = std::string("images/") + base + "_" + key + ".ppm";
            fs::copy_file(fs::path(cfg.corpus_dir) / *src, fs::path(cfg.out_dir) / rel,
                          fs::copy_options::overwrite_existing);
            row[key] = rel;
        }
        mf << row.dump() << "\n";
        ++next_id;
        ++stats.accepted;
    }

    nlohmann::ordered_json rep;
    rep["pairs"] = stats.pairs;
    rep["degenerate"] = stats.degenerate;
    rep["tau_vis"] = cfg.filter.tau_vis;
    rep["tau_text"] = cfg.filter.tau_text;
    rep["k"] = stats.K;
    rep["cluster_sizes"] = stats.cluster_sizes;
    rep["candidates"] = stats.candidates;
    rep["accepted"] = stats.accepted;
    nlohmann::ordered_json rej;
    for (const auto& [reason, count] : stats.rejected) rej[reason] = count;
    rep["rejected"] = std::move(rej);
    std::ofstream rf(fs::path(cfg.out_dir) / "mining_report.json");
    rf << rep.dump(2) << "\n";
    return stats;
}

}  // namespace vicl
