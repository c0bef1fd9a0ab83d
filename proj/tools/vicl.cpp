// vicl: data generation, task mining, training, one-shot inference,
// evaluation, and gradient checking behind one deterministic command line.
//
// Exit codes: 0 success (and --help), 2 bad flags or bad config, 1 runtime
// failure. Logs go to stderr; data goes to files only.
#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "vicl/config.hpp"
#include "vicl/diffusion.hpp"
#include "vicl/metrics.hpp"
#include "vicl/mining.hpp"
#include "vicl/taskgen.hpp"
#include "vicl/threadpool.hpp"
#include "vicl/training.hpp"

using namespace vicl;
namespace fs = std::filesystem;

namespace {

// mixes flag-level integers into decorrelated per-item seeds
uint64_t derive_seed(uint64_t seed, uint64_t index) {
    Rng forked = Rng(seed).fork(index);
    return forked.next_u64();
}

// prefer the split subdirectory when the dataset root is given
std::string split_dir(const std::string& data, const char* split) {
    const fs::path sub = fs::path(data) / split;
    if (fs::exists(sub / "manifest.jsonl")) return sub.string();
    return data;
}

bool same_backbone(const BackboneConfig& a, const BackboneConfig& b) {
    const auto& x = a.adapters;
    const auto& y = b.adapters;
    return a.blocks == b.blocks && a.dim == b.dim && a.heads == b.heads && a.ffn == b.ffn &&
           a.patch == b.patch && a.image == b.image && x.enabled == y.enabled &&
           (!x.enabled ||
            (x.attn_lora == y.attn_lora && x.ffn_moe == y.ffn_moe && x.rank == y.rank &&
             x.alpha == y.alpha && x.experts == y.experts && x.top_k == y.top_k));
}

// ---------------------------------------------------------------- gen-data

int cmd_gen_data(const std::vector<std::string>& tasks, size_t count, const std::string& out,
                 uint64_t seed, double holdout, int threads) {
    for (const auto& t : tasks)
        if (!task_known(t)) throw config_error("unknown task \"" + t + "\"");
    DatasetConfig dc;
    dc.out_dir = out;
    dc.tasks = tasks;
    dc.per_task = count;
    dc.holdout = holdout;
    dc.seed = seed;
    dc.threads = threads;
    write_dataset(dc);

    std::map<std::string, std::pair<size_t, size_t>> counts;
    for (const auto& e : read_manifest((fs::path(out) / "train").string())) counts[e.task].first++;
    for (const auto& e : read_manifest((fs::path(out) / "test").string())) counts[e.task].second++;
    for (const auto& [task, c] : counts)
        std::fprintf(stderr, "%s: %zu train + %zu test\n", task.c_str(), c.first, c.second);
    return 0;
}

// ---------------------------------------------------------------- train

int cmd_train(const std::string& config_path, const std::string& data, const std::string& out,
              const std::string& init, const std::string& resume, bool adapter_only,
              int threads) {
    RunConfig rc = load_run_config(config_path);
    rc.train.threads = threads;
    if (adapter_only) rc.train.adapter_only = true;
    if (rc.train.adapter_only && init.empty())
        throw config_error("--adapter-only needs --init with the phase-one checkpoint");
    if (!init.empty() && !resume.empty())
        throw config_error("--init and --resume are mutually exclusive");

    std::vector<std::string> wanted;
    for (const auto& t : rc.train.tasks) wanted.push_back(t.name);
    Dataset ds = load_split(split_dir(data, "train"), wanted);

    Trainer tr = [&] {
        if (!resume.empty()) return Trainer::resume(load_checkpoint(resume), rc.train);
        if (!init.empty()) {
            Checkpoint ck = load_checkpoint(init);
            Trainer t = Trainer::fresh_from_checkpoint(ck, rc.train, rc.text);
            if (!same_backbone(t.model.cfg, rc.model))
                throw config_error("--init model does not match the --config model section");
            return t;
        }
        Rng init_rng = Rng(rc.train.seed).fork(1);
        return Trainer::fresh(Model::init(rc.model, init_rng), rc.train, rc.text);
    }();

    std::fprintf(stderr, "training %s steps %" PRIu64 "..%" PRIu64 " (batch %zu, %zu tasks)\n",
                 rc.train.adapter_only ? "adapters" : "all tensors", tr.step + 1, rc.train.steps,
                 rc.train.batch, rc.train.tasks.size());
    auto curve = tr.run(ds, out);
    if (!curve.empty())
        std::fprintf(stderr, "done: step %.0f loss %.6f\n", curve.back()[0], curve.back()[1]);
    std::fprintf(stderr, "checkpoint: %s/ckpt_final.ckpt\n", out.c_str());
    return 0;
}

// ---------------------------------------------------------------- infer

int cmd_infer(const std::string& ckpt, const std::string& src, const std::string& tgt,
              const std::string& query, const std::string& out, int steps, uint64_t seed) {
    Checkpoint ck = load_checkpoint(ckpt);
    Model model = model_from_checkpoint(ck);
    RunConfig rc = parse_run_config(ck.config_echo);
    SamplerConfig scfg = rc.sampler;
    scfg.steps = steps;
    scfg.seed = seed;
    scfg.validate();

    Image xs = load_ppm(src), xt = load_ppm(tgt), xq = load_ppm(query);
    Image yq = sample(model, xs, xt, xq, scfg);
    save_ppm(out, yq);
    std::fprintf(stderr, "wrote %s (%d steps, seed %" PRIu64 ")\n", out.c_str(), steps, seed);
    return 0;
}

// ---------------------------------------------------------------- eval

void require_known_metric(const std::string& name) {
    static const std::vector<std::string> known = {"iou",    "psnr",   "ssim",
                                                  "rmse255", "absrel", "delta1",
                                                  "normal_median", "normal_mean"};
    if (std::find(known.begin(), known.end(), name) == known.end())
        throw config_error("unknown metric \"" + name + "\"");
}

double compute_metric(const std::string& name, const Image& pred, const Image& gt) {
    if (name == "iou") return iou(pred, gt);
    if (name == "psnr") return psnr(pred, gt);
    if (name == "ssim") return ssim(pred, gt);
    if (name == "rmse255") return rmse255(pred, gt);
    if (name == "absrel") return depth_metrics(pred, gt).absrel;
    if (name == "delta1") return depth_metrics(pred, gt).delta1;
    if (name == "normal_median") return normal_metrics(pred, gt).median_deg;
    return normal_metrics(pred, gt).mean_deg;  // "normal_mean", names checked upfront
}

struct EvalItem {
    ManifestEntry entry;
    Quadruplet quad;
};

int cmd_eval(const std::string& ckpt, const std::string& data,
             const std::vector<std::string>& metrics, const std::string& report, uint64_t seed,
             int draws, bool oracle, int threads) {
    if (metrics.empty()) throw config_error("--metrics must name at least one metric");
    for (const auto& m : metrics) require_known_metric(m);
    if (draws < 1) throw config_error("--exemplar-draws must be >= 1");

    const std::string dir = split_dir(data, "test");
    std::vector<std::string> task_order;
    std::vector<EvalItem> items;
    for (const auto& e : read_manifest(dir)) {
        if (std::find(task_order.begin(), task_order.end(), e.task) == task_order.end())
            task_order.push_back(e.task);
        items.push_back({e, load_quadruplet(dir, e)});
    }
    if (items.empty()) throw data_error("no test quadruplets in " + dir);

    Model model;
    SamplerConfig scfg;
    if (!oracle) {
        if (ckpt.empty()) throw config_error("--ckpt is required (or pass --oracle)");
        Checkpoint ck = load_checkpoint(ckpt);
        model = model_from_checkpoint(ck);
        scfg = parse_run_config(ck.config_echo).sampler;
    }

    // per task: the indices of its items, for exemplar draws
    std::map<std::string, std::vector<size_t>> by_task;
    for (size_t i = 0; i < items.size(); ++i) by_task[items[i].entry.task].push_back(i);

    auto run_draw = [&](int d) {
        // seed-fixed exemplar per task; an item never serves as its own exemplar
        std::map<std::string, size_t> exemplar;
        for (size_t ti = 0; ti < task_order.size(); ++ti) {
            const auto& idx = by_task[task_order[ti]];
            Rng er(derive_seed(seed, 1 + (uint64_t)d * 131071 + ti));
            exemplar[task_order[ti]] = idx[er.below(idx.size())];
        }
        std::vector<MetricRow> rows(items.size());
        parallel_for(items.size(), threads, [&](size_t i) {
            const auto& it = items[i];
            size_t e = exemplar[it.entry.task];
            if (e == i) {
                const auto& idx = by_task[it.entry.task];
                if (idx.size() > 1) e = idx[(std::find(idx.begin(), idx.end(), i) - idx.begin() + 1) % idx.size()];
            }
            Image pred;
            if (oracle) {
                pred = it.quad.yq;
            } else {
                SamplerConfig item_cfg = scfg;
                item_cfg.seed = derive_seed(seed, 0x100000 + it.entry.id);
                pred = sample(model, items[e].quad.xs, items[e].quad.xt, it.quad.xq, item_cfg);
            }
            rows[i].id = it.entry.id;
            rows[i].task = it.entry.task;
            for (const auto& m : metrics) rows[i].values[m] = compute_metric(m, pred, it.quad.yq);
        });
        return rows;
    };

    if (draws == 1) {
        write_report(report, run_draw(0));
        std::fprintf(stderr, "evaluated %zu items -> %s\n", items.size(), report.c_str());
        return 0;
    }

    // robustness mode: per-task metric means across exemplar draws, mean +- std
    std::map<std::string, std::map<std::string, std::vector<double>>> means;
    for (int d = 0; d < draws; ++d) {
        auto rows = run_draw(d);
        std::map<std::string, std::map<std::string, std::pair<double, size_t>>> acc;
        for (const auto& r : rows)
            for (const auto& [k, v] : r.values) {
                acc[r.task][k].first += v;
                acc[r.task][k].second++;
            }
        for (const auto& [task, ms] : acc)
            for (const auto& [k, sc] : ms) means[task][k].push_back(sc.first / (double)sc.second);
    }
    nlohmann::ordered_json out;
    out["exemplar_draws"] = draws;
    out["items"] = items.size();
    nlohmann::ordered_json tasks;
    for (const auto& [task, ms] : means) {
        nlohmann::ordered_json t;
        for (const auto& [k, vals] : ms) {
            double mean = 0;
            for (double v : vals) mean += v;
            mean /= (double)vals.size();
            double var = 0;
            for (double v : vals) var += (v - mean) * (v - mean);
            t[k] = {{"mean", mean},
                    {"std", std::sqrt(var / (double)vals.size())},
                    {"per_draw", vals}};
        }
        tasks[task] = std::move(t);
    }
    out["tasks"] = std::move(tasks);
    std::ofstream f(report);
    if (!f) throw data_error("cannot open " + report);
    f << out.dump(2) << "\n";
    std::fprintf(stderr, "evaluated %zu items x %d draws -> %s\n", items.size(), draws,
                 report.c_str());
    return 0;
}

// ---------------------------------------------------------------- mine

int cmd_mine(const std::string& pairs, const std::string& embedder, const std::string& k_str,
             double tau_vis, double tau_text, const std::string& out, uint64_t seed,
             int threads) {
    if (embedder != "toy" && embedder != "file")
        throw config_error("--embedder must be \"toy\" or \"file\"");
    MiningConfig mc;
    mc.corpus_dir = pairs;
    mc.out_dir = out;
    mc.embedder = embedder;
    mc.filter.tau_vis = tau_vis;
    mc.filter.tau_text = tau_text;
    mc.seed = seed;
    mc.threads = threads;
    if (k_str != "auto") {
        uint64_t k = 0;
        auto [p, ec] = std::from_chars(k_str.data(), k_str.data() + k_str.size(), k);
        if (ec != std::errc() || p != k_str.data() + k_str.size() || k == 0)
            throw config_error("--k must be \"auto\" or a positive integer");
        mc.k_override = (size_t)k;
    }
    MiningStats st = mine(mc);
    std::fprintf(stderr, "mined %zu pairs: K=%zu, %zu candidates, %zu accepted\n", st.pairs, st.K,
                 st.candidates, st.accepted);
    for (const auto& [reason, n] : st.rejected)
        std::fprintf(stderr, "  rejected %zu (%s)\n", n, reason.c_str());
    return 0;
}

// ---------------------------------------------------------------- gradcheck

int cmd_gradcheck(const std::string& config_path, uint64_t seed, int threads) {
    BackboneConfig cfg;
    if (!config_path.empty()) {
        cfg = load_run_config(config_path).model;
    } else {
        cfg.blocks = 2;
        cfg.dim = 32;
        cfg.heads = 2;
        cfg.ffn = 64;
        cfg.patch = 4;
        cfg.image = 8;
        cfg.adapters.enabled = true;  // LoRA + MoE both in the graph
    }
    cfg.validate();

    Rng rng(seed);
    auto model = ModelT<double>::init(cfg, rng);
    // zero tensors (head, modulation, adapter B) would hide their own errors
    for (auto& e : model.params.entries) {
        bool zero = true;
        for (double v : e.value.data) zero = zero && v == 0.0;
        if (zero)
            for (auto& v : e.value.data) v = rng.normal() * 0.2;
    }
    const size_t L = cfg.tokens(), PD = cfg.patch_dim();
    TensorT<double> cond = TensorT<double>::randn({3 * L, PD}, rng);
    TensorT<double> z0 = TensorT<double>::randn({L, PD}, rng);
    const auto positions = full_sequence_positions(cfg.grid(), cfg.grid());
    const uint64_t noise_seed = derive_seed(seed, 7);

    auto build = [&](const auto& leaves) {
        using R = typename std::decay_t<decltype(leaves)>::real_t;
        auto rope = RopeTableT<R>::build(positions, cfg.head_dim());
        Rng noise(noise_seed);  // identical draws at every precision
        auto g = training_loss_graph(cfg, model.params.index, leaves, tensor_cast<R>(cond),
                                     tensor_cast<R>(z0), 0.37, noise, 0.01, rope);
        return g.total;
    };
    auto rep = gradcheck(build, model.params, 1e-5, threads);
    std::fprintf(stderr,
                 "gradcheck: max relative error %.3e at %s[%zu] (analytic %.6e, numeric %.6e)\n",
                 rep.max_rel_err, rep.worst_param.c_str(), rep.worst_index, rep.analytic,
                 rep.numeric);
    return rep.max_rel_err < 1e-4 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"analogy-conditioned image-to-image toolkit"};
    app.require_subcommand(1);
    int threads = 1;
    app.add_option("--threads", threads, "worker threads (1 = bit-reproducible)")
        ->check(CLI::PositiveNumber);

    int rc = 0;

    {
        auto* sub = app.add_subcommand("gen-data", "generate a procedural quadruplet dataset");
        sub->fallthrough();
        auto tasks = std::make_shared<std::vector<std::string>>();
        auto count = std::make_shared<size_t>(100);
        auto out = std::make_shared<std::string>();
        auto seed = std::make_shared<uint64_t>(0);
        auto holdout = std::make_shared<double>(0.1);
        sub->add_option("--tasks", *tasks, "comma-separated task names")
            ->delimiter(',')
            ->required();
        sub->add_option("--count", *count, "quadruplets per task");
        sub->add_option("--out", *out, "output directory")->required();
        sub->add_option("--seed", *seed, "generator seed");
        sub->add_option("--holdout", *holdout, "test fraction in (0,1)");
        sub->callback([&rc, &threads, tasks, count, out, seed, holdout] {
            rc = cmd_gen_data(*tasks, *count, *out, *seed, *holdout, threads);
        });
    }
    {
        auto* sub = app.add_subcommand("train", "train a model (full or adapter-only phase)");
        sub->fallthrough();
        auto config = std::make_shared<std::string>();
        auto data = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto init = std::make_shared<std::string>();
        auto resume = std::make_shared<std::string>();
        auto adapter_only = std::make_shared<bool>(false);
        sub->add_option("--config", *config, "run config JSON")->required();
        sub->add_option("--data", *data, "dataset root (or one split directory)")->required();
        sub->add_option("--out", *out, "run directory for checkpoints and loss.csv")->required();
        sub->add_option("--init", *init, "warm-start checkpoint (fresh optimizer)");
        sub->add_option("--resume", *resume, "continue an interrupted run bit-exact");
        sub->add_flag("--adapter-only", *adapter_only, "freeze base tensors; needs --init");
        sub->callback([&rc, &threads, config, data, out, init, resume, adapter_only] {
            rc = cmd_train(*config, *data, *out, *init, *resume, *adapter_only, threads);
        });
    }
    {
        auto* sub = app.add_subcommand("infer", "one-shot analogy inference on a single query");
        sub->fallthrough();
        auto ckpt = std::make_shared<std::string>();
        auto src = std::make_shared<std::string>();
        auto tgt = std::make_shared<std::string>();
        auto query = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto steps = std::make_shared<int>(40);
        auto seed = std::make_shared<uint64_t>(0);
        sub->add_option("--ckpt", *ckpt, "model checkpoint")->required();
        sub->add_option("--exemplar-src", *src, "exemplar source PPM")->required();
        sub->add_option("--exemplar-tgt", *tgt, "exemplar target PPM")->required();
        sub->add_option("--query", *query, "query PPM")->required();
        sub->add_option("--out", *out, "output PPM")->required();
        sub->add_option("--steps", *steps, "sampler steps");
        sub->add_option("--seed", *seed, "sampler noise seed");
        sub->callback([&rc, ckpt, src, tgt, query, out, steps, seed] {
            rc = cmd_infer(*ckpt, *src, *tgt, *query, *out, *steps, *seed);
        });
    }
    {
        auto* sub = app.add_subcommand("eval", "score a checkpoint over a test split");
        sub->fallthrough();
        auto ckpt = std::make_shared<std::string>();
        auto data = std::make_shared<std::string>();
        auto metrics = std::make_shared<std::vector<std::string>>();
        auto report = std::make_shared<std::string>();
        auto seed = std::make_shared<uint64_t>(0);
        auto draws = std::make_shared<int>(1);
        auto oracle = std::make_shared<bool>(false);
        sub->add_option("--ckpt", *ckpt, "model checkpoint");
        sub->add_option("--data", *data, "dataset root (or one split directory)")->required();
        sub->add_option("--metrics", *metrics, "comma-separated metric names")
            ->delimiter(',')
            ->required();
        sub->add_option("--report", *report, "output report JSON")->required();
        sub->add_option("--seed", *seed, "exemplar and sampler seed");
        sub->add_option("--exemplar-draws", *draws, "draws for exemplar-robustness mode");
        sub->add_flag("--oracle", *oracle, "score ground truth against itself (plumbing check)");
        sub->callback([&rc, &threads, ckpt, data, metrics, report, seed, draws, oracle] {
            rc = cmd_eval(*ckpt, *data, *metrics, *report, *seed, *draws, *oracle, threads);
        });
    }
    {
        auto* sub = app.add_subcommand("mine", "mine latent tasks from an unlabeled pair corpus");
        sub->fallthrough();
        auto pairs = std::make_shared<std::string>();
        auto embedder = std::make_shared<std::string>("toy");
        auto k = std::make_shared<std::string>("auto");
        auto tau_vis = std::make_shared<double>(0.98);
        auto tau_text = std::make_shared<double>(0.9);
        auto out = std::make_shared<std::string>();
        auto seed = std::make_shared<uint64_t>(0);
        sub->add_option("--pairs", *pairs, "corpus directory with pairs.jsonl")->required();
        sub->add_option("--embedder", *embedder, "toy | file (embeddings.bin)");
        sub->add_option("--k", *k, "cluster count, or \"auto\" for the corpus-size rule");
        sub->add_option("--tau-vis", *tau_vis, "visual near-duplicate threshold");
        sub->add_option("--tau-text", *tau_text, "instruction agreement threshold");
        sub->add_option("--out", *out, "output directory")->required();
        sub->add_option("--seed", *seed, "clustering seed");
        sub->callback([&rc, &threads, pairs, embedder, k, tau_vis, tau_text, out, seed] {
            rc = cmd_mine(*pairs, *embedder, *k, *tau_vis, *tau_text, *out, *seed, threads);
        });
    }
    {
        auto* sub = app.add_subcommand("gradcheck",
                                       "compare every parameter gradient against f64 "
                                       "central differences");
        sub->fallthrough();
        auto config = std::make_shared<std::string>();
        auto seed = std::make_shared<uint64_t>(0);
        sub->add_option("--config", *config, "run config JSON (default: 2-block probe model)");
        sub->add_option("--seed", *seed, "model and noise seed");
        sub->callback([&rc, &threads, config, seed] {
            rc = cmd_gradcheck(*config, *seed, threads);
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);  // prints the parse error
        return 2;
    } catch (const config_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return rc;
}
