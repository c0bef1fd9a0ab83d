#include "vicl/training.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "vicl/diffusion.hpp"
#include "vicl/errors.hpp"
#include "vicl/taskgen.hpp"
#include "vicl/threadpool.hpp"

namespace fs = std::filesystem;

namespace vicl {

void TrainConfig::validate() const {
    if (batch == 0) throw config_error("train: batch must be positive");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw config_error("train: lr must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw config_error("train: beta1 must be in [0,1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw config_error("train: beta2 must be in [0,1)");
    if (!(eps > 0.0)) throw config_error("train: eps must be positive");
    if (!(weight_decay >= 0.0)) throw config_error("train: weight_decay must be >= 0");
    if (!(lambda_aux >= 0.0)) throw config_error("train: lambda_aux must be >= 0");
    if (ckpt_every == 0) throw config_error("train: ckpt_every must be positive");
    if (threads < 1) throw config_error("train: threads must be >= 1");
    for (size_t i = 0; i < tasks.size(); ++i) {
        if (tasks[i].name.empty()) throw config_error("train: task name must not be empty");
        if (!(tasks[i].weight > 0.0))
            throw config_error("train: weight for task \"" + tasks[i].name +
                               "\" must be positive");
        for (size_t j = 0; j < i; ++j)
            if (tasks[j].name == tasks[i].name)
                throw config_error("train: duplicate task \"" + tasks[i].name + "\"");
    }
}

const Dataset::TaskData& Dataset::at(const std::string& name) const {
    for (const auto& t : tasks)
        if (t.name == name) return t;
    throw contract_error("dataset has no task \"" + name + "\"");
}

Dataset load_split(const std::string& split_dir, const std::vector<std::string>& wanted) {
    const auto manifest = read_manifest(split_dir);
    Dataset ds;
    for (const auto& w : wanted) {
        Dataset::TaskData td;
        td.name = w;
        for (const auto& e : manifest)
            if (e.task == w) td.quads.push_back(load_quadruplet(split_dir, e));
        if (td.quads.empty())
            throw data_error("no quadruplets for task \"" + w + "\" in " + split_dir);
        ds.tasks.push_back(std::move(td));
    }
    return ds;
}

std::vector<BatchItem> sample_batch(const TrainConfig& cfg, const Dataset& data, Rng& rng) {
    if (cfg.tasks.empty()) throw contract_error("sample_batch: no tasks configured");
    std::vector<size_t> task_index;
    double total = 0.0;
    for (const auto& t : cfg.tasks) {
        size_t ti = data.tasks.size();
        for (size_t i = 0; i < data.tasks.size(); ++i)
            if (data.tasks[i].name == t.name) {
                ti = i;
                break;
            }
        if (ti == data.tasks.size() || data.tasks[ti].quads.empty())
            throw data_error("sample_batch: no data for weighted task \"" + t.name + "\"");
        task_index.push_back(ti);
        total += t.weight;
    }
    std::vector<BatchItem> batch(cfg.batch);
    for (auto& item : batch) {
        const double r = rng.uniform() * total;
        size_t pick = 0;
        double acc = cfg.tasks[0].weight;
        while (r >= acc && pick + 1 < cfg.tasks.size()) acc += cfg.tasks[++pick].weight;
        item.task = task_index[pick];
        item.quad = (size_t)rng.below(data.tasks[item.task].quads.size());
    }
    return batch;
}

Adam Adam::init(const ParamStore& params) {
    Adam a;
    for (const auto& e : params.entries) {
        a.moments.add("opt.m." + e.name, Tensor::zeros(e.value.shape));
        a.moments.add("opt.v." + e.name, Tensor::zeros(e.value.shape));
    }
    return a;
}

Adam Adam::from_checkpoint(const Checkpoint& ck, const ParamStore& params) {
    Adam a;
    for (const auto& e : params.entries)
        for (const char* kind : {"opt.m.", "opt.v."}) {
            const std::string name = kind + e.name;
            if (!ck.tensors.has(name))
                throw data_error("checkpoint has no optimizer state " + name);
            const auto& src = ck.tensors.at(name);
            if (src.value.shape != e.value.shape)
                throw data_error("optimizer state " + name + " is " + shape_str(src.value.shape) +
                                 ", parameter is " + shape_str(e.value.shape));
            a.moments.add(name, src.value);
        }
    a.t = ck.step;
    return a;
}

void Adam::step(ParamStore& params, const std::vector<Tensor>& grads, const TrainConfig& cfg) {
    if (grads.size() != params.size())
        throw contract_error("Adam::step: " + std::to_string(grads.size()) + " gradients for " +
                             std::to_string(params.size()) + " parameters");
    ++t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, (double)t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, (double)t);
    for (size_t p = 0; p < params.size(); ++p) {
        auto& e = params.entries[p];
        if (e.frozen) continue;
        auto& m = moments.at("opt.m." + e.name).value.data;
        auto& v = moments.at("opt.v." + e.name).value.data;
        const auto& g = grads[p].data;
        for (size_t k = 0; k < g.size(); ++k) {
            const double gk = (double)g[k];
            const double mk = cfg.beta1 * (double)m[k] + (1.0 - cfg.beta1) * gk;
            const double vk = cfg.beta2 * (double)v[k] + (1.0 - cfg.beta2) * gk * gk;
            m[k] = (float)mk;
            v[k] = (float)vk;
            const double update =
                (mk / bc1) / (std::sqrt(vk / bc2) + cfg.eps) + cfg.weight_decay * (double)e.value.data[k];
            e.value.data[k] = (float)((double)e.value.data[k] - cfg.lr * update);
        }
    }
}

StepStats train_step(Model& model, Adam& opt, const Dataset& data,
                     const std::vector<BatchItem>& batch, const TrainConfig& cfg, Rng& rng,
                     const RopeTable& rope) {
    const size_t B = batch.size();
    if (B == 0) throw contract_error("train_step: empty batch");
    const auto& mcfg = model.cfg;

    // per-item entropy drawn sequentially so the thread count never matters
    std::vector<uint64_t> item_seeds(B);
    for (auto& s : item_seeds) s = rng.next_u64();

    struct ItemWork {
        LeafSet leaves;
        LossGraphT<float> graph;
        double t = 0.0;
    };
    std::vector<ItemWork> items(B);
    parallel_for(B, cfg.threads, [&](size_t i) {
        const auto& q = data.tasks[batch[i].task].quads[batch[i].quad];
        Rng ir(item_seeds[i]);
        items[i].t = sample_timestep(ir);
        auto cond = condition_sequence_for(mcfg, q.xs, q.xt, q.xq);
        require_model_image(mcfg, q.yq, "query answer");
        auto z0 = patchify(q.yq, mcfg.patch);
        items[i].leaves = LeafSet::make(model.params, true);
        items[i].graph = training_loss_graph(mcfg, model.params.index, items[i].leaves,
                                             cond.tokens, z0.tokens, items[i].t, ir,
                                             cfg.lambda_aux, rope);
    });

    // batch-level routing statistics, merged in slot order
    std::vector<RoutingStats> merged;
    for (size_t i = 0; i < B; ++i) items[i].graph.routing.accumulate(merged);

    StepStats st;
    for (size_t i = 0; i < B; ++i) {
        const double f = (double)items[i].graph.flow.scalar();
        if (!std::isfinite(f))
            throw data_error("non-finite flow loss (item " + std::to_string(i) + ", task \"" +
                             data.tasks[batch[i].task].name +
                             "\", t=" + std::to_string(items[i].t) + ")");
        st.flow += f / (double)B;
    }
    if (!merged.empty()) {
        double aux = 0.0;
        for (const auto& bank : merged) aux += bank.load_balance(mcfg.adapters.top_k);
        st.aux = aux / (double)merged.size();
        if (!std::isfinite(st.aux)) throw data_error("non-finite balance loss");
    }
    st.loss = st.flow + cfg.lambda_aux * st.aux;
    st.routing = merged;

    // Per-item objective: flow/B plus the balance penalty under *batch*
    // fractions. Fractions carry no gradient, and every item contributes the
    // same token count, so the per-item mean reproduces the batch penalty and
    // its gradient exactly.
    std::vector<GradMapT<float>> gmaps(B);
    parallel_for(B, cfg.threads, [&](size_t i) {
        auto& g = items[i].graph;
        VarT<float> obj = scale(g.flow, (float)(1.0 / (double)B));
        if (g.routing.banks() > 0) {
            VarT<float> acc;
            for (size_t b = 0; b < g.routing.banks(); ++b) {
                const auto fr = merged[b].fractions(mcfg.adapters.top_k);
                std::vector<float> f(fr.begin(), fr.end());
                auto pen = balance_penalty(g.routing.gate_probs[b], f);
                acc = b == 0 ? pen : add(acc, pen);
            }
            obj = add(obj, scale(acc, (float)(cfg.lambda_aux /
                                              ((double)B * (double)g.routing.banks()))));
        }
        gmaps[i] = backward(obj);
    });

    std::vector<Tensor> grads;
    grads.reserve(model.params.size());
    for (const auto& e : model.params.entries) grads.push_back(Tensor::zeros(e.value.shape));
    for (size_t i = 0; i < B; ++i)
        for (size_t p = 0; p < model.params.size(); ++p) {
            const std::vector<float>* g = gmaps[i].find(items[i].leaves.vars[p].node().get());
            if (!g) continue;
            auto& acc = grads[p].data;
            for (size_t k = 0; k < acc.size(); ++k) acc[k] += (*g)[k];
        }

    opt.step(model.params, grads, cfg);
    return st;
}

Trainer Trainer::fresh(Model model, const TrainConfig& cfg, std::string config_echo) {
    Trainer tr;
    tr.model = std::move(model);
    tr.opt = Adam::init(tr.model.params);
    tr.rng = Rng(cfg.seed);
    tr.cfg = cfg;
    tr.config_echo = std::move(config_echo);
    return tr;
}

Trainer Trainer::fresh_from_checkpoint(const Checkpoint& ck, const TrainConfig& cfg,
                                       std::string config_echo) {
    Trainer tr;
    tr.model = model_from_checkpoint(ck);
    if (cfg.adapter_only) {
        bool any = false;
        for (const auto& e : tr.model.params.entries) any |= is_adapter_param(e.name);
        if (!any)
            throw config_error("adapter-only phase needs a model with adapters enabled");
        tr.model.freeze_base();
    } else {
        for (auto& e : tr.model.params.entries) e.frozen = false;
    }
    tr.opt = Adam::init(tr.model.params);
    tr.rng = Rng(cfg.seed);
    tr.cfg = cfg;
    tr.config_echo = std::move(config_echo);
    return tr;
}

Trainer Trainer::resume(const Checkpoint& ck, const TrainConfig& cfg) {
    Trainer tr;
    tr.model = model_from_checkpoint(ck);
    tr.opt = Adam::from_checkpoint(ck, tr.model.params);
    tr.rng.load_state(ck.rng_state.data());
    tr.step = ck.step;
    tr.cfg = cfg;
    tr.config_echo = ck.config_echo;
    return tr;
}

Checkpoint Trainer::snapshot() const {
    Checkpoint ck;
    for (const auto& e : model.params.entries) ck.tensors.add(e.name, e.value, e.frozen);
    for (const auto& e : opt.moments.entries) ck.tensors.add(e.name, e.value, false);
    ck.config_echo = config_echo;
    rng.save_state(ck.rng_state.data());
    ck.step = step;
    return ck;
}

std::vector<std::array<double, 3>> Trainer::run(const Dataset& data, const std::string& out_dir) {
    cfg.validate();
    if (cfg.tasks.empty()) throw config_error("training requires a non-empty task list");
    fs::create_directories(out_dir);
    const auto& mcfg = model.cfg;
    const auto rope =
        RopeTable::build(full_sequence_positions(mcfg.grid(), mcfg.grid()), mcfg.head_dim());

    std::ofstream csv(fs::path(out_dir) / "loss.csv", std::ios::trunc);
    if (!csv) throw data_error("cannot write " + out_dir + "/loss.csv");
    csv << "step,loss,aux\n";

    std::vector<std::array<double, 3>> curve;
    char line[128];
    for (uint64_t s = step + 1; s <= cfg.steps; ++s) {
        const auto batch = sample_batch(cfg, data, rng);
        StepStats st;
        try {
            st = train_step(model, opt, data, batch, cfg, rng, rope);
        } catch (const data_error& e) {
            throw data_error("training aborted at step " + std::to_string(s) + ": " + e.what());
        }
        step = s;
        std::snprintf(line, sizeof line, "%llu,%.9g,%.9g\n", (unsigned long long)s, st.loss,
                      st.aux);
        csv << line;
        curve.push_back({(double)s, st.loss, st.aux});
        if (s % cfg.ckpt_every == 0 && s < cfg.steps) {
            char name[64];
            std::snprintf(name, sizeof name, "ckpt_%06llu.ckpt", (unsigned long long)s);
            save_checkpoint((fs::path(out_dir) / name).string(), snapshot());
        }
    }
    save_checkpoint((fs::path(out_dir) / "ckpt_final.ckpt").string(), snapshot());
    if (!csv.flush()) throw data_error("write failed for " + out_dir + "/loss.csv");
    return curve;
}

}  // namespace vicl
