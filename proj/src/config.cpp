#include "vicl/config.hpp"

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>

#include "json.hpp"
#include "vicl/errors.hpp"

namespace vicl {

namespace {

using nlohmann::json;

[[noreturn]] void bad(const std::string& where, const std::string& what) {
    throw config_error("config: " + where + ": " + what);
}

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
    if (!j.is_object()) bad(where, "expected an object");
    for (const auto& item : j.items()) {
        bool known = false;
        for (const char* a : allowed)
            if (item.key() == a) {
                known = true;
                break;
            }
        if (!known) bad(where, "unknown key \"" + item.key() + "\"");
    }
}

void fetch_count(const json& j, const std::string& where, const char* key, size_t& out) {
    auto it = j.find(key);
    if (it == j.end()) return;
    if (!it->is_number_integer() || it->get<int64_t>() < 0)
        bad(where, std::string("\"") + key + "\" must be a non-negative integer");
    out = (size_t)it->get<int64_t>();
}

void fetch_u64(const json& j, const std::string& where, const char* key, uint64_t& out) {
    auto it = j.find(key);
    if (it == j.end()) return;
    if (it->is_number_unsigned()) {
        out = it->get<uint64_t>();
        return;
    }
    if (!it->is_number_integer() || it->get<int64_t>() < 0)
        bad(where, std::string("\"") + key + "\" must be a non-negative integer");
    out = (uint64_t)it->get<int64_t>();
}

void fetch_int(const json& j, const std::string& where, const char* key, int& out) {
    auto it = j.find(key);
    if (it == j.end()) return;
    if (!it->is_number_integer())
        bad(where, std::string("\"") + key + "\" must be an integer");
    out = (int)it->get<int64_t>();
}

void fetch_real(const json& j, const std::string& where, const char* key, double& out) {
    auto it = j.find(key);
    if (it == j.end()) return;
    if (!it->is_number()) bad(where, std::string("\"") + key + "\" must be a number");
    out = it->get<double>();
}

void fetch_bool(const json& j, const std::string& where, const char* key, bool& out) {
    auto it = j.find(key);
    if (it == j.end()) return;
    if (!it->is_boolean()) bad(where, std::string("\"") + key + "\" must be a boolean");
    out = it->get<bool>();
}

AdapterConfig parse_adapters(const json& j) {
    AdapterConfig a;
    const std::string where = "model.adapters";
    check_keys(j, where, {"enabled", "attn_lora", "ffn_moe", "rank", "alpha", "experts", "top_k"});
    fetch_bool(j, where, "enabled", a.enabled);
    fetch_bool(j, where, "attn_lora", a.attn_lora);
    fetch_bool(j, where, "ffn_moe", a.ffn_moe);
    fetch_count(j, where, "rank", a.rank);
    fetch_real(j, where, "alpha", a.alpha);
    fetch_count(j, where, "experts", a.experts);
    fetch_count(j, where, "top_k", a.top_k);
    return a;
}

BackboneConfig parse_model(const json& j) {
    BackboneConfig m;
    const std::string where = "model";
    check_keys(j, where, {"blocks", "dim", "heads", "ffn", "patch", "image", "adapters"});
    fetch_count(j, where, "blocks", m.blocks);
    fetch_count(j, where, "dim", m.dim);
    fetch_count(j, where, "heads", m.heads);
    fetch_count(j, where, "ffn", m.ffn);
    fetch_int(j, where, "patch", m.patch);
    fetch_int(j, where, "image", m.image);
    if (auto it = j.find("adapters"); it != j.end()) m.adapters = parse_adapters(*it);
    return m;
}

TrainConfig parse_train(const json& j) {
    TrainConfig t;
    const std::string where = "train";
    check_keys(j, where,
               {"steps", "batch", "lr", "beta1", "beta2", "eps", "weight_decay", "lambda_aux",
                "phase", "tasks", "seed", "ckpt_every"});
    fetch_u64(j, where, "steps", t.steps);
    fetch_count(j, where, "batch", t.batch);
    fetch_real(j, where, "lr", t.lr);
    fetch_real(j, where, "beta1", t.beta1);
    fetch_real(j, where, "beta2", t.beta2);
    fetch_real(j, where, "eps", t.eps);
    fetch_real(j, where, "weight_decay", t.weight_decay);
    fetch_real(j, where, "lambda_aux", t.lambda_aux);
    fetch_u64(j, where, "seed", t.seed);
    fetch_u64(j, where, "ckpt_every", t.ckpt_every);
    if (auto it = j.find("phase"); it != j.end()) {
        if (!it->is_string()) bad(where, "\"phase\" must be a string");
        const std::string p = it->get<std::string>();
        if (p == "full")
            t.adapter_only = false;
        else if (p == "adapter-only")
            t.adapter_only = true;
        else
            bad(where, "\"phase\" must be \"full\" or \"adapter-only\", got \"" + p + "\"");
    }
    if (auto it = j.find("tasks"); it != j.end()) {
        if (!it->is_array()) bad(where, "\"tasks\" must be an array");
        for (size_t i = 0; i < it->size(); ++i) {
            const json& e = (*it)[i];
            const std::string ew = "train.tasks[" + std::to_string(i) + "]";
            check_keys(e, ew, {"name", "weight"});
            TaskWeight w;
            auto nit = e.find("name");
            if (nit == e.end() || !nit->is_string()) bad(ew, "\"name\" (string) is required");
            w.name = nit->get<std::string>();
            fetch_real(e, ew, "weight", w.weight);
            if (!(w.weight > 0.0)) bad(ew, "\"weight\" must be positive");
            t.tasks.push_back(std::move(w));
        }
    }
    return t;
}

SamplerConfig parse_sampler(const json& j) {
    SamplerConfig s;
    const std::string where = "sampler";
    check_keys(j, where, {"steps", "seed", "clamp_decode"});
    fetch_int(j, where, "steps", s.steps);
    fetch_u64(j, where, "seed", s.seed);
    fetch_bool(j, where, "clamp_decode", s.clamp_decode);
    return s;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw config_error(std::string("config: not valid JSON: ") + e.what());
    }
    check_keys(j, "top level", {"model", "train", "sampler"});
    RunConfig rc;
    rc.text = json_text;
    if (auto it = j.find("model"); it != j.end()) rc.model = parse_model(*it);
    if (auto it = j.find("train"); it != j.end()) rc.train = parse_train(*it);
    if (auto it = j.find("sampler"); it != j.end()) rc.sampler = parse_sampler(*it);
    rc.model.validate();
    rc.train.validate();
    rc.sampler.validate();
    return rc;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

}  // namespace vicl
