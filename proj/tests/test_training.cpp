#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <doctest.h>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vicl/config.hpp"
#include "vicl/diffusion.hpp"
#include "vicl/taskgen.hpp"
#include "vicl/training.hpp"

using namespace vicl;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- fixtures

// one block at dim 16 keeps every step in the low milliseconds
static const char* kPlainJson = R"json({
  "model": {"blocks": 1, "dim": 16, "heads": 1, "ffn": 32, "patch": 4, "image": 16},
  "train": {"steps": 4, "batch": 2, "lr": 0.01,
            "tasks": [{"name": "t0"}, {"name": "t1"}],
            "seed": 7, "ckpt_every": 2}
})json";

static const char* kAdapterJson = R"json({
  "model": {"blocks": 1, "dim": 16, "heads": 1, "ffn": 32, "patch": 4, "image": 16,
            "adapters": {"enabled": true, "rank": 2, "alpha": 2.0, "experts": 2, "top_k": 1}},
  "train": {"steps": 2, "batch": 2, "lr": 0.01,
            "tasks": [{"name": "t0"}, {"name": "t1"}],
            "seed": 3, "ckpt_every": 1000}
})json";

static Image rand_image(Rng& rng, int side = 16) {
    Image img(side, side);
    for (auto& v : img.data) v = (float)rng.below(256) / 255.f;
    return img;
}

static Dataset synth_data(size_t tasks, size_t per, uint64_t seed) {
    Rng rng(seed);
    Dataset ds;
    for (size_t t = 0; t < tasks; ++t) {
        Dataset::TaskData td;
        td.name = "t" + std::to_string(t);
        for (size_t i = 0; i < per; ++i) {
            Quadruplet q;
            q.xs = rand_image(rng);
            q.xt = rand_image(rng);
            q.xq = rand_image(rng);
            q.yq = rand_image(rng);
            td.quads.push_back(std::move(q));
        }
        ds.tasks.push_back(std::move(td));
    }
    return ds;
}

static Trainer make_trainer(const char* json_text) {
    RunConfig rc = parse_run_config(json_text);
    Rng init_rng(1);
    return Trainer::fresh(Model::init(rc.model, init_rng), rc.train, rc.text);
}

static RopeTable rope_for(const BackboneConfig& cfg) {
    return RopeTable::build(full_sequence_positions(cfg.grid(), cfg.grid()), cfg.head_dim());
}

static std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

static bool same_bytes(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

// ---------------------------------------------------------------- config

TEST_CASE("run config parses defaults and explicit values") {
    RunConfig d = parse_run_config("{}");
    CHECK(d.model.blocks == 4);
    CHECK(d.model.dim == 64);
    CHECK(d.model.image == 16);
    CHECK_FALSE(d.model.adapters.enabled);
    CHECK(d.train.batch == 8);
    CHECK(d.train.lr == 1e-3);
    CHECK(d.train.lambda_aux == 0.01);
    CHECK_FALSE(d.train.adapter_only);
    CHECK(d.sampler.steps == 40);
    CHECK(d.text == "{}");

    RunConfig rc = parse_run_config(kAdapterJson);
    CHECK(rc.model.blocks == 1);
    CHECK(rc.model.dim == 16);
    CHECK(rc.model.adapters.enabled);
    CHECK(rc.model.adapters.experts == 2);
    CHECK(rc.model.adapters.top_k == 1);
    CHECK(rc.train.steps == 2);
    CHECK(rc.train.tasks.size() == 2);
    CHECK(rc.train.tasks[0].name == "t0");
    CHECK(rc.train.tasks[0].weight == 1.0);
    CHECK(rc.train.seed == 3);
    CHECK(rc.text == kAdapterJson);

    RunConfig ph = parse_run_config(R"({"train": {"phase": "adapter-only"}})");
    CHECK(ph.train.adapter_only);
}

TEST_CASE("run config rejects junk") {
    CHECK_THROWS_AS(parse_run_config("not json"), config_error);
    CHECK_THROWS_AS(parse_run_config(R"({"modle": {}})"), config_error);
    CHECK_THROWS_AS(parse_run_config(R"({"model": {"blks": 2}})"), config_error);
    CHECK_THROWS_AS(parse_run_config(R"({"model": {"adapters": {"expert": 2}}})"), config_error);
    CHECK_THROWS_AS(parse_run_config(R"({"train": {"learning_rate": 0.1}})"), config_error);
    CHECK_THROWS_AS(parse_run_config(R"({"sampler": {"step": 5}})"), config_error);
    CHECK_THROWS_AS(parse_run_config(R"({"train": {"phase": "both"}})"), config_error);
    CHECK_THROWS_AS(parse_run_config(R"({"train": {"tasks": [{"weight": 1}]}})"), config_error);
    CHECK_THROWS_AS(parse_run_config(R"({"train": {"tasks": [{"name": "a", "weight": -1}]}})"),
                    config_error);
    CHECK_THROWS_AS(parse_run_config(R"({"train": {"tasks": [{"name": "a", "extra": 1}]}})"),
                    config_error);
    CHECK_THROWS_AS(parse_run_config(
                        R"({"train": {"tasks": [{"name": "a"}, {"name": "a"}]}})"),
                    config_error);
    CHECK_THROWS_AS(parse_run_config(R"({"model": {"blocks": -1}})"), config_error);
    CHECK_THROWS_AS(parse_run_config(R"({"model": {"dim": 30, "heads": 4}})"), config_error);
    CHECK_THROWS_AS(parse_run_config(R"({"train": {"batch": 0}})"), config_error);
    CHECK_THROWS_AS(parse_run_config(R"({"train": {"beta1": 1.0}})"), config_error);
    CHECK_THROWS_AS(parse_run_config(R"({"sampler": {"steps": 0}})"), config_error);
    CHECK_THROWS_AS(load_run_config("/nonexistent/vicl.json"), data_error);
}

// ---------------------------------------------------------------- checkpoints

TEST_CASE("checkpoint bytes roundtrip exactly") {
    const fs::path root = fs::temp_directory_path() / "vicl_ckpt_test";
    fs::remove_all(root);
    fs::create_directories(root);

    Trainer tr = make_trainer(kAdapterJson);
    Checkpoint ck = tr.snapshot();
    const auto p1 = root / "a.ckpt";
    const auto p2 = root / "b.ckpt";
    save_checkpoint(p1.string(), ck);

    Checkpoint back = load_checkpoint(p1.string());
    CHECK(back.version == ck.version);
    CHECK(back.step == ck.step);
    CHECK(back.config_echo == ck.config_echo);
    CHECK(back.rng_state == ck.rng_state);
    REQUIRE(back.tensors.size() == ck.tensors.size());
    for (size_t i = 0; i < ck.tensors.size(); ++i) {
        const auto& a = ck.tensors.entries[i];
        const auto& b = back.tensors.entries[i];
        CHECK(a.name == b.name);
        CHECK(a.frozen == b.frozen);
        CHECK(same_bytes(a.value, b.value));
    }
    // optimizer moments ride along, two per model tensor
    CHECK(ck.tensors.size() == 3 * tr.model.params.size());
    CHECK(ck.tensors.has("opt.m.in.w"));
    CHECK(ck.tensors.has("opt.v.head.b"));

    save_checkpoint(p2.string(), back);
    CHECK(slurp(p1) == slurp(p2));
    fs::remove_all(root);
}

TEST_CASE("checkpoint loader rejects garbage") {
    const fs::path root = fs::temp_directory_path() / "vicl_ckpt_bad";
    fs::remove_all(root);
    fs::create_directories(root);

    CHECK_THROWS_AS(load_checkpoint((root / "missing.ckpt").string()), data_error);

    Trainer tr = make_trainer(kPlainJson);
    const auto good = root / "good.ckpt";
    save_checkpoint(good.string(), tr.snapshot());
    std::string bytes = slurp(good);

    {  // wrong magic
        std::string bad = bytes;
        bad[0] = 'X';
        std::ofstream(root / "magic.ckpt", std::ios::binary) << bad;
        CHECK_THROWS_AS(load_checkpoint((root / "magic.ckpt").string()), data_error);
    }
    {  // unknown version
        std::string bad = bytes;
        bad[4] = (char)0x7f;
        std::ofstream(root / "version.ckpt", std::ios::binary) << bad;
        CHECK_THROWS_AS(load_checkpoint((root / "version.ckpt").string()), data_error);
    }
    {  // truncated
        std::ofstream(root / "short.ckpt", std::ios::binary)
            << bytes.substr(0, bytes.size() - 10);
        CHECK_THROWS_AS(load_checkpoint((root / "short.ckpt").string()), data_error);
    }
    fs::remove_all(root);
}

TEST_CASE("model rebuilds from a checkpoint") {
    Trainer tr = make_trainer(kAdapterJson);
    tr.model.freeze_base();
    Checkpoint ck = tr.snapshot();

    Model back = model_from_checkpoint(ck);
    CHECK(back.cfg.dim == tr.model.cfg.dim);
    CHECK(back.cfg.adapters.enabled);
    REQUIRE(back.params.size() == tr.model.params.size());
    for (size_t i = 0; i < back.params.size(); ++i) {
        const auto& a = tr.model.params.entries[i];
        const auto& b = back.params.entries[i];
        CHECK(a.name == b.name);
        CHECK(a.frozen == b.frozen);
        CHECK(same_bytes(a.value, b.value));
    }

    Checkpoint no_echo = ck;
    no_echo.config_echo.clear();
    CHECK_THROWS_AS(model_from_checkpoint(no_echo), data_error);
}

// ---------------------------------------------------------------- sampling

TEST_CASE("sample batch follows the weights") {
    Dataset ds = synth_data(2, 3, 11);
    TrainConfig cfg;
    cfg.tasks = {{"t0", 1.0}, {"t1", 1.0}};

    SUBCASE("single task fills every slot") {
        cfg.tasks = {{"t1", 1.0}};
        cfg.batch = 32;
        Rng rng(0);
        for (const auto& item : sample_batch(cfg, ds, rng)) {
            CHECK(item.task == 1);
            CHECK(item.quad < 3);
        }
    }
    SUBCASE("equal weights split evenly") {
        cfg.batch = 10000;
        Rng rng(42);
        auto batch = sample_batch(cfg, ds, rng);
        double first = 0;
        for (const auto& item : batch) first += item.task == 0 ? 1.0 : 0.0;
        CHECK(first / 10000.0 == doctest::Approx(0.5).epsilon(0.04));  // +-0.02
    }
    SUBCASE("seed pins the draw") {
        cfg.batch = 64;
        Rng a(9), b(9), c(10);
        auto ba = sample_batch(cfg, ds, a);
        auto bb = sample_batch(cfg, ds, b);
        auto bc = sample_batch(cfg, ds, c);
        bool same = true, diff = false;
        for (size_t i = 0; i < ba.size(); ++i) {
            same &= ba[i].task == bb[i].task && ba[i].quad == bb[i].quad;
            diff |= ba[i].task != bc[i].task || ba[i].quad != bc[i].quad;
        }
        CHECK(same);
        CHECK(diff);
    }
    SUBCASE("a weighted task with no data is an error") {
        cfg.tasks = {{"t0", 1.0}, {"missing", 1.0}};
        Rng rng(0);
        CHECK_THROWS_AS(sample_batch(cfg, ds, rng), data_error);

        Dataset empty = ds;
        empty.tasks[1].quads.clear();
        cfg.tasks = {{"t0", 1.0}, {"t1", 1.0}};
        CHECK_THROWS_AS(sample_batch(cfg, empty, rng), data_error);
    }
}

TEST_CASE("load_split groups quadruplets by task") {
    const fs::path root = fs::temp_directory_path() / "vicl_split_test";
    fs::remove_all(root);
    DatasetConfig dc;
    dc.out_dir = root.string();
    dc.tasks = {"invert", "desaturate"};
    dc.per_task = 6;
    dc.holdout = 0.34;
    dc.seed = 5;
    write_dataset(dc);

    Dataset tr = load_split((root / "train").string(), {"desaturate", "invert"});
    REQUIRE(tr.tasks.size() == 2);
    CHECK(tr.tasks[0].name == "desaturate");  // wanted order, not manifest order
    CHECK(tr.tasks[1].name == "invert");
    CHECK(tr.tasks[0].quads.size() == 4);
    CHECK(tr.tasks[1].quads.size() == 4);
    for (const auto& q : tr.at("invert").quads) {
        CHECK(q.xs.w == 16);
        CHECK(q.yq.h == 16);
    }
    CHECK_THROWS_AS(tr.at("edge"), contract_error);
    CHECK_THROWS_AS(load_split((root / "train").string(), {"edge"}), data_error);
    fs::remove_all(root);
}

// ---------------------------------------------------------------- the step

TEST_CASE("adam leaves parameters alone at lr zero") {
    Trainer tr = make_trainer(kPlainJson);
    tr.cfg.lr = 0.0;
    Dataset ds = synth_data(2, 3, 21);
    const auto rope = rope_for(tr.model.cfg);

    std::vector<Tensor> before;
    for (const auto& e : tr.model.params.entries) before.push_back(e.value);

    auto batch = sample_batch(tr.cfg, ds, tr.rng);
    StepStats st = train_step(tr.model, tr.opt, ds, batch, tr.cfg, tr.rng, rope);
    CHECK(std::isfinite(st.loss));
    CHECK(st.loss > 0.0);
    for (size_t i = 0; i < before.size(); ++i)
        CHECK(same_bytes(before[i], tr.model.params.entries[i].value));
    CHECK(tr.opt.t == 1);
}

TEST_CASE("one optimizer step reduces the batch loss") {
    for (const char* json_text : {kPlainJson, kAdapterJson}) {
        CAPTURE(json_text);
        Trainer tr = make_trainer(json_text);
        tr.cfg.lr = 1e-2;
        Dataset ds = synth_data(2, 3, 33);
        const auto rope = rope_for(tr.model.cfg);

        auto batch = sample_batch(tr.cfg, ds, tr.rng);
        Rng replay = tr.rng;  // same per-item draws for the re-evaluation
        StepStats st1 = train_step(tr.model, tr.opt, ds, batch, tr.cfg, tr.rng, rope);

        TrainConfig frozen_cfg = tr.cfg;
        frozen_cfg.lr = 0.0;
        Adam throwaway = Adam::init(tr.model.params);
        StepStats st2 = train_step(tr.model, throwaway, ds, batch, frozen_cfg, replay, rope);

        CHECK(std::isfinite(st1.loss));
        CHECK(st2.loss < st1.loss);
    }
}

TEST_CASE("balance loss is batch-level and bounded") {
    Trainer tr = make_trainer(kAdapterJson);
    Dataset ds = synth_data(2, 3, 55);
    const auto rope = rope_for(tr.model.cfg);

    auto batch = sample_batch(tr.cfg, ds, tr.rng);
    StepStats st = train_step(tr.model, tr.opt, ds, batch, tr.cfg, tr.rng, rope);

    const size_t experts = tr.model.cfg.adapters.experts;
    REQUIRE(st.routing.size() == tr.model.cfg.blocks);
    CHECK(st.aux >= 0.0);
    CHECK(st.aux <= (double)experts);
    double mean = 0;
    for (const auto& bank : st.routing) {
        // every item routes its full sequence through the expert bank
        CHECK(bank.tokens == tr.cfg.batch * tr.model.cfg.seq_len());
        mean += bank.load_balance(tr.model.cfg.adapters.top_k);
    }
    CHECK(st.aux == mean / (double)st.routing.size());
    CHECK(st.loss == st.flow + tr.cfg.lambda_aux * st.aux);

    // perfectly balanced hard counts and gates come out at exactly 1
    RoutingStats balanced(2);
    const float even[2] = {0.5f, 0.5f};
    balanced.record(std::vector<int>{0}, even);
    balanced.record(std::vector<int>{1}, even);
    CHECK(balanced.load_balance(1) == 1.0);

    // total collapse comes out at N
    RoutingStats collapsed(2);
    const float one_hot[2] = {1.f, 0.f};
    collapsed.record(std::vector<int>{0}, one_hot);
    collapsed.record(std::vector<int>{0}, one_hot);
    CHECK(collapsed.load_balance(1) == 2.0);
}

TEST_CASE("a poisoned model aborts with diagnostics") {
    Trainer tr = make_trainer(kPlainJson);
    tr.model.params.at("in.w").value.data[0] = std::nanf("");
    Dataset ds = synth_data(2, 2, 60);
    const auto rope = rope_for(tr.model.cfg);
    auto batch = sample_batch(tr.cfg, ds, tr.rng);
    CHECK_THROWS_AS(train_step(tr.model, tr.opt, ds, batch, tr.cfg, tr.rng, rope), data_error);

    Trainer runner = make_trainer(kPlainJson);
    runner.model.params.at("in.w").value.data[0] = std::nanf("");
    runner.cfg.steps = 3;
    const fs::path root = fs::temp_directory_path() / "vicl_nan_run";
    fs::remove_all(root);
    try {
        runner.run(ds, root.string());
        FAIL("expected data_error");
    } catch (const data_error& e) {
        CHECK(std::string(e.what()).find("step 1") != std::string::npos);
    }
    fs::remove_all(root);
}

// ---------------------------------------------------------------- full runs

TEST_CASE("training writes checkpoints and a loss curve") {
    const fs::path root = fs::temp_directory_path() / "vicl_run_test";
    fs::remove_all(root);
    Dataset ds = synth_data(2, 3, 70);

    Trainer tr = make_trainer(kPlainJson);  // steps 4, ckpt_every 2
    auto curve = tr.run(ds, root.string());

    REQUIRE(curve.size() == 4);
    for (size_t i = 0; i < curve.size(); ++i) {
        CHECK(curve[i][0] == (double)(i + 1));
        CHECK(std::isfinite(curve[i][1]));
        CHECK(curve[i][2] == 0.0);  // no adapters, no balance term
    }
    CHECK(fs::exists(root / "ckpt_000002.ckpt"));
    CHECK_FALSE(fs::exists(root / "ckpt_000004.ckpt"));  // final covers the last step
    CHECK(fs::exists(root / "ckpt_final.ckpt"));

    std::ifstream csv(root / "loss.csv");
    std::string line;
    std::getline(csv, line);
    CHECK(line == "step,loss,aux");
    size_t rows = 0;
    while (std::getline(csv, line) && !line.empty()) ++rows;
    CHECK(rows == 4);

    Checkpoint fin = load_checkpoint((root / "ckpt_final.ckpt").string());
    CHECK(fin.step == 4);
    CHECK(fin.config_echo == kPlainJson);
    fs::remove_all(root);
}

TEST_CASE("zero steps trains nothing") {
    const fs::path root = fs::temp_directory_path() / "vicl_zero_test";
    fs::remove_all(root);
    fs::create_directories(root);
    Dataset ds = synth_data(2, 2, 80);

    Trainer tr = make_trainer(kPlainJson);
    tr.cfg.steps = 0;
    save_checkpoint((root / "init.ckpt").string(), tr.snapshot());
    auto curve = tr.run(ds, root.string());

    CHECK(curve.empty());
    CHECK(slurp(root / "ckpt_final.ckpt") == slurp(root / "init.ckpt"));
    fs::remove_all(root);
}

TEST_CASE("an interrupted run resumes bit-exact") {
    const fs::path root = fs::temp_directory_path() / "vicl_resume_test";
    fs::remove_all(root);
    Dataset ds = synth_data(2, 3, 90);

    RunConfig rc = parse_run_config(kAdapterJson);
    rc.train.steps = 6;
    rc.train.ckpt_every = 3;

    Rng ra(1);
    Trainer full = Trainer::fresh(Model::init(rc.model, ra), rc.train, rc.text);
    auto full_curve = full.run(ds, (root / "full").string());
    REQUIRE(full_curve.size() == 6);

    Checkpoint mid = load_checkpoint((root / "full" / "ckpt_000003.ckpt").string());
    CHECK(mid.step == 3);
    Trainer half = Trainer::resume(mid, rc.train);
    auto tail = half.run(ds, (root / "resumed").string());

    REQUIRE(tail.size() == 3);  // steps 4..6 only
    for (size_t i = 0; i < 3; ++i) {
        CHECK(tail[i][0] == full_curve[i + 3][0]);
        CHECK(tail[i][1] == full_curve[i + 3][1]);
        CHECK(tail[i][2] == full_curve[i + 3][2]);
    }
    CHECK(slurp(root / "resumed" / "ckpt_final.ckpt") == slurp(root / "full" / "ckpt_final.ckpt"));
    fs::remove_all(root);
}

TEST_CASE("adapter phase trains only the adapters") {
    const fs::path root = fs::temp_directory_path() / "vicl_phase_test";
    fs::remove_all(root);
    Dataset ds = synth_data(2, 3, 100);

    Trainer a = make_trainer(kAdapterJson);
    a.run(ds, (root / "a").string());
    Checkpoint ck_a = load_checkpoint((root / "a" / "ckpt_final.ckpt").string());

    RunConfig rc = parse_run_config(kAdapterJson);
    rc.train.adapter_only = true;
    rc.train.steps = 3;
    rc.train.seed = 17;
    Trainer b = Trainer::fresh_from_checkpoint(ck_a, rc.train, rc.text);
    CHECK(b.step == 0);
    CHECK(b.opt.t == 0);  // phase B starts with a fresh optimizer
    b.run(ds, (root / "b").string());
    Checkpoint ck_b = load_checkpoint((root / "b" / "ckpt_final.ckpt").string());

    CHECK(freeze_check(ck_a, ck_b).empty());
    bool adapters_moved = false;
    for (const auto& e : ck_b.tensors.entries) {
        if (e.name.rfind("opt.", 0) == 0) continue;
        const auto& before = ck_a.tensors.at(e.name);
        if (is_adapter_param(e.name)) {
            CHECK_FALSE(e.frozen);
            adapters_moved |= !same_bytes(before.value, e.value);
        } else {
            CHECK(e.frozen);
            CHECK(same_bytes(before.value, e.value));
        }
    }
    CHECK(adapters_moved);

    // a frozen tensor that drifted anyway gets named
    Checkpoint tampered = ck_b;
    tampered.tensors.at("blk0.ffn.in.w").value.data[0] += 1.f;
    auto violations = freeze_check(ck_a, tampered);
    REQUIRE(violations.size() == 1);
    CHECK(violations[0] == "blk0.ffn.in.w");

    // warm start without the adapter phase unfreezes everything again
    Trainer c = Trainer::fresh_from_checkpoint(ck_b, parse_run_config(kAdapterJson).train,
                                               parse_run_config(kAdapterJson).text);
    for (const auto& e : c.model.params.entries) CHECK_FALSE(e.frozen);

    // adapter-only needs adapters in the checkpointed model
    Trainer plain = make_trainer(kPlainJson);
    RunConfig rp = parse_run_config(kPlainJson);
    rp.train.adapter_only = true;
    CHECK_THROWS_AS(Trainer::fresh_from_checkpoint(plain.snapshot(), rp.train, rp.text),
                    config_error);
    fs::remove_all(root);
}

TEST_CASE("the thread count never changes the numbers") {
    const fs::path root = fs::temp_directory_path() / "vicl_threads_test";
    fs::remove_all(root);
    Dataset ds = synth_data(2, 3, 110);

    for (int threads : {1, 2, 3}) {
        RunConfig rc = parse_run_config(kAdapterJson);
        rc.train.threads = threads;
        Rng ir(1);
        Trainer tr = Trainer::fresh(Model::init(rc.model, ir), rc.train, rc.text);
        tr.run(ds, (root / std::to_string(threads)).string());
    }
    const std::string one = slurp(root / "1" / "ckpt_final.ckpt");
    CHECK(one == slurp(root / "2" / "ckpt_final.ckpt"));
    CHECK(one == slurp(root / "3" / "ckpt_final.ckpt"));
    CHECK(slurp(root / "1" / "loss.csv") == slurp(root / "3" / "loss.csv"));
    fs::remove_all(root);
}
