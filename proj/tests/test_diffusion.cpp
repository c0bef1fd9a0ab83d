#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "vicl/diffusion.hpp"

using namespace vicl;

template <typename T>
static TensorT<T> randn_tensor(Shape shape, Rng& rng, T scale = T(1)) {
    TensorT<T> t = TensorT<T>::zeros(shape);
    for (auto& v : t.data) v = (T)rng.normal() * scale;
    return t;
}

static Image random_image(int side, Rng& rng) {
    Image img(side, side);
    for (auto& v : img.data) v = (float)rng.uniform();
    return img;
}

static BackboneConfig tiny_cfg(int image, bool adapters) {
    BackboneConfig cfg;
    cfg.blocks = 1;
    cfg.dim = 16;
    cfg.heads = 1;
    cfg.ffn = 32;
    cfg.patch = 4;
    cfg.image = image;
    cfg.adapters.enabled = adapters;
    return cfg;
}

// fresh init, then give every zero-initialized tensor random life
static Model lively_model(const BackboneConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    auto model = Model::init(cfg, rng);
    for (auto& e : model.params.entries) {
        bool zero = true;
        for (float v : e.value.data) zero = zero && v == 0.f;
        if (zero)
            for (auto& v : e.value.data) v = (float)rng.normal() * 0.2f;
    }
    return model;
}

TEST_CASE("forward noise hits both endpoints exactly and interpolates in between") {
    Rng rng(1);
    auto z0 = randn_tensor<float>({6, 8}, rng);

    Rng ra(2);
    auto s0 = forward_noise(z0, 0.0, ra);
    CHECK(s0.z_t.data == z0.data);

    Rng rb(2);
    auto s1 = forward_noise(z0, 1.0, rb);
    CHECK(s1.z_t.data == s1.eps.data);
    CHECK(s1.eps.data == s0.eps.data);  // same seed, same draw

    Rng rc(2);
    auto sh = forward_noise(z0, 0.5, rc);
    auto u = flow_velocity_target(sh, z0);
    for (size_t i = 0; i < z0.data.size(); ++i) {
        const double want = 0.5 * ((double)z0.data[i] + (double)sh.eps.data[i]);
        CHECK(std::abs((double)sh.z_t.data[i] - want) < 1e-7);
        // the target is one f32 subtract, so allow one ulp at magnitude ~2
        CHECK(std::abs((double)u.data[i] - ((double)sh.eps.data[i] - (double)z0.data[i])) < 1e-6);
    }

    Rng rd(3);
    const double t = 0.3173;
    auto st = forward_noise(z0, t, rd);
    for (size_t i = 0; i < z0.data.size(); ++i) {
        const double want = (1.0 - t) * (double)z0.data[i] + t * (double)st.eps.data[i];
        CHECK(std::abs((double)st.z_t.data[i] - want) < 1e-7);
    }

    Rng re(4);
    CHECK_THROWS_AS(forward_noise(z0, -0.01, re), contract_error);
    CHECK_THROWS_AS(forward_noise(z0, 1.01, re), contract_error);
}

TEST_CASE("timestep sampling is uniform on [0,1] and reproducible") {
    Rng rng(10);
    double sum = 0.0;
    for (int i = 0; i < 100000; ++i) {
        const double t = sample_timestep(rng);
        CHECK(t >= 0.0);
        CHECK(t <= 1.0);
        sum += t;
    }
    CHECK(std::abs(sum / 100000.0 - 0.5) < 0.01);

    Rng a(11), b(11);
    for (int i = 0; i < 16; ++i) CHECK(sample_timestep(a) == sample_timestep(b));
}

TEST_CASE("one Euler step with the oracle velocity recovers the clean tokens") {
    Rng rng(20);
    auto z0 = randn_tensor<float>({4, 6}, rng);
    auto cond = randn_tensor<float>({2, 3}, rng);

    SamplerConfig scfg;
    scfg.steps = 1;
    scfg.seed = 99;
    Rng noise(scfg.seed);
    auto eps = Tensor::randn({4, 6}, noise);  // what the sampler will draw

    Tensor u(z0.shape);
    for (size_t i = 0; i < u.data.size(); ++i) u.data[i] = eps.data[i] - z0.data[i];

    auto out = sample_tokens(cond, z0.shape, scfg, [&](const Tensor&, double) { return u; });
    // the linear path makes a single Euler step exact up to float rounding
    for (size_t i = 0; i < z0.data.size(); ++i)
        CHECK(std::abs(out.data[i] - z0.data[i]) < 1e-6f);
}

TEST_CASE("the sampler takes S uniform steps from t=1 down to t=1/S") {
    Rng rng(21);
    auto cond = randn_tensor<float>({2, 3}, rng);
    auto c = randn_tensor<float>({3, 4}, rng);

    SamplerConfig scfg;
    scfg.steps = 5;
    scfg.seed = 7;
    std::vector<double> ts;
    auto out = sample_tokens(cond, c.shape, scfg, [&](const Tensor&, double t) {
        ts.push_back(t);
        return c;
    });

    REQUIRE(ts.size() == 5);
    const double want[5] = {1.0, 0.8, 0.6, 0.4, 0.2};
    for (int i = 0; i < 5; ++i) CHECK(std::abs(ts[i] - want[i]) < 1e-12);

    // constant field: z_final = eps - sum(dt * c) = eps - c, any S
    Rng noise(scfg.seed);
    auto eps = Tensor::randn(c.shape, noise);
    for (size_t i = 0; i < c.data.size(); ++i)
        CHECK(std::abs(out.data[i] - (eps.data[i] - c.data[i])) < 1e-5f);
}

TEST_CASE("mutating the conditioning mid-trajectory trips the stationarity check") {
    Rng rng(22);
    auto cond = randn_tensor<float>({2, 3}, rng);
    SamplerConfig scfg;
    scfg.steps = 3;
    auto vfn = [&](const Tensor& z, double) {
        cond.data[0] += 1.f;  // sabotage the anchor
        return Tensor::zeros(z.shape);
    };
    CHECK_THROWS_AS(sample_tokens(cond, Shape{2, 2}, scfg, vfn), contract_error);
}

TEST_CASE("sampler config validation") {
    SamplerConfig ok;
    CHECK(ok.steps == 40);
    ok.validate();
    SamplerConfig bad;
    bad.steps = 0;
    CHECK_THROWS_AS(bad.validate(), config_error);
}

TEST_CASE("fresh model: flow loss equals the analytic noise-to-data gap") {
    Rng init(30);
    auto cfg = tiny_cfg(8, true);
    auto model = Model::init(cfg, init);  // zero head -> zero velocity
    const size_t L = cfg.tokens(), PD = cfg.patch_dim();

    Rng data(31);
    auto cond = randn_tensor<float>({3 * L, PD}, data);
    auto z0 = randn_tensor<float>({L, PD}, data);
    auto rope = RopeTable::build(full_sequence_positions(cfg.grid(), cfg.grid()), cfg.head_dim());
    LeafSet leaves = LeafSet::make(model.params, false);

    const double t = 0.4;
    Rng noise_a(7);
    auto g = training_loss_graph(cfg, model.params.index, leaves, cond, z0, t, noise_a, 0.01, rope);

    // independent recomputation of E||eps - z0||^2 from the same draw
    Rng noise_b(7);
    auto st = forward_noise(z0, t, noise_b);
    double want = 0.0;
    for (size_t i = 0; i < z0.data.size(); ++i) {
        const double u = (double)st.eps.data[i] - (double)z0.data[i];
        want += u * u;
    }
    want /= (double)z0.data.size();

    CHECK((double)g.flow.scalar() >= 0.0);
    CHECK(std::abs((double)g.flow.scalar() - want) < 1e-4);
    // total decomposes exactly into flow + lambda * mean-bank balance
    CHECK(g.routing.banks() == 1);
    const double total = (double)g.total.scalar();
    const double flow = (double)g.flow.scalar();
    const double aux = (double)g.aux_mean.scalar();
    CHECK(aux > 0.0);
    CHECK(std::abs(total - (flow + 0.01 * aux)) < 1e-6);
}

TEST_CASE("image-level training loss matches the token-level graph") {
    auto cfg = tiny_cfg(16, true);
    auto model = lively_model(cfg, 40);

    Rng imgs(41);
    Quadruplet quad{random_image(16, imgs), random_image(16, imgs), random_image(16, imgs),
                    random_image(16, imgs)};

    Rng na(5);
    auto v = training_loss(model, quad, 0.3, na, 0.01);

    auto cond = condition_sequence_for(cfg, quad.xs, quad.xt, quad.xq);
    auto z0 = patchify(quad.yq, cfg.patch);
    auto rope = RopeTable::build(full_sequence_positions(cfg.grid(), cfg.grid()), cfg.head_dim());
    LeafSet leaves = LeafSet::make(model.params, false);
    Rng nb(5);
    auto g = training_loss_graph(cfg, model.params.index, leaves, cond.tokens, z0.tokens, 0.3, nb,
                                 0.01, rope);

    CHECK(v.total == doctest::Approx((double)g.total.scalar()).epsilon(1e-12));
    CHECK(v.flow == doctest::Approx((double)g.flow.scalar()).epsilon(1e-12));
    CHECK(v.aux_mean == doctest::Approx((double)g.aux_mean.scalar()).epsilon(1e-12));
    CHECK(v.total == doctest::Approx(v.flow + 0.01 * v.aux_mean).epsilon(1e-6));

    // geometry mismatches are rejected before any math runs
    Quadruplet bad = quad;
    bad.xq = random_image(8, imgs);
    Rng nc(5);
    CHECK_THROWS_AS(training_loss(model, bad, 0.3, nc, 0.01), shape_error);
    bad = quad;
    bad.yq = random_image(8, imgs);
    Rng nd(5);
    CHECK_THROWS_AS(training_loss(model, bad, 0.3, nd, 0.01), shape_error);
}

TEST_CASE("sampling is deterministic and lands in [0,1] after clamped decode") {
    auto cfg = tiny_cfg(16, false);
    auto model = lively_model(cfg, 50);

    Rng imgs(51);
    auto xs = random_image(16, imgs), xt = random_image(16, imgs), xq = random_image(16, imgs);

    SamplerConfig scfg;
    scfg.steps = 3;
    scfg.seed = 9;
    auto a = sample(model, xs, xt, xq, scfg);
    auto b = sample(model, xs, xt, xq, scfg);
    CHECK(a.data == b.data);
    CHECK(a.w == 16);
    CHECK(a.h == 16);
    for (float v : a.data) {
        CHECK(v >= 0.f);
        CHECK(v <= 1.f);
    }

    SamplerConfig other = scfg;
    other.seed = 10;
    auto c = sample(model, xs, xt, xq, other);
    CHECK(c.data != a.data);
}

TEST_CASE("golden trace: fixed-seed loss values stay pinned") {
    auto cfg = tiny_cfg(8, true);
    auto model = lively_model(cfg, 77);
    const size_t L = cfg.tokens(), PD = cfg.patch_dim();

    Rng data(78);
    auto cond = randn_tensor<float>({3 * L, PD}, data);
    auto z0 = randn_tensor<float>({L, PD}, data);
    auto rope = RopeTable::build(full_sequence_positions(cfg.grid(), cfg.grid()), cfg.head_dim());
    LeafSet leaves = LeafSet::make(model.params, false);
    Rng noise(11);
    auto g = training_loss_graph(cfg, model.params.index, leaves, cond, z0, 0.37, noise, 0.01,
                                 rope);

    // frozen from the first verified run of this configuration
    CHECK((double)g.total.scalar() == doctest::Approx(2.53897095).epsilon(1e-5));
    CHECK((double)g.flow.scalar() == doctest::Approx(2.52893162).epsilon(1e-5));
    CHECK((double)g.aux_mean.scalar() == doctest::Approx(1.00393176).epsilon(1e-5));
}
