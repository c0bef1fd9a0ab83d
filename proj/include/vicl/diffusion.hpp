#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vicl/backbone.hpp"
#include "vicl/codec.hpp"
#include "vicl/conditioning.hpp"
#include "vicl/image.hpp"

namespace vicl {

// ---- rectified-flow forward process -----------------------------------------

// Linear interpolation between data and noise; the regression target for the
// backbone is the constant velocity of that path, eps - z0.
template <typename T>
struct FlowStateT {
    TensorT<T> z_t;  // (1-t) * z0 + t * eps
    double t = 0.0;
    TensorT<T> eps;  // the drawn noise (training side)
};

using FlowState = FlowStateT<float>;

template <typename T>
FlowStateT<T> forward_noise(const TensorT<T>& z0, double t, Rng& rng) {
    if (t < 0.0 || t > 1.0)
        throw contract_error("forward_noise: t = " + std::to_string(t) + " outside [0,1]");
    FlowStateT<T> st;
    st.t = t;
    st.eps = TensorT<T>::randn(z0.shape, rng);
    st.z_t = TensorT<T>(z0.shape);
    for (size_t i = 0; i < z0.data.size(); ++i)
        st.z_t.data[i] = (T)((1.0 - t) * (double)z0.data[i] + t * (double)st.eps.data[i]);
    return st;
}

template <typename T>
TensorT<T> flow_velocity_target(const FlowStateT<T>& st, const TensorT<T>& z0) {
    TensorT<T> u(z0.shape);
    for (size_t i = 0; i < u.data.size(); ++i) u.data[i] = st.eps.data[i] - z0.data[i];
    return u;
}

// Training draws t uniformly.
inline double sample_timestep(Rng& rng) { return rng.uniform(); }

// ---- training loss ----------------------------------------------------------

template <typename T>
struct LossGraphT {
    VarT<T> total;     // flow + lambda_aux * aux_mean
    VarT<T> flow;      // velocity MSE over the target tokens
    VarT<T> aux_mean;  // balance loss averaged over MoE banks (zero if none)
    RoutingCaptureT<T> routing;
};

// Builds the full per-item loss graph: noise the target, predict velocity
// under the fixed conditioning, regress it, and average the routing balance
// penalty over the MoE banks. Fractions come from this item's own routing; the
// batch trainer recombines penalties with batch-level fractions instead.
template <typename T>
LossGraphT<T> training_loss_graph(const BackboneConfig& cfg, const ParamIndex& pindex,
                                  const LeafSetT<T>& leaves, const TensorT<T>& cond_tokens,
                                  const TensorT<T>& z0, double t, Rng& rng, double lambda_aux,
                                  const RopeTableT<T>& rope) {
    FlowStateT<T> st = forward_noise(z0, t, rng);
    auto out = predict_velocity_graph(cfg, pindex, leaves, VarT<T>::constant(cond_tokens),
                                      VarT<T>::constant(st.z_t), t, rope);
    LossGraphT<T> g;
    g.routing = std::move(out.routing);
    g.flow = mse(out.velocity, VarT<T>::constant(flow_velocity_target(st, z0)));
    if (g.routing.banks() > 0) {
        std::vector<RoutingStats> stats;
        g.routing.accumulate(stats);
        VarT<T> acc;
        for (size_t b = 0; b < stats.size(); ++b) {
            const auto fr = stats[b].fractions(cfg.adapters.top_k);
            std::vector<T> f(fr.begin(), fr.end());
            auto pen = balance_penalty(g.routing.gate_probs[b], f);
            acc = b == 0 ? pen : add(acc, pen);
        }
        g.aux_mean = scale(acc, (T)(1.0 / (double)stats.size()));
        g.total = add(g.flow, scale(g.aux_mean, (T)lambda_aux));
    } else {
        g.aux_mean = VarT<T>::constant(TensorT<T>::zeros({size_t(1)}));
        g.total = g.flow;
    }
    return g;
}

// ---- image-level plumbing ---------------------------------------------------

inline void require_model_image(const BackboneConfig& cfg, const Image& img, const char* which) {
    if (img.w != cfg.image || img.h != cfg.image)
        throw shape_error(std::string(which) + " image is " + std::to_string(img.w) + "x" +
                          std::to_string(img.h) + ", model expects " + std::to_string(cfg.image) +
                          "x" + std::to_string(cfg.image));
}

inline ConditionSequence condition_sequence_for(const BackboneConfig& cfg, const Image& xs,
                                                const Image& xt, const Image& xq) {
    require_model_image(cfg, xs, "exemplar source");
    require_model_image(cfg, xt, "exemplar target");
    require_model_image(cfg, xq, "query");
    return build_condition_sequence(patchify(xs, cfg.patch), patchify(xt, cfg.patch),
                                    patchify(xq, cfg.patch));
}

struct TrainingLossValue {
    double total = 0.0;
    double flow = 0.0;
    double aux_mean = 0.0;
};

// Value-only convenience used by tests and reporting; the trainer drives
// training_loss_graph directly so it can reuse graphs for backward.
inline TrainingLossValue training_loss(const Model& model, const Quadruplet& quad, double t,
                                       Rng& rng, double lambda_aux) {
    const auto& cfg = model.cfg;
    auto cond = condition_sequence_for(cfg, quad.xs, quad.xt, quad.xq);
    require_model_image(cfg, quad.yq, "query answer");
    auto z0 = patchify(quad.yq, cfg.patch);
    auto rope = RopeTable::build(full_sequence_positions(cfg.grid(), cfg.grid()), cfg.head_dim());
    LeafSet leaves = LeafSet::make(model.params, false);
    auto g = training_loss_graph(cfg, model.params.index, leaves, cond.tokens, z0.tokens, t, rng,
                                 lambda_aux, rope);
    TrainingLossValue v;
    v.total = (double)g.total.scalar();
    v.flow = (double)g.flow.scalar();
    v.aux_mean = (double)g.aux_mean.scalar();
    return v;
}

// ---- Euler sampler ----------------------------------------------------------

struct SamplerConfig {
    int steps = 40;  // desk-scale runs use 20
    uint64_t seed = 0;
    bool clamp_decode = true;

    void validate() const {
        if (steps < 1)
            throw config_error("sampler: steps must be >= 1, got " + std::to_string(steps));
    }
};

inline uint64_t fnv1a64(const void* data, size_t n) {
    const uint8_t* p = (const uint8_t*)data;
    uint64_t h = 1469598103934665603ULL;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

// Integrates z from pure noise at t=1 down to t=0 with S uniform Euler steps,
// calling velocity(z, t) each step. The conditioning tokens are hashed before
// every velocity call: the in-context anchor must stay bit-identical for the
// whole trajectory.
template <typename VelocityFn>
Tensor sample_tokens(const Tensor& cond_tokens, Shape target_shape, const SamplerConfig& scfg,
                     VelocityFn&& velocity) {
    scfg.validate();
    Rng rng(scfg.seed);
    Tensor z = Tensor::randn(std::move(target_shape), rng);
    const uint64_t cond_hash =
        fnv1a64(cond_tokens.data.data(), cond_tokens.data.size() * sizeof(float));
    const double dt = 1.0 / (double)scfg.steps;
    for (int s = 0; s < scfg.steps; ++s) {
        const double t = 1.0 - s * dt;
        if (fnv1a64(cond_tokens.data.data(), cond_tokens.data.size() * sizeof(float)) != cond_hash)
            throw contract_error("sampler: conditioning tokens changed at step " +
                                 std::to_string(s));
        Tensor v = velocity(z, t);
        if (v.shape != z.shape)
            throw shape_error("sampler: velocity " + shape_str(v.shape) + " for state " +
                              shape_str(z.shape));
        for (size_t i = 0; i < z.data.size(); ++i)
            z.data[i] = (float)((double)z.data[i] - dt * (double)v.data[i]);
    }
    return z;
}

// Given one exemplar pair and a query, denoise the answer. The exemplar pair
// defines the transformation; the query rides along in the conditioning.
inline Image sample(const Model& model, const Image& xs, const Image& xt, const Image& xq,
                    const SamplerConfig& scfg) {
    const auto& cfg = model.cfg;
    auto cond = condition_sequence_for(cfg, xs, xt, xq);
    auto rope = RopeTable::build(full_sequence_positions(cfg.grid(), cfg.grid()), cfg.head_dim());
    Tensor z = sample_tokens(cond.tokens, {cfg.tokens(), cfg.patch_dim()}, scfg,
                             [&](const Tensor& zt, double t) {
                                 return predict_velocity(model, cond.tokens, zt, t, rope);
                             });
    Image out = unpatchify(z, cfg.grid(), cfg.grid(), cfg.patch);
    if (scfg.clamp_decode)
        for (auto& v : out.data) v = clamp01(v);
    return out;
}

}  // namespace vicl
