#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "vicl/adapters.hpp"
#include "vicl/autodiff.hpp"
#include "vicl/conditioning.hpp"
#include "vicl/params.hpp"

namespace vicl {

// The miniature patch-token transformer that predicts flow velocity for the
// noisy target, attending over [exemplar-src | exemplar-tgt | query | noisy].
struct BackboneConfig {
    size_t blocks = 4;
    size_t dim = 64;
    size_t heads = 4;
    size_t ffn = 256;  // 4 * dim by default
    int patch = 4;
    int image = 16;
    AdapterConfig adapters;

    size_t patch_dim() const { return (size_t)patch * patch * 3; }
    size_t head_dim() const { return dim / heads; }
    int grid() const { return image / patch; }
    size_t tokens() const { return (size_t)grid() * grid(); }  // L per image
    size_t seq_len() const { return 4 * tokens(); }

    void validate() const {
        if (blocks == 0 || dim == 0 || heads == 0 || ffn == 0)
            throw config_error("backbone: blocks/dim/heads/ffn must be positive");
        if (dim % heads != 0)
            throw config_error("backbone: dim " + std::to_string(dim) + " not divisible by " +
                               std::to_string(heads) + " heads");
        if (patch <= 0 || image <= 0 || image % patch != 0)
            throw config_error("backbone: image " + std::to_string(image) +
                               " not divisible by patch " + std::to_string(patch));
        rope_split(head_dim());  // throws config_error on a bad split
        adapters.validate();
    }
};

template <typename T>
TensorT<T> timestep_embedding(double t, size_t dim) {
    TensorT<T> e({1, dim});
    const size_t half = dim / 2;
    for (size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * (double)i / (double)half);
        const double arg = 1000.0 * t * freq;
        e.data[i] = (T)std::cos(arg);
        e.data[half + i] = (T)std::sin(arg);
    }
    return e;
}

inline bool is_adapter_param(const std::string& name) {
    return name.find(".lora.") != std::string::npos || name.find(".moe.") != std::string::npos;
}

inline bool is_optimizer_param(const std::string& name) { return name.rfind("opt.", 0) == 0; }

template <typename T>
struct ModelT {
    BackboneConfig cfg;
    ParamStoreT<T> params;

    static ModelT init(const BackboneConfig& cfg, Rng& rng) {
        cfg.validate();
        ModelT m;
        m.cfg = cfg;
        auto& p = m.params;
        const size_t D = cfg.dim, F = cfg.ffn, PD = cfg.patch_dim();
        auto w_init = [&](Shape s, size_t fan_in) {
            return TensorT<T>::randn(std::move(s), rng, (T)(1.0 / std::sqrt((double)fan_in)));
        };

        p.add("in.w", w_init({D, PD}, PD));
        p.add("in.b", TensorT<T>::zeros({D}));
        for (size_t b = 0; b < cfg.blocks; ++b) {
            const std::string pre = "blk" + std::to_string(b) + ".";
            p.add(pre + "norm1.gain", TensorT<T>::full({D}, T(1)));
            for (const char* proj : {"q", "k", "v", "o"}) {
                p.add(pre + "attn." + proj + ".w", w_init({D, D}, D));
                p.add(pre + "attn." + proj + ".b", TensorT<T>::zeros({D}));
            }
            p.add(pre + "norm2.gain", TensorT<T>::full({D}, T(1)));
            p.add(pre + "ffn.in.w", w_init({F, D}, D));
            p.add(pre + "ffn.in.b", TensorT<T>::zeros({F}));
            p.add(pre + "ffn.out.w", w_init({D, F}, F));
            p.add(pre + "ffn.out.b", TensorT<T>::zeros({D}));
            // modulation MLP; second layer zero so every block starts as identity
            p.add(pre + "mod.w1", w_init({D, D}, D));
            p.add(pre + "mod.b1", TensorT<T>::zeros({D}));
            p.add(pre + "mod.w2", TensorT<T>::zeros({6 * D, D}));
            p.add(pre + "mod.b2", TensorT<T>::zeros({6 * D}));
            if (cfg.adapters.enabled) {
                const size_t r = cfg.adapters.rank;
                if (cfg.adapters.attn_lora) {
                    for (const char* proj : {"q", "k", "v", "o"}) {
                        p.add(pre + "attn." + proj + ".lora.a", w_init({r, D}, D));
                        p.add(pre + "attn." + proj + ".lora.b", TensorT<T>::zeros({D, r}));
                    }
                }
                if (cfg.adapters.ffn_moe) {
                    p.add(pre + "ffn.out.moe.router.w",
                          TensorT<T>::randn({cfg.adapters.experts, F}, rng, T(0.02)));
                    for (size_t e = 0; e < cfg.adapters.experts; ++e) {
                        const std::string ep = pre + "ffn.out.moe.e" + std::to_string(e) + ".";
                        p.add(ep + "a", w_init({r, F}, F));
                        p.add(ep + "b", TensorT<T>::zeros({D, r}));
                    }
                }
            }
        }
        p.add("final.gain", TensorT<T>::full({D}, T(1)));
        // zero output head: the freshly initialized model predicts exactly zero velocity
        p.add("head.w", TensorT<T>::zeros({PD, D}));
        p.add("head.b", TensorT<T>::zeros({PD}));
        return m;
    }

    // adapter-only phase: every base tensor stops receiving gradients
    void freeze_base() {
        for (auto& e : params.entries)
            if (!is_adapter_param(e.name)) e.frozen = true;
    }
};

using Model = ModelT<float>;

template <typename T>
struct VelocityOut {
    VarT<T> velocity;  // [L, patch_dim]
    RoutingCaptureT<T> routing;
};

// name -> slot lookup shared by every model variant (a ParamStoreT's .index)
using ParamIndex = std::unordered_map<std::string, size_t>;

namespace detail {

template <typename T>
const VarT<T>& pvar(const ParamIndex& index, const LeafSetT<T>& leaves, const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw contract_error("unknown parameter: " + name);
    return leaves.vars[it->second];
}

}  // namespace detail

// Multi-head bidirectional attention over the whole sequence: per head,
// logits = rope(q)·rope(k)^T / sqrt(head_dim), softmax rows, mix v.
template <typename T>
VarT<T> attention(const VarT<T>& q, const VarT<T>& k, const VarT<T>& v, size_t heads,
                  const RopeTableT<T>& rope) {
    const size_t hd = q.shape()[1] / heads;
    std::vector<VarT<T>> mixed;
    mixed.reserve(heads);
    for (size_t h = 0; h < heads; ++h) {
        auto qh = rope_rotate(slice_cols(q, h * hd, hd), rope);
        auto kh = rope_rotate(slice_cols(k, h * hd, hd), rope);
        auto vh = slice_cols(v, h * hd, hd);
        auto attn = softmax(scale(matmul_nt(qh, kh), (T)(1.0 / std::sqrt((double)hd))), -1);
        mixed.push_back(matmul(attn, vh));  // [S, hd]
    }
    return heads == 1 ? mixed[0] : concat_cols<T>(mixed);
}

// One pre-norm transformer block with timestep modulation:
//   x += gate1 ⊙ Attn((1+scale1) ⊙ rms(x) + shift1)
//   x += gate2 ⊙ FFN((1+scale2) ⊙ rms(x) + shift2)
// mod is [1, 6D] laid out as (shift1, scale1, gate1, shift2, scale2, gate2).
template <typename T>
VarT<T> modulated_block(const BackboneConfig& cfg, const ParamIndex& pindex,
                        const LeafSetT<T>& leaves, const std::string& pre, VarT<T> x,
                        const VarT<T>& mod, const RopeTableT<T>& rope,
                        RoutingCaptureT<T>* capture) {
    const size_t D = cfg.dim;
    if (mod.numel() != 6 * D)
        throw shape_error("modulation " + shape_str(mod.shape()) + ", expected 6 x dim " +
                          std::to_string(D));
    auto P = [&](const std::string& name) -> const VarT<T>& {
        return detail::pvar(pindex, leaves, name);
    };
    const bool lora_on = cfg.adapters.enabled && cfg.adapters.attn_lora;
    const bool moe_on = cfg.adapters.enabled && cfg.adapters.ffn_moe;
    auto mslice = [&](size_t idx) { return slice_flat(mod, idx * D, Shape{D}); };
    auto modulate = [&](const VarT<T>& h, size_t shift_idx) {
        return add_rowvec(mul_rowvec(h, add_scalar(mslice(shift_idx + 1), T(1))),
                          mslice(shift_idx));
    };

    // attention sublayer
    auto xn = modulate(rmsnorm(x, P(pre + "norm1.gain"), T(1e-6)), 0);
    auto proj = [&](const std::string& base, const VarT<T>& in) {
        if (lora_on)
            return lora_linear(in, P(base + ".w"), P(base + ".b"), P(base + ".lora.a"),
                               P(base + ".lora.b"), cfg.adapters.alpha);
        return linear(in, P(base + ".w"), P(base + ".b"));
    };
    auto mixed = attention(proj(pre + "attn.q", xn), proj(pre + "attn.k", xn),
                           proj(pre + "attn.v", xn), cfg.heads, rope);
    auto attn_out = proj(pre + "attn.o", mixed);
    x = add(x, mul_rowvec(attn_out, mslice(2)));

    // feed-forward sublayer
    auto xn2 = modulate(rmsnorm(x, P(pre + "norm2.gain"), T(1e-6)), 3);
    auto hidden = silu(linear(xn2, P(pre + "ffn.in.w"), P(pre + "ffn.in.b")));
    VarT<T> ffn_out;
    if (moe_on) {
        std::vector<VarT<T>> ea, eb;
        for (size_t e = 0; e < cfg.adapters.experts; ++e) {
            const std::string ep = pre + "ffn.out.moe.e" + std::to_string(e) + ".";
            ea.push_back(P(ep + "a"));
            eb.push_back(P(ep + "b"));
        }
        ffn_out = moe_lora_linear(hidden, P(pre + "ffn.out.w"), P(pre + "ffn.out.b"),
                                  P(pre + "ffn.out.moe.router.w"), ea, eb, cfg.adapters.alpha,
                                  cfg.adapters.top_k, capture);
    } else {
        ffn_out = linear(hidden, P(pre + "ffn.out.w"), P(pre + "ffn.out.b"));
    }
    return add(x, mul_rowvec(ffn_out, mslice(5)));
}

// Builds the velocity-prediction graph for one item. Conditioning tokens come
// first, the noisy target last; attention is full and bidirectional; the output
// head reads only the target rows.
template <typename T>
VelocityOut<T> predict_velocity_graph(const BackboneConfig& cfg, const ParamIndex& pindex,
                                      const LeafSetT<T>& leaves, const VarT<T>& cond_tokens,
                                      const VarT<T>& z_noisy, double t,
                                      const RopeTableT<T>& rope) {
    const size_t L = cfg.tokens(), PD = cfg.patch_dim(), D = cfg.dim;
    if (cond_tokens.shape() != Shape{3 * L, PD})
        throw shape_error("conditioning tokens " + shape_str(cond_tokens.shape()) + ", expected " +
                          shape_str({3 * L, PD}));
    if (z_noisy.shape() != Shape{L, PD})
        throw shape_error("noisy target tokens " + shape_str(z_noisy.shape()) + ", expected " +
                          shape_str({L, PD}));
    if (t < 0.0 || t > 1.0) throw contract_error("t = " + std::to_string(t) + " outside [0,1]");
    auto P = [&](const std::string& name) -> const VarT<T>& {
        return detail::pvar(pindex, leaves, name);
    };

    VelocityOut<T> out;
    auto x = linear(concat_rows<T>({cond_tokens, z_noisy}), P("in.w"), P("in.b"));  // [S, D]
    auto temb = VarT<T>::constant(timestep_embedding<T>(t, D));

    for (size_t b = 0; b < cfg.blocks; ++b) {
        const std::string pre = "blk" + std::to_string(b) + ".";
        auto mod = linear(silu(linear(temb, P(pre + "mod.w1"), P(pre + "mod.b1"))),
                          P(pre + "mod.w2"), P(pre + "mod.b2"));  // [1, 6D]
        x = modulated_block(cfg, pindex, leaves, pre, x, mod, rope, &out.routing);
    }

    auto target = slice_rows(x, 3 * L, L);
    auto normed = rmsnorm(target, P("final.gain"), T(1e-6));
    out.velocity = linear(normed, P("head.w"), P("head.b"));  // [L, PD]
    return out;
}

// Inference-mode forward: no gradient bookkeeping, returns the velocity tokens.
template <typename T>
TensorT<T> predict_velocity(const ModelT<T>& model, const TensorT<T>& cond_tokens,
                            const TensorT<T>& z_noisy, double t, const RopeTableT<T>& rope,
                            RoutingCaptureT<T>* routing = nullptr) {
    LeafSetT<T> leaves = LeafSetT<T>::make(model.params, false);
    auto out = predict_velocity_graph(model.cfg, model.params.index, leaves,
                                      VarT<T>::constant(cond_tokens), VarT<T>::constant(z_noisy),
                                      t, rope);
    if (routing) *routing = std::move(out.routing);
    return TensorT<T>(out.velocity.shape(), out.velocity.value());
}

}  // namespace vicl
