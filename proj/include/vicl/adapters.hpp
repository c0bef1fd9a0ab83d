#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vicl/autodiff.hpp"

namespace vicl {

// Low-rank adaptation config. Standard LoRA wraps the attention q/k/v/out
// projections; the expert-gated variant wraps only the FFN output projection.
struct AdapterConfig {
    bool enabled = false;
    bool attn_lora = true;
    bool ffn_moe = true;
    size_t rank = 4;
    double alpha = 4.0;  // defaults to rank so alpha/rank = 1
    size_t experts = 4;
    size_t top_k = 2;

    void validate() const {
        if (!enabled) return;
        if (rank == 0) throw config_error("adapter rank must be positive");
        if (ffn_moe) {
            if (experts == 0) throw config_error("expert count must be positive");
            if (top_k == 0 || top_k > experts)
                throw config_error("top_k " + std::to_string(top_k) + " must be in [1, " +
                                   std::to_string(experts) + "]");
        }
    }
};

// Accumulated routing observations for one expert bank over many tokens.
struct RoutingStats {
    std::vector<uint64_t> counts;   // assignments per expert
    std::vector<double> prob_sum;   // sum over tokens of the full softmax prob
    uint64_t tokens = 0;

    RoutingStats() = default;
    explicit RoutingStats(size_t n_experts) : counts(n_experts, 0), prob_sum(n_experts, 0.0) {}

    size_t experts() const { return counts.size(); }

    // one token's k selections plus its full gate row
    template <typename T>
    void record(const std::vector<int>& selected, const T* probs) {
        for (int e : selected) counts[(size_t)e]++;
        for (size_t i = 0; i < prob_sum.size(); ++i) prob_sum[i] += (double)probs[i];
        tokens++;
    }

    void merge(const RoutingStats& o) {
        if (counts.empty()) {
            *this = o;
            return;
        }
        for (size_t i = 0; i < counts.size(); ++i) {
            counts[i] += o.counts[i];
            prob_sum[i] += o.prob_sum[i];
        }
        tokens += o.tokens;
    }

    std::vector<double> pbar() const {
        std::vector<double> p(prob_sum.size(), 0.0);
        if (tokens == 0) return p;
        for (size_t i = 0; i < p.size(); ++i) p[i] = prob_sum[i] / (double)tokens;
        return p;
    }

    // fraction of token-assignments landing on each expert; balanced -> 1/N
    std::vector<double> fractions(size_t k) const {
        std::vector<double> f(counts.size(), 0.0);
        if (tokens == 0) return f;
        for (size_t i = 0; i < f.size(); ++i) f[i] = (double)counts[i] / (double)(tokens * k);
        return f;
    }

    // N * sum_i f_i * pbar_i: 1 at perfect balance, N at full collapse
    double load_balance(size_t k) const {
        if (tokens == 0) throw contract_error("load_balance on empty routing stats");
        const auto f = fractions(k);
        const auto p = pbar();
        double s = 0;
        for (size_t i = 0; i < f.size(); ++i) s += f[i] * p[i];
        return (double)counts.size() * s;
    }
};

// Routing observations captured while building one item's graph: the pre-mask
// softmax node of every expert bank (for the differentiable balance penalty)
// plus the hard selections (for the count statistics).
template <typename T>
struct RoutingCaptureT {
    std::vector<VarT<T>> gate_probs;                        // per bank: [tokens, N]
    std::vector<std::vector<std::vector<int>>> selections;  // per bank, per token: k indices

    size_t banks() const { return gate_probs.size(); }

    // fold this graph's hard assignments into report-side stats (one per bank)
    void accumulate(std::vector<RoutingStats>& stats) const {
        if (stats.empty()) {
            for (const auto& g : gate_probs) stats.emplace_back(g.shape()[1]);
        }
        for (size_t b = 0; b < banks(); ++b) {
            const auto& probs = gate_probs[b].value();
            const size_t n = gate_probs[b].shape()[1];
            for (size_t tok = 0; tok < selections[b].size(); ++tok)
                stats[b].record(selections[b][tok], probs.data() + tok * n);
        }
    }
};

using RoutingCapture = RoutingCaptureT<float>;

// h = W_base x + (alpha/r) * B(Ax), with x as rows: x[T,in], w[out,in], a[r,in], b_lr[out,r]
template <typename T>
VarT<T> lora_linear(const VarT<T>& x, const VarT<T>& w, const VarT<T>& bias, const VarT<T>& a,
                    const VarT<T>& b_lr, double alpha) {
    const size_t r = a.shape()[0];
    auto base = linear(x, w, bias);
    auto delta = matmul_nt(matmul_nt(x, a), b_lr);  // x A^T B^T = (B(Ax))^T rows
    return add(base, scale(delta, (T)(alpha / (double)r)));
}

// Expert-gated low-rank projection on rows of x. Gates are the raw softmax of
// the router logits; the top-k survive (ties to the lowest index) with no
// renormalization, and gradients reach the router only through surviving gates.
template <typename T>
VarT<T> moe_lora_linear(const VarT<T>& x, const VarT<T>& w, const VarT<T>& bias,
                        const VarT<T>& router_w, const std::vector<VarT<T>>& expert_a,
                        const std::vector<VarT<T>>& expert_b, double alpha, size_t top_k,
                        RoutingCaptureT<T>* capture) {
    const size_t n_experts = expert_a.size();
    if (expert_b.size() != n_experts || router_w.shape()[0] != n_experts)
        throw shape_error("moe_lora_linear: expert/router count mismatch");
    const size_t r = expert_a[0].shape()[0];
    const T scaling = (T)(alpha / (double)r);

    auto h = linear(x, w, bias);
    auto gates = softmax(matmul_nt(x, router_w), -1);  // [T, N]
    std::vector<std::vector<int>> selected;
    auto kept = topk_mask_rows(gates, top_k, &selected);
    for (size_t e = 0; e < n_experts; ++e) {
        auto delta = matmul_nt(matmul_nt(x, expert_a[e]), expert_b[e]);  // [T, out]
        auto gate_col = slice_cols(kept, e, 1);                          // [T, 1]
        h = add(h, scale(scale_rows(delta, gate_col), scaling));
    }
    if (capture) {
        capture->gate_probs.push_back(gates);
        capture->selections.push_back(std::move(selected));
    }
    return h;
}

// Differentiable balance penalty for one expert bank: N * sum_i f_i * mean_t(g_ti)
// where f is a constant vector of batch-level assignment fractions.
template <typename T>
VarT<T> balance_penalty(const VarT<T>& gate_probs, const std::vector<T>& fractions) {
    const size_t n = gate_probs.shape()[1];
    if (fractions.size() != n)
        throw shape_error("balance_penalty: " + std::to_string(fractions.size()) +
                          " fractions for " + std::to_string(n) + " experts");
    auto f = VarT<T>::constant(TensorT<T>({n}, fractions));
    return scale(sum_all(mul(colmean(gate_probs), f)), (T)n);
}

}  // namespace vicl
