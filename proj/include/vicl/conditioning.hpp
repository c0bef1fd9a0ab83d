#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "vicl/autodiff.hpp"
#include "vicl/codec.hpp"
#include "vicl/tensor.hpp"

namespace vicl {

// Every token carries a (role, row, col) triple. Roles: 0 = exemplar source,
// 1 = exemplar target, 2 = query source, 3 = noisy target being denoised.
struct PositionTriple {
    int role = 0;
    int row = 0;
    int col = 0;
    bool operator==(const PositionTriple&) const = default;
};

enum Role : int {
    kRoleExemplarSrc = 0,
    kRoleExemplarTgt = 1,
    kRoleQuerySrc = 2,
    kRoleNoisyTarget = 3,
};

// Conditioning tokens in fixed order [source | target | query], length 3L.
struct ConditionSequence {
    Tensor tokens;  // [3L, patch_dim]
    std::vector<PositionTriple> positions;
    int grid_h = 0;
    int grid_w = 0;
};

inline std::vector<PositionTriple> grid_positions(int role, int grid_h, int grid_w) {
    std::vector<PositionTriple> out;
    out.reserve((size_t)grid_h * grid_w);
    for (int r = 0; r < grid_h; ++r)
        for (int c = 0; c < grid_w; ++c) out.push_back({role, r, c});
    return out;
}

// Positions for the L denoised-target tokens: role 3 over the same grid.
inline std::vector<PositionTriple> assign_target_positions(int grid_h, int grid_w) {
    return grid_positions(kRoleNoisyTarget, grid_h, grid_w);
}

inline ConditionSequence build_condition_sequence(const TokenGrid& zs, const TokenGrid& zt,
                                                  const TokenGrid& zq) {
    if (zs.grid_h != zt.grid_h || zs.grid_w != zt.grid_w || zs.grid_h != zq.grid_h ||
        zs.grid_w != zq.grid_w || zs.tokens.shape != zt.tokens.shape ||
        zs.tokens.shape != zq.tokens.shape)
        throw shape_error("condition sequence: mismatched token grids " +
                          shape_str(zs.tokens.shape) + " / " + shape_str(zt.tokens.shape) + " / " +
                          shape_str(zq.tokens.shape));
    ConditionSequence cs;
    cs.grid_h = zs.grid_h;
    cs.grid_w = zs.grid_w;
    const size_t L = zs.tokens.shape[0], D = zs.tokens.shape[1];
    cs.tokens = Tensor::zeros({3 * L, D});
    std::copy(zs.tokens.data.begin(), zs.tokens.data.end(), cs.tokens.data.begin());
    std::copy(zt.tokens.data.begin(), zt.tokens.data.end(), cs.tokens.data.begin() + L * D);
    std::copy(zq.tokens.data.begin(), zq.tokens.data.end(), cs.tokens.data.begin() + 2 * L * D);
    auto append = [&](int role) {
        auto p = grid_positions(role, cs.grid_h, cs.grid_w);
        cs.positions.insert(cs.positions.end(), p.begin(), p.end());
    };
    append(kRoleExemplarSrc);
    append(kRoleExemplarTgt);
    append(kRoleQuerySrc);
    return cs;
}

// All 4L positions the backbone sees: conditioning roles 0..2 then the noisy target.
inline std::vector<PositionTriple> full_sequence_positions(int grid_h, int grid_w) {
    std::vector<PositionTriple> out;
    for (int role = 0; role < 4; ++role) {
        auto p = grid_positions(role, grid_h, grid_w);
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

// ---- rotary tables ----------------------------------------------------------

// The head dimension splits into three even segments [d_role | d_row | d_col];
// each axis rotates adjacent pairs within its own segment with frequencies
// theta_g = base^(-2g/d_axis). For head_dim 16 the split is (4, 6, 6).
struct RopeSplit {
    size_t d_role = 0, d_row = 0, d_col = 0;
};

inline RopeSplit rope_split(size_t head_dim) {
    RopeSplit s;
    s.d_role = (head_dim / 4) & ~size_t(1);  // quarter, rounded down to even
    const size_t rest = head_dim - s.d_role;
    s.d_row = rest / 2;
    s.d_col = rest - s.d_row;
    if (s.d_role == 0 || s.d_row == 0 || s.d_role % 2 || s.d_row % 2 || s.d_col % 2 ||
        s.d_row != s.d_col)
        throw config_error("rope: head_dim " + std::to_string(head_dim) +
                           " does not split into even (role,row,col) segments");
    return s;
}

// Per-token cos/sin for every rotation pair of a sequence: [N, head_dim/2] each.
template <typename T>
struct RopeTableT {
    size_t head_dim = 0;
    std::vector<T> cosv, sinv;

    static RopeTableT build(const std::vector<PositionTriple>& pos, size_t head_dim,
                            double base = 10000.0) {
        const RopeSplit sp = rope_split(head_dim);
        RopeTableT t;
        t.head_dim = head_dim;
        const size_t half = head_dim / 2;
        t.cosv.resize(pos.size() * half);
        t.sinv.resize(pos.size() * half);
        for (size_t i = 0; i < pos.size(); ++i) {
            size_t pair = 0;
            auto emit = [&](double coord, size_t d_axis) {
                for (size_t g = 0; g < d_axis / 2; ++g, ++pair) {
                    const double theta = std::pow(base, -2.0 * (double)g / (double)d_axis);
                    const double phi = coord * theta;
                    t.cosv[i * half + pair] = (T)std::cos(phi);
                    t.sinv[i * half + pair] = (T)std::sin(phi);
                }
            };
            emit((double)pos[i].role, sp.d_role);
            emit((double)pos[i].row, sp.d_row);
            emit((double)pos[i].col, sp.d_col);
        }
        return t;
    }
};

using RopeTable = RopeTableT<float>;

// Rotate token features by their per-token angles: x is [N, head_dim], pairs
// (x_{2g}, x_{2g+1}) map through the 2x2 rotation. Backward applies the inverse
// rotation to the gradient.
template <typename T>
VarT<T> rope_rotate(const VarT<T>& x, const RopeTableT<T>& table) {
    const size_t n = x.shape()[0], d = x.shape()[1];
    if (d != table.head_dim || n * (d / 2) != table.cosv.size())
        throw shape_error("rope_rotate: " + shape_str(x.shape()) + " vs table for head_dim " +
                          std::to_string(table.head_dim));
    const size_t half = d / 2;
    std::vector<T> out(x.numel());
    const auto& xv = x.value();
    for (size_t i = 0; i < n; ++i)
        for (size_t g = 0; g < half; ++g) {
            const T c = table.cosv[i * half + g], s = table.sinv[i * half + g];
            const T a = xv[i * d + 2 * g], b = xv[i * d + 2 * g + 1];
            out[i * d + 2 * g] = a * c - b * s;
            out[i * d + 2 * g + 1] = a * s + b * c;
        }
    // the closure owns a copy of the angles; the table itself may be temporary
    auto cosv = std::make_shared<std::vector<T>>(table.cosv);
    auto sinv = std::make_shared<std::vector<T>>(table.sinv);
    return detail::make_op<T>(
        x.shape(), std::move(out), {x},
        [n, d, half, cosv, sinv](const NodeT<T>& nd, const std::vector<T>& g, GradMapT<T>& gm) {
            auto& gx = gm.acc(nd.inputs[0].get(), n * d);
            for (size_t i = 0; i < n; ++i)
                for (size_t p = 0; p < half; ++p) {
                    const T c = (*cosv)[i * half + p], s = (*sinv)[i * half + p];
                    const T ga = g[i * d + 2 * p], gb = g[i * d + 2 * p + 1];
                    gx[i * d + 2 * p] += ga * c + gb * s;
                    gx[i * d + 2 * p + 1] += -ga * s + gb * c;
                }
        });
}

}  // namespace vicl
