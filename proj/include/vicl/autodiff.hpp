#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "vicl/tensor.hpp"

namespace vicl {

// Reverse-mode autodiff on an eager DAG. Each op records its inputs and a
// backward closure; backward() walks the graph in reverse topological order.
// Gradients live in a per-call GradMap (not in the nodes), so graphs sharing
// parameter leaves can run backward concurrently.

template <typename T>
struct NodeT;

template <typename T>
class GradMapT {
public:
    std::vector<T>& acc(const NodeT<T>* n, size_t numel) {
        auto it = grads_.find(n);
        if (it == grads_.end()) it = grads_.emplace(n, std::vector<T>(numel, T(0))).first;
        return it->second;
    }
    const std::vector<T>* find(const NodeT<T>* n) const {
        auto it = grads_.find(n);
        return it == grads_.end() ? nullptr : &it->second;
    }

private:
    std::unordered_map<const NodeT<T>*, std::vector<T>> grads_;
};

template <typename T>
struct NodeT {
    Shape shape;
    std::vector<T> owned;
    const std::vector<T>* borrowed = nullptr;  // parameter leaves borrow their storage
    bool requires_grad = false;
    int param_index = -1;
    std::vector<std::shared_ptr<NodeT>> inputs;
    // reads the node's output gradient, accumulates into the inputs' gradients
    std::function<void(const NodeT&, const std::vector<T>&, GradMapT<T>&)> backward;

    const std::vector<T>& value() const { return borrowed ? *borrowed : owned; }
    size_t numel() const { return borrowed ? borrowed->size() : owned.size(); }
    size_t rows() const { return shape.empty() ? 1 : shape[0]; }
    size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
};

template <typename T>
class VarT {
public:
    VarT() = default;
    explicit VarT(std::shared_ptr<NodeT<T>> n) : n_(std::move(n)) {}

    static VarT constant(TensorT<T> t) {
        auto n = std::make_shared<NodeT<T>>();
        n->shape = std::move(t.shape);
        n->owned = std::move(t.data);
        return VarT(std::move(n));
    }

    // leaf borrowing external storage; the storage must outlive the graph
    static VarT leaf(const Shape& shape, const std::vector<T>* storage, bool requires_grad,
                     int param_index = -1) {
        auto n = std::make_shared<NodeT<T>>();
        n->shape = shape;
        n->borrowed = storage;
        n->requires_grad = requires_grad;
        n->param_index = param_index;
        return VarT(std::move(n));
    }

    const std::shared_ptr<NodeT<T>>& node() const { return n_; }
    const Shape& shape() const { return n_->shape; }
    const std::vector<T>& value() const { return n_->value(); }
    size_t numel() const { return n_->numel(); }
    bool defined() const { return n_ != nullptr; }
    T scalar() const {
        if (n_->numel() != 1) throw contract_error("scalar() on tensor " + shape_str(n_->shape));
        return n_->value()[0];
    }

private:
    std::shared_ptr<NodeT<T>> n_;
};

using Var = VarT<float>;

namespace detail {

// ---- raw kernels ------------------------------------------------------------

// C[M x N] += or = A[M x K] * B[K x N]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, size_t m, size_t k, size_t n, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, T(0));
    for (size_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        T* ci = c + i * n;
        for (size_t p = 0; p < k; ++p) {
            const T av = ai[p];
            const T* bp = b + p * n;
            for (size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[M x N] += or = A[M x K] * B[N x K]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, size_t m, size_t k, size_t n, bool accumulate) {
    for (size_t i = 0; i < m; ++i) {
        const T* ai = a + i * k;
        T* ci = c + i * n;
        for (size_t j = 0; j < n; ++j) {
            const T* bj = b + j * k;
            T acc = 0;
            for (size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] = accumulate ? ci[j] + acc : acc;
        }
    }
}

// C[M x N] += A[K x M]^T * B[K x N]
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, size_t k, size_t m, size_t n) {
    for (size_t p = 0; p < k; ++p) {
        const T* ap = a + p * m;
        const T* bp = b + p * n;
        for (size_t i = 0; i < m; ++i) {
            const T av = ap[i];
            T* ci = c + i * n;
            for (size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

template <typename T>
VarT<T> make_op(Shape shape, std::vector<T> value, std::vector<VarT<T>> inputs,
                std::function<void(const NodeT<T>&, const std::vector<T>&, GradMapT<T>&)> back) {
    auto n = std::make_shared<NodeT<T>>();
    n->shape = std::move(shape);
    n->owned = std::move(value);
    for (auto& in : inputs) {
        n->requires_grad = n->requires_grad || in.node()->requires_grad;
        n->inputs.push_back(in.node());
    }
    if (n->requires_grad) n->backward = std::move(back);
    return VarT<T>(std::move(n));
}

}  // namespace detail

// ---- elementwise ------------------------------------------------------------

template <typename T>
VarT<T> add(const VarT<T>& a, const VarT<T>& b) {
    if (a.shape() != b.shape())
        throw shape_error("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.numel());
    const auto &av = a.value(), &bv = b.value();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return detail::make_op<T>(a.shape(), std::move(out), {a, b},
                              [](const NodeT<T>& n, const std::vector<T>& g, GradMapT<T>& gm) {
                                  for (int k = 0; k < 2; ++k) {
                                      auto& in = n.inputs[k];
                                      if (!in->requires_grad) continue;
                                      auto& gi = gm.acc(in.get(), in->numel());
                                      for (size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                                  }
                              });
}

template <typename T>
VarT<T> sub(const VarT<T>& a, const VarT<T>& b) {
    if (a.shape() != b.shape())
        throw shape_error("sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.numel());
    const auto &av = a.value(), &bv = b.value();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return detail::make_op<T>(a.shape(), std::move(out), {a, b},
                              [](const NodeT<T>& n, const std::vector<T>& g, GradMapT<T>& gm) {
                                  if (n.inputs[0]->requires_grad) {
                                      auto& ga = gm.acc(n.inputs[0].get(), n.inputs[0]->numel());
                                      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                                  }
                                  if (n.inputs[1]->requires_grad) {
                                      auto& gb = gm.acc(n.inputs[1].get(), n.inputs[1]->numel());
                                      for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                                  }
                              });
}

template <typename T>
VarT<T> mul(const VarT<T>& a, const VarT<T>& b) {
    if (a.shape() != b.shape())
        throw shape_error("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.numel());
    const auto &av = a.value(), &bv = b.value();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return detail::make_op<T>(a.shape(), std::move(out), {a, b},
                              [](const NodeT<T>& n, const std::vector<T>& g, GradMapT<T>& gm) {
                                  const auto& av = n.inputs[0]->value();
                                  const auto& bv = n.inputs[1]->value();
                                  if (n.inputs[0]->requires_grad) {
                                      auto& ga = gm.acc(n.inputs[0].get(), av.size());
                                      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                                  }
                                  if (n.inputs[1]->requires_grad) {
                                      auto& gb = gm.acc(n.inputs[1].get(), bv.size());
                                      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                                  }
                              });
}

template <typename T>
VarT<T> scale(const VarT<T>& a, T c) {
    std::vector<T> out(a.numel());
    const auto& av = a.value();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    return detail::make_op<T>(a.shape(), std::move(out), {a},
                              [c](const NodeT<T>& n, const std::vector<T>& g, GradMapT<T>& gm) {
                                  auto& ga = gm.acc(n.inputs[0].get(), n.inputs[0]->numel());
                                  for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
                              });
}

template <typename T>
VarT<T> add_scalar(const VarT<T>& a, T c) {
    std::vector<T> out(a.numel());
    const auto& av = a.value();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
    return detail::make_op<T>(a.shape(), std::move(out), {a},
                              [](const NodeT<T>& n, const std::vector<T>& g, GradMapT<T>& gm) {
                                  auto& ga = gm.acc(n.inputs[0].get(), n.inputs[0]->numel());
                                  for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                              });
}

template <typename T>
VarT<T> silu(const VarT<T>& a) {
    std::vector<T> out(a.numel());
    const auto& av = a.value();
    for (size_t i = 0; i < out.size(); ++i) {
        const T s = T(1) / (T(1) + std::exp(-av[i]));
        out[i] = av[i] * s;
    }
    return detail::make_op<T>(a.shape(), std::move(out), {a},
                              [](const NodeT<T>& n, const std::vector<T>& g, GradMapT<T>& gm) {
                                  const auto& av = n.inputs[0]->value();
                                  auto& ga = gm.acc(n.inputs[0].get(), av.size());
                                  for (size_t i = 0; i < g.size(); ++i) {
                                      const T s = T(1) / (T(1) + std::exp(-av[i]));
                                      ga[i] += g[i] * (s * (T(1) + av[i] * (T(1) - s)));
                                  }
                              });
}

// ---- matmul family ----------------------------------------------------------

// a[m x k] * b[k x n]; da = g * b^T, db = a^T * g
template <typename T>
VarT<T> matmul(const VarT<T>& a, const VarT<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw shape_error("matmul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<T> out(m * n);
    detail::gemm_nn(a.value().data(), b.value().data(), out.data(), m, k, n, false);
    return detail::make_op<T>(
        {m, n}, std::move(out), {a, b},
        [m, k, n](const NodeT<T>& nd, const std::vector<T>& g, GradMapT<T>& gm) {
            const auto& av = nd.inputs[0]->value();
            const auto& bv = nd.inputs[1]->value();
            if (nd.inputs[0]->requires_grad) {
                auto& ga = gm.acc(nd.inputs[0].get(), m * k);
                detail::gemm_nt(g.data(), bv.data(), ga.data(), m, n, k, true);
            }
            if (nd.inputs[1]->requires_grad) {
                auto& gb = gm.acc(nd.inputs[1].get(), k * n);
                detail::gemm_tn_acc(av.data(), g.data(), gb.data(), m, k, n);
            }
        });
}

// a[m x k] * b[n x k]^T
template <typename T>
VarT<T> matmul_nt(const VarT<T>& a, const VarT<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[1])
        throw shape_error("matmul_nt: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
    std::vector<T> out(m * n);
    detail::gemm_nt(a.value().data(), b.value().data(), out.data(), m, k, n, false);
    return detail::make_op<T>(
        {m, n}, std::move(out), {a, b},
        [m, k, n](const NodeT<T>& nd, const std::vector<T>& g, GradMapT<T>& gm) {
            const auto& av = nd.inputs[0]->value();
            const auto& bv = nd.inputs[1]->value();
            if (nd.inputs[0]->requires_grad) {
                auto& ga = gm.acc(nd.inputs[0].get(), m * k);
                detail::gemm_nn(g.data(), bv.data(), ga.data(), m, n, k, true);
            }
            if (nd.inputs[1]->requires_grad) {
                auto& gb = gm.acc(nd.inputs[1].get(), n * k);
                detail::gemm_tn_acc(g.data(), av.data(), gb.data(), m, n, k);
            }
        });
}

// y[n x out] = x[n x in] * W[out x in]^T + b[out]
template <typename T>
VarT<T> linear(const VarT<T>& x, const VarT<T>& w, const VarT<T>& b) {
    if (x.shape().size() != 2 || w.shape().size() != 2 || x.shape()[1] != w.shape()[1])
        throw shape_error("linear: " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    const size_t n = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[0];
    if (b.numel() != out_dim)
        throw shape_error("linear bias: " + shape_str(b.shape()) + " for " + shape_str(w.shape()));
    std::vector<T> out(n * out_dim);
    detail::gemm_nt(x.value().data(), w.value().data(), out.data(), n, in, out_dim, false);
    const auto& bv = b.value();
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < out_dim; ++j) out[i * out_dim + j] += bv[j];
    return detail::make_op<T>(
        {n, out_dim}, std::move(out), {x, w, b},
        [n, in, out_dim](const NodeT<T>& nd, const std::vector<T>& g, GradMapT<T>& gm) {
            const auto& xv = nd.inputs[0]->value();
            const auto& wv = nd.inputs[1]->value();
            if (nd.inputs[0]->requires_grad) {
                auto& gx = gm.acc(nd.inputs[0].get(), n * in);
                detail::gemm_nn(g.data(), wv.data(), gx.data(), n, out_dim, in, true);
            }
            if (nd.inputs[1]->requires_grad) {
                auto& gw = gm.acc(nd.inputs[1].get(), out_dim * in);
                detail::gemm_tn_acc(g.data(), xv.data(), gw.data(), n, out_dim, in);
            }
            if (nd.inputs[2]->requires_grad) {
                auto& gb = gm.acc(nd.inputs[2].get(), out_dim);
                for (size_t i = 0; i < n; ++i)
                    for (size_t j = 0; j < out_dim; ++j) gb[j] += g[i * out_dim + j];
            }
        });
}

// ---- softmax / norm ---------------------------------------------------------

// softmax along `axis` (negative counts from the back); max-shifted for stability
template <typename T>
VarT<T> softmax(const VarT<T>& x, int axis = -1) {
    const auto& shape = x.shape();
    const int rank = (int)shape.size();
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw contract_error("softmax: bad axis");
    size_t outer = 1, inner = 1;
    const size_t n = shape[axis];
    for (int i = 0; i < axis; ++i) outer *= shape[i];
    for (int i = axis + 1; i < rank; ++i) inner *= shape[i];

    std::vector<T> out(x.numel());
    const auto& xv = x.value();
    for (size_t o = 0; o < outer; ++o) {
        for (size_t in = 0; in < inner; ++in) {
            const size_t base = o * n * inner + in;
            T mx = xv[base];
            for (size_t i = 1; i < n; ++i) mx = std::max(mx, xv[base + i * inner]);
            T sum = 0;
            for (size_t i = 0; i < n; ++i) {
                const T e = std::exp(xv[base + i * inner] - mx);
                out[base + i * inner] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (size_t i = 0; i < n; ++i) out[base + i * inner] *= inv;
        }
    }
    return detail::make_op<T>(
        shape, std::move(out), {x},
        [outer, n, inner](const NodeT<T>& nd, const std::vector<T>& g, GradMapT<T>& gm) {
            const auto& yv = nd.value();
            auto& gx = gm.acc(nd.inputs[0].get(), nd.inputs[0]->numel());
            for (size_t o = 0; o < outer; ++o) {
                for (size_t in = 0; in < inner; ++in) {
                    const size_t base = o * n * inner + in;
                    T dot = 0;
                    for (size_t i = 0; i < n; ++i) dot += g[base + i * inner] * yv[base + i * inner];
                    for (size_t i = 0; i < n; ++i) {
                        const size_t p = base + i * inner;
                        gx[p] += yv[p] * (g[p] - dot);
                    }
                }
            }
        });
}

// y = gain ⊙ x / sqrt(mean(x²) + eps), row-wise over the last dim
template <typename T>
VarT<T> rmsnorm(const VarT<T>& x, const VarT<T>& gain, T eps = T(1e-6)) {
    const size_t d = x.shape().back();
    if (gain.numel() != d)
        throw shape_error("rmsnorm gain: " + shape_str(gain.shape()) + " for " + shape_str(x.shape()));
    const size_t rows = x.numel() / d;
    std::vector<T> out(x.numel());
    const auto &xv = x.value(), &gv = gain.value();
    for (size_t r = 0; r < rows; ++r) {
        const T* xr = xv.data() + r * d;
        T* yr = out.data() + r * d;
        T ms = 0;
        for (size_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
        const T s = T(1) / std::sqrt(ms / (T)d + eps);
        for (size_t j = 0; j < d; ++j) yr[j] = gv[j] * xr[j] * s;
    }
    return detail::make_op<T>(
        x.shape(), std::move(out), {x, gain},
        [rows, d, eps](const NodeT<T>& nd, const std::vector<T>& g, GradMapT<T>& gm) {
            const auto& xv = nd.inputs[0]->value();
            const auto& gv = nd.inputs[1]->value();
            const bool need_x = nd.inputs[0]->requires_grad;
            const bool need_g = nd.inputs[1]->requires_grad;
            std::vector<T>* gx = need_x ? &gm.acc(nd.inputs[0].get(), rows * d) : nullptr;
            std::vector<T>* gg = need_g ? &gm.acc(nd.inputs[1].get(), d) : nullptr;
            for (size_t r = 0; r < rows; ++r) {
                const T* xr = xv.data() + r * d;
                const T* gr = g.data() + r * d;
                T ms = 0;
                for (size_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
                const T inv = T(1) / std::sqrt(ms / (T)d + eps);
                if (need_g) {
                    for (size_t j = 0; j < d; ++j) (*gg)[j] += gr[j] * xr[j] * inv;
                }
                if (need_x) {
                    T dot = 0;
                    for (size_t j = 0; j < d; ++j) dot += gr[j] * gv[j] * xr[j];
                    const T c = dot * inv * inv * inv / (T)d;
                    T* gxr = gx->data() + r * d;
                    for (size_t j = 0; j < d; ++j) gxr[j] += gr[j] * gv[j] * inv - xr[j] * c;
                }
            }
        });
}

// ---- shape ops --------------------------------------------------------------

// contiguous slice of the flattened buffer, reinterpreted as out_shape
template <typename T>
VarT<T> slice_flat(const VarT<T>& x, size_t offset, Shape out_shape) {
    const size_t count = shape_numel(out_shape);
    if (offset + count > x.numel()) throw shape_error("slice_flat out of range");
    std::vector<T> out(x.value().begin() + offset, x.value().begin() + offset + count);
    return detail::make_op<T>(std::move(out_shape), std::move(out), {x},
                              [offset, count](const NodeT<T>& nd, const std::vector<T>& g, GradMapT<T>& gm) {
                                  auto& gx = gm.acc(nd.inputs[0].get(), nd.inputs[0]->numel());
                                  for (size_t i = 0; i < count; ++i) gx[offset + i] += g[i];
                              });
}

template <typename T>
VarT<T> slice_rows(const VarT<T>& x, size_t r0, size_t nr) {
    const size_t c = x.node()->cols();
    return slice_flat(x, r0 * c, Shape{nr, c});
}

template <typename T>
VarT<T> slice_cols(const VarT<T>& x, size_t c0, size_t nc) {
    const size_t rows = x.shape()[0], cols = x.shape()[1];
    if (c0 + nc > cols) throw shape_error("slice_cols out of range");
    std::vector<T> out(rows * nc);
    const auto& xv = x.value();
    for (size_t i = 0; i < rows; ++i)
        for (size_t j = 0; j < nc; ++j) out[i * nc + j] = xv[i * cols + c0 + j];
    return detail::make_op<T>({rows, nc}, std::move(out), {x},
                              [rows, cols, c0, nc](const NodeT<T>& nd, const std::vector<T>& g, GradMapT<T>& gm) {
                                  auto& gx = gm.acc(nd.inputs[0].get(), rows * cols);
                                  for (size_t i = 0; i < rows; ++i)
                                      for (size_t j = 0; j < nc; ++j)
                                          gx[i * cols + c0 + j] += g[i * nc + j];
                              });
}

template <typename T>
VarT<T> concat_rows(const std::vector<VarT<T>>& parts) {
    if (parts.empty()) throw contract_error("concat_rows: empty");
    const size_t c = parts[0].node()->cols();
    size_t total_rows = 0;
    for (auto& p : parts) {
        if (p.node()->cols() != c)
            throw shape_error("concat_rows: column mismatch " + shape_str(p.shape()));
        total_rows += p.shape()[0];
    }
    std::vector<T> out;
    out.reserve(total_rows * c);
    for (auto& p : parts) out.insert(out.end(), p.value().begin(), p.value().end());
    return detail::make_op<T>({total_rows, c}, std::move(out), parts,
                              [](const NodeT<T>& nd, const std::vector<T>& g, GradMapT<T>& gm) {
                                  size_t off = 0;
                                  for (auto& in : nd.inputs) {
                                      const size_t n = in->numel();
                                      if (in->requires_grad) {
                                          auto& gi = gm.acc(in.get(), n);
                                          for (size_t i = 0; i < n; ++i) gi[i] += g[off + i];
                                      }
                                      off += n;
                                  }
                              });
}

template <typename T>
VarT<T> concat_cols(const std::vector<VarT<T>>& parts) {
    if (parts.empty()) throw contract_error("concat_cols: empty");
    const size_t rows = parts[0].shape()[0];
    size_t total_cols = 0;
    for (auto& p : parts) {
        if (p.shape()[0] != rows)
            throw shape_error("concat_cols: row mismatch " + shape_str(p.shape()));
        total_cols += p.shape()[1];
    }
    std::vector<T> out(rows * total_cols);
    size_t off = 0;
    for (auto& p : parts) {
        const size_t pc = p.shape()[1];
        const auto& pv = p.value();
        for (size_t i = 0; i < rows; ++i)
            for (size_t j = 0; j < pc; ++j) out[i * total_cols + off + j] = pv[i * pc + j];
        off += pc;
    }
    return detail::make_op<T>({rows, total_cols}, std::move(out), parts,
                              [rows, total_cols](const NodeT<T>& nd, const std::vector<T>& g, GradMapT<T>& gm) {
                                  size_t off = 0;
                                  for (auto& in : nd.inputs) {
                                      const size_t pc = in->cols();
                                      if (in->requires_grad) {
                                          auto& gi = gm.acc(in.get(), in->numel());
                                          for (size_t i = 0; i < rows; ++i)
                                              for (size_t j = 0; j < pc; ++j)
                                                  gi[i * pc + j] += g[i * total_cols + off + j];
                                      }
                                      off += pc;
                                  }
                              });
}

// ---- broadcasts -------------------------------------------------------------

// y[i,j] = x[i,j] + v[j]
template <typename T>
VarT<T> add_rowvec(const VarT<T>& x, const VarT<T>& v) {
    const size_t rows = x.shape()[0], cols = x.shape()[1];
    if (v.numel() != cols)
        throw shape_error("add_rowvec: " + shape_str(v.shape()) + " for " + shape_str(x.shape()));
    std::vector<T> out(x.numel());
    const auto &xv = x.value(), &vv = v.value();
    for (size_t i = 0; i < rows; ++i)
        for (size_t j = 0; j < cols; ++j) out[i * cols + j] = xv[i * cols + j] + vv[j];
    return detail::make_op<T>(x.shape(), std::move(out), {x, v},
                              [rows, cols](const NodeT<T>& nd, const std::vector<T>& g, GradMapT<T>& gm) {
                                  if (nd.inputs[0]->requires_grad) {
                                      auto& gx = gm.acc(nd.inputs[0].get(), rows * cols);
                                      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                                  }
                                  if (nd.inputs[1]->requires_grad) {
                                      auto& gv = gm.acc(nd.inputs[1].get(), cols);
                                      for (size_t i = 0; i < rows; ++i)
                                          for (size_t j = 0; j < cols; ++j) gv[j] += g[i * cols + j];
                                  }
                              });
}

// y[i,j] = x[i,j] * v[j]
template <typename T>
VarT<T> mul_rowvec(const VarT<T>& x, const VarT<T>& v) {
    const size_t rows = x.shape()[0], cols = x.shape()[1];
    if (v.numel() != cols)
        throw shape_error("mul_rowvec: " + shape_str(v.shape()) + " for " + shape_str(x.shape()));
    std::vector<T> out(x.numel());
    const auto &xv = x.value(), &vv = v.value();
    for (size_t i = 0; i < rows; ++i)
        for (size_t j = 0; j < cols; ++j) out[i * cols + j] = xv[i * cols + j] * vv[j];
    return detail::make_op<T>(x.shape(), std::move(out), {x, v},
                              [rows, cols](const NodeT<T>& nd, const std::vector<T>& g, GradMapT<T>& gm) {
                                  const auto& xv = nd.inputs[0]->value();
                                  const auto& vv = nd.inputs[1]->value();
                                  if (nd.inputs[0]->requires_grad) {
                                      auto& gx = gm.acc(nd.inputs[0].get(), rows * cols);
                                      for (size_t i = 0; i < rows; ++i)
                                          for (size_t j = 0; j < cols; ++j)
                                              gx[i * cols + j] += g[i * cols + j] * vv[j];
                                  }
                                  if (nd.inputs[1]->requires_grad) {
                                      auto& gv = gm.acc(nd.inputs[1].get(), cols);
                                      for (size_t i = 0; i < rows; ++i)
                                          for (size_t j = 0; j < cols; ++j)
                                              gv[j] += g[i * cols + j] * xv[i * cols + j];
                                  }
                              });
}

// y[i,j] = x[i,j] * c[i]   (c is a column of per-row scales, shape [rows] or [rows,1])
template <typename T>
VarT<T> scale_rows(const VarT<T>& x, const VarT<T>& c) {
    const size_t rows = x.shape()[0], cols = x.shape()[1];
    if (c.numel() != rows)
        throw shape_error("scale_rows: " + shape_str(c.shape()) + " for " + shape_str(x.shape()));
    std::vector<T> out(x.numel());
    const auto &xv = x.value(), &cv = c.value();
    for (size_t i = 0; i < rows; ++i)
        for (size_t j = 0; j < cols; ++j) out[i * cols + j] = xv[i * cols + j] * cv[i];
    return detail::make_op<T>(x.shape(), std::move(out), {x, c},
                              [rows, cols](const NodeT<T>& nd, const std::vector<T>& g, GradMapT<T>& gm) {
                                  const auto& xv = nd.inputs[0]->value();
                                  const auto& cv = nd.inputs[1]->value();
                                  if (nd.inputs[0]->requires_grad) {
                                      auto& gx = gm.acc(nd.inputs[0].get(), rows * cols);
                                      for (size_t i = 0; i < rows; ++i)
                                          for (size_t j = 0; j < cols; ++j)
                                              gx[i * cols + j] += g[i * cols + j] * cv[i];
                                  }
                                  if (nd.inputs[1]->requires_grad) {
                                      auto& gc = gm.acc(nd.inputs[1].get(), rows);
                                      for (size_t i = 0; i < rows; ++i) {
                                          T dot = 0;
                                          for (size_t j = 0; j < cols; ++j)
                                              dot += g[i * cols + j] * xv[i * cols + j];
                                          gc[i] += dot;
                                      }
                                  }
                              });
}

// ---- reductions -------------------------------------------------------------

template <typename T>
VarT<T> sum_all(const VarT<T>& x) {
    T s = 0;
    for (T v : x.value()) s += v;
    return detail::make_op<T>({1}, {s}, {x},
                              [](const NodeT<T>& nd, const std::vector<T>& g, GradMapT<T>& gm) {
                                  auto& gx = gm.acc(nd.inputs[0].get(), nd.inputs[0]->numel());
                                  for (auto& v : gx) v += g[0];
                              });
}

template <typename T>
VarT<T> mean_all(const VarT<T>& x) {
    T s = 0;
    for (T v : x.value()) s += v;
    const T inv = T(1) / (T)x.numel();
    return detail::make_op<T>({1}, {s * inv}, {x},
                              [inv](const NodeT<T>& nd, const std::vector<T>& g, GradMapT<T>& gm) {
                                  auto& gx = gm.acc(nd.inputs[0].get(), nd.inputs[0]->numel());
                                  for (auto& v : gx) v += g[0] * inv;
                              });
}

// column means of a [rows x cols] matrix -> [cols]
template <typename T>
VarT<T> colmean(const VarT<T>& x) {
    const size_t rows = x.shape()[0], cols = x.shape()[1];
    std::vector<T> out(cols, T(0));
    const auto& xv = x.value();
    for (size_t i = 0; i < rows; ++i)
        for (size_t j = 0; j < cols; ++j) out[j] += xv[i * cols + j];
    const T inv = T(1) / (T)rows;
    for (auto& v : out) v *= inv;
    return detail::make_op<T>({cols}, std::move(out), {x},
                              [rows, cols, inv](const NodeT<T>& nd, const std::vector<T>& g, GradMapT<T>& gm) {
                                  auto& gx = gm.acc(nd.inputs[0].get(), rows * cols);
                                  for (size_t i = 0; i < rows; ++i)
                                      for (size_t j = 0; j < cols; ++j) gx[i * cols + j] += g[j] * inv;
                              });
}

// mean((a-b)^2)
template <typename T>
VarT<T> mse(const VarT<T>& a, const VarT<T>& b) {
    return mean_all(mul(sub(a, b), sub(a, b)));
}

// ---- top-k masking (router sparsity) ----------------------------------------

// Per row, keep the k largest entries (ties -> lowest index) and zero the rest.
// Gradient flows only through the kept entries. Selections are reported per row
// in ascending index order.
template <typename T>
VarT<T> topk_mask_rows(const VarT<T>& x, size_t k, std::vector<std::vector<int>>* selections = nullptr) {
    const size_t rows = x.shape()[0], cols = x.shape()[1];
    if (k > cols) throw config_error("topk_mask_rows: k=" + std::to_string(k) +
                                     " > " + std::to_string(cols) + " columns");
    std::vector<T> out(x.numel(), T(0));
    auto kept = std::make_shared<std::vector<int>>(rows * k);
    const auto& xv = x.value();
    std::vector<int> idx(cols);
    for (size_t i = 0; i < rows; ++i) {
        for (size_t j = 0; j < cols; ++j) idx[j] = (int)j;
        std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int A, int B) {
            const T a = xv[i * cols + A], b = xv[i * cols + B];
            return a > b || (a == b && A < B);
        });
        std::sort(idx.begin(), idx.begin() + k);
        for (size_t j = 0; j < k; ++j) {
            const int c = idx[j];
            (*kept)[i * k + j] = c;
            out[i * cols + c] = xv[i * cols + c];
        }
    }
    if (selections) {
        selections->assign(rows, {});
        for (size_t i = 0; i < rows; ++i)
            (*selections)[i].assign(kept->begin() + i * k, kept->begin() + (i + 1) * k);
    }
    return detail::make_op<T>(x.shape(), std::move(out), {x},
                              [rows, cols, k, kept](const NodeT<T>& nd, const std::vector<T>& g, GradMapT<T>& gm) {
                                  auto& gx = gm.acc(nd.inputs[0].get(), rows * cols);
                                  for (size_t i = 0; i < rows; ++i)
                                      for (size_t j = 0; j < k; ++j) {
                                          const int c = (*kept)[i * k + j];
                                          gx[i * cols + c] += g[i * cols + c];
                                      }
                              });
}

// ---- backward ---------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Returns the gradient map; leaves are
// looked up through it afterwards. Each reachable node is visited exactly once.
template <typename T>
GradMapT<T> backward(const VarT<T>& loss) {
    if (loss.numel() != 1) throw contract_error("backward: loss must be scalar, got " +
                                                shape_str(loss.shape()));
    GradMapT<T> gm;
    if (!loss.node()->requires_grad) return gm;

    // iterative DFS post-order over the requires_grad subgraph
    std::vector<NodeT<T>*> order;
    std::unordered_set<const NodeT<T>*> seen;
    std::vector<std::pair<NodeT<T>*, size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            NodeT<T>* child = node->inputs[next++].get();
            if (child->requires_grad && !seen.count(child)) {
                seen.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    gm.acc(loss.node().get(), 1)[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT<T>* n = *it;
        if (!n->backward) continue;
        const std::vector<T>* g = gm.find(n);
        if (!g) continue;
        n->backward(*n, *g, gm);
    }
    return gm;
}

}  // namespace vicl
