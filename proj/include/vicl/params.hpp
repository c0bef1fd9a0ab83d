#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "vicl/autodiff.hpp"
#include "vicl/tensor.hpp"
#include "vicl/threadpool.hpp"

namespace vicl {

// Named parameter table. Order of insertion is the canonical order used by the
// optimizer, checkpoints, and gradient reductions.

template <typename T>
struct ParamStoreT {
    struct Entry {
        std::string name;
        TensorT<T> value;
        bool frozen = false;
    };

    std::vector<Entry> entries;
    std::unordered_map<std::string, size_t> index;

    size_t add(const std::string& name, TensorT<T> value, bool frozen = false) {
        if (index.count(name)) throw contract_error("duplicate parameter: " + name);
        index[name] = entries.size();
        entries.push_back({name, std::move(value), frozen});
        return entries.size() - 1;
    }
    bool has(const std::string& name) const { return index.count(name) != 0; }
    Entry& at(const std::string& name) {
        auto it = index.find(name);
        if (it == index.end()) throw contract_error("unknown parameter: " + name);
        return entries[it->second];
    }
    const Entry& at(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) throw contract_error("unknown parameter: " + name);
        return entries[it->second];
    }
    size_t size() const { return entries.size(); }
};

using ParamStore = ParamStoreT<float>;

// Leaf vars for one graph, borrowing the store's storage. Frozen entries get
// requires_grad=false so backward never descends into them.
template <typename T>
struct LeafSetT {
    using real_t = T;

    std::vector<VarT<T>> vars;  // aligned with store.entries

    static LeafSetT make(const ParamStoreT<T>& store, bool train_mode) {
        LeafSetT ls;
        ls.vars.reserve(store.entries.size());
        for (size_t i = 0; i < store.entries.size(); ++i) {
            const auto& e = store.entries[i];
            const bool rg = train_mode && !e.frozen;
            ls.vars.push_back(VarT<T>::leaf(e.value.shape, &e.value.data, rg, (int)i));
        }
        return ls;
    }
    const VarT<T>& operator[](size_t i) const { return vars[i]; }
};

using LeafSet = LeafSetT<float>;

template <typename To, typename From>
ParamStoreT<To> cast_store(const ParamStoreT<From>& store) {
    ParamStoreT<To> out;
    out.entries.reserve(store.entries.size());
    for (const auto& e : store.entries)
        out.entries.push_back({e.name, tensor_cast<To>(e.value), e.frozen});
    out.index = store.index;
    return out;
}

// Gradients per parameter, in store order; zeros for parameters no path reached.
template <typename T>
std::vector<TensorT<T>> collect_grads(const GradMapT<T>& gm, const LeafSetT<T>& leaves,
                                      const ParamStoreT<T>& store) {
    std::vector<TensorT<T>> out;
    out.reserve(store.entries.size());
    for (size_t i = 0; i < store.entries.size(); ++i) {
        const auto& e = store.entries[i];
        const std::vector<T>* g = gm.find(leaves.vars[i].node().get());
        if (g)
            out.push_back(TensorT<T>(e.value.shape, *g));
        else
            out.push_back(TensorT<T>::zeros(e.value.shape));
    }
    return out;
}

// Named map view, for tests and reporting.
template <typename T>
std::unordered_map<std::string, TensorT<T>> grads_by_name(const GradMapT<T>& gm,
                                                          const LeafSetT<T>& leaves,
                                                          const ParamStoreT<T>& store) {
    auto v = collect_grads(gm, leaves, store);
    std::unordered_map<std::string, TensorT<T>> out;
    for (size_t i = 0; i < store.entries.size(); ++i) out.emplace(store.entries[i].name, std::move(v[i]));
    return out;
}

// ---- finite-difference gradient check ---------------------------------------

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

// build: constructs the scalar loss graph from a leaf set. It must be a
// generic callable (accepting leaves of any real type): the analytic gradient
// is produced by the same f64 graph the production code runs, while the
// finite-difference side re-evaluates the graph in long double. The extended
// precision keeps the quotient's rounding noise well below the acceptance
// threshold even for coordinates whose true gradient is tiny, which a plain
// f64 forward cannot do at a 1e-5 step.
// Central differences with per-coordinate step h*max(1,|theta|); relative error
// |a - n| / max(1e-8, |a| + |n|), maximized over every trainable coordinate.
template <typename Build>
GradCheckReport gradcheck(Build&& build, ParamStoreT<double>& store, double h = 1e-5,
                          int threads = 1) {
    LeafSetT<double> leaves = LeafSetT<double>::make(store, true);
    VarT<double> loss = build(leaves);
    GradMapT<double> gm = backward(loss);
    std::vector<TensorT<double>> analytic = collect_grads(gm, leaves, store);

    struct Coord {
        size_t p, i;
    };
    std::vector<Coord> coords;
    for (size_t p = 0; p < store.entries.size(); ++p) {
        if (store.entries[p].frozen) continue;
        for (size_t i = 0; i < store.entries[p].value.data.size(); ++i) coords.push_back({p, i});
    }

    const ParamStoreT<long double> master = cast_store<long double>(store);
    static std::atomic<uint64_t> call_gen{0};
    const uint64_t gen = ++call_gen;

    std::vector<double> numeric(coords.size());
    parallel_for(coords.size(), threads, [&](size_t c) {
        // each worker perturbs a private copy of the store
        static thread_local ParamStoreT<long double> storage;
        thread_local uint64_t seen = 0;
        if (seen != gen) {
            storage = master;
            seen = gen;
        }
        auto& theta = storage.entries[coords[c].p].value.data[coords[c].i];
        const long double orig = theta;
        const double step = h * std::max(1.0, std::abs((double)orig));
        LeafSetT<long double> ll = LeafSetT<long double>::make(storage, false);
        theta = orig + (long double)step;
        const long double up = build(ll).scalar();
        theta = orig - (long double)step;
        const long double down = build(ll).scalar();
        theta = orig;
        numeric[c] = (double)((up - down) / (2.0L * (long double)step));
    });

    GradCheckReport rep;
    for (size_t c = 0; c < coords.size(); ++c) {
        const double a = analytic[coords[c].p].data[coords[c].i];
        const double n = numeric[c];
        const double rel = std::abs(a - n) / std::max(1e-8, std::abs(a) + std::abs(n));
        if (rel >= rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_param = store.entries[coords[c].p].name;
            rep.worst_index = coords[c].i;
            rep.analytic = a;
            rep.numeric = n;
        }
    }
    return rep;
}

}  // namespace vicl
