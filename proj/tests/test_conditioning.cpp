#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <type_traits>

#include "vicl/conditioning.hpp"
#include "vicl/params.hpp"
#include "vicl/rng.hpp"

using namespace vicl;

template <typename T>
static TensorT<T> randn_tensor(Shape shape, Rng& rng, T scale = T(1)) {
    TensorT<T> t = TensorT<T>::zeros(shape);
    for (auto& v : t.data) v = (T)rng.normal() * scale;
    return t;
}

template <typename T>
static T dot(const std::vector<T>& a, const std::vector<T>& b) {
    T s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

TEST_CASE("head dim splits into even role/row/col segments") {
    RopeSplit s = rope_split(16);
    CHECK(s.d_role == 4);
    CHECK(s.d_row == 6);
    CHECK(s.d_col == 6);
    RopeSplit s10 = rope_split(10);
    CHECK(s10.d_role == 2);
    CHECK(s10.d_row == 4);
    CHECK_THROWS_AS(rope_split(12), config_error);  // row/col halves would be odd
    CHECK_THROWS_AS(rope_split(2), config_error);   // no room for a role segment
}

TEST_CASE("zero position rotates by identity; rotation preserves norms") {
    Rng rng(1);
    auto X = randn_tensor<double>({5, 16}, rng);
    auto t0 = RopeTableT<double>::build(std::vector<PositionTriple>(5, {0, 0, 0}), 16);
    auto y0 = rope_rotate(VarT<double>::constant(X), t0);
    for (size_t i = 0; i < X.data.size(); ++i) CHECK(y0.value()[i] == doctest::Approx(X.data[i]));

    std::vector<PositionTriple> pos;
    for (int i = 0; i < 5; ++i) pos.push_back({i % 4, 3 * i, 7 - i});
    auto t = RopeTableT<double>::build(pos, 16);
    auto y = rope_rotate(VarT<double>::constant(X), t);
    for (size_t i = 0; i < 5; ++i) {
        double nx = 0, ny = 0;
        for (size_t j = 0; j < 16; ++j) {
            nx += X.data[i * 16 + j] * X.data[i * 16 + j];
            ny += y.value()[i * 16 + j] * y.value()[i * 16 + j];
        }
        CHECK(ny == doctest::Approx(nx).epsilon(1e-12));
    }
}

TEST_CASE("attention scores depend only on relative row/col offsets") {
    Rng rng(2);
    auto Q = randn_tensor<float>({1, 16}, rng);
    auto K = randn_tensor<float>({1, 16}, rng);
    auto score = [&](PositionTriple pq, PositionTriple pk) {
        auto tq = RopeTableT<float>::build({pq}, 16);
        auto tk = RopeTableT<float>::build({pk}, 16);
        auto q = rope_rotate(Var::constant(Q), tq);
        auto k = rope_rotate(Var::constant(K), tk);
        return dot(q.value(), k.value());
    };
    const float base = score({1, 2, 3}, {1, 5, 1});
    for (int shift = 0; shift <= 8; ++shift) {
        const float srow = score({1, 2 + shift, 3}, {1, 5 + shift, 1});
        const float scol = score({1, 2, 3 + shift}, {1, 5, 1 + shift});
        const float sboth = score({1, 2 + shift, 3 + shift}, {1, 5 + shift, 1 + shift});
        CHECK(std::abs(srow - base) < 1e-5f);
        CHECK(std::abs(scol - base) < 1e-5f);
        CHECK(std::abs(sboth - base) < 1e-5f);
    }
}

TEST_CASE("tokens at the same grid cell with different roles are distinguishable") {
    Rng rng(3);
    int distinct = 0;
    for (int trial = 0; trial < 100; ++trial) {
        auto X = randn_tensor<float>({1, 16}, rng);
        // normalize so the threshold is scale free
        float n = std::sqrt(dot(X.data, X.data));
        for (auto& v : X.data) v /= n;
        const int row = (int)(rng.next_u64() % 4), col = (int)(rng.next_u64() % 4);
        const int r1 = (int)(rng.next_u64() % 4);
        int r2 = (int)(rng.next_u64() % 4);
        if (r2 == r1) r2 = (r1 + 1) % 4;
        auto t1 = RopeTableT<float>::build({{r1, row, col}}, 16);
        auto t2 = RopeTableT<float>::build({{r2, row, col}}, 16);
        auto y1 = rope_rotate(Var::constant(X), t1);
        auto y2 = rope_rotate(Var::constant(X), t2);
        double diff = 0;
        for (size_t j = 0; j < 16; ++j) {
            const double d = y1.value()[j] - y2.value()[j];
            diff += d * d;
        }
        if (std::sqrt(diff) > 1e-3) ++distinct;
    }
    CHECK(distinct >= 95);
}

TEST_CASE("rope rotation backward passes gradcheck") {
    Rng rng(4);
    ParamStoreT<double> store;
    store.add("x", randn_tensor<double>({6, 16}, rng));
    std::vector<PositionTriple> pos;
    for (int i = 0; i < 6; ++i) pos.push_back({i % 4, i, 2 * i});
    auto W = randn_tensor<double>({6, 16}, rng);
    auto build = [&](const auto& L) {
        using R = typename std::decay_t<decltype(L)>::real_t;
        auto table = RopeTableT<R>::build(pos, 16);
        auto y = rope_rotate(L[0], table);
        return mean_all(mul(y, add(y, VarT<R>::constant(tensor_cast<R>(W)))));
    };
    auto rep = gradcheck(build, store, 1e-5, 2);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("condition sequence concatenates source|target|query with grid positions") {
    Image a(8, 8), b(8, 8), c(8, 8);
    for (size_t i = 0; i < a.data.size(); ++i) {
        a.data[i] = 0.1f;
        b.data[i] = 0.2f;
        c.data[i] = 0.3f;
    }
    auto cs = build_condition_sequence(patchify(a, 4), patchify(b, 4), patchify(c, 4));
    CHECK(cs.tokens.shape == Shape{12, 48});  // 3 * (2x2 grid)
    CHECK(cs.grid_h == 2);
    CHECK(cs.grid_w == 2);
    CHECK(cs.tokens.at(0, 0) == 0.1f);
    CHECK(cs.tokens.at(4, 0) == 0.2f);
    CHECK(cs.tokens.at(8, 0) == 0.3f);
    REQUIRE(cs.positions.size() == 12);
    for (size_t i = 0; i < 12; ++i) {
        CHECK(cs.positions[i].role == (int)(i / 4));
        CHECK(cs.positions[i].row == (int)((i % 4) / 2));
        CHECK(cs.positions[i].col == (int)(i % 2));
    }

    Image d(12, 12);
    CHECK_THROWS_AS(build_condition_sequence(patchify(a, 4), patchify(b, 4), patchify(d, 4)),
                    shape_error);
}

TEST_CASE("target positions use role 3 over the same grid") {
    auto tp = assign_target_positions(2, 3);
    REQUIRE(tp.size() == 6);
    for (size_t i = 0; i < tp.size(); ++i) {
        CHECK(tp[i].role == 3);
        CHECK(tp[i].row == (int)(i / 3));
        CHECK(tp[i].col == (int)(i % 3));
    }
    auto full = full_sequence_positions(4, 4);
    CHECK(full.size() == 64);
    CHECK(full[0].role == 0);
    CHECK(full[63].role == 3);
    CHECK(full[63].row == 3);
    CHECK(full[63].col == 3);
}
