#include <doctest.h>

#include <cmath>
#include <vector>

#include "pkdot/graph.hpp"
#include "pkdot/rng.hpp"

using namespace pkdot;

namespace {

// Independent matmul oracle with a different accumulation order (i,k,j) than
// the implementation's (i,j,k).
Tensor2 matmul_oracle(const Tensor2& a, const Tensor2& b) {
    Tensor2 out(a.rows(), b.cols(), 0.0);
    for (int i = 0; i < a.rows(); ++i)
        for (int k = 0; k < a.cols(); ++k)
            for (int j = 0; j < b.cols(); ++j) out(i, j) += a(i, k) * b(k, j);
    return out;
}

Tensor2 random_tensor(Rng& rng, int rows, int cols, double lo = -1.0, double hi = 1.0) {
    Tensor2 t(rows, cols);
    for (std::size_t f = 0; f < t.size(); ++f) t.at(f) = rng.uniform(lo, hi);
    return t;
}

} // namespace

TEST_CASE("matmul hand example, identity, zero annihilator") {
    DiffGraph g;
    const NodeId a = g.constant(Tensor2{{1, 2}, {3, 4}});
    const NodeId b = g.constant(Tensor2{{1, 3}, {2, 4}});
    const Tensor2 expected{{5, 11}, {11, 25}};
    CHECK(g.value(g.matmul(a, b)).max_abs_diff(expected) == 0.0);
    CHECK(expected.max_abs_diff(matmul_oracle(Tensor2{{1, 2}, {3, 4}}, Tensor2{{1, 3}, {2, 4}})) == 0.0);

    const NodeId x = g.constant(Tensor2{{-1, 7}, {0.5, 2}});
    CHECK(g.value(g.matmul(g.constant(Tensor2::identity(2)), x)).max_abs_diff(g.value(x)) == 0.0);

    Rng rng(1);
    const NodeId z = g.matmul(g.constant(Tensor2(1, 3, 0.0)), g.constant(random_tensor(rng, 3, 1)));
    CHECK(g.value(z)(0, 0) == 0.0);
}

TEST_CASE("matmul agrees with triple-loop oracle on random matrices") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 2 + static_cast<int>(rng.below(6));
        const int m = 2 + static_cast<int>(rng.below(6));
        const int k = 2 + static_cast<int>(rng.below(6));
        const Tensor2 a = random_tensor(rng, n, k, -3.0, 3.0);
        const Tensor2 b = random_tensor(rng, k, m, -3.0, 3.0);
        DiffGraph g;
        const Tensor2 got = g.value(g.matmul(g.constant(a), g.constant(b)));
        CHECK(got.max_abs_diff(matmul_oracle(a, b)) < 1e-10);
    }
}

TEST_CASE("matmul dimension mismatch names both shapes") {
    DiffGraph g;
    const NodeId a = g.constant(Tensor2(2, 3, 1.0));
    const NodeId b = g.constant(Tensor2(2, 2, 1.0));
    CHECK_THROWS_WITH_AS(g.matmul(a, b), "matmul: inner dimensions disagree, 2x3 vs 2x2", ShapeError);
}

TEST_CASE("elementwise examples") {
    DiffGraph g;
    CHECK(g.value(g.add(g.constant(Tensor2{{1, 2}}), g.constant(Tensor2{{3, 4}}))).max_abs_diff(Tensor2{{4, 6}}) == 0.0);
    CHECK(g.value(g.relu(g.constant(Tensor2{{-1, 2}}))).max_abs_diff(Tensor2{{0, 2}}) == 0.0);
    CHECK(g.value(g.divide(g.constant(Tensor2{{1, 1}}), g.constant(Tensor2{{2, 4}}))).max_abs_diff(Tensor2{{0.5, 0.25}}) == 0.0);
}

TEST_CASE("elementwise domain errors carry the offending index") {
    DiffGraph g;
    const NodeId num = g.constant(Tensor2{{1, 1}});
    CHECK_THROWS_WITH_AS(g.divide(num, g.constant(Tensor2{{2, 0}})), "div: zero denominator at (0,1)",
                         DomainError);
    CHECK_THROWS_WITH_AS(g.log(g.constant(Tensor2{{1, -2}})), "log: non-positive entry at (0,1)", DomainError);
    CHECK_THROWS_AS(g.add(g.constant(Tensor2(2, 2, 1.0)), g.constant(Tensor2(2, 3, 1.0))), ShapeError);
}

TEST_CASE("reduce shapes and values") {
    DiffGraph g;
    const NodeId x = g.constant(Tensor2{{1, 2}, {3, 4}});
    CHECK(g.value(g.sum(x))(0, 0) == 10.0);
    CHECK(g.value(g.row_sums(x)).max_abs_diff(Tensor2{{3}, {7}}) == 0.0);
    CHECK(g.value(g.col_sums(x)).max_abs_diff(Tensor2{{4, 6}}) == 0.0);
    CHECK(g.value(g.mean(g.constant(Tensor2{{2, 4}})))(0, 0) == 3.0);
}

TEST_CASE("backward basics") {
    SUBCASE("sum gradient is all ones") {
        DiffGraph g;
        const NodeId x = g.leaf(Tensor2{{1, 2}, {3, 4}}, true);
        g.backward(g.sum(x));
        CHECK(g.grad(x).max_abs_diff(Tensor2(2, 2, 1.0)) == 0.0);
    }
    SUBCASE("d/dx x^2 = 2x") {
        DiffGraph g;
        const NodeId x = g.leaf(Tensor2{{3}}, true);
        g.backward(g.sum(g.mul(x, x)));
        CHECK(g.grad(x)(0, 0) == 6.0);
    }
    SUBCASE("non-scalar root is rejected") {
        DiffGraph g;
        const NodeId x = g.leaf(Tensor2{{1, 2}}, true);
        CHECK_THROWS_AS(g.backward(x), ContractError);
    }
    SUBCASE("repeated backward re-zeroes accumulators") {
        DiffGraph g;
        const NodeId x = g.leaf(Tensor2{{3}}, true);
        const NodeId root = g.sum(g.mul(x, x));
        g.backward(root);
        g.backward(root);
        CHECK(g.grad(x)(0, 0) == 6.0);
    }
}

TEST_CASE("backward is bit-deterministic") {
    Rng rng(23);
    const Tensor2 a = random_tensor(rng, 4, 3);
    const Tensor2 b = random_tensor(rng, 3, 4);
    auto run = [&]() {
        DiffGraph g;
        const NodeId x = g.leaf(a, true);
        const NodeId y = g.leaf(b, true);
        const NodeId root = g.sum(g.tanh(g.matmul(x, y)));
        g.backward(root);
        return std::pair<Tensor2, Tensor2>(g.grad(x), g.grad(y));
    };
    const auto r1 = run();
    const auto r2 = run();
    CHECK(r1.first == r2.first);
    CHECK(r1.second == r2.second);
}

TEST_CASE("finite_diff_check: quadratic objective is exact to round-off") {
    ParamSet params;
    params.add("x", Tensor2{{1.0, -2.0}, {0.5, 3.0}});
    const double err = finite_diff_check(
        [](DiffGraph& g, const std::vector<NodeId>& p) {
            // f = sum(x*x) + 3*sum(x)
            return g.add(g.sum(g.mul(p[0], p[0])), g.scale(g.sum(p[0]), 3.0));
        },
        params, 1e-5);
    CHECK(err < 1e-7);
}

TEST_CASE("finite_diff_check covers every differentiable op") {
    Rng rng(37);

    // Domain-safe inputs: positive for log/sqrt/div denominators, generic
    // otherwise. Each objective reduces through a tanh so gradients are
    // non-trivial everywhere.
    auto check = [&](const char* name, const GraphObjective& obj, const Tensor2& x0) {
        ParamSet params;
        params.add(name, x0);
        const double err = finite_diff_check(obj, params, 1e-6);
        INFO(name);
        CHECK(err < 1e-4);
    };

    const Tensor2 generic = random_tensor(rng, 3, 4, -0.9, 0.9);
    const Tensor2 positive = random_tensor(rng, 3, 4, 0.5, 2.0);
    const Tensor2 square = random_tensor(rng, 3, 3, -0.9, 0.9);

    check("matmul", [&](DiffGraph& g, const std::vector<NodeId>& p) {
        DiffGraph& gg = g;
        Rng local(5);
        const NodeId other = gg.constant(random_tensor(local, 4, 2));
        return gg.sum(gg.tanh(gg.matmul(p[0], other)));
    }, generic);
    check("transpose", [](DiffGraph& g, const std::vector<NodeId>& p) {
        return g.sum(g.tanh(g.matmul(g.transpose(p[0]), p[0])));
    }, generic);
    check("add", [](DiffGraph& g, const std::vector<NodeId>& p) {
        return g.sum(g.tanh(g.add(p[0], g.constant(Tensor2(3, 4, 0.3)))));
    }, generic);
    check("sub", [](DiffGraph& g, const std::vector<NodeId>& p) {
        return g.sum(g.tanh(g.sub(g.constant(Tensor2(3, 4, 0.3)), p[0])));
    }, generic);
    check("mul", [](DiffGraph& g, const std::vector<NodeId>& p) {
        return g.sum(g.tanh(g.mul(p[0], p[0])));
    }, generic);
    check("div", [](DiffGraph& g, const std::vector<NodeId>& p) {
        return g.sum(g.tanh(g.divide(g.constant(Tensor2(3, 4, 1.0)), p[0])));
    }, positive);
    check("scale", [](DiffGraph& g, const std::vector<NodeId>& p) {
        return g.sum(g.tanh(g.scale(p[0], -2.5)));
    }, generic);
    check("relu", [](DiffGraph& g, const std::vector<NodeId>& p) {
        return g.sum(g.tanh(g.relu(p[0])));
    }, positive); // kink-free region
    check("tanh", [](DiffGraph& g, const std::vector<NodeId>& p) { return g.sum(g.tanh(p[0])); }, generic);
    check("exp", [](DiffGraph& g, const std::vector<NodeId>& p) { return g.sum(g.exp(p[0])); }, generic);
    check("log", [](DiffGraph& g, const std::vector<NodeId>& p) { return g.sum(g.log(p[0])); }, positive);
    check("sqrt", [](DiffGraph& g, const std::vector<NodeId>& p) { return g.sum(g.sqrt(p[0])); }, positive);
    check("mean", [](DiffGraph& g, const std::vector<NodeId>& p) { return g.mean(g.tanh(p[0])); }, generic);
    check("row_sums", [](DiffGraph& g, const std::vector<NodeId>& p) {
        return g.sum(g.tanh(g.row_sums(p[0])));
    }, generic);
    check("col_sums", [](DiffGraph& g, const std::vector<NodeId>& p) {
        return g.sum(g.tanh(g.col_sums(p[0])));
    }, generic);
    check("concat_cols", [](DiffGraph& g, const std::vector<NodeId>& p) {
        return g.sum(g.tanh(g.concat_cols(p[0], g.mul(p[0], p[0]))));
    }, generic);
    check("select_cols", [](DiffGraph& g, const std::vector<NodeId>& p) {
        return g.sum(g.tanh(g.select_cols(p[0], {2, 0, 2})));
    }, generic);
    check("scalar_broadcast", [](DiffGraph& g, const std::vector<NodeId>& p) {
        const NodeId m = g.mean(p[0]);
        return g.sum(g.tanh(g.sub(p[0], m)));
    }, generic);
    check("sum", [](DiffGraph& g, const std::vector<NodeId>& p) { return g.sum(g.exp(p[0])); }, square);
}

TEST_CASE("finite_diff_check rejects bad steps and non-finite objectives") {
    ParamSet params;
    params.add("x", Tensor2{{0.0}});
    const GraphObjective f = [](DiffGraph& g, const std::vector<NodeId>& p) { return g.sum(p[0]); };
    CHECK_THROWS_AS(finite_diff_check(f, params, 0.0), ContractError);

    // log becomes undefined just below zero; the perturbed point must be
    // reported as a failure with its location.
    ParamSet close;
    close.add("w", Tensor2{{1e-8}});
    const GraphObjective g_log = [](DiffGraph& g, const std::vector<NodeId>& p) { return g.sum(g.log(p[0])); };
    CHECK_THROWS_AS(finite_diff_check(g_log, close, 1e-5), DomainError);
}

TEST_CASE("ParamSet enforces unique names") {
    ParamSet p;
    p.add("w", Tensor2{{1}});
    CHECK_THROWS_AS(p.add("w", Tensor2{{2}}), ContractError);
}
