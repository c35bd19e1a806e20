#include <doctest.h>

#include <cmath>

#include "pkdot/rng.hpp"
#include "pkdot/simgraph.hpp"

using namespace pkdot;

namespace {

Tensor2 random_batch(Rng& rng, int b, int m) {
    Tensor2 t(b, m);
    for (std::size_t f = 0; f < t.size(); ++f) t.at(f) = rng.gaussian();
    return t;
}

} // namespace

TEST_CASE("gram examples") {
    DiffGraph g;
    CHECK(g.value(gram(g, g.constant(Tensor2{{1, 0}, {0, 1}}))).max_abs_diff(Tensor2::identity(2)) == 0.0);
    CHECK(g.value(gram(g, g.constant(Tensor2{{1, 2}, {3, 4}}))).max_abs_diff(Tensor2{{5, 11}, {11, 25}}) == 0.0);
    CHECK(g.value(gram(g, g.constant(Tensor2{{2, 0}, {4, 0}}))).max_abs_diff(Tensor2{{4, 8}, {8, 16}}) == 0.0);
}

TEST_CASE("row_l2_norms examples and zero-row rejection") {
    DiffGraph g;
    // b >= 2 comes from the batch contract; norms themselves work on any rows.
    CHECK(g.value(row_l2_norms(g, g.constant(Tensor2{{3, 4}, {1, 0}}))).max_abs_diff(Tensor2{{5}, {1}}) == 0.0);
    CHECK(g.value(row_l2_norms(g, g.constant(Tensor2{{1, 0}, {0, 2}}))).max_abs_diff(Tensor2{{1}, {2}}) == 0.0);
    CHECK(g.value(row_l2_norms(g, g.constant(Tensor2{{1, 1, 1, 1}})))(0, 0) == 2.0);

    CHECK_THROWS_WITH_AS(row_l2_norms(g, g.constant(Tensor2{{1, 2}, {0, 0}})),
                         "embedding row 1 is all-zero; cosine similarity is undefined", DegenerateInputError);
}

TEST_CASE("cosine similarity examples") {
    DiffGraph g;
    CHECK(g.value(cosine_similarity_matrix(g, g.constant(Tensor2{{1, 0}, {0, 1}})))
              .max_abs_diff(Tensor2::identity(2)) == 0.0);
    CHECK(g.value(cosine_similarity_matrix(g, g.constant(Tensor2{{1, 0}, {2, 0}})))
              .max_abs_diff(Tensor2(2, 2, 1.0)) < 1e-15);
    const double c45 = 1.0 / std::sqrt(2.0);
    CHECK(g.value(cosine_similarity_matrix(g, g.constant(Tensor2{{1, 0}, {1, 1}})))
              .max_abs_diff(Tensor2{{1, c45}, {c45, 1}}) < 1e-15);

    CHECK_THROWS_AS(cosine_similarity_matrix(g, g.constant(Tensor2{{1, 2}})), ContractError);
    CHECK_THROWS_AS(cosine_similarity_matrix(g, g.constant(Tensor2{{1, 2}, {0, 0}})), DegenerateInputError);
}

TEST_CASE("similarity invariants hold on random batches") {
    Rng rng(101);
    for (int trial = 0; trial < 50; ++trial) {
        const int b = 2 + static_cast<int>(rng.below(10));
        const int m = 1 + static_cast<int>(rng.below(8));
        const Tensor2 x = random_batch(rng, b, m);
        const Tensor2 s = cosine_similarity_value(x);
        CHECK(is_valid_similarity(s));

        // invariance under positive per-row rescaling
        Tensor2 scaled = x;
        for (int i = 0; i < b; ++i) {
            const double c = rng.uniform(0.1, 10.0);
            for (int j = 0; j < m; ++j) scaled(i, j) *= c;
        }
        CHECK(s.max_abs_diff(cosine_similarity_value(scaled)) < 1e-9);
    }
}

TEST_CASE("cosine similarity is differentiable end-to-end") {
    Rng rng(7);
    ParamSet params;
    params.add("x", random_batch(rng, 4, 3));
    const double err = finite_diff_check(
        [](DiffGraph& g, const std::vector<NodeId>& p) {
            return g.sum(g.tanh(cosine_similarity_matrix(g, p[0])));
        },
        params, 1e-6);
    CHECK(err < 1e-4);
}

TEST_CASE("select_anchors spec examples") {
    const Tensor2 s{{1, 0.9, 0.0}, {0.9, 1, 0.1}, {0.0, 0.1, 1}};
    CHECK(select_anchors(s, 1).indices == std::vector<int>{2});
    CHECK(select_anchors(s, 3).indices == std::vector<int>{0, 1, 2});

    // all-equal off-diagonals: tie-break by lowest index
    const Tensor2 flat{{1, 0.5, 0.5, 0.5}, {0.5, 1, 0.5, 0.5}, {0.5, 0.5, 1, 0.5}, {0.5, 0.5, 0.5, 1}};
    CHECK(select_anchors(flat, 2).indices == std::vector<int>{0, 1});

    CHECK_THROWS_AS(select_anchors(s, 0), ContractError);
    CHECK_THROWS_AS(select_anchors(s, 4), ContractError);
}

TEST_CASE("select_anchors is permutation-consistent") {
    Rng rng(55);
    for (int trial = 0; trial < 30; ++trial) {
        const int b = 3 + static_cast<int>(rng.below(6));
        const Tensor2 s = cosine_similarity_value(random_batch(rng, b, 5));
        const int k = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(b)));

        std::vector<int> perm(static_cast<std::size_t>(b));
        for (int i = 0; i < b; ++i) perm[static_cast<std::size_t>(i)] = i;
        rng.shuffle(perm);
        Tensor2 sp(b, b);
        for (int i = 0; i < b; ++i)
            for (int j = 0; j < b; ++j) sp(i, j) = s(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);

        const AnchorSet base = select_anchors(s, k);
        const AnchorSet relabeled = select_anchors(sp, k);

        // map the relabeled selection back to original labels
        std::vector<int> mapped;
        for (int idx : relabeled.indices) mapped.push_back(perm[static_cast<std::size_t>(idx)]);
        std::sort(mapped.begin(), mapped.end());
        CHECK(mapped == base.indices);
    }
}

TEST_CASE("restrict keeps rows and selected columns") {
    const Tensor2 s{{1, 0.9, 0.0}, {0.9, 1, 0.1}, {0.0, 0.1, 1}};
    AnchorSet all;
    all.indices = {0, 1, 2};
    CHECK(restrict_to_anchors_value(s, all).max_abs_diff(s) == 0.0);

    AnchorSet last;
    last.indices = {2};
    CHECK(restrict_to_anchors_value(s, last).max_abs_diff(Tensor2{{0.0}, {0.1}, {1.0}}) == 0.0);

    Rng rng(9);
    const Tensor2 s4 = cosine_similarity_value(random_batch(rng, 4, 3));
    AnchorSet mid;
    mid.indices = {1, 3};
    const Tensor2 r = restrict_to_anchors_value(s4, mid);
    CHECK(r.rows() == 4);
    CHECK(r.cols() == 2);
    for (int i = 0; i < 4; ++i) {
        CHECK(r(i, 0) == s4(i, 1));
        CHECK(r(i, 1) == s4(i, 3));
    }

    AnchorSet bad;
    bad.indices = {7};
    CHECK_THROWS_AS(restrict_to_anchors_value(s, bad), ContractError);
}

TEST_CASE("similarity CSV dump") {
    const Tensor2 s{{1, 0.25}, {0.25, 1}};
    const std::string path = "/tmp/pkdot_sim_test.csv";
    write_similarity_csv(s, path);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "1,0.25");
}
