#include <doctest.h>

#include "pkdot/io.hpp"
#include "pkdot/rng.hpp"
#include "pkdot/tensor.hpp"

using namespace pkdot;

TEST_CASE("tensor construction and invariants") {
    Tensor2 t{{1, 2}, {3, 4}};
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 2);
    CHECK(t(1, 0) == 3.0);
    CHECK(t.size() == 4);

    CHECK_THROWS_AS(Tensor2(2, 2, std::vector<double>{1.0, 2.0}), ShapeError);
    CHECK_THROWS_AS((Tensor2{{1, 2}, {3}}), ShapeError);
}

TEST_CASE("transpose and frobenius") {
    Tensor2 t{{1, 2, 3}, {4, 5, 6}};
    Tensor2 tt = t.transposed();
    CHECK(tt.rows() == 3);
    CHECK(tt(0, 1) == 4.0);
    CHECK(t.frobenius_norm() == doctest::Approx(std::sqrt(91.0)));
}

TEST_CASE("require_finite names the offending entry") {
    Tensor2 t(2, 2, 0.0);
    t(1, 1) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_WITH_AS(t.require_finite("x"), "x: non-finite entry at (1,1)", DomainError);
}

TEST_CASE("format_double round-trips exactly") {
    Rng rng(7);
    for (int i = 0; i < 200; ++i) {
        const double v = rng.gaussian() * std::pow(10.0, rng.uniform(-8, 8));
        const std::string s = format_double(v);
        CHECK(std::stod(s) == v);
    }
    CHECK(format_double(0.5) == "0.5");
    CHECK(format_double(1.0) == "1");
}

TEST_CASE("rng streams are deterministic and distinct") {
    Rng a = Rng::stream(42, "alpha");
    Rng b = Rng::stream(42, "alpha");
    Rng c = Rng::stream(42, "beta");
    bool distinct = false;
    for (int i = 0; i < 16; ++i) {
        const double va = a.uniform();
        CHECK(va == b.uniform());
        if (va != c.uniform()) distinct = true;
    }
    CHECK(distinct);
}

TEST_CASE("rng shuffle is a permutation") {
    Rng rng(3);
    std::vector<int> v(100);
    for (int i = 0; i < 100; ++i) v[static_cast<std::size_t>(i)] = i;
    rng.shuffle(v);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 100; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);
}
