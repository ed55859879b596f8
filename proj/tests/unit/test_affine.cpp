#include "doctest.h"

#include <cmath>
#include <numbers>

#include "dmloc/affine.hpp"

using namespace dmloc;

TEST_CASE("affine_matrix layout") {
    CHECK(affine_matrix({}) == Affine2x3<float>{1, 0, 0, 0, 1, 0});
    CHECK(affine_matrix({2, 1, 0, 0, 0}) == Affine2x3<float>{2, 0, 0, 0, 1, 0});
    const auto r = affine_matrix({1, 1, 0, 0, float(std::numbers::pi / 2)});
    const float expected[6] = {0, -1, 0, 1, 0, 0};
    for (int k = 0; k < 6; ++k) CHECK(r[k] == doctest::Approx(expected[k]).epsilon(1e-6));
    const auto t = affine_matrix({1.5f, 0.5f, 0.2f, -0.3f, 0.4f});
    CHECK(t[2] == 0.2f);
    CHECK(t[5] == -0.3f);
}

TEST_CASE("params validity") {
    CHECK(AffineParams{}.valid());
    CHECK_FALSE(AffineParams{1, 1, 0, 0, 3.2f}.valid());
    CHECK_FALSE(AffineParams{1, NAN, 0, 0, 0}.valid());
}

TEST_CASE("invert_affine composes to identity") {
    const auto m = affine_matrix64({1.1f, 0.9f, 0.1f, -0.2f, 0.3f});
    const auto inv = invert_affine(m);
    for (auto [x, y] : {std::pair{0.3, -0.4}, std::pair{-1.0, 1.0}}) {
        const double u = m[0] * x + m[1] * y + m[2], v = m[3] * x + m[4] * y + m[5];
        CHECK(inv[0] * u + inv[1] * v + inv[2] == doctest::Approx(x));
        CHECK(inv[3] * u + inv[4] * v + inv[5] == doctest::Approx(y));
    }
    CHECK_THROWS(invert_affine(Affine2x3<double>{0, 0, 0, 0, 0, 0}));
}

TEST_CASE("map_edge_point: identity and pure translation") {
    const auto id = affine_matrix64({});
    auto [x, y] = map_edge_point(id, 12.5, 40.0, 64, 64);
    CHECK(x == doctest::Approx(12.5));
    CHECK(y == doctest::Approx(40.0));
    // tx is in normalized units spanning (w-1)/2 pixels per unit.
    const auto tr = affine_matrix64({1, 1, 0.5f, 0, 0});
    std::tie(x, y) = map_edge_point(tr, 10.0, 10.0, 65, 65);
    CHECK(x == doctest::Approx(10.0 + 0.5 * 32));
    CHECK(y == doctest::Approx(10.0));
}

TEST_CASE("affine_params_backward matches central differences") {
    const AffineParams p{1.2f, 0.8f, 0.1f, -0.2f, 0.35f};
    const Affine2x3<float> g{0.3f, -1.1f, 0.7f, 0.4f, 0.9f, -0.6f};
    const auto analytic = affine_params_backward(p, g);
    const auto base = p.as_array();
    for (int k = 0; k < 5; ++k) {
        auto lo = base, hi = base;
        const double h = 1e-3;
        lo[k] -= float(h), hi[k] += float(h);
        const auto ml = affine_matrix64(AffineParams::from_array(lo));
        const auto mh = affine_matrix64(AffineParams::from_array(hi));
        double num = 0;
        for (int e = 0; e < 6; ++e) num += g[e] * (mh[e] - ml[e]) / (double(hi[k]) - double(lo[k]));
        CHECK(analytic[k] == doctest::Approx(num).epsilon(1e-3));
    }
}
