#include "doctest.h"

#include <cmath>
#include <numbers>

#include "dmloc/ops.hpp"
#include "oracles.hpp"

using namespace dmloc;

TEST_CASE("conv2d: 1x1 kernel of weight 2 doubles the input") {
    auto in = oracle::random_tensor({1, 5, 6}, 1);
    Tensor k({1, 1, 1, 1}, {2.0f});
    auto out = conv2d<float>(in, k, {}, 1, 0);
    REQUIRE(out.shape() == in.shape());
    for (std::size_t i = 0; i < in.size(); ++i) CHECK(out[i] == 2.0f * in[i]);
}

TEST_CASE("conv2d: zero input with zero bias gives zeros") {
    Tensor in({2, 7, 7});
    auto k = oracle::random_tensor({3, 2, 3, 3}, 2);
    std::vector<float> bias(3, 0.0f);
    auto out = conv2d<float>(in, k, bias, 2, 1);
    CHECK(out.shape() == Shape{3, 4, 4});
    for (float v : out.values()) CHECK(v == 0.0f);
}

TEST_CASE("conv2d matches the nested-loop oracle") {
    auto in = oracle::random_tensor({1, 5, 5}, 11);
    auto k = oracle::random_tensor({2, 1, 3, 3}, 12);
    std::vector<float> bias{0.25f, -0.5f};
    for (auto [stride, pad] : {std::pair{1, 0}, std::pair{1, 1}, std::pair{2, 1}}) {
        int oh, ow;
        auto ref = oracle::nested_loop_conv(in, k, bias, stride, pad, oh, ow);
        auto out = conv2d<float>(in, k, bias, stride, pad);
        REQUIRE(out.shape() == Shape{2, std::size_t(oh), std::size_t(ow)});
        for (std::size_t i = 0; i < out.size(); ++i) CHECK(std::abs(out[i] - ref[i]) < 1e-6);
    }
}

TEST_CASE("conv2d rejects channel mismatch and oversized kernels") {
    Tensor in({2, 5, 5});
    CHECK_THROWS_AS(conv2d<float>(in, Tensor({1, 3, 3, 3}), {}, 1, 0), ShapeError);
    CHECK_THROWS_AS(conv2d<float>(in, Tensor({1, 2, 7, 7}), {}, 1, 0), ShapeError);
    CHECK_NOTHROW(conv2d<float>(in, Tensor({1, 2, 7, 7}), {}, 1, 1));
}

TEST_CASE("conv2d is linear in its input") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto x = oracle::random_tensor({3, 9, 9}, 100 + seed);
        auto y = oracle::random_tensor({3, 9, 9}, 200 + seed);
        auto k = oracle::random_tensor({4, 3, 3, 3}, 300 + seed);
        const float a = 0.7f, b = -1.3f;
        Tensor mix(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) mix[i] = a * x[i] + b * y[i];
        auto lhs = conv2d<float>(mix, k, {}, 2, 1);
        auto cx = conv2d<float>(x, k, {}, 2, 1), cy = conv2d<float>(y, k, {}, 2, 1);
        for (std::size_t i = 0; i < lhs.size(); ++i) CHECK(std::abs(lhs[i] - (a * cx[i] + b * cy[i])) < 1e-5);
    }
}

TEST_CASE("avg_pool2d examples") {
    Tensor c({1, 8, 8}, 0.375f);
    auto pc = avg_pool2d<float>(c, 4, 4);
    for (float v : pc.values()) CHECK(v == 0.375f);

    Tensor small({1, 2, 2}, {1, 2, 3, 4});
    auto ps = avg_pool2d<float>(small, 2, 2);
    REQUIRE(ps.size() == 1);
    CHECK(ps[0] == 2.5f);

    auto in = oracle::random_tensor({1, 16, 16}, 7);
    auto p = avg_pool2d<float>(in, 4, 4);
    REQUIRE(p.shape() == Shape{1, 4, 4});
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) CHECK(std::abs(p.at(0, i, j) - oracle::window_sum(in, 0, 4 * i, 4 * j, 4) / 16) < 1e-6);

    CHECK_THROWS_AS(avg_pool2d<float>(in, 0, 1), ShapeError);
    CHECK_THROWS_AS(avg_pool2d<float>(in, 2, 0), ShapeError);
    CHECK_THROWS_AS(avg_pool2d<float>(in, 17, 1), ShapeError);
}

TEST_CASE("bilinear_resample examples") {
    Tensor c({1, 3, 5}, -0.25f);
    auto big = bilinear_resample<float>(c, 7, 11);
    for (float v : big.values()) CHECK(v == -0.25f);

    Tensor line({1, 1, 2}, {0.0f, 1.0f});
    auto up = bilinear_resample<float>(line, 1, 3);
    CHECK(up[0] == 0.0f);
    CHECK(up[1] == 0.5f);
    CHECK(up[2] == 1.0f);

    auto in = oracle::random_tensor({1, 4, 4}, 21);
    auto out = bilinear_resample<float>(in, 9, 9);
    for (int i = 0; i < 9; ++i)
        for (int j = 0; j < 9; ++j) CHECK(std::abs(out.at(0, i, j) - oracle::four_corner_sample(in, 0, 9, 9, i, j)) < 1e-6);

    CHECK_THROWS_AS(bilinear_resample<float>(in, 0, 3), ShapeError);
}

TEST_CASE("avg_pool then resample preserves constant images") {
    for (float v : {-1.0f, 0.0f, 0.3f, 1.0f}) {
        Tensor c({1, 64, 64}, v);
        auto back = bilinear_resample<float>(avg_pool2d<float>(c, 4, 4), 64, 64);
        for (float x : back.values()) CHECK(x == doctest::Approx(v).epsilon(1e-7));
    }
}

namespace {

Tensor gaussian_blob(std::size_t n, double sigma) {
    Tensor t({1, n, n});
    const double c = (static_cast<double>(n) - 1) / 2;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double r2 = (i - c) * (i - c) + (j - c) * (j - c);
            t.at(0, i, j) = static_cast<float>(std::exp(-r2 / (2 * sigma * sigma)));
        }
    return t;
}

Affine2x3<float> rotation(double theta) {
    const auto c = static_cast<float>(std::cos(theta)), s = static_cast<float>(std::sin(theta));
    return {c, -s, 0.0f, s, c, 0.0f};
}

}  // namespace

TEST_CASE("affine_warp: identity is exact") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        auto in = oracle::random_tensor({2, 13, 17}, seed);
        auto out = affine_warp<float>(in, identity_affine<float>());
        CHECK(out == in);
    }
}

TEST_CASE("affine_warp: translation off canvas gives zeros") {
    auto in = oracle::random_tensor({1, 16, 16}, 3, 0.5f, 1.0f);
    auto out = affine_warp<float>(in, {1, 0, 10, 0, 1, 0});
    for (float v : out.values()) CHECK(v == 0.0f);
}

TEST_CASE("affine_warp: rotate then unrotate recovers a centred blob") {
    auto blob = gaussian_blob(33, 4.0);
    for (double theta : {0.1, 0.3, -0.5, 1.0}) {
        auto back = affine_warp<float>(affine_warp<float>(blob, rotation(theta)), rotation(-theta));
        CHECK(max_abs_diff(back, blob) < 0.05f);
    }
}

TEST_CASE("affine_warp: unit translation of one pixel shifts the image") {
    // tx = 2/(W-1) in normalized units is exactly one pixel.
    auto in = oracle::random_tensor({1, 5, 5}, 4);
    auto out = affine_warp<float>(in, {1, 0, 0.5f, 0, 1, 0});
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j + 1 < 5; ++j) CHECK(out.at(0, i, j) == doctest::Approx(in.at(0, i, j + 1)));
        CHECK(out.at(0, i, 4) == 0.0f);
    }
}

TEST_CASE("sigmoid examples") {
    Tensor x({3}, {0.0f, 10.0f, -10.0f});
    auto y = sigmoid(x);
    CHECK(y[0] == 0.5f);
    CHECK(std::abs(y[1] - 0.9999546) < 1e-6);
    CHECK(std::abs(y[2] - 4.5397868e-5) < 1e-6);
    auto g = sigmoid_backward(y, Tensor({3}, 1.0f));
    CHECK(g[0] == 0.25f);
}

TEST_CASE("global_avg_pool examples") {
    CHECK(global_avg_pool(Tensor({1, 3, 3}))[0] == 0.0f);
    CHECK(global_avg_pool(Tensor({1, 2, 2}, {1, 2, 3, 4}))[0] == 2.5f);
    auto m = oracle::random_tensor({1, 8, 8}, 5);
    double sum = 0;
    for (float v : m.values()) sum += v;
    CHECK(std::abs(global_avg_pool(m)[0] - sum / 64) < 1e-7);
}

TEST_CASE("minmax_normalize examples") {
    auto a = minmax_normalize(Tensor({3}, {2, 4, 6}));
    CHECK(a == Tensor({3}, {0.0f, 0.5f, 1.0f}));
    auto b = minmax_normalize(Tensor({4}, 3.0f));
    for (float v : b.values()) CHECK(v == 0.0f);
    auto c = minmax_normalize(Tensor({3}, {-1, 0, 3}));
    CHECK(c == Tensor({3}, {0.0f, 0.25f, 1.0f}));
}

TEST_CASE("minmax_normalize output lies in [0,1]") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto x = oracle::random_tensor({5, 7}, seed, -50.0f, 50.0f);
        auto y = minmax_normalize(x);
        for (float v : y.values()) CHECK((v >= 0.0f && v <= 1.0f));
    }
}

TEST_CASE("hflip examples and involution") {
    CHECK(hflip(Tensor({3}, {1, 2, 3})) == Tensor({3}, {3, 2, 1}));
    CHECK(hflip(Tensor({3}, {1, 2, 1})) == Tensor({3}, {1, 2, 1}));
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto x = oracle::random_tensor({2, 3, 4 + seed}, seed);
        CHECK(hflip(hflip(x)) == x);
    }
}

TEST_CASE("fuse_attention examples") {
    auto f = oracle::random_tensor({3, 4, 4}, 8);
    CHECK(fuse_attention(f, Tensor({4, 4}, 0.0f)) == f);
    auto doubled = fuse_attention(f, Tensor({4, 4}, 1.0f));
    for (std::size_t i = 0; i < f.size(); ++i) CHECK(doubled[i] == 2.0f * f[i]);

    Tensor half({4, 4}, 0.0f);
    half[5] = 0.5f;
    auto one = fuse_attention(f, half);
    for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t p = 0; p < 16; ++p) {
            const float expect = p == 5 ? 1.5f * f[k * 16 + p] : f[k * 16 + p];
            CHECK(one[k * 16 + p] == doctest::Approx(expect));
        }
    CHECK_THROWS_AS(fuse_attention(f, Tensor({3, 3})), ShapeError);
}

TEST_CASE("GradPair wrappers expose gradient shapes matching their arguments") {
    auto x = oracle::random_tensor({2, 6, 6}, 30);
    auto k = oracle::random_tensor({3, 2, 3, 3}, 31);
    std::vector<float> bias(3, 0.1f);
    auto gp = conv2d_op(x, k, bias, 1, 1);
    auto grads = gp.backward(Tensor(gp.value.shape(), 1.0f));
    REQUIRE(grads.size() == 3);
    CHECK(grads[0].shape() == x.shape());
    CHECK(grads[1].shape() == k.shape());
    CHECK(grads[2].shape() == Shape{3});

    auto warp = affine_warp_op(x, identity_affine<float>());
    auto wg = warp.backward(Tensor(x.shape(), 1.0f));
    CHECK(wg[1].shape() == Shape{2, 3});
}
