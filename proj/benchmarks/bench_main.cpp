// Hot paths of training: convolution, the alignment warp, one classifier
// forward/backward, and CAM-to-box extraction.

#include <benchmark/benchmark.h>

#include <random>

#include "dmloc/aligner.hpp"
#include "dmloc/classifier.hpp"
#include "dmloc/loc_eval.hpp"

namespace {

using namespace dmloc;

Tensor noise(Shape shape, std::uint64_t seed) {
    Tensor t(std::move(shape));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = d(rng);
    return t;
}

void BM_Conv2d(benchmark::State& state) {
    const auto c = static_cast<std::size_t>(state.range(0));
    const auto in = noise({c, 32, 32}, 1);
    const auto k = noise({2 * c, c, 3, 3}, 2);
    const std::vector<float> bias(2 * c, 0.1f);
    for (auto _ : state) benchmark::DoNotOptimize(conv2d(in, k, std::span<const float>(bias), 1, 1));
}
BENCHMARK(BM_Conv2d)->Arg(8)->Arg(16)->Arg(32);

void BM_Conv2dBackward(benchmark::State& state) {
    const auto in = noise({16, 32, 32}, 1);
    const auto k = noise({32, 16, 3, 3}, 2);
    const auto g = noise({32, 32, 32}, 3);
    for (auto _ : state) benchmark::DoNotOptimize(conv2d_backward(in, k, 1, 1, g));
}
BENCHMARK(BM_Conv2dBackward);

void BM_AffineWarp(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto in = noise({1, n, n}, 4);
    const auto m = affine_matrix(AffineParams{1.05f, 0.95f, 0.03f, -0.02f, 0.1f});
    for (auto _ : state) benchmark::DoNotOptimize(affine_warp(in, m));
}
BENCHMARK(BM_AffineWarp)->Arg(64)->Arg(256);

void BM_TransformImage(benchmark::State& state) {
    const auto in = noise({1, 64, 64}, 5);
    const AffineParams p{1.05f, 0.95f, 0.03f, -0.02f, 0.1f};
    for (auto _ : state) benchmark::DoNotOptimize(transform_image(in, p, 4));
}
BENCHMARK(BM_TransformImage);

void BM_ClassifierForward(benchmark::State& state) {
    const auto w = init_model(Architecture{}, 7);
    const auto img = noise({1, 64, 64}, 8);
    for (auto _ : state) benchmark::DoNotOptimize(forward(w, img));
}
BENCHMARK(BM_ClassifierForward);

void BM_ClassifierForwardBackward(benchmark::State& state) {
    const auto w = init_model(Architecture{}, 7);
    const auto img = noise({1, 64, 64}, 8);
    const std::vector<float> grad(w.arch.num_classes, 0.25f);
    for (auto _ : state) {
        const auto f = forward(w, img);
        benchmark::DoNotOptimize(backward(w, f, std::span<const float>(grad)));
    }
}
BENCHMARK(BM_ClassifierForwardBackward);

void BM_CamToBbox(benchmark::State& state) {
    const auto map = noise({8, 8}, 9);
    for (auto _ : state) benchmark::DoNotOptimize(cam_to_bbox(map, 64, 0.5));
}
BENCHMARK(BM_CamToBbox);

}  // namespace

BENCHMARK_MAIN();
