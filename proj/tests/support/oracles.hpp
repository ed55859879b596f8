#pragma once

// Straight-line reference implementations used only by the tests. They share
// no code with the library paths they check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "dmloc/tensor.hpp"

namespace oracle {

inline dmloc::Tensor random_tensor(dmloc::Shape shape, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> unif(lo, hi);
    dmloc::Tensor t(std::move(shape));
    for (auto& v : t.values()) v = unif(rng);
    return t;
}

inline std::vector<double> nested_loop_conv(const dmloc::Tensor& in, const dmloc::Tensor& kern,
                                            const std::vector<float>& bias, int stride, int pad, int& oh, int& ow) {
    const int cin = static_cast<int>(in.dim(0)), h = static_cast<int>(in.dim(1)), w = static_cast<int>(in.dim(2));
    const int cout = static_cast<int>(kern.dim(0)), k = static_cast<int>(kern.dim(2));
    oh = (h + 2 * pad - k) / stride + 1;
    ow = (w + 2 * pad - k) / stride + 1;
    std::vector<double> out(static_cast<std::size_t>(cout * oh * ow));
    for (int o = 0; o < cout; ++o)
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
                double acc = bias.empty() ? 0.0 : bias[o];
                for (int c = 0; c < cin; ++c)
                    for (int a = 0; a < k; ++a)
                        for (int b = 0; b < k; ++b) {
                            const int iy = y * stride + a - pad, ix = x * stride + b - pad;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            acc += double(kern[((o * cin + c) * k + a) * k + b]) * in[(c * h + iy) * w + ix];
                        }
                out[(o * oh + y) * ow + x] = acc;
            }
    return out;
}

inline double window_sum(const dmloc::Tensor& in, int c, int y0, int x0, int k) {
    const int h = static_cast<int>(in.dim(1)), w = static_cast<int>(in.dim(2));
    double s = 0.0;
    for (int y = y0; y < y0 + k; ++y)
        for (int x = x0; x < x0 + k; ++x) s += in[(c * h + y) * w + x];
    return s;
}

// Four-corner weights for align-corners resampling of a single channel.
inline double four_corner_sample(const dmloc::Tensor& in, int c, int out_h, int out_w, int i, int j) {
    const int h = static_cast<int>(in.dim(1)), w = static_cast<int>(in.dim(2));
    const double sy = out_h == 1 ? 0.0 : i * double(h - 1) / (out_h - 1);
    const double sx = out_w == 1 ? 0.0 : j * double(w - 1) / (out_w - 1);
    const int y0 = std::min(static_cast<int>(sy), h - 1), x0 = std::min(static_cast<int>(sx), w - 1);
    const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    const double dy = sy - y0, dx = sx - x0;
    auto v = [&](int y, int x) { return double(in[(c * h + y) * w + x]); };
    return v(y0, x0) * (1 - dy) * (1 - dx) + v(y0, x1) * (1 - dy) * dx + v(y1, x0) * dy * (1 - dx) +
           v(y1, x1) * dy * dx;
}

// Pairwise Mann-Whitney AUC: wins count 2, ties count 1, over 2 * npos * nneg.
inline double pairwise_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    std::int64_t num = 0, npos = 0, nneg = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] == 1) ++npos; else ++nneg;
    }
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] == 1) continue;
            if (scores[i] > scores[j]) num += 2;
            else if (scores[i] == scores[j]) num += 1;
        }
    }
    return static_cast<double>(num) / static_cast<double>(2 * npos * nneg);
}

struct Box {
    int x0, y0, x1, y1;  // inclusive pixel bounds
    std::size_t area;
};

// Largest 4-connected component of a binary image by explicit flood fill;
// ties resolved by first pixel in raster order.
inline bool largest_component(const std::vector<std::uint8_t>& bin, int h, int w, Box& best) {
    std::vector<int> seen(bin.size(), 0);
    bool found = false;
    std::vector<std::pair<int, int>> stack;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!bin[y * w + x] || seen[y * w + x]) continue;
            Box b{x, y, x, y, 0};
            stack.assign(1, {y, x});
            seen[y * w + x] = 1;
            while (!stack.empty()) {
                auto [cy, cx] = stack.back();
                stack.pop_back();
                ++b.area;
                b.x0 = std::min(b.x0, cx); b.x1 = std::max(b.x1, cx);
                b.y0 = std::min(b.y0, cy); b.y1 = std::max(b.y1, cy);
                const int ny[4] = {cy - 1, cy + 1, cy, cy}, nx[4] = {cx, cx, cx - 1, cx + 1};
                for (int d = 0; d < 4; ++d) {
                    if (ny[d] < 0 || ny[d] >= h || nx[d] < 0 || nx[d] >= w) continue;
                    const int id = ny[d] * w + nx[d];
                    if (bin[id] && !seen[id]) {
                        seen[id] = 1;
                        stack.push_back({ny[d], nx[d]});
                    }
                }
            }
            if (!found || b.area > best.area) {
                best = b;
                found = true;
            }
        }
    return found;
}

}  // namespace oracle
