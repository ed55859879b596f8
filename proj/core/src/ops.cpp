#include "dmloc/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

namespace dmloc {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using MatMap = Eigen::Map<RowMat<T>>;

template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

void require_rank(const Shape& s, std::size_t rank, const char* op) {
    if (s.size() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(s));
    }
}

// Unrolls every k x k receptive field into a column: rows index (c, ki, kj),
// columns index output positions.
template <class T>
std::vector<T> im2col(const BasicTensor<T>& input, std::size_t k, std::size_t stride, std::size_t padding,
                      std::size_t out_h, std::size_t out_w) {
    const std::size_t channels = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::size_t positions = out_h * out_w;
    std::vector<T> cols(channels * k * k * positions, T{0});
    const auto ph = static_cast<long>(padding);
    for (std::size_t c = 0; c < channels; ++c) {
        const T* plane = input.data() + c * h * w;
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
                T* row = cols.data() + ((c * k + ki) * k + kj) * positions;
                for (std::size_t oi = 0; oi < out_h; ++oi) {
                    const long ii = static_cast<long>(oi * stride + ki) - ph;
                    if (ii < 0 || ii >= static_cast<long>(h)) continue;
                    const T* src = plane + static_cast<std::size_t>(ii) * w;
                    T* dst = row + oi * out_w;
                    for (std::size_t oj = 0; oj < out_w; ++oj) {
                        const long jj = static_cast<long>(oj * stride + kj) - ph;
                        if (jj >= 0 && jj < static_cast<long>(w)) dst[oj] = src[jj];
                    }
                }
            }
        }
    }
    return cols;
}

template <class T>
void col2im(const T* cols, std::size_t channels, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
            std::size_t padding, std::size_t out_h, std::size_t out_w, BasicTensor<T>& grad_in) {
    const std::size_t positions = out_h * out_w;
    const auto ph = static_cast<long>(padding);
    for (std::size_t c = 0; c < channels; ++c) {
        T* plane = grad_in.data() + c * h * w;
        for (std::size_t ki = 0; ki < k; ++ki) {
            for (std::size_t kj = 0; kj < k; ++kj) {
                const T* row = cols + ((c * k + ki) * k + kj) * positions;
                for (std::size_t oi = 0; oi < out_h; ++oi) {
                    const long ii = static_cast<long>(oi * stride + ki) - ph;
                    if (ii < 0 || ii >= static_cast<long>(h)) continue;
                    T* dst = plane + static_cast<std::size_t>(ii) * w;
                    const T* src = row + oi * out_w;
                    for (std::size_t oj = 0; oj < out_w; ++oj) {
                        const long jj = static_cast<long>(oj * stride + kj) - ph;
                        if (jj >= 0 && jj < static_cast<long>(w)) dst[jj] += src[oj];
                    }
                }
            }
        }
    }
}

void check_conv_shapes(const Shape& in, const Shape& kern, std::size_t stride, std::size_t padding) {
    require_rank(in, 3, "conv2d input");
    require_rank(kern, 4, "conv2d kernels");
    if (kern[1] != in[0]) {
        throw ShapeError("conv2d: input has " + std::to_string(in[0]) + " channels but kernels " + shape_string(kern) +
                         " expect " + std::to_string(kern[1]));
    }
    if (kern[2] != kern[3]) throw ShapeError("conv2d: kernels must be square, got " + shape_string(kern));
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    if (kern[2] > in[1] + 2 * padding || kern[2] > in[2] + 2 * padding) {
        throw ShapeError("conv2d: kernel " + std::to_string(kern[2]) + " larger than padded input " + shape_string(in));
    }
}

struct Bilinear {
    long x0, y0;
    double fx, fy;
};

inline Bilinear locate(double px, double py) {
    const double fx0 = std::floor(px), fy0 = std::floor(py);
    return {static_cast<long>(fx0), static_cast<long>(fy0), px - fx0, py - fy0};
}

struct WarpGeometry {
    double cx, cy, rxy, ryx;
    WarpGeometry(std::size_t h, std::size_t w)
        : cx((static_cast<double>(w) - 1.0) / 2.0), cy((static_cast<double>(h) - 1.0) / 2.0) {
        rxy = cy > 0 ? cx / cy : 0.0;
        ryx = cx > 0 ? cy / cx : 0.0;
    }
    // Pixel-space form of M * normalized(u); exact on the grid for the identity.
    template <class T>
    void sample_point(const Affine2x3<T>& m, std::size_t i, std::size_t j, double& px, double& py) const {
        const double dx = static_cast<double>(j) - cx, dy = static_cast<double>(i) - cy;
        px = static_cast<double>(m[0]) * dx + static_cast<double>(m[1]) * dy * rxy + static_cast<double>(m[2]) * cx + cx;
        py = static_cast<double>(m[3]) * dx * ryx + static_cast<double>(m[4]) * dy + static_cast<double>(m[5]) * cy + cy;
    }
};

}  // namespace

std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t padding) {
    return (in + 2 * padding - k) / stride + 1;
}

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernels, std::span<const T> bias,
                      std::size_t stride, std::size_t padding) {
    check_conv_shapes(input.shape(), kernels.shape(), stride, padding);
    const std::size_t c_out = kernels.dim(0), k = kernels.dim(2);
    if (!bias.empty() && bias.size() != c_out) {
        throw ShapeError("conv2d: bias length " + std::to_string(bias.size()) + " != output channels " +
                         std::to_string(c_out));
    }
    const std::size_t oh = conv_out_extent(input.dim(1), k, stride, padding);
    const std::size_t ow = conv_out_extent(input.dim(2), k, stride, padding);
    const std::size_t patch = input.dim(0) * k * k, positions = oh * ow;

    auto cols = im2col(input, k, stride, padding, oh, ow);
    BasicTensor<T> out({c_out, oh, ow});
    MatMap<T> out_m(out.data(), static_cast<Eigen::Index>(c_out), static_cast<Eigen::Index>(positions));
    ConstMatMap<T> k_m(kernels.data(), static_cast<Eigen::Index>(c_out), static_cast<Eigen::Index>(patch));
    ConstMatMap<T> cols_m(cols.data(), static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(positions));
    out_m.noalias() = k_m * cols_m;
    if (!bias.empty()) {
        for (std::size_t o = 0; o < c_out; ++o) out_m.row(static_cast<Eigen::Index>(o)).array() += bias[o];
    }
    return out;
}

template <class T>
Conv2dGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernels, std::size_t stride,
                               std::size_t padding, const BasicTensor<T>& grad_out, bool need_input,
                               bool need_kernels) {
    check_conv_shapes(input.shape(), kernels.shape(), stride, padding);
    const std::size_t c_in = input.dim(0), c_out = kernels.dim(0), k = kernels.dim(2);
    const std::size_t oh = conv_out_extent(input.dim(1), k, stride, padding);
    const std::size_t ow = conv_out_extent(input.dim(2), k, stride, padding);
    if (grad_out.shape() != Shape{c_out, oh, ow}) {
        throw ShapeError("conv2d_backward: upstream gradient " + shape_string(grad_out.shape()) + " != output shape " +
                         shape_string({c_out, oh, ow}));
    }
    const std::size_t patch = c_in * k * k, positions = oh * ow;
    const auto rows = static_cast<Eigen::Index>(patch), cols_n = static_cast<Eigen::Index>(positions);
    ConstMatMap<T> g_m(grad_out.data(), static_cast<Eigen::Index>(c_out), cols_n);
    ConstMatMap<T> k_m(kernels.data(), static_cast<Eigen::Index>(c_out), rows);

    Conv2dGrads<T> grads;
    grads.bias.assign(c_out, T{0});
    // Plain loop: Eigen's vectorized reductions peel by pointer alignment, which
    // would make the summation order depend on where the buffer landed.
    for (std::size_t o = 0; o < c_out; ++o) {
        const T* row = grad_out.data() + o * positions;
        T acc{0};
        for (std::size_t i = 0; i < positions; ++i) acc += row[i];
        grads.bias[o] = acc;
    }

    if (need_kernels) {
        auto cols = im2col(input, k, stride, padding, oh, ow);
        ConstMatMap<T> cols_m(cols.data(), rows, cols_n);
        grads.kernels = BasicTensor<T>(kernels.shape());
        MatMap<T> dk(grads.kernels.data(), static_cast<Eigen::Index>(c_out), rows);
        dk.noalias() = g_m * cols_m.transpose();
    }
    if (need_input) {
        RowMat<T> dcols = k_m.transpose() * g_m;
        grads.input = BasicTensor<T>(input.shape());
        col2im(dcols.data(), c_in, input.dim(1), input.dim(2), k, stride, padding, oh, ow, grads.input);
    }
    return grads;
}

template <class T>
BasicTensor<T> avg_pool2d(const BasicTensor<T>& input, std::size_t kernel, std::size_t stride) {
    require_rank(input.shape(), 3, "avg_pool2d");
    if (kernel == 0 || stride == 0) throw ShapeError("avg_pool2d: kernel and stride must be positive");
    const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    if (kernel > h || kernel > w) {
        throw ShapeError("avg_pool2d: kernel " + std::to_string(kernel) + " exceeds input " + shape_string(input.shape()));
    }
    const std::size_t oh = (h - kernel) / stride + 1, ow = (w - kernel) / stride + 1;
    const double inv = 1.0 / static_cast<double>(kernel * kernel);
    BasicTensor<T> out({c, oh, ow});
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t oi = 0; oi < oh; ++oi) {
            for (std::size_t oj = 0; oj < ow; ++oj) {
                double acc = 0.0;
                for (std::size_t a = 0; a < kernel; ++a) {
                    for (std::size_t b = 0; b < kernel; ++b) acc += input.at(ch, oi * stride + a, oj * stride + b);
                }
                out.at(ch, oi, oj) = static_cast<T>(acc * inv);
            }
        }
    }
    return out;
}

template <class T>
BasicTensor<T> avg_pool2d_backward(const Shape& input_shape, std::size_t kernel, std::size_t stride,
                                   const BasicTensor<T>& grad_out) {
    require_rank(input_shape, 3, "avg_pool2d_backward");
    if (kernel == 0 || stride == 0) throw ShapeError("avg_pool2d: kernel and stride must be positive");
    BasicTensor<T> grad(input_shape);
    const T inv = T{1} / static_cast<T>(kernel * kernel);
    for (std::size_t ch = 0; ch < grad_out.dim(0); ++ch) {
        for (std::size_t oi = 0; oi < grad_out.dim(1); ++oi) {
            for (std::size_t oj = 0; oj < grad_out.dim(2); ++oj) {
                const T g = grad_out.at(ch, oi, oj) * inv;
                for (std::size_t a = 0; a < kernel; ++a) {
                    for (std::size_t b = 0; b < kernel; ++b) grad.at(ch, oi * stride + a, oj * stride + b) += g;
                }
            }
        }
    }
    return grad;
}

namespace {

struct AxisSample {
    std::size_t lo, hi;
    double frac;
};

std::vector<AxisSample> align_corner_axis(std::size_t in, std::size_t out) {
    std::vector<AxisSample> axis(out);
    const double scale = out > 1 ? static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
    for (std::size_t o = 0; o < out; ++o) {
        const double s = static_cast<double>(o) * scale;
        auto lo = static_cast<std::size_t>(std::floor(s));
        if (lo > in - 1) lo = in - 1;
        const std::size_t hi = std::min(lo + 1, in - 1);
        axis[o] = {lo, hi, s - static_cast<double>(lo)};
    }
    return axis;
}

}  // namespace

template <class T>
BasicTensor<T> bilinear_resample(const BasicTensor<T>& input, std::size_t out_h, std::size_t out_w) {
    require_rank(input.shape(), 3, "bilinear_resample");
    if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resample: output extents must be positive");
    const std::size_t c = input.dim(0);
    const auto ys = align_corner_axis(input.dim(1), out_h);
    const auto xs = align_corner_axis(input.dim(2), out_w);
    BasicTensor<T> out({c, out_h, out_w});
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < out_h; ++i) {
            const auto& y = ys[i];
            for (std::size_t j = 0; j < out_w; ++j) {
                const auto& x = xs[j];
                const double top = (1.0 - x.frac) * input.at(ch, y.lo, x.lo) + x.frac * input.at(ch, y.lo, x.hi);
                const double bot = (1.0 - x.frac) * input.at(ch, y.hi, x.lo) + x.frac * input.at(ch, y.hi, x.hi);
                out.at(ch, i, j) = static_cast<T>((1.0 - y.frac) * top + y.frac * bot);
            }
        }
    }
    return out;
}

template <class T>
BasicTensor<T> bilinear_resample_backward(const Shape& input_shape, const BasicTensor<T>& grad_out) {
    require_rank(input_shape, 3, "bilinear_resample_backward");
    const auto ys = align_corner_axis(input_shape[1], grad_out.dim(1));
    const auto xs = align_corner_axis(input_shape[2], grad_out.dim(2));
    BasicTensor<T> grad(input_shape);
    for (std::size_t ch = 0; ch < input_shape[0]; ++ch) {
        for (std::size_t i = 0; i < ys.size(); ++i) {
            const auto& y = ys[i];
            for (std::size_t j = 0; j < xs.size(); ++j) {
                const auto& x = xs[j];
                const double g = grad_out.at(ch, i, j);
                grad.at(ch, y.lo, x.lo) += static_cast<T>(g * (1.0 - y.frac) * (1.0 - x.frac));
                grad.at(ch, y.lo, x.hi) += static_cast<T>(g * (1.0 - y.frac) * x.frac);
                grad.at(ch, y.hi, x.lo) += static_cast<T>(g * y.frac * (1.0 - x.frac));
                grad.at(ch, y.hi, x.hi) += static_cast<T>(g * y.frac * x.frac);
            }
        }
    }
    return grad;
}

template <class T>
BasicTensor<T> affine_warp(const BasicTensor<T>& input, const Affine2x3<T>& matrix) {
    require_rank(input.shape(), 3, "affine_warp");
    for (T v : matrix) {
        if (!std::isfinite(static_cast<double>(v))) throw Error("affine_warp: matrix must be finite");
    }
    const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    const WarpGeometry geo(h, w);
    BasicTensor<T> out({c, h, w});
    const auto lh = static_cast<long>(h), lw = static_cast<long>(w);
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            double px, py;
            geo.sample_point(matrix, i, j, px, py);
            if (!(px > -1.0 && px < static_cast<double>(w) && py > -1.0 && py < static_cast<double>(h))) continue;
            const auto s = locate(px, py);
            const long xs[2] = {s.x0, s.x0 + 1}, ys[2] = {s.y0, s.y0 + 1};
            const double wx[2] = {1.0 - s.fx, s.fx}, wy[2] = {1.0 - s.fy, s.fy};
            for (std::size_t ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (int a = 0; a < 2; ++a) {
                    if (ys[a] < 0 || ys[a] >= lh) continue;
                    for (int b = 0; b < 2; ++b) {
                        if (xs[b] < 0 || xs[b] >= lw) continue;
                        acc += wy[a] * wx[b] * input.at(ch, static_cast<std::size_t>(ys[a]), static_cast<std::size_t>(xs[b]));
                    }
                }
                out.at(ch, i, j) = static_cast<T>(acc);
            }
        }
    }
    return out;
}

template <class T>
WarpGrads<T> affine_warp_backward(const BasicTensor<T>& input, const Affine2x3<T>& matrix,
                                  const BasicTensor<T>& grad_out, bool need_input) {
    require_rank(input.shape(), 3, "affine_warp_backward");
    if (grad_out.shape() != input.shape()) {
        throw ShapeError("affine_warp_backward: upstream gradient " + shape_string(grad_out.shape()) +
                         " != input shape " + shape_string(input.shape()));
    }
    const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    const WarpGeometry geo(h, w);
    const auto lh = static_cast<long>(h), lw = static_cast<long>(w);
    WarpGrads<T> grads;
    if (need_input) grads.input = BasicTensor<T>(input.shape());
    std::array<double, 6> dm{};

    auto value = [&](std::size_t ch, long y, long x) -> double {
        if (y < 0 || y >= lh || x < 0 || x >= lw) return 0.0;
        return input.at(ch, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
    };

    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            double px, py;
            geo.sample_point(matrix, i, j, px, py);
            if (!(px > -1.0 && px < static_cast<double>(w) && py > -1.0 && py < static_cast<double>(h))) continue;
            const auto s = locate(px, py);
            const double dx = static_cast<double>(j) - geo.cx, dy = static_cast<double>(i) - geo.cy;
            double gpx = 0.0, gpy = 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double g = grad_out.at(ch, i, j);
                if (g == 0.0) continue;
                const double v00 = value(ch, s.y0, s.x0), v01 = value(ch, s.y0, s.x0 + 1);
                const double v10 = value(ch, s.y0 + 1, s.x0), v11 = value(ch, s.y0 + 1, s.x0 + 1);
                gpx += g * ((1.0 - s.fy) * (v01 - v00) + s.fy * (v11 - v10));
                gpy += g * ((1.0 - s.fx) * (v10 - v00) + s.fx * (v11 - v01));
                if (need_input) {
                    const long ys[2] = {s.y0, s.y0 + 1}, xs[2] = {s.x0, s.x0 + 1};
                    const double wy[2] = {1.0 - s.fy, s.fy}, wx[2] = {1.0 - s.fx, s.fx};
                    for (int a = 0; a < 2; ++a) {
                        if (ys[a] < 0 || ys[a] >= lh) continue;
                        for (int b = 0; b < 2; ++b) {
                            if (xs[b] < 0 || xs[b] >= lw) continue;
                            grads.input.at(ch, static_cast<std::size_t>(ys[a]), static_cast<std::size_t>(xs[b])) +=
                                static_cast<T>(g * wy[a] * wx[b]);
                        }
                    }
                }
            }
            dm[0] += gpx * dx;
            dm[1] += gpx * dy * geo.rxy;
            dm[2] += gpx * geo.cx;
            dm[3] += gpy * dx * geo.ryx;
            dm[4] += gpy * dy;
            dm[5] += gpy * geo.cy;
        }
    }
    for (std::size_t k = 0; k < 6; ++k) grads.matrix[k] = static_cast<T>(dm[k]);
    return grads;
}

template <class T>
T sigmoid_scalar(T x) {
    if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
    const T e = std::exp(x);
    return e / (T{1} + e);
}

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
    BasicTensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = sigmoid_scalar(x[i]);
    return y;
}

template <class T>
BasicTensor<T> sigmoid_backward(const BasicTensor<T>& y, const BasicTensor<T>& grad_out) {
    BasicTensor<T> g(y.shape());
    for (std::size_t i = 0; i < y.size(); ++i) g[i] = grad_out[i] * y[i] * (T{1} - y[i]);
    return g;
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
    BasicTensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
    return y;
}

template <class T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out) {
    BasicTensor<T> g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > T{0} ? grad_out[i] : T{0};
    return g;
}

template <class T>
std::vector<T> global_avg_pool(const BasicTensor<T>& input) {
    require_rank(input.shape(), 3, "global_avg_pool");
    const std::size_t c = input.dim(0), plane = input.dim(1) * input.dim(2);
    std::vector<T> out(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        const T* p = input.data() + ch * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
        out[ch] = static_cast<T>(acc / static_cast<double>(plane));
    }
    return out;
}

template <class T>
BasicTensor<T> global_avg_pool_backward(const Shape& input_shape, std::span<const T> grad_out) {
    require_rank(input_shape, 3, "global_avg_pool_backward");
    if (grad_out.size() != input_shape[0]) throw ShapeError("global_avg_pool_backward: channel count mismatch");
    const std::size_t plane = input_shape[1] * input_shape[2];
    BasicTensor<T> grad(input_shape);
    for (std::size_t ch = 0; ch < input_shape[0]; ++ch) {
        const T g = grad_out[ch] / static_cast<T>(plane);
        std::fill(grad.data() + ch * plane, grad.data() + (ch + 1) * plane, g);
    }
    return grad;
}

namespace {

template <class T>
std::pair<std::size_t, std::size_t> argmin_argmax(const BasicTensor<T>& x) {
    std::size_t lo = 0, hi = 0;
    for (std::size_t i = 1; i < x.size(); ++i) {
        if (x[i] < x[lo]) lo = i;
        if (x[i] > x[hi]) hi = i;
    }
    return {lo, hi};
}

}  // namespace

template <class T>
BasicTensor<T> minmax_normalize(const BasicTensor<T>& x) {
    BasicTensor<T> y(x.shape());
    if (x.empty()) return y;
    const auto [lo, hi] = argmin_argmax(x);
    const T mn = x[lo], range = x[hi] - x[lo];
    if (!(range > T{0})) return y;
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::clamp((x[i] - mn) / range, T{0}, T{1});
    return y;
}

template <class T>
BasicTensor<T> minmax_normalize_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out) {
    BasicTensor<T> g(x.shape());
    if (x.empty()) return g;
    const auto [lo, hi] = argmin_argmax(x);
    const T mn = x[lo], range = x[hi] - x[lo];
    if (!(range > T{0})) return g;
    T g_min = 0, g_max = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T y = (x[i] - mn) / range;
        g[i] = grad_out[i] / range;
        g_min += grad_out[i] * (y - T{1}) / range;
        g_max -= grad_out[i] * y / range;
    }
    g[lo] += g_min;
    g[hi] += g_max;
    return g;
}

template <class T>
bool minmax_is_smooth(const BasicTensor<T>& x) {
    if (x.size() < 2) return false;
    const auto [lo, hi] = argmin_argmax(x);
    if (!(x[hi] > x[lo])) return false;
    std::size_t n_lo = 0, n_hi = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        n_lo += x[i] == x[lo];
        n_hi += x[i] == x[hi];
    }
    return n_lo == 1 && n_hi == 1;
}

template <class T>
BasicTensor<T> hflip(const BasicTensor<T>& x) {
    BasicTensor<T> y(x.shape());
    if (x.empty()) return y;
    const std::size_t w = x.shape().back();
    for (std::size_t row = 0; row < x.size() / w; ++row) {
        const T* src = x.data() + row * w;
        T* dst = y.data() + row * w;
        for (std::size_t j = 0; j < w; ++j) dst[j] = src[w - 1 - j];
    }
    return y;
}

template <class T>
BasicTensor<T> fuse_attention(const BasicTensor<T>& features, const BasicTensor<T>& mask) {
    require_rank(features.shape(), 3, "fuse_attention features");
    if (mask.shape() != Shape{features.dim(1), features.dim(2)}) {
        throw ShapeError("fuse_attention: mask " + shape_string(mask.shape()) + " does not match feature maps " +
                         shape_string(features.shape()));
    }
    const std::size_t plane = mask.size();
    BasicTensor<T> out(features.shape());
    for (std::size_t k = 0; k < features.dim(0); ++k) {
        const T* f = features.data() + k * plane;
        T* o = out.data() + k * plane;
        for (std::size_t i = 0; i < plane; ++i) o[i] = mask[i] * f[i] + f[i];
    }
    return out;
}

template <class T>
FuseGrads<T> fuse_attention_backward(const BasicTensor<T>& features, const BasicTensor<T>& mask,
                                     const BasicTensor<T>& grad_out) {
    if (grad_out.shape() != features.shape()) throw ShapeError("fuse_attention_backward: gradient shape mismatch");
    const std::size_t plane = mask.size();
    FuseGrads<T> g{BasicTensor<T>(features.shape()), BasicTensor<T>(mask.shape())};
    for (std::size_t k = 0; k < features.dim(0); ++k) {
        const T* f = features.data() + k * plane;
        const T* go = grad_out.data() + k * plane;
        T* gf = g.features.data() + k * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            gf[i] = (mask[i] + T{1}) * go[i];
            g.mask[i] += f[i] * go[i];
        }
    }
    return g;
}

#define DMLOC_INSTANTIATE(T)                                                                                         \
    template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, std::span<const T>, std::size_t,   \
                                   std::size_t);                                                                     \
    template Conv2dGrads<T> conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&, std::size_t, std::size_t, \
                                            const BasicTensor<T>&, bool, bool);                                      \
    template BasicTensor<T> avg_pool2d(const BasicTensor<T>&, std::size_t, std::size_t);                             \
    template BasicTensor<T> avg_pool2d_backward(const Shape&, std::size_t, std::size_t, const BasicTensor<T>&);      \
    template BasicTensor<T> bilinear_resample(const BasicTensor<T>&, std::size_t, std::size_t);                      \
    template BasicTensor<T> bilinear_resample_backward(const Shape&, const BasicTensor<T>&);                         \
    template BasicTensor<T> affine_warp(const BasicTensor<T>&, const Affine2x3<T>&);                                 \
    template WarpGrads<T> affine_warp_backward(const BasicTensor<T>&, const Affine2x3<T>&, const BasicTensor<T>&,   \
                                               bool);                                                                \
    template T sigmoid_scalar(T);                                                                                    \
    template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                          \
    template BasicTensor<T> sigmoid_backward(const BasicTensor<T>&, const BasicTensor<T>&);                          \
    template BasicTensor<T> relu(const BasicTensor<T>&);                                                             \
    template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);                             \
    template std::vector<T> global_avg_pool(const BasicTensor<T>&);                                                  \
    template BasicTensor<T> global_avg_pool_backward(const Shape&, std::span<const T>);                              \
    template BasicTensor<T> minmax_normalize(const BasicTensor<T>&);                                                 \
    template BasicTensor<T> minmax_normalize_backward(const BasicTensor<T>&, const BasicTensor<T>&);                 \
    template bool minmax_is_smooth(const BasicTensor<T>&);                                                           \
    template BasicTensor<T> hflip(const BasicTensor<T>&);                                                            \
    template BasicTensor<T> fuse_attention(const BasicTensor<T>&, const BasicTensor<T>&);                            \
    template FuseGrads<T> fuse_attention_backward(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);

DMLOC_INSTANTIATE(float)
DMLOC_INSTANTIATE(double)

#undef DMLOC_INSTANTIATE

// ---- GradPair wrappers ------------------------------------------------------

GradPair conv2d_op(const Tensor& input, const Tensor& kernels, std::span<const float> bias, std::size_t stride,
                   std::size_t padding) {
    GradPair gp{conv2d(input, kernels, bias, stride, padding), {}};
    gp.backward = [input, kernels, stride, padding](const Tensor& up) {
        auto g = conv2d_backward(input, kernels, stride, padding, up);
        const std::size_t c_out = g.bias.size();
        Tensor gb({c_out}, std::move(g.bias));
        return std::vector<Tensor>{std::move(g.input), std::move(g.kernels), std::move(gb)};
    };
    return gp;
}

GradPair avg_pool2d_op(const Tensor& input, std::size_t kernel, std::size_t stride) {
    GradPair gp{avg_pool2d(input, kernel, stride), {}};
    gp.backward = [shape = input.shape(), kernel, stride](const Tensor& up) {
        return std::vector<Tensor>{avg_pool2d_backward(shape, kernel, stride, up)};
    };
    return gp;
}

GradPair bilinear_resample_op(const Tensor& input, std::size_t out_h, std::size_t out_w) {
    GradPair gp{bilinear_resample(input, out_h, out_w), {}};
    gp.backward = [shape = input.shape()](const Tensor& up) {
        return std::vector<Tensor>{bilinear_resample_backward(shape, up)};
    };
    return gp;
}

GradPair affine_warp_op(const Tensor& input, const Affine2x3<float>& matrix) {
    GradPair gp{affine_warp(input, matrix), {}};
    gp.backward = [input, matrix](const Tensor& up) {
        auto g = affine_warp_backward(input, matrix, up);
        Tensor gm({2, 3}, std::vector<float>(g.matrix.begin(), g.matrix.end()));
        return std::vector<Tensor>{std::move(g.input), std::move(gm)};
    };
    return gp;
}

GradPair sigmoid_op(const Tensor& x) {
    GradPair gp{sigmoid(x), {}};
    gp.backward = [y = gp.value](const Tensor& up) { return std::vector<Tensor>{sigmoid_backward(y, up)}; };
    return gp;
}

GradPair global_avg_pool_op(const Tensor& input) {
    auto means = global_avg_pool(input);
    const std::size_t channels = means.size();
    GradPair gp{Tensor({channels}, std::move(means)), {}};
    gp.backward = [shape = input.shape()](const Tensor& up) {
        return std::vector<Tensor>{global_avg_pool_backward<float>(shape, up.values())};
    };
    return gp;
}

GradPair minmax_normalize_op(const Tensor& x) {
    GradPair gp{minmax_normalize(x), {}};
    gp.backward = [x](const Tensor& up) { return std::vector<Tensor>{minmax_normalize_backward(x, up)}; };
    return gp;
}

GradPair hflip_op(const Tensor& x) {
    GradPair gp{hflip(x), {}};
    gp.backward = [](const Tensor& up) { return std::vector<Tensor>{hflip(up)}; };
    return gp;
}

GradPair fuse_attention_op(const Tensor& features, const Tensor& mask) {
    GradPair gp{fuse_attention(features, mask), {}};
    gp.backward = [features, mask](const Tensor& up) {
        auto g = fuse_attention_backward(features, mask, up);
        return std::vector<Tensor>{std::move(g.features), std::move(g.mask)};
    };
    return gp;
}

}  // namespace dmloc
