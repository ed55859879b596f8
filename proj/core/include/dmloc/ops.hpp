#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "dmloc/tensor.hpp"

// Differentiable operators. Every forward has a matching *_backward that maps
// an upstream gradient (shape of the forward output) onto the gradients of the
// inputs. All operators are templated over the scalar so the finite-difference
// oracles can run the same forward in double precision.

namespace dmloc {

/// Row-major 2x3 affine matrix [[m00,m01,m02],[m10,m11,m12]] acting on
/// normalized coordinates in [-1,1]^2.
template <class T>
using Affine2x3 = std::array<T, 6>;

template <class T>
constexpr Affine2x3<T> identity_affine() {
    return {T{1}, T{0}, T{0}, T{0}, T{1}, T{0}};
}

// ---- conv2d ---------------------------------------------------------------

template <class T>
struct Conv2dGrads {
    BasicTensor<T> input;    // empty when not requested
    BasicTensor<T> kernels;  // empty when not requested
    std::vector<T> bias;
};

std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t padding);

/// input [C_in,H,W], kernels [C_out,C_in,k,k], bias of length C_out (or empty
/// for no bias). Zero padding.
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernels, std::span<const T> bias,
                      std::size_t stride, std::size_t padding);

template <class T>
Conv2dGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& kernels, std::size_t stride,
                               std::size_t padding, const BasicTensor<T>& grad_out, bool need_input = true,
                               bool need_kernels = true);

// ---- pooling / resampling -------------------------------------------------

template <class T>
BasicTensor<T> avg_pool2d(const BasicTensor<T>& input, std::size_t kernel, std::size_t stride);

template <class T>
BasicTensor<T> avg_pool2d_backward(const Shape& input_shape, std::size_t kernel, std::size_t stride,
                                   const BasicTensor<T>& grad_out);

/// Bilinear resize with the align-corners convention.
template <class T>
BasicTensor<T> bilinear_resample(const BasicTensor<T>& input, std::size_t out_h, std::size_t out_w);

template <class T>
BasicTensor<T> bilinear_resample_backward(const Shape& input_shape, const BasicTensor<T>& grad_out);

// ---- affine warp ----------------------------------------------------------

template <class T>
struct WarpGrads {
    BasicTensor<T> input;
    Affine2x3<T> matrix{};
};

/// out(u) = input(M u), bilinear sampling, zero outside the canvas. Pixel
/// centres span [-1,1] corner to corner, so the identity matrix samples
/// exactly on the grid.
template <class T>
BasicTensor<T> affine_warp(const BasicTensor<T>& input, const Affine2x3<T>& matrix);

template <class T>
WarpGrads<T> affine_warp_backward(const BasicTensor<T>& input, const Affine2x3<T>& matrix,
                                  const BasicTensor<T>& grad_out, bool need_input = true);

// ---- elementwise ----------------------------------------------------------

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);

/// Takes the forward output y = sigmoid(x).
template <class T>
BasicTensor<T> sigmoid_backward(const BasicTensor<T>& y, const BasicTensor<T>& grad_out);

template <class T>
T sigmoid_scalar(T x);

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x);

template <class T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out);

// ---- reductions / normalisation -------------------------------------------

/// Channel-wise mean over the trailing two axes of [C,H,W].
template <class T>
std::vector<T> global_avg_pool(const BasicTensor<T>& input);

template <class T>
BasicTensor<T> global_avg_pool_backward(const Shape& input_shape, std::span<const T> grad_out);

/// (x - min) / (max - min); all zeros when max == min.
template <class T>
BasicTensor<T> minmax_normalize(const BasicTensor<T>& x);

template <class T>
BasicTensor<T> minmax_normalize_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out);

/// True when min and max are each attained at a single element and differ.
template <class T>
bool minmax_is_smooth(const BasicTensor<T>& x);

/// Reverses the last axis.
template <class T>
BasicTensor<T> hflip(const BasicTensor<T>& x);

// ---- attention fusion -----------------------------------------------------

template <class T>
struct FuseGrads {
    BasicTensor<T> features;
    BasicTensor<T> mask;
};

/// f'_k = mask * f_k + f_k for every channel k. features [C,p,p], mask [p,p].
template <class T>
BasicTensor<T> fuse_attention(const BasicTensor<T>& features, const BasicTensor<T>& mask);

template <class T>
FuseGrads<T> fuse_attention_backward(const BasicTensor<T>& features, const BasicTensor<T>& mask,
                                     const BasicTensor<T>& grad_out);

// ---- GradPair wrappers (float) --------------------------------------------

GradPair conv2d_op(const Tensor& input, const Tensor& kernels, std::span<const float> bias, std::size_t stride,
                   std::size_t padding);
GradPair avg_pool2d_op(const Tensor& input, std::size_t kernel, std::size_t stride);
GradPair bilinear_resample_op(const Tensor& input, std::size_t out_h, std::size_t out_w);
/// Backward yields {d_input, d_matrix as a [2,3] tensor}.
GradPair affine_warp_op(const Tensor& input, const Affine2x3<float>& matrix);
GradPair sigmoid_op(const Tensor& x);
GradPair global_avg_pool_op(const Tensor& input);
GradPair minmax_normalize_op(const Tensor& x);
GradPair hflip_op(const Tensor& x);
GradPair fuse_attention_op(const Tensor& features, const Tensor& mask);

}  // namespace dmloc
