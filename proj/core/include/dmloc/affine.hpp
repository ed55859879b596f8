#pragma once

#include <array>
#include <cstddef>
#include <utility>

#include "dmloc/ops.hpp"

namespace dmloc {

/// Five-parameter pose: per-axis scale, normalized translation, rotation in
/// radians.
struct AffineParams {
    float sx = 1.0f;
    float sy = 1.0f;
    float tx = 0.0f;
    float ty = 0.0f;
    float theta = 0.0f;

    bool valid() const;
    std::array<float, 5> as_array() const { return {sx, sy, tx, ty, theta}; }
    static AffineParams from_array(const std::array<float, 5>& v) { return {v[0], v[1], v[2], v[3], v[4]}; }
    friend bool operator==(const AffineParams&, const AffineParams&) = default;
};

/// [[sx cos t, -sy sin t, tx], [sx sin t, sy cos t, ty]]
Affine2x3<float> affine_matrix(const AffineParams& p);

/// Same layout from a raw (sx, sy, tx, ty, theta) vector in any precision.
template <class T>
Affine2x3<T> affine_matrix_of(const std::array<T, 5>& p);
template <class T>
std::array<T, 5> affine_params_backward_of(const std::array<T, 5>& p, const Affine2x3<T>& grad_matrix);
Affine2x3<double> affine_matrix64(const AffineParams& p);

/// d(matrix entries)/d(params) contracted with a matrix gradient, in
/// (sx, sy, tx, ty, theta) order.
std::array<float, 5> affine_params_backward(const AffineParams& p, const Affine2x3<float>& grad_matrix);

Affine2x3<double> invert_affine(const Affine2x3<double>& m);

/// Maps a point given in pixel-edge coordinates (pixel j spans [j, j+1))
/// through a normalized-coordinate affine on an h x w canvas.
std::pair<double, double> map_edge_point(const Affine2x3<double>& m, double x, double y, std::size_t h,
                                         std::size_t w);

/// Axis-aligned extent {x0, y0, x1, y1} of the ellipse inscribed in the box
/// (x, y, w, h) after mapping it through `m`. Exact for elliptical content;
/// unlike mapping the corners it does not grow a round object under rotation.
std::array<double, 4> map_edge_ellipse(const Affine2x3<double>& m, double x, double y, double w, double h,
                                       std::size_t size);

}  // namespace dmloc
