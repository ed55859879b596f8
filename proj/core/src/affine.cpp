#include "dmloc/affine.hpp"

#include <cmath>
#include <numbers>

namespace dmloc {

bool AffineParams::valid() const {
    for (float v : as_array()) {
        if (!std::isfinite(v)) return false;
    }
    return std::abs(theta) < std::numbers::pi_v<float>;
}

template <class T>
Affine2x3<T> affine_matrix_of(const std::array<T, 5>& p) {
    const T c = std::cos(p[4]), s = std::sin(p[4]);
    return {p[0] * c, -p[1] * s, p[2], p[0] * s, p[1] * c, p[3]};
}

template <class T>
std::array<T, 5> affine_params_backward_of(const std::array<T, 5>& p, const Affine2x3<T>& g) {
    const T c = std::cos(p[4]), s = std::sin(p[4]);
    return {
        g[0] * c + g[3] * s,
        -g[1] * s + g[4] * c,
        g[2],
        g[5],
        g[0] * (-p[0] * s) + g[1] * (-p[1] * c) + g[3] * (p[0] * c) + g[4] * (-p[1] * s),
    };
}

template Affine2x3<float> affine_matrix_of(const std::array<float, 5>&);
template Affine2x3<double> affine_matrix_of(const std::array<double, 5>&);
template std::array<float, 5> affine_params_backward_of(const std::array<float, 5>&, const Affine2x3<float>&);
template std::array<double, 5> affine_params_backward_of(const std::array<double, 5>&, const Affine2x3<double>&);

Affine2x3<float> affine_matrix(const AffineParams& p) { return affine_matrix_of(p.as_array()); }

Affine2x3<double> affine_matrix64(const AffineParams& p) {
    const double c = std::cos(double(p.theta)), s = std::sin(double(p.theta));
    return {p.sx * c, -p.sy * s, double(p.tx), p.sx * s, p.sy * c, double(p.ty)};
}

std::array<float, 5> affine_params_backward(const AffineParams& p, const Affine2x3<float>& g) {
    return affine_params_backward_of(p.as_array(), g);
}

Affine2x3<double> invert_affine(const Affine2x3<double>& m) {
    const double det = m[0] * m[4] - m[1] * m[3];
    if (std::abs(det) < 1e-12) throw Error("invert_affine: singular matrix");
    const double a = m[4] / det, b = -m[1] / det, c = -m[3] / det, d = m[0] / det;
    return {a, b, -(a * m[2] + b * m[5]), c, d, -(c * m[2] + d * m[5])};
}

std::pair<double, double> map_edge_point(const Affine2x3<double>& m, double x, double y, std::size_t h,
                                         std::size_t w) {
    const double cx = (double(w) - 1.0) / 2.0, cy = (double(h) - 1.0) / 2.0;
    const double xn = (x - 0.5 - cx) / cx, yn = (y - 0.5 - cy) / cy;
    const double xs = m[0] * xn + m[1] * yn + m[2];
    const double ys = m[3] * xn + m[4] * yn + m[5];
    return {xs * cx + cx + 0.5, ys * cy + cy + 0.5};
}

std::array<double, 4> map_edge_ellipse(const Affine2x3<double>& m, double x, double y, double w, double h,
                                       std::size_t size) {
    const double cx = x + w / 2, cy = y + h / 2;
    const auto [mx, my] = map_edge_point(m, cx, cy, size, size);
    // The map is affine, so unit steps give the Jacobian exactly.
    const auto [ux, uy] = map_edge_point(m, cx + 1.0, cy, size, size);
    const auto [vx, vy] = map_edge_point(m, cx, cy + 1.0, size, size);
    const double a = w / 2, b = h / 2;
    const double hx = std::hypot((ux - mx) * a, (vx - mx) * b);
    const double hy = std::hypot((uy - my) * a, (vy - my) * b);
    return {mx - hx, my - hy, mx + hx, my + hy};
}

}  // namespace dmloc
