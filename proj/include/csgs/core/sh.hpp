#pragma once

#include "csgs/core/gaussian.hpp"

#include <array>

namespace csgs {

// Real spherical harmonic basis up to degree 2, 3DGS coefficient ordering.
inline constexpr double kSH0 = 0.28209479177387814;
inline constexpr double kSH1 = 0.4886025119029199;
inline constexpr std::array<double, 5> kSH2 = {
    1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
    -1.0925484305920792, 0.5462742152960396};

inline int sh_coeff_count(int degree) { return (degree + 1) * (degree + 1); }

// basis[k] for unit direction d; n must be (deg+1)^2.
inline void sh_basis(const Vec3& d, int n, double* basis) {
    basis[0] = kSH0;
    if (n <= 1) return;
    const double x = d.x(), y = d.y(), z = d.z();
    basis[1] = -kSH1 * y;
    basis[2] = kSH1 * z;
    basis[3] = -kSH1 * x;
    if (n <= 4) return;
    basis[4] = kSH2[0] * x * y;
    basis[5] = kSH2[1] * y * z;
    basis[6] = kSH2[2] * (2 * z * z - x * x - y * y);
    basis[7] = kSH2[3] * x * z;
    basis[8] = kSH2[4] * (x * x - y * y);
}

// d(basis[k])/d(direction), rows indexed by k.
inline void sh_basis_grad(const Vec3& d, int n, Vec3* grad) {
    grad[0] = Vec3::Zero();
    if (n <= 1) return;
    const double x = d.x(), y = d.y(), z = d.z();
    grad[1] = Vec3(0, -kSH1, 0);
    grad[2] = Vec3(0, 0, kSH1);
    grad[3] = Vec3(-kSH1, 0, 0);
    if (n <= 4) return;
    grad[4] = Vec3(kSH2[0] * y, kSH2[0] * x, 0);
    grad[5] = Vec3(0, kSH2[1] * z, kSH2[1] * y);
    grad[6] = Vec3(-2 * kSH2[2] * x, -2 * kSH2[2] * y, 4 * kSH2[2] * z);
    grad[7] = Vec3(kSH2[3] * z, 0, kSH2[3] * x);
    grad[8] = Vec3(0, kSH2[4] * z, kSH2[4] * y);
}

// View-dependent color: logistic of the SH expansion per channel, so every
// rendered color stays in (0,1) and blending keeps images in range.
inline Vec3 sh_color(const GaussianPrimitive& p, const Vec3& view_dir_unit) {
    const int n = static_cast<int>(p.color_coeffs.size());
    double basis[9];
    sh_basis(view_dir_unit, n, basis);
    Vec3 pre = Vec3::Zero();
    for (int k = 0; k < n; ++k) pre += basis[k] * p.color_coeffs[k];
    return pre.unaryExpr([](double v) { return logistic(v); });
}

// Backward of sh_color: accumulates coefficient grads and returns the grad
// w.r.t. the unit view direction.
inline Vec3 sh_color_backward(const GaussianPrimitive& p, const Vec3& view_dir_unit,
                              const Vec3& color, const Vec3& g_color,
                              std::vector<Vec3>& g_coeffs) {
    const int n = static_cast<int>(p.color_coeffs.size());
    double basis[9];
    Vec3 basis_grad[9];
    sh_basis(view_dir_unit, n, basis);
    sh_basis_grad(view_dir_unit, n, basis_grad);
    // d(logistic)/d(pre) = c (1 - c)
    const Vec3 g_pre = g_color.array() * color.array() * (1.0 - color.array());
    Vec3 g_dir = Vec3::Zero();
    for (int k = 0; k < n; ++k) {
        g_coeffs[k] += basis[k] * g_pre;
        g_dir += basis_grad[k] * g_pre.dot(p.color_coeffs[k]);
    }
    return g_dir;
}

}  // namespace csgs
