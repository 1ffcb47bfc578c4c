// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <array>

#include "featsplat/common.hpp"
#include "featsplat/gaussian.hpp"

namespace featsplat {

// Real spherical harmonics basis up to degree 3 in the ordering used by
// splatting renderers (band-major, DC first).
namespace sh_const {
inline constexpr double C0 = 0.28209479177387814;
inline constexpr double C1 = 0.4886025119029199;
inline constexpr std::array<double, 5> C2 = {1.0925484305920792, -1.0925484305920792,
                                             0.31539156525252005, -1.0925484305920792,
                                             0.5462742152960396};
inline constexpr std::array<double, 7> C3 = {-0.5900435899266435, 2.890611442640554,
                                             -0.4570457994644658, 0.3731763325901154,
                                             -0.4570457994644658, 1.445305721320277,
                                             -0.5900435899266435};
}  // namespace sh_const

// Fills basis[0..(degree+1)^2) for a unit direction.
inline void sh_basis(int degree, const Eigen::Vector3d& dir, double* basis) {
    using namespace sh_const;
    basis[0] = C0;
    if (degree < 1) return;
    const double x = dir.x(), y = dir.y(), z = dir.z();
    basis[1] = -C1 * y;
    basis[2] = C1 * z;
    basis[3] = -C1 * x;
    if (degree < 2) return;
    const double xx = x * x, yy = y * y, zz = z * z;
    const double xy = x * y, yz = y * z, xz = x * z;
    basis[4] = C2[0] * xy;
    basis[5] = C2[1] * yz;
    basis[6] = C2[2] * (2.0 * zz - xx - yy);
    basis[7] = C2[3] * xz;
    basis[8] = C2[4] * (xx - yy);
    if (degree < 3) return;
    basis[9] = C3[0] * y * (3.0 * xx - yy);
    basis[10] = C3[1] * xy * z;
    basis[11] = C3[2] * y * (4.0 * zz - xx - yy);
    basis[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    basis[13] = C3[4] * x * (4.0 * zz - xx - yy);
    basis[14] = C3[5] * z * (xx - yy);
    basis[15] = C3[6] * x * (xx - 3.0 * yy);
}

// d basis_l / d dir for each basis function (gradient w.r.t. the unit direction
// before renormalization; the projection onto the sphere happens in the caller).
inline void sh_basis_grad(int degree, const Eigen::Vector3d& dir, Eigen::Vector3d* grad) {
    using namespace sh_const;
    grad[0].setZero();
    if (degree < 1) return;
    const double x = dir.x(), y = dir.y(), z = dir.z();
    grad[1] = {0.0, -C1, 0.0};
    grad[2] = {0.0, 0.0, C1};
    grad[3] = {-C1, 0.0, 0.0};
    if (degree < 2) return;
    const double xx = x * x, yy = y * y, zz = z * z;
    grad[4] = {C2[0] * y, C2[0] * x, 0.0};
    grad[5] = {0.0, C2[1] * z, C2[1] * y};
    grad[6] = {-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z};
    grad[7] = {C2[3] * z, 0.0, C2[3] * x};
    grad[8] = {2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0};
    if (degree < 3) return;
    grad[9] = {C3[0] * 6.0 * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0};
    grad[10] = {C3[1] * y * z, C3[1] * x * z, C3[1] * x * y};
    grad[11] = {-2.0 * C3[2] * x * y, C3[2] * (4.0 * zz - xx - 3.0 * yy), 8.0 * C3[2] * y * z};
    grad[12] = {-6.0 * C3[3] * x * z, -6.0 * C3[3] * y * z, C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)};
    grad[13] = {C3[4] * (4.0 * zz - 3.0 * xx - yy), -2.0 * C3[4] * x * y, 8.0 * C3[4] * x * z};
    grad[14] = {2.0 * C3[5] * x * z, -2.0 * C3[5] * y * z, C3[5] * (xx - yy)};
    grad[15] = {C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * C3[6] * x * y, 0.0};
}

// View-dependent color: 0.5 offset, clamped to >= 0. clamped[c] reports which
// channels hit the clamp (their gradients vanish).
inline Eigen::Vector3d eval_sh(int degree, const std::vector<double>& sh_coeffs,
                               const Eigen::Vector3d& view_direction,
                               std::array<bool, 3>* clamped = nullptr) {
    const int n = sh_coeff_count(degree);
    require(static_cast<int>(sh_coeffs.size()) == 3 * n, "eval_sh: coefficient count mismatch");
    double basis[16];
    sh_basis(degree, view_direction, basis);
    Eigen::Vector3d rgb;
    for (int c = 0; c < 3; ++c) {
        double v = 0.5;
        for (int l = 0; l < n; ++l) v += basis[l] * sh_coeffs[l * 3 + c];
        if (clamped) (*clamped)[c] = v < 0.0;
        rgb[c] = std::max(0.0, v);
    }
    return rgb;
}

}  // namespace featsplat
