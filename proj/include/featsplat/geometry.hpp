// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <optional>

#include "featsplat/camera.hpp"
#include "featsplat/gaussian.hpp"

namespace featsplat {

// Rotation matrix from a unit quaternion (w, x, y, z).
inline Eigen::Matrix3d quat_to_rotation(const Eigen::Vector4d& q) {
    const double r = q[0], x = q[1], y = q[2], z = q[3];
    Eigen::Matrix3d m;
    m << 1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - r * z), 2.0 * (x * z + r * y),
         2.0 * (x * y + r * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - r * x),
         2.0 * (x * z - r * y), 2.0 * (y * z + r * x), 1.0 - 2.0 * (x * x + y * y);
    return m;
}

// Backward of quat_to_rotation: contracts dL/dR with dR/dq for a unit q.
inline Eigen::Vector4d quat_rotation_backward(const Eigen::Vector4d& q,
                                              const Eigen::Matrix3d& grad_r) {
    const double r = q[0], x = q[1], y = q[2], z = q[3];
    Eigen::Matrix3d dr, dx, dy, dz;
    dr << 0, -2 * z, 2 * y,
          2 * z, 0, -2 * x,
          -2 * y, 2 * x, 0;
    dx << 0, 2 * y, 2 * z,
          2 * y, -4 * x, -2 * r,
          2 * z, 2 * r, -4 * x;
    dy << -4 * y, 2 * x, 2 * r,
          2 * x, 0, 2 * z,
          -2 * r, 2 * z, -4 * y;
    dz << -4 * z, -2 * r, 2 * x,
          2 * r, -4 * z, 2 * y,
          2 * x, 2 * y, 0;
    return {grad_r.cwiseProduct(dr).sum(), grad_r.cwiseProduct(dx).sum(),
            grad_r.cwiseProduct(dy).sum(), grad_r.cwiseProduct(dz).sum()};
}

// Gradient through q = q_raw / |q_raw|.
inline Eigen::Vector4d quat_normalize_backward(const Eigen::Vector4d& q_raw,
                                               const Eigen::Vector4d& grad_unit) {
    const double n = q_raw.norm();
    const Eigen::Vector4d q = q_raw / n;
    return (grad_unit - q * q.dot(grad_unit)) / n;
}

// Sigma = R * S * S^T * R^T with S = diag(scale). Symmetric positive-definite
// for positive scales.
inline Eigen::Matrix3d covariance_3d(const Eigen::Vector3d& scale, const Eigen::Vector4d& rotation) {
    const Eigen::Matrix3d r = quat_to_rotation(rotation);
    const Eigen::Matrix3d m = r * scale.asDiagonal();
    return m * m.transpose();
}

// 2D projection intermediate for one Gaussian in one view.
struct Splat2D {
    Eigen::Vector2d mean2d = Eigen::Vector2d::Zero();  // pixels
    Eigen::Matrix2d cov2d = Eigen::Matrix2d::Zero();   // pixels^2, regularized
    double depth = 0.0;                                // camera-space z
    int gaussian_index = -1;
};

namespace proj {
// Near plane and the 2D covariance regularization floor (anti-aliasing).
inline constexpr double kNearPlane = 0.01;
inline constexpr double kCovRegularization = 0.3;
// 99%-confidence cull radius in units of sqrt(max eigenvalue).
inline constexpr double kCullSigma = 3.0;
}  // namespace proj

// Jacobian of the pinhole projection at camera-space point t.
inline Eigen::Matrix<double, 2, 3> projection_jacobian(const CameraView& cam,
                                                       const Eigen::Vector3d& t) {
    const double inv_z = 1.0 / t.z();
    const double inv_z2 = inv_z * inv_z;
    Eigen::Matrix<double, 2, 3> j;
    j << cam.fx * inv_z, 0.0, -cam.fx * t.x() * inv_z2,
         0.0, cam.fy * inv_z, -cam.fy * t.y() * inv_z2;
    return j;
}

inline double cov2d_max_eigenvalue(const Eigen::Matrix2d& cov) {
    const double mid = 0.5 * (cov(0, 0) + cov(1, 1));
    const double half = 0.5 * (cov(0, 0) - cov(1, 1));
    const double disc = std::sqrt(std::max(0.0, half * half + cov(0, 1) * cov(1, 0)));
    return mid + disc;
}

// Projects one Gaussian. Returns nullopt (CULLED) when the camera-space depth is
// at or behind the near plane or the 99%-confidence ellipse misses the image
// rectangle. On success the 2D covariance carries the +0.3 px^2 diagonal floor.
inline std::optional<Splat2D> project_gaussian(const Gaussian3D& g, const CameraView& cam,
                                               int gaussian_index = -1) {
    const Eigen::Vector3d t = cam.to_camera(g.mean);
    if (t.z() <= proj::kNearPlane) return std::nullopt;

    Splat2D s;
    s.depth = t.z();
    s.gaussian_index = gaussian_index;
    s.mean2d = {cam.fx * t.x() / t.z() + cam.cx, cam.fy * t.y() / t.z() + cam.cy};

    const Eigen::Matrix3d sigma = covariance_3d(g.scale(), g.unit_rotation());
    const Eigen::Matrix<double, 2, 3> jw = projection_jacobian(cam, t) * cam.rotation();
    s.cov2d = jw * sigma * jw.transpose();
    s.cov2d(0, 0) += proj::kCovRegularization;
    s.cov2d(1, 1) += proj::kCovRegularization;

    const double radius = proj::kCullSigma * std::sqrt(cov2d_max_eigenvalue(s.cov2d));
    if (s.mean2d.x() + radius < 0.0 || s.mean2d.x() - radius > cam.width ||
        s.mean2d.y() + radius < 0.0 || s.mean2d.y() - radius > cam.height) {
        return std::nullopt;
    }
    return s;
}

}  // namespace featsplat
