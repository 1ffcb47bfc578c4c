// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <string>

#include "featsplat/common.hpp"

namespace featsplat {

// Pinhole camera for one registered view. world_to_camera maps world points into
// the camera frame (+z forward, +y down); projection is u = fx*x/z + cx.
struct CameraView {
    int width = 0;
    int height = 0;
    double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;
    Eigen::Matrix4d world_to_camera = Eigen::Matrix4d::Identity();
    std::string image_path;
    std::string feature_path;

    Eigen::Matrix3d rotation() const { return world_to_camera.topLeftCorner<3, 3>(); }
    Eigen::Vector3d translation() const { return world_to_camera.topRightCorner<3, 1>(); }

    Eigen::Vector3d to_camera(const Eigen::Vector3d& p_world) const {
        return rotation() * p_world + translation();
    }

    Eigen::Vector3d position() const {
        return -(rotation().transpose() * translation());
    }

    // Same view at a different raster resolution; intrinsics scale proportionally.
    CameraView scaled_to(int out_width, int out_height) const {
        CameraView c = *this;
        const double sx = static_cast<double>(out_width) / width;
        const double sy = static_cast<double>(out_height) / height;
        c.width = out_width;
        c.height = out_height;
        c.fx = fx * sx;
        c.cx = cx * sx;
        c.fy = fy * sy;
        c.cy = cy * sy;
        return c;
    }

    void validate() const {
        require(width > 0 && height > 0, "camera: non-positive image size");
        require(fx > 0.0 && fy > 0.0, "camera: focal lengths must be positive");
        Eigen::Matrix3d r = rotation();
        Eigen::Matrix3d err = r * r.transpose() - Eigen::Matrix3d::Identity();
        require(err.cwiseAbs().maxCoeff() < 1e-6, "camera: rotation block not orthonormal");
        Eigen::RowVector4d bottom = world_to_camera.row(3);
        require((bottom - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() < 1e-9,
                "camera: bottom row of world_to_camera must be [0 0 0 1]");
    }
};

// Camera at `position` looking at `target` (+y-down image convention).
inline CameraView make_lookat_camera(const Eigen::Vector3d& position, const Eigen::Vector3d& target,
                                     int width, int height, double focal,
                                     const Eigen::Vector3d& up_hint = Eigen::Vector3d(0, -1, 0)) {
    Eigen::Vector3d forward = (target - position).normalized();
    Eigen::Vector3d right = forward.cross(-up_hint).normalized();
    if (!right.allFinite() || right.norm() < 1e-9) {
        right = forward.cross(Eigen::Vector3d(1, 0, 0)).normalized();
    }
    Eigen::Vector3d down = forward.cross(right).normalized();

    Eigen::Matrix3d r_cam_from_world;
    r_cam_from_world.row(0) = right.transpose();
    r_cam_from_world.row(1) = down.transpose();
    r_cam_from_world.row(2) = forward.transpose();

    CameraView cam;
    cam.width = width;
    cam.height = height;
    cam.fx = cam.fy = focal;
    cam.cx = width * 0.5;
    cam.cy = height * 0.5;
    cam.world_to_camera.setIdentity();
    cam.world_to_camera.topLeftCorner<3, 3>() = r_cam_from_world;
    cam.world_to_camera.topRightCorner<3, 1>() = -r_cam_from_world * position;
    return cam;
}

}  // namespace featsplat
