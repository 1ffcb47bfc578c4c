// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <featsplat/camera.hpp>
#include <featsplat/gaussian.hpp>
#include <featsplat/rasterizer.hpp>

namespace featsplat::testutil {

// Random scene tuned for numerical tests: moderate opacities (no alpha clamp),
// splats well inside the frustum, depths spread out so finite differences do
// not cross sorting or compositing discontinuities.
inline Scene random_scene(Rng& rng, int gaussians, int feature_dim, int sh_degree) {
    Scene scene;
    scene.feature_dim = feature_dim;
    scene.sh_degree = sh_degree;
    const int n_sh = sh_coeff_count(sh_degree);
    for (int i = 0; i < gaussians; ++i) {
        Gaussian3D g;
        g.mean = {rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8),
                  rng.uniform(-0.6, 0.6) + 0.25 * i};
        for (int k = 0; k < 3; ++k) g.log_scale[k] = std::log(rng.uniform(0.1, 0.35));
        Eigen::Vector4d q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        g.rotation = q.normalized();
        g.opacity_logit = rng.uniform(0.0, 2.0);
        g.sh.assign(static_cast<std::size_t>(3) * n_sh, 0.0);
        for (int c = 0; c < 3; ++c) {
            g.sh_at(0, c) = rng.uniform(-0.8, 0.8);
            for (int l = 1; l < n_sh; ++l) g.sh_at(l, c) = rng.uniform(-0.15, 0.15);
        }
        g.feature.resize(feature_dim);
        for (double& f : g.feature) f = rng.uniform();
        scene.gaussians.push_back(std::move(g));
    }
    return scene;
}

inline CameraView test_camera(int width, int height, double distance = 5.0) {
    return make_lookat_camera(Eigen::Vector3d(0.3, -0.2, -distance), Eigen::Vector3d::Zero(),
                              width, height, 0.9 * width);
}

// Fixed-weight scalar functional of a render; the loss both gradient-check
// sides differentiate.
inline FeatureImage random_weight_image(Rng& rng, int h, int w, int c) {
    FeatureImage img(h, w, c);
    for (double& v : img.data) v = rng.uniform(-1.0, 1.0);
    return img;
}

inline double weighted_sum(const FeatureImage& img, const FeatureImage& weights) {
    double s = 0.0;
    for (std::size_t i = 0; i < img.data.size(); ++i) s += img.data[i] * weights.data[i];
    return s;
}

// Byte hashes over parameter groups, for bitwise trajectory comparisons.
inline std::uint64_t fnv_mix(std::uint64_t h, const void* p, std::size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t geometry_hash(const Scene& scene, std::uint64_t h = 1469598103934665603ULL) {
    for (const auto& g : scene.gaussians) {
        h = fnv_mix(h, g.mean.data(), 3 * sizeof(double));
        h = fnv_mix(h, g.log_scale.data(), 3 * sizeof(double));
        h = fnv_mix(h, g.rotation.data(), 4 * sizeof(double));
        h = fnv_mix(h, &g.opacity_logit, sizeof(double));
        h = fnv_mix(h, g.sh.data(), g.sh.size() * sizeof(double));
    }
    return h;
}

inline std::uint64_t feature_hash(const Scene& scene, std::uint64_t h = 1469598103934665603ULL) {
    for (const auto& g : scene.gaussians)
        h = fnv_mix(h, g.feature.data(), g.feature.size() * sizeof(double));
    h = fnv_mix(h, scene.decoder.kernel.data(),
                scene.decoder.kernel.size() * sizeof(double));
    h = fnv_mix(h, scene.decoder.bias.data(), scene.decoder.bias.size() * sizeof(double));
    return h;
}

}  // namespace featsplat::testutil
