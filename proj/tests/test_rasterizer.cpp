// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cstdlib>
#include <cstring>
#include <featsplat/rasterizer.hpp>
#include <featsplat/synth.hpp>

#include "support/test_utils.hpp"

using namespace featsplat;

namespace {

// Straight-on camera; cx/cy land on a pixel center when size is even.
CameraView centered_camera(int size) {
    CameraView cam;
    cam.width = cam.height = size;
    cam.fx = cam.fy = 0.9 * size;
    cam.cx = cam.cy = size / 2 + 0.5;
    return cam;
}

Gaussian3D make_gaussian(const Eigen::Vector3d& mean, double scale, double opacity,
                         const Eigen::Vector3d& dc_color, int feature_dim, int sh_degree) {
    Gaussian3D g;
    g.mean = mean;
    g.log_scale.setConstant(std::log(scale));
    g.opacity_logit = logit(opacity);
    g.sh.assign(static_cast<std::size_t>(3) * sh_coeff_count(sh_degree), 0.0);
    for (int c = 0; c < 3; ++c) g.sh_at(0, c) = (dc_color[c] - 0.5) / 0.2820948;
    g.feature.assign(feature_dim, 0.0);
    return g;
}

// Pixels where the fast path terminated early are exactly those with fewer
// composited contributors than the reference.
void check_fast_matches_reference(const Scene& scene, const CameraView& cam, ChannelMode mode,
                                  const Eigen::Vector3d& bg, double tol) {
    const RenderOutput fast = mode == ChannelMode::kRgb
                                  ? rasterize_rgb(scene, cam, bg)
                                  : rasterize_features(scene, cam, cam.width, cam.height);
    const RenderOutput ref = rasterize_reference(scene, cam, cam.width, cam.height, mode, bg);
    REQUIRE(fast.image.same_shape(ref.image));
    int compared = 0;
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            const std::size_t pix = static_cast<std::size_t>(y) * cam.width + x;
            if (fast.contrib_count[pix] != ref.contrib_count[pix]) {
                CHECK(fast.contrib_count[pix] < ref.contrib_count[pix]);  // early termination
                continue;
            }
            ++compared;
            for (int c = 0; c < fast.image.channels; ++c)
                CHECK(std::abs(fast.image.at(y, x, c) - ref.image.at(y, x, c)) < tol);
            CHECK(fast.alpha_accum[pix] == doctest::Approx(ref.alpha_accum[pix]).epsilon(1e-12));
        }
    CHECK(compared > 0);
}

}  // namespace

TEST_CASE("one huge opaque gaussian saturates at the 0.99 alpha clamp") {
    const CameraView cam = centered_camera(32);
    Scene scene;
    scene.feature_dim = 1;
    scene.sh_degree = 0;
    const Eigen::Vector3d color(0.8, 0.3, 0.6);
    Gaussian3D g = make_gaussian({0, 0, 2.0}, 40.0, 0.9999, color, 1, 0);
    g.feature = {1.0};
    scene.gaussians.push_back(g);

    const Eigen::Vector3d bg(0.1, 0.2, 0.3);
    const RenderOutput out = rasterize_rgb(scene, cam, bg);
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x)
            for (int c = 0; c < 3; ++c)
                CHECK(out.image.at(y, x, c) ==
                      doctest::Approx(color[c] * 0.99 + bg[c] * 0.01).epsilon(1e-3));
}

TEST_CASE("pixels without any splat get the background exactly") {
    const CameraView cam = centered_camera(64);
    Scene scene;
    scene.feature_dim = 2;
    scene.sh_degree = 0;
    // Small splat toward one corner; the far corner must be untouched background.
    scene.gaussians.push_back(make_gaussian({-1.2, -1.2, 2.0}, 0.02, 0.8, {1, 1, 1}, 2, 0));

    const Eigen::Vector3d bg(0.25, 0.5, 0.75);
    const RenderOutput out = rasterize_rgb(scene, cam, bg);
    CHECK(out.contrib_count[static_cast<std::size_t>(63) * 64 + 63] == 0);
    for (int c = 0; c < 3; ++c) CHECK(out.image.at(63, 63, c) == bg[c]);

    const RenderOutput feat = rasterize_features(scene, cam, 64, 64);
    CHECK(feat.image.at(63, 63, 0) == 0.0);  // feature background is the zero vector
    CHECK(feat.image.at(63, 63, 1) == 0.0);
}

TEST_CASE("single gaussian with activated opacity 0.99 blends 0.99*f at its center") {
    CameraView cam = centered_camera(33);
    cam.cx = cam.cy = 16.5;  // center of pixel (16,16)
    Scene scene;
    scene.feature_dim = 3;
    scene.sh_degree = 0;
    Gaussian3D g = make_gaussian({0, 0, 2.0}, 0.05, 0.99, {1, 1, 1}, 3, 0);
    g.feature = {0.3, -0.7, 1.5};
    scene.gaussians.push_back(g);

    const RenderOutput out = rasterize_features(scene, cam, 33, 33);
    // mean2d = (16.5, 16.5) exactly; alpha there = opacity * exp(0) = 0.99.
    for (int c = 0; c < 3; ++c)
        CHECK(out.image.at(16, 16, c) == doctest::Approx(0.99 * g.feature[c]).epsilon(1e-9));
    CHECK(out.contrib_count[16 * 33 + 16] == 1);
}

TEST_CASE("two coincident half-opacity splats blend 0.5a + 0.25b") {
    CameraView cam = centered_camera(17);
    cam.cx = cam.cy = 8.5;
    Scene scene;
    scene.feature_dim = 2;
    scene.sh_degree = 0;
    Gaussian3D front = make_gaussian({0, 0, 2.0}, 0.3, 0.5, {1, 1, 1}, 2, 0);
    front.feature = {1.0, 0.25};
    Gaussian3D back = make_gaussian({0, 0, 3.0}, 0.45, 0.5, {1, 1, 1}, 2, 0);
    back.feature = {0.5, -1.0};
    scene.gaussians.push_back(front);
    scene.gaussians.push_back(back);

    const RenderOutput out = rasterize_features(scene, cam, 17, 17);
    CHECK(out.image.at(8, 8, 0) == doctest::Approx(0.5 * 1.0 + 0.25 * 0.5).epsilon(1e-9));
    CHECK(out.image.at(8, 8, 1) == doctest::Approx(0.5 * 0.25 + 0.25 * -1.0).epsilon(1e-9));
    CHECK(out.alpha_accum[8 * 17 + 8] == doctest::Approx(0.25).epsilon(1e-9));
    CHECK(out.contrib_count[8 * 17 + 8] == 2);
}

TEST_CASE("fast tile path equals the brute-force reference on random scenes") {
    Rng rng(101);
    for (int trial = 0; trial < 4; ++trial) {
        const Scene scene = testutil::random_scene(rng, 50, 8, trial % 2 ? 2 : 0);
        const CameraView cam = testutil::test_camera(32, 32);
        check_fast_matches_reference(scene, cam, ChannelMode::kRgb, {0.2, 0.1, 0.4}, 1e-5);
        check_fast_matches_reference(scene, cam, ChannelMode::kFeature, Eigen::Vector3d::Zero(),
                                     1e-5);
    }
}

TEST_CASE("reference handles an empty scene as pure background, fast path errors") {
    Scene scene;
    scene.feature_dim = 4;
    const CameraView cam = centered_camera(16);
    CHECK_THROWS_AS(rasterize_rgb(scene, cam), ValidationError);
    CHECK_THROWS_AS(rasterize_features(scene, cam, 16, 16), ValidationError);

    const Eigen::Vector3d bg(0.3, 0.6, 0.9);
    const RenderOutput out = rasterize_reference(scene, cam, 16, 16, ChannelMode::kRgb, bg);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
            for (int c = 0; c < 3; ++c) CHECK(out.image.at(y, x, c) == bg[c]);
}

TEST_CASE("reference single splat matches the closed-form gaussian falloff") {
    const CameraView cam = centered_camera(21);
    Scene scene;
    scene.feature_dim = 1;
    scene.sh_degree = 0;
    Gaussian3D g = make_gaussian({0.05, -0.1, 2.0}, 0.2, 0.7, {0.9, 0.9, 0.9}, 1, 0);
    g.feature = {1.0};
    scene.gaussians.push_back(g);

    const RenderOutput out = rasterize_reference(scene, cam, 21, 21, ChannelMode::kFeature);
    const auto splat = project_gaussian(g, cam, 0);
    REQUIRE(splat.has_value());
    const Eigen::Matrix2d conic = splat->cov2d.inverse();
    for (int y = 0; y < 21; ++y)
        for (int x = 0; x < 21; ++x) {
            const Eigen::Vector2d d(x + 0.5 - splat->mean2d.x(), y + 0.5 - splat->mean2d.y());
            double alpha = std::min(0.99, 0.7 * std::exp(-0.5 * d.dot(conic * d)));
            if (alpha < 1.0 / 255.0) alpha = 0.0;
            CHECK(out.image.at(y, x, 0) == doctest::Approx(alpha).epsilon(1e-9));
        }
}

TEST_CASE("compositing weights sum to one minus the final transmittance") {
    Rng rng(211);
    Scene scene = testutil::random_scene(rng, 60, 1, 0);
    for (auto& g : scene.gaussians) g.feature = {1.0};  // pixel value = sum of weights
    const CameraView cam = testutil::test_camera(48, 48);
    const RenderOutput out = rasterize_features(scene, cam, 48, 48);
    for (int y = 0; y < 48; ++y)
        for (int x = 0; x < 48; ++x) {
            const std::size_t pix = static_cast<std::size_t>(y) * 48 + x;
            const double t = out.alpha_accum[pix];
            CHECK(t >= 0.0);
            CHECK(t <= 1.0);
            CHECK(out.image.at(y, x, 0) == doctest::Approx(1.0 - t).epsilon(1e-9));
        }
}

TEST_CASE("rgb and feature paths share bitwise-identical per-splat alphas") {
    Rng rng(307);
    Scene scene = testutil::random_scene(rng, 40, 3, 0);
    // Degree-0 colors are view independent; copying each splat's exact color
    // into its feature vector makes the two paths' images equal exactly when
    // the compositing weights agree bitwise.
    for (auto& g : scene.gaussians) {
        const Eigen::Vector3d color = eval_sh(0, g.sh, Eigen::Vector3d::UnitZ());
        for (int c = 0; c < 3; ++c) g.feature[c] = color[c];
    }

    const CameraView cam = testutil::test_camera(40, 40);
    const RenderOutput rgb = rasterize_rgb(scene, cam, Eigen::Vector3d::Zero());
    const RenderOutput feat = rasterize_features(scene, cam, 40, 40);
    REQUIRE(rgb.image.same_shape(feat.image));
    for (std::size_t i = 0; i < rgb.image.data.size(); ++i) {
        const double a = rgb.image.data[i];
        const double b = feat.image.data[i];
        CHECK(std::memcmp(&a, &b, sizeof(double)) == 0);
    }
    for (std::size_t i = 0; i < rgb.alpha_accum.size(); ++i) {
        CHECK(rgb.alpha_accum[i] == feat.alpha_accum[i]);
        CHECK(rgb.contrib_count[i] == feat.contrib_count[i]);
    }
}

TEST_CASE("rendering is deterministic and independent of the worker thread count") {
    Rng rng(401);
    const Scene scene = testutil::random_scene(rng, 80, 8, 2);
    const CameraView cam = testutil::test_camera(64, 64);

    setenv("FEATSPLAT_THREADS", "1", 1);
    const RenderOutput single = rasterize_rgb(scene, cam);
    setenv("FEATSPLAT_THREADS", "2", 1);
    const RenderOutput multi = rasterize_rgb(scene, cam);
    unsetenv("FEATSPLAT_THREADS");
    const RenderOutput again = rasterize_rgb(scene, cam);

    REQUIRE(single.image.data.size() == multi.image.data.size());
    CHECK(std::memcmp(single.image.data.data(), multi.image.data.data(),
                      single.image.data.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(single.image.data.data(), again.image.data.data(),
                      single.image.data.size() * sizeof(double)) == 0);
}

TEST_CASE("non-finite projected covariances are skipped as degenerate splats") {
    const CameraView cam = centered_camera(24);
    Scene scene;
    scene.feature_dim = 1;
    scene.sh_degree = 0;
    Gaussian3D ok = make_gaussian({0, 0, 2.0}, 0.1, 0.6, {0.5, 0.5, 0.5}, 1, 0);
    ok.feature = {1.0};
    Gaussian3D broken = ok;
    broken.log_scale.setConstant(400.0);  // exp overflows to inf
    scene.gaussians.push_back(ok);
    scene.gaussians.push_back(broken);

    const RenderOutput out = rasterize_rgb(scene, cam);
    CHECK(out.degenerate_splats == 1);

    Scene only_ok;
    only_ok.feature_dim = 1;
    only_ok.sh_degree = 0;
    only_ok.gaussians.push_back(ok);
    const RenderOutput ref = rasterize_rgb(only_ok, cam);
    for (std::size_t i = 0; i < out.image.data.size(); ++i)
        CHECK(out.image.data[i] == ref.image.data[i]);
}

TEST_CASE("feature renders at a different resolution rescale the intrinsics") {
    Rng rng(509);
    const Scene scene = testutil::random_scene(rng, 30, 4, 0);
    const CameraView cam = testutil::test_camera(64, 64);
    const RenderOutput half = rasterize_features(scene, cam, 32, 32);
    CHECK(half.image.width == 32);
    CHECK(half.image.height == 32);
    const CameraView half_cam = cam.scaled_to(32, 32);
    const RenderOutput direct = rasterize_features(scene, half_cam, 32, 32);
    CHECK(std::memcmp(half.image.data.data(), direct.image.data.data(),
                      half.image.data.size() * sizeof(double)) == 0);
}
