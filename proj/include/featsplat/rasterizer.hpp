// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <utility>
#include <vector>

#include "featsplat/camera.hpp"
#include "featsplat/gaussian.hpp"
#include "featsplat/geometry.hpp"
#include "featsplat/image.hpp"
#include "featsplat/sh.hpp"

namespace featsplat {

enum class ChannelMode { kRgb, kFeature };

namespace raster {
inline constexpr int kTileSize = 16;
inline constexpr double kAlphaClamp = 0.99;
inline constexpr double kAlphaSkip = 1.0 / 255.0;
inline constexpr double kTerminationT = 1e-4;
inline constexpr int kBackwardChunks = 16;
}  // namespace raster

// One projected, screen-ready splat. conic is the inverse 2D covariance.
struct PreparedSplat {
    Eigen::Vector2d mean2d;
    Eigen::Matrix2d conic;
    double depth = 0.0;
    double opacity = 0.0;  // activated
    double bin_radius = 0.0;
    int gaussian_index = -1;
    Eigen::Vector3d color = Eigen::Vector3d::Zero();  // rgb mode only
    std::array<bool, 3> color_clamped = {false, false, false};
};

// Depth-sorted splats plus per-tile index lists (appended in sorted order, so
// every tile list is itself depth-sorted).
struct SplatList {
    std::vector<PreparedSplat> splats;
    int tiles_x = 0, tiles_y = 0;
    std::vector<std::vector<int>> tile_splats;
    int degenerate_splats = 0;
};

struct RenderOutput {
    FeatureImage image;               // C=3 for RGB, C=D for features
    std::vector<double> alpha_accum;  // H*W final transmittance per pixel
    std::vector<int> contrib_count;   // H*W composited splats per pixel
    int degenerate_splats = 0;
};

// Everything the backward pass needs from the matching forward call.
struct ForwardCache {
    ChannelMode mode = ChannelMode::kRgb;
    CameraView cam;  // the (possibly rescaled) camera the render actually used
    Eigen::Vector3d background = Eigen::Vector3d::Zero();
    SplatList list;
    std::uint64_t scene_hash = 0;
};

// Per-parameter gradients, exposed separately per channel group: sh carries the
// color-path gradients, feature the feature-path ones; a render in one mode
// leaves the other group zero. mean2d holds view-space positional gradients for
// densification statistics.
struct SceneGrads {
    std::vector<Eigen::Vector3d> mean;
    std::vector<Eigen::Vector3d> log_scale;
    std::vector<Eigen::Vector4d> rotation;  // w.r.t. the stored (unnormalized) quaternion
    std::vector<double> opacity_logit;
    std::vector<double> sh;       // M * 3*(L+1)^2
    std::vector<double> feature;  // M * D
    std::vector<Eigen::Vector2d> mean2d;

    static SceneGrads zeros(const Scene& scene) {
        SceneGrads g;
        const std::size_t m = scene.gaussians.size();
        g.mean.assign(m, Eigen::Vector3d::Zero());
        g.log_scale.assign(m, Eigen::Vector3d::Zero());
        g.rotation.assign(m, Eigen::Vector4d::Zero());
        g.opacity_logit.assign(m, 0.0);
        g.sh.assign(m * 3 * sh_coeff_count(scene.sh_degree), 0.0);
        g.feature.assign(m * scene.feature_dim, 0.0);
        g.mean2d.assign(m, Eigen::Vector2d::Zero());
        return g;
    }
};

// Shared alpha evaluation: every render path and the backward re-walk call this
// exact function, so per-splat alphas are bitwise identical across paths.
inline double splat_alpha(const PreparedSplat& s, double px, double py) {
    const double dx = px - s.mean2d.x();
    const double dy = py - s.mean2d.y();
    const double q = s.conic(0, 0) * dx * dx + 2.0 * s.conic(0, 1) * dx * dy +
                     s.conic(1, 1) * dy * dy;
    if (q < 0.0) return 0.0;
    return std::min(raster::kAlphaClamp, s.opacity * std::exp(-0.5 * q));
}

inline SplatList build_splat_list(const Scene& scene, const CameraView& cam, ChannelMode mode) {
    SplatList list;
    list.tiles_x = (cam.width + raster::kTileSize - 1) / raster::kTileSize;
    list.tiles_y = (cam.height + raster::kTileSize - 1) / raster::kTileSize;

    const Eigen::Vector3d cam_pos = cam.position();
    list.splats.reserve(scene.gaussians.size());
    for (int i = 0; i < scene.count(); ++i) {
        const Gaussian3D& g = scene.gaussians[i];
        auto proj = project_gaussian(g, cam, i);
        if (!proj) continue;
        const Eigen::Matrix2d& cov = proj->cov2d;
        const double det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(1, 0);
        if (!cov.allFinite() || !(det > 0.0) || !(cov(0, 0) > 0.0) || !(cov(1, 1) > 0.0)) {
            ++list.degenerate_splats;
            continue;
        }
        PreparedSplat s;
        s.mean2d = proj->mean2d;
        s.depth = proj->depth;
        s.gaussian_index = i;
        s.opacity = g.opacity();
        const double inv_det = 1.0 / det;
        s.conic << cov(1, 1) * inv_det, -cov(0, 1) * inv_det,
                   -cov(1, 0) * inv_det, cov(0, 0) * inv_det;
        // Exact alpha-support radius: q <= 2*ln(255*opacity) is where alpha can
        // still reach the 1/255 skip threshold. Using this (instead of 3 sigma)
        // for binning keeps the tile path's contributor sets identical to the
        // brute-force reference.
        const double q_max = 2.0 * std::log(255.0 * s.opacity);
        s.bin_radius = q_max > 0.0
                           ? std::sqrt(q_max * cov2d_max_eigenvalue(cov)) * (1.0 + 1e-9) + 1e-9
                           : 0.0;
        if (mode == ChannelMode::kRgb) {
            const Eigen::Vector3d dir = (g.mean - cam_pos).normalized();
            s.color = eval_sh(scene.sh_degree, g.sh, dir, &s.color_clamped);
        }
        list.splats.push_back(s);
    }

    std::sort(list.splats.begin(), list.splats.end(),
              [](const PreparedSplat& a, const PreparedSplat& b) {
                  if (a.depth != b.depth) return a.depth < b.depth;
                  return a.gaussian_index < b.gaussian_index;
              });

    list.tile_splats.assign(static_cast<std::size_t>(list.tiles_x) * list.tiles_y, {});
    for (int idx = 0; idx < static_cast<int>(list.splats.size()); ++idx) {
        const PreparedSplat& s = list.splats[idx];
        if (s.bin_radius <= 0.0) continue;
        const int px0 = std::max(0, static_cast<int>(std::floor(s.mean2d.x() - s.bin_radius)) - 1);
        const int px1 = std::min(cam.width - 1,
                                 static_cast<int>(std::ceil(s.mean2d.x() + s.bin_radius)) + 1);
        const int py0 = std::max(0, static_cast<int>(std::floor(s.mean2d.y() - s.bin_radius)) - 1);
        const int py1 = std::min(cam.height - 1,
                                 static_cast<int>(std::ceil(s.mean2d.y() + s.bin_radius)) + 1);
        if (px0 > px1 || py0 > py1) continue;
        const double r2 = s.bin_radius * s.bin_radius;
        for (int ty = py0 / raster::kTileSize; ty <= py1 / raster::kTileSize; ++ty)
            for (int tx = px0 / raster::kTileSize; tx <= px1 / raster::kTileSize; ++tx) {
                // Support-circle vs tile-rectangle test; the bounding-box scan
                // alone would also bin corner tiles the circle misses.
                const double t0x = static_cast<double>(tx) * raster::kTileSize;
                const double t0y = static_cast<double>(ty) * raster::kTileSize;
                const double cx = std::clamp(s.mean2d.x(), t0x, t0x + raster::kTileSize);
                const double cy = std::clamp(s.mean2d.y(), t0y, t0y + raster::kTileSize);
                const double dx = cx - s.mean2d.x(), dy = cy - s.mean2d.y();
                if (dx * dx + dy * dy > r2 + 1.0) continue;
                list.tile_splats[static_cast<std::size_t>(ty) * list.tiles_x + tx].push_back(idx);
            }
    }
    return list;
}

namespace detail {

inline const double* splat_value(const Scene& scene, const PreparedSplat& s, ChannelMode mode) {
    return mode == ChannelMode::kRgb ? s.color.data()
                                     : scene.gaussians[s.gaussian_index].feature.data();
}

// Front-to-back compositing of one pixel over a depth-sorted splat index list.
// Identical walk for the fast path (tile lists), the reference path (full list)
// and the backward re-walk.
template <typename PerContribution>
inline void composite_pixel(const Scene& scene, const SplatList& list, ChannelMode mode,
                            const int* indices, int n_indices, double px, double py,
                            bool early_termination, double* pixel_out, int channels,
                            double& final_t, int& contribs, PerContribution&& on_contribution) {
    double t = 1.0;
    for (int k = 0; k < n_indices; ++k) {
        const PreparedSplat& s = list.splats[indices[k]];
        const double alpha = splat_alpha(s, px, py);
        if (alpha < raster::kAlphaSkip) continue;
        const double test_t = t * (1.0 - alpha);
        if (early_termination && test_t < raster::kTerminationT) break;
        const double w = alpha * t;
        const double* value = splat_value(scene, s, mode);
        for (int c = 0; c < channels; ++c) pixel_out[c] += value[c] * w;
        on_contribution(indices[k], alpha, t);
        t = test_t;
        ++contribs;
    }
    final_t = t;
}

inline void render_pixels_tiled(const Scene& scene, const SplatList& list, const CameraView& cam,
                                ChannelMode mode, const Eigen::Vector3d& bg, RenderOutput& out) {
    const int channels = out.image.channels;
    const std::size_t n_tiles = list.tile_splats.size();
    parallel_for_chunks(n_tiles, [&](std::size_t tile) {
        const int tx = static_cast<int>(tile) % list.tiles_x;
        const int ty = static_cast<int>(tile) / list.tiles_x;
        const auto& tile_list = list.tile_splats[tile];
        const int x0 = tx * raster::kTileSize, x1 = std::min(cam.width, x0 + raster::kTileSize);
        const int y0 = ty * raster::kTileSize, y1 = std::min(cam.height, y0 + raster::kTileSize);
        for (int y = y0; y < y1; ++y) {
            for (int x = x0; x < x1; ++x) {
                double* pix = out.image.pixel(y, x);
                double final_t = 1.0;
                int contribs = 0;
                detail::composite_pixel(scene, list, mode, tile_list.data(),
                                        static_cast<int>(tile_list.size()), x + 0.5, y + 0.5,
                                        /*early_termination=*/true, pix, channels, final_t,
                                        contribs, [](int, double, double) {});
                if (mode == ChannelMode::kRgb)
                    for (int c = 0; c < 3; ++c) pix[c] += bg[c] * final_t;
                out.alpha_accum[static_cast<std::size_t>(y) * cam.width + x] = final_t;
                out.contrib_count[static_cast<std::size_t>(y) * cam.width + x] = contribs;
            }
        }
    });
}

}  // namespace detail

inline std::pair<RenderOutput, ForwardCache> rasterize_forward(const Scene& scene,
                                                               const CameraView& cam,
                                                               ChannelMode mode,
                                                               const Eigen::Vector3d& background) {
    require(scene.count() >= 1, "rasterize: empty scene");
    const int channels = mode == ChannelMode::kRgb ? 3 : scene.feature_dim;
    require(channels > 0, "rasterize: feature render needs feature_dim > 0");

    ForwardCache cache;
    cache.mode = mode;
    cache.cam = cam;
    cache.background = background;
    cache.list = build_splat_list(scene, cam, mode);
    cache.scene_hash = scene_param_hash(scene);

    RenderOutput out;
    out.image = FeatureImage(cam.height, cam.width, channels);
    out.alpha_accum.assign(static_cast<std::size_t>(cam.height) * cam.width, 1.0);
    out.contrib_count.assign(static_cast<std::size_t>(cam.height) * cam.width, 0);
    out.degenerate_splats = cache.list.degenerate_splats;

    detail::render_pixels_tiled(scene, cache.list, cam, mode, background, out);
    return {std::move(out), std::move(cache)};
}

// RGB forward at the camera's native resolution; background composited with the
// residual transmittance.
inline std::pair<RenderOutput, ForwardCache> rasterize_rgb_forward(
    const Scene& scene, const CameraView& cam,
    const Eigen::Vector3d& background = Eigen::Vector3d::Zero()) {
    return rasterize_forward(scene, cam, ChannelMode::kRgb, background);
}

inline RenderOutput rasterize_rgb(const Scene& scene, const CameraView& cam,
                                  const Eigen::Vector3d& background = Eigen::Vector3d::Zero()) {
    return rasterize_rgb_forward(scene, cam, background).first;
}

// Feature forward. Output resolution may differ from the camera's RGB
// resolution; intrinsics are rescaled proportionally. Feature background is the
// zero vector.
inline std::pair<RenderOutput, ForwardCache> rasterize_features_forward(const Scene& scene,
                                                                        const CameraView& cam,
                                                                        int out_width,
                                                                        int out_height) {
    return rasterize_forward(scene, cam.scaled_to(out_width, out_height), ChannelMode::kFeature,
                             Eigen::Vector3d::Zero());
}

inline RenderOutput rasterize_features(const Scene& scene, const CameraView& cam, int out_width,
                                       int out_height) {
    return rasterize_features_forward(scene, cam, out_width, out_height).first;
}

// Brute-force oracle: per-pixel loop over all splats in global depth order, no
// tiling, no early termination. Handles an empty scene as pure background.
inline RenderOutput rasterize_reference(const Scene& scene, const CameraView& cam, int out_width,
                                        int out_height, ChannelMode mode,
                                        const Eigen::Vector3d& background = Eigen::Vector3d::Zero()) {
    const CameraView rcam = cam.scaled_to(out_width, out_height);
    const int channels = mode == ChannelMode::kRgb ? 3 : scene.feature_dim;

    RenderOutput out;
    out.image = FeatureImage(out_height, out_width, channels);
    out.alpha_accum.assign(static_cast<std::size_t>(out_height) * out_width, 1.0);
    out.contrib_count.assign(static_cast<std::size_t>(out_height) * out_width, 0);
    if (mode == ChannelMode::kRgb)
        for (int y = 0; y < out_height; ++y)
            for (int x = 0; x < out_width; ++x)
                for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = background[c];
    if (scene.count() == 0) return out;

    SplatList list = build_splat_list(scene, rcam, mode);
    out.degenerate_splats = list.degenerate_splats;
    std::vector<int> all(list.splats.size());
    for (int i = 0; i < static_cast<int>(all.size()); ++i) all[i] = i;

    parallel_for_chunks(out_height, [&](std::size_t y) {
        for (int x = 0; x < out_width; ++x) {
            double* pix = out.image.pixel(static_cast<int>(y), x);
            if (mode == ChannelMode::kRgb)
                for (int c = 0; c < 3; ++c) pix[c] = 0.0;
            double final_t = 1.0;
            int contribs = 0;
            detail::composite_pixel(scene, list, mode, all.data(), static_cast<int>(all.size()),
                                    x + 0.5, y + 0.5, /*early_termination=*/false, pix, channels,
                                    final_t, contribs, [](int, double, double) {});
            if (mode == ChannelMode::kRgb)
                for (int c = 0; c < 3; ++c) pix[c] += background[c] * final_t;
            out.alpha_accum[y * out_width + x] = final_t;
            out.contrib_count[y * out_width + x] = contribs;
        }
    });
    return out;
}

namespace detail {

// Per-splat accumulators for the screen-space half of the backward pass.
struct ScreenGrads {
    std::vector<double> mean2d;   // 2 per splat
    std::vector<double> conic;    // 4 per splat (full 2x2)
    std::vector<double> opacity;  // activated-opacity grads
    std::vector<double> value;    // channels per splat

    void resize(std::size_t n, int channels) {
        mean2d.assign(2 * n, 0.0);
        conic.assign(4 * n, 0.0);
        opacity.assign(n, 0.0);
        value.assign(channels * n, 0.0);
    }
    void add(const ScreenGrads& o) {
        for (std::size_t i = 0; i < mean2d.size(); ++i) mean2d[i] += o.mean2d[i];
        for (std::size_t i = 0; i < conic.size(); ++i) conic[i] += o.conic[i];
        for (std::size_t i = 0; i < opacity.size(); ++i) opacity[i] += o.opacity[i];
        for (std::size_t i = 0; i < value.size(); ++i) value[i] += o.value[i];
    }
};

struct Contribution {
    int splat;
    double alpha;
    double t_before;
};

}  // namespace detail

// Analytic backward for a forward render. upstream_grad is dL/d(rendered image)
// in the same shape the forward produced. Gradients traverse alpha-blending,
// the 2D covariance, the projection Jacobian and all parameter activations.
// Feature gradients are only produced by feature-mode renders and SH gradients
// only by RGB-mode renders; the geometry/opacity groups are filled either way
// and the caller decides which to consume.
inline SceneGrads rasterize_backward(const Scene& scene, const ForwardCache& cache,
                                     const FeatureImage& upstream_grad) {
    require(scene_param_hash(scene) == cache.scene_hash,
            "rasterize_backward: scene mutated since the forward pass (stale cache)");
    const CameraView& cam = cache.cam;
    const int channels = cache.mode == ChannelMode::kRgb ? 3 : scene.feature_dim;
    require(upstream_grad.height == cam.height && upstream_grad.width == cam.width &&
                upstream_grad.channels == channels,
            "rasterize_backward: upstream gradient shape mismatch");

    const SplatList& list = cache.list;
    const std::size_t n_splats = list.splats.size();
    SceneGrads grads = SceneGrads::zeros(scene);
    if (n_splats == 0) return grads;

    // Phase 1: pixel walks, accumulated into per-chunk buffers merged in fixed
    // chunk order; results are independent of the worker thread count.
    const std::size_t n_tiles = list.tile_splats.size();
    const std::size_t n_chunks = std::min<std::size_t>(raster::kBackwardChunks, n_tiles);
    std::vector<detail::ScreenGrads> chunk_grads(n_chunks);
    for (auto& cg : chunk_grads) cg.resize(n_splats, channels);

    parallel_for_chunks(n_chunks, [&](std::size_t chunk) {
        detail::ScreenGrads& sg = chunk_grads[chunk];
        const std::size_t tile_begin = chunk * n_tiles / n_chunks;
        const std::size_t tile_end = (chunk + 1) * n_tiles / n_chunks;
        std::vector<detail::Contribution> contribs;
        std::vector<double> suffix(channels);
        std::vector<double> scratch(channels);

        for (std::size_t tile = tile_begin; tile < tile_end; ++tile) {
            const auto& tile_list = list.tile_splats[tile];
            if (tile_list.empty()) continue;
            const int tx = static_cast<int>(tile) % list.tiles_x;
            const int ty = static_cast<int>(tile) / list.tiles_x;
            const int x0 = tx * raster::kTileSize, x1 = std::min(cam.width, x0 + raster::kTileSize);
            const int y0 = ty * raster::kTileSize, y1 = std::min(cam.height, y0 + raster::kTileSize);
            for (int y = y0; y < y1; ++y) {
                for (int x = x0; x < x1; ++x) {
                    const double* g_pix = upstream_grad.pixel(y, x);
                    bool any = false;
                    for (int c = 0; c < channels; ++c) any |= g_pix[c] != 0.0;
                    if (!any) continue;

                    // Re-walk the forward compositing for this pixel.
                    contribs.clear();
                    double final_t = 1.0;
                    int count = 0;
                    std::fill(scratch.begin(), scratch.end(), 0.0);
                    detail::composite_pixel(
                        scene, list, cache.mode, tile_list.data(),
                        static_cast<int>(tile_list.size()), x + 0.5, y + 0.5, true,
                        scratch.data(), channels, final_t, count,
                        [&](int idx, double alpha, double t_before) {
                            contribs.push_back({idx, alpha, t_before});
                        });

                    // Back-to-front suffix accumulation. suffix holds
                    // sum_{k>i} value_k*alpha_k*T_k plus the background term.
                    if (cache.mode == ChannelMode::kRgb)
                        for (int c = 0; c < channels; ++c)
                            suffix[c] = cache.background[c] * final_t;
                    else
                        std::fill(suffix.begin(), suffix.end(), 0.0);

                    const double px = x + 0.5, py = y + 0.5;
                    for (int i = static_cast<int>(contribs.size()) - 1; i >= 0; --i) {
                        const auto& c = contribs[i];
                        const PreparedSplat& s = list.splats[c.splat];
                        const double* value = detail::splat_value(scene, s, cache.mode);
                        const double w = c.alpha * c.t_before;
                        const double one_minus = 1.0 - c.alpha;

                        double d_alpha = 0.0;
                        for (int ch = 0; ch < channels; ++ch) {
                            d_alpha += g_pix[ch] * (value[ch] * c.t_before - suffix[ch] / one_minus);
                            sg.value[static_cast<std::size_t>(c.splat) * channels + ch] +=
                                g_pix[ch] * w;
                            suffix[ch] += value[ch] * w;
                        }

                        // alpha = min(0.99, opacity*G): clamped splats get no
                        // opacity/shape gradient.
                        if (c.alpha >= raster::kAlphaClamp) continue;
                        const double g_exp = c.alpha / s.opacity;  // exp(-q/2)
                        sg.opacity[c.splat] += d_alpha * g_exp;
                        const double d_q = -0.5 * d_alpha * c.alpha;
                        const double dx = px - s.mean2d.x();
                        const double dy = py - s.mean2d.y();
                        double* dcon = &sg.conic[4 * static_cast<std::size_t>(c.splat)];
                        dcon[0] += d_q * dx * dx;
                        dcon[1] += d_q * dx * dy;
                        dcon[2] += d_q * dy * dx;
                        dcon[3] += d_q * dy * dy;
                        const double cdx = s.conic(0, 0) * dx + s.conic(0, 1) * dy;
                        const double cdy = s.conic(1, 0) * dx + s.conic(1, 1) * dy;
                        sg.mean2d[2 * static_cast<std::size_t>(c.splat)] += -2.0 * d_q * cdx;
                        sg.mean2d[2 * static_cast<std::size_t>(c.splat) + 1] += -2.0 * d_q * cdy;
                    }
                }
            }
        }
    });

    detail::ScreenGrads& merged = chunk_grads[0];
    for (std::size_t c = 1; c < n_chunks; ++c) merged.add(chunk_grads[c]);

    // Phase 2: per-splat chain from screen space to the 3D parameters.
    const Eigen::Matrix3d w_rot = cam.rotation();
    const Eigen::Vector3d cam_pos = cam.position();
    const int n_sh = sh_coeff_count(scene.sh_degree);

    for (std::size_t si = 0; si < n_splats; ++si) {
        const PreparedSplat& s = list.splats[si];
        const int gi = s.gaussian_index;
        const Gaussian3D& g = scene.gaussians[gi];

        const Eigen::Vector2d d_mean2d(merged.mean2d[2 * si], merged.mean2d[2 * si + 1]);
        Eigen::Matrix2d d_conic;
        d_conic << merged.conic[4 * si], merged.conic[4 * si + 1],
                   merged.conic[4 * si + 2], merged.conic[4 * si + 3];
        const double d_opacity = merged.opacity[si];
        const double* d_value = &merged.value[si * static_cast<std::size_t>(channels)];

        grads.mean2d[gi] += d_mean2d;

        // Channel-group gradients.
        if (cache.mode == ChannelMode::kFeature) {
            for (int c = 0; c < channels; ++c)
                grads.feature[static_cast<std::size_t>(gi) * channels + c] += d_value[c];
        } else {
            const Eigen::Vector3d view_vec = g.mean - cam_pos;
            const double dist = view_vec.norm();
            const Eigen::Vector3d dir = view_vec / dist;
            double basis[16];
            Eigen::Vector3d basis_grad[16];
            sh_basis(scene.sh_degree, dir, basis);
            sh_basis_grad(scene.sh_degree, dir, basis_grad);
            Eigen::Vector3d d_dir = Eigen::Vector3d::Zero();
            for (int c = 0; c < 3; ++c) {
                if (s.color_clamped[c] || d_value[c] == 0.0) continue;
                for (int l = 0; l < n_sh; ++l) {
                    grads.sh[(static_cast<std::size_t>(gi) * n_sh + l) * 3 + c] +=
                        basis[l] * d_value[c];
                    d_dir += d_value[c] * g.sh[l * 3 + c] * basis_grad[l];
                }
            }
            grads.mean[gi] += (d_dir - dir * dir.dot(d_dir)) / dist;
        }

        // Opacity activation.
        const double op = s.opacity;
        grads.opacity_logit[gi] += d_opacity * op * (1.0 - op);

        // Shape chain: conic -> cov2d -> (Sigma, J) -> (scale, rotation, mean).
        const Eigen::Matrix2d d_cov = -s.conic * d_conic * s.conic;
        const Eigen::Vector3d t = cam.to_camera(g.mean);
        const Eigen::Matrix<double, 2, 3> j = projection_jacobian(cam, t);
        const Eigen::Matrix<double, 2, 3> jw = j * w_rot;
        const Eigen::Vector4d q_unit = g.unit_rotation();
        const Eigen::Matrix3d rot = quat_to_rotation(q_unit);
        const Eigen::Vector3d scale = g.scale();
        const Eigen::Matrix3d m3 = rot * scale.asDiagonal();
        const Eigen::Matrix3d sigma = m3 * m3.transpose();

        const Eigen::Matrix3d d_sigma = jw.transpose() * d_cov * jw;
        const Eigen::Matrix<double, 2, 3> d_jw = (d_cov + d_cov.transpose()) * jw * sigma;
        const Eigen::Matrix<double, 2, 3> d_j = d_jw * w_rot.transpose();

        // J entries depend on the camera-space mean t.
        const double inv_z = 1.0 / t.z();
        const double inv_z2 = inv_z * inv_z;
        const double inv_z3 = inv_z2 * inv_z;
        Eigen::Vector3d d_t = Eigen::Vector3d::Zero();
        d_t.x() += d_j(0, 2) * (-cam.fx * inv_z2);
        d_t.y() += d_j(1, 2) * (-cam.fy * inv_z2);
        d_t.z() += d_j(0, 0) * (-cam.fx * inv_z2) + d_j(1, 1) * (-cam.fy * inv_z2) +
                   d_j(0, 2) * (2.0 * cam.fx * t.x() * inv_z3) +
                   d_j(1, 2) * (2.0 * cam.fy * t.y() * inv_z3);

        // mean2d = pinhole(t): its Jacobian w.r.t. t is exactly j.
        d_t += j.transpose() * d_mean2d;
        grads.mean[gi] += w_rot.transpose() * d_t;

        // Sigma = M M^T with M = R diag(s).
        const Eigen::Matrix3d d_m3 = (d_sigma + d_sigma.transpose()) * m3;
        Eigen::Vector3d d_log_scale;
        for (int k = 0; k < 3; ++k) {
            double ds = 0.0;
            for (int r = 0; r < 3; ++r) ds += d_m3(r, k) * rot(r, k);
            d_log_scale[k] = ds * scale[k];
        }
        grads.log_scale[gi] += d_log_scale;

        const Eigen::Matrix3d d_rot = d_m3 * scale.asDiagonal();
        const Eigen::Vector4d d_q_unit = quat_rotation_backward(q_unit, d_rot);
        grads.rotation[gi] += quat_normalize_backward(g.rotation, d_q_unit);
    }
    return grads;
}

}  // namespace featsplat
