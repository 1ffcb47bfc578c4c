// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

#include "featsplat/camera.hpp"
#include "featsplat/gaussian.hpp"
#include "featsplat/image.hpp"
#include "featsplat/loss.hpp"
#include "featsplat/optim.hpp"
#include "featsplat/rasterizer.hpp"

namespace featsplat {

struct FitConfig {
    int iterations = 30000;
    double lambda_dssim = 0.2;
    int feature_dim = 64;
    bool allow_any_feature_dim = false;
    std::uint64_t seed = 0;

    // Per-group learning rates (splatting-community defaults).
    double lr_position = 1.6e-4;
    double lr_position_final = 1.6e-6;
    double lr_sh = 2.5e-3;
    double lr_opacity = 5e-2;
    double lr_scale = 5e-3;
    double lr_rotation = 1e-3;
    double lr_feature = 2.5e-3;
    double lr_decoder = 1e-3;
    double decoder_weight_decay = 1e-4;

    // Adaptive density control.
    bool densify_enabled = false;
    int densify_interval = 100;
    int densify_start = 500;
    int densify_end = 15000;
    double densify_grad_threshold = 2e-4;
    double densify_percent_dense = 0.01;
    double prune_opacity = 0.005;

    // Routing toggles: disabling a loss skips its render, backward and
    // optimizer steps entirely (not just zeroing gradients), so the untouched
    // parameter groups stay bitwise identical.
    bool rgb_loss_enabled = true;
    bool feature_loss_enabled = true;

    int metric_interval = 100;
    Eigen::Vector3d background = Eigen::Vector3d::Zero();

    void validate() const {
        require(iterations > 0, "fit: iterations must be > 0");
        require(lambda_dssim >= 0.0 && lambda_dssim <= 1.0, "fit: lambda_dssim outside [0,1]");
        if (!allow_any_feature_dim) {
            require(feature_dim == 32 || feature_dim == 64 || feature_dim == 128,
                    "fit: feature_dim must be 32, 64 or 128 (pass the override to allow others)");
        } else {
            require(feature_dim >= 1, "fit: feature_dim must be >= 1");
        }
        require(metric_interval > 0, "fit: metric_interval must be > 0");
    }
};

// One registered training view: camera, ground-truth image and ground-truth
// feature map (the feature render matches the map's grid resolution).
struct TrainView {
    CameraView cam;
    FeatureImage image;     // H x W x 3 in [0,1]
    FeatureImage feat_map;  // Hf x Wf x C_out
};

struct MetricRecord {
    int iteration = 0;
    double loss_rgb = 0.0;
    double loss_feat = 0.0;
    double psnr = 0.0;
};

using MetricSink = std::function<void(const MetricRecord&)>;

// Called after each iteration's updates with the live scene (trajectory
// inspection, checkpointing).
using SceneObserver = std::function<void(int iteration, const Scene&)>;

// Per-gaussian view-space positional gradient statistics driving clone/split,
// plus the scene extent the size threshold is relative to.
struct DensifyStats {
    std::vector<double> grad_norm_accum;
    std::vector<int> update_count;
    double scene_extent = 1.0;

    void reset(std::size_t n) {
        grad_norm_accum.assign(n, 0.0);
        update_count.assign(n, 0);
    }
    void accumulate(const SceneGrads& grads) {
        for (std::size_t i = 0; i < grad_norm_accum.size(); ++i) {
            grad_norm_accum[i] += grads.mean2d[i].norm();
            ++update_count[i];
        }
    }
};

struct DensifyResult {
    Scene scene;
    // old gaussian index feeding each new slot, -1 for freshly created ones
    std::vector<int> old_index;
    int cloned = 0, split = 0, pruned = 0;
};

// Clone small high-gradient splats, split large ones (children inherit the
// parent's feature vector verbatim), prune nearly transparent splats.
inline DensifyResult densify_and_prune(const Scene& scene, const DensifyStats& stats,
                                       const FitConfig& config, Rng& rng) {
    DensifyResult out;
    out.scene.feature_dim = scene.feature_dim;
    out.scene.sh_degree = scene.sh_degree;
    out.scene.decoder = scene.decoder;
    if (!config.densify_enabled) {
        out.scene.gaussians = scene.gaussians;
        out.old_index.resize(scene.gaussians.size());
        for (std::size_t i = 0; i < out.old_index.size(); ++i) out.old_index[i] = static_cast<int>(i);
        return out;
    }

    const double size_threshold = config.densify_percent_dense * stats.scene_extent;
    std::vector<int> to_clone, to_split;
    for (int i = 0; i < scene.count(); ++i) {
        const Gaussian3D& g = scene.gaussians[i];
        const bool pruned = g.opacity() < config.prune_opacity;
        if (pruned) {
            ++out.pruned;
            continue;
        }
        const int n = stats.update_count[i];
        const double avg_grad = n > 0 ? stats.grad_norm_accum[i] / n : 0.0;
        const bool high_grad = avg_grad > config.densify_grad_threshold;
        const bool large = g.scale().maxCoeff() > size_threshold;
        if (high_grad && large) {
            to_split.push_back(i);
            ++out.split;
            continue;  // parent replaced by its children
        }
        out.scene.gaussians.push_back(g);
        out.old_index.push_back(i);
        if (high_grad && !large) to_clone.push_back(i);
    }
    for (int i : to_clone) {
        out.scene.gaussians.push_back(scene.gaussians[i]);
        out.old_index.push_back(-1);
        ++out.cloned;
    }
    for (int i : to_split) {
        const Gaussian3D& parent = scene.gaussians[i];
        const Eigen::Matrix3d rot = quat_to_rotation(parent.unit_rotation());
        const Eigen::Vector3d s = parent.scale();
        for (int child = 0; child < 2; ++child) {
            Gaussian3D c = parent;
            const Eigen::Vector3d n(rng.normal(), rng.normal(), rng.normal());
            c.mean = parent.mean + rot * (s.cwiseProduct(n));
            c.log_scale = parent.log_scale.array() - std::log(1.6);
            out.scene.gaussians.push_back(c);
            out.old_index.push_back(-1);
        }
    }
    return out;
}

namespace detail {

struct GeometryOptim {
    AdamState position, log_scale, rotation, opacity, sh;
    AdamState feature;
    AdamState decoder_kernel, decoder_bias;
};

inline double camera_extent(const std::vector<TrainView>& views) {
    Eigen::Vector3d center = Eigen::Vector3d::Zero();
    for (const auto& v : views) center += v.cam.position();
    center /= static_cast<double>(views.size());
    double radius = 0.0;
    for (const auto& v : views) radius = std::max(radius, (v.cam.position() - center).norm());
    return std::max(radius * 1.1, 1e-6);
}

// Gathers a per-gaussian Vector3d/Vector4d group into a flat buffer, steps it,
// and scatters back.
template <int N>
inline void step_vec_group(std::vector<Gaussian3D>& gaussians,
                           Eigen::Matrix<double, N, 1> Gaussian3D::*member,
                           const std::vector<Eigen::Matrix<double, N, 1>>& grads, AdamState& state,
                           const AdamParams& params) {
    const std::size_t m = gaussians.size();
    std::vector<double> p(m * N), g(m * N);
    for (std::size_t i = 0; i < m; ++i)
        for (int k = 0; k < N; ++k) {
            p[i * N + k] = (gaussians[i].*member)[k];
            g[i * N + k] = grads[i][k];
        }
    state.step(p.data(), g.data(), p.size(), params);
    for (std::size_t i = 0; i < m; ++i)
        for (int k = 0; k < N; ++k) (gaussians[i].*member)[k] = p[i * N + k];
}

}  // namespace detail

// Joint scene + decoder optimization. Per iteration one uniformly sampled view
// is rendered; the RGB loss updates mean/scale/rotation/opacity/SH via Adam and
// the feature loss updates the per-gaussian features (Adam) and the decoder
// (AdamW) — gradient routing is structural, each group only ever sees its own
// loss. Returns the fitted scene (decoder included).
inline Scene fit_scene(const std::vector<TrainView>& views, Scene scene, const FitConfig& config,
                       const MetricSink& sink = nullptr, const SceneObserver& observer = nullptr) {
    config.validate();
    require(views.size() >= 2, "fit: need at least 2 views");
    require(scene.count() >= 1, "fit: initial scene is empty");
    require(scene.feature_dim == config.feature_dim,
            "fit: scene feature_dim does not match config");
    scene.validate();

    const int feat_channels = views.front().feat_map.channels;
    for (const auto& v : views) {
        v.cam.validate();
        require(v.image.channels == 3, "fit: ground-truth images must have 3 channels");
        require(v.feat_map.channels == feat_channels,
                "fit: ground-truth feature maps disagree on channel count");
    }

    Rng master(config.seed);
    Rng view_rng = master.fork();
    Rng densify_rng = master.fork();
    Rng init_rng = master.fork();

    if (config.feature_loss_enabled) {
        if (scene.decoder.empty()) {
            scene.decoder = FeatureDecoder::random_init(scene.feature_dim, feat_channels, init_rng);
        }
        require(scene.decoder.in_channels == scene.feature_dim &&
                    scene.decoder.out_channels == feat_channels,
                "fit: decoder shape does not match scene/ground-truth dimensions");
    }

    detail::GeometryOptim opt;
    DensifyStats stats;
    stats.reset(scene.gaussians.size());
    stats.scene_extent = detail::camera_extent(views);

    const int n_sh = 3 * sh_coeff_count(scene.sh_degree);

    for (int iter = 1; iter <= config.iterations; ++iter) {
        const std::size_t view_idx = view_rng.uniform_int(views.size());
        const TrainView& view = views[view_idx];

        double rgb_loss_value = 0.0, feat_loss_value = 0.0, psnr_value = 0.0;

        if (config.rgb_loss_enabled) {
            auto [render, cache] = rasterize_rgb_forward(scene, view.cam, config.background);
            RgbLoss loss = loss_rgb(render.image, view.image, config.lambda_dssim);
            if (!is_finite(loss.total))
                throw NumericError("fit: RGB loss diverged (NaN) at iteration " +
                                   std::to_string(iter));
            rgb_loss_value = loss.total;
            psnr_value = psnr(render.image, view.image);

            SceneGrads grads = rasterize_backward(scene, cache, loss.grad);
            stats.accumulate(grads);

            AdamParams p;
            p.lr = exp_lr_decay(config.lr_position, config.lr_position_final, iter,
                                config.iterations);
            detail::step_vec_group<3>(scene.gaussians, &Gaussian3D::mean, grads.mean,
                                      opt.position, p);
            p.lr = config.lr_scale;
            detail::step_vec_group<3>(scene.gaussians, &Gaussian3D::log_scale, grads.log_scale,
                                      opt.log_scale, p);
            p.lr = config.lr_rotation;
            detail::step_vec_group<4>(scene.gaussians, &Gaussian3D::rotation, grads.rotation,
                                      opt.rotation, p);
            p.lr = config.lr_opacity;
            {
                const std::size_t m = scene.gaussians.size();
                std::vector<double> op(m);
                for (std::size_t i = 0; i < m; ++i) op[i] = scene.gaussians[i].opacity_logit;
                opt.opacity.step(op.data(), grads.opacity_logit.data(), m, p);
                for (std::size_t i = 0; i < m; ++i) scene.gaussians[i].opacity_logit = op[i];
            }
            p.lr = config.lr_sh;
            {
                const std::size_t m = scene.gaussians.size();
                std::vector<double> sh(m * n_sh);
                for (std::size_t i = 0; i < m; ++i)
                    std::copy(scene.gaussians[i].sh.begin(), scene.gaussians[i].sh.end(),
                              sh.begin() + i * n_sh);
                opt.sh.step(sh.data(), grads.sh.data(), sh.size(), p);
                for (std::size_t i = 0; i < m; ++i)
                    std::copy(sh.begin() + i * n_sh, sh.begin() + (i + 1) * n_sh,
                              scene.gaussians[i].sh.begin());
            }
        }

        if (config.feature_loss_enabled) {
            auto [render, cache] = rasterize_features_forward(scene, view.cam,
                                                              view.feat_map.width,
                                                              view.feat_map.height);
            FeatureImage f_high = decoder_apply(scene.decoder, render.image);
            FeatLoss loss = loss_feat(f_high, view.feat_map);
            if (!is_finite(loss.total))
                throw NumericError("fit: feature loss diverged (NaN) at iteration " +
                                   std::to_string(iter));
            feat_loss_value = loss.total;

            DecoderGrads dec_grads = decoder_backward(scene.decoder, render.image, loss.grad);
            SceneGrads grads = rasterize_backward(scene, cache, dec_grads.input);

            AdamParams p;
            p.lr = config.lr_feature;
            {
                const std::size_t m = scene.gaussians.size();
                const int d = scene.feature_dim;
                std::vector<double> f(m * d);
                for (std::size_t i = 0; i < m; ++i)
                    std::copy(scene.gaussians[i].feature.begin(), scene.gaussians[i].feature.end(),
                              f.begin() + i * d);
                opt.feature.step(f.data(), grads.feature.data(), f.size(), p);
                for (std::size_t i = 0; i < m; ++i)
                    std::copy(f.begin() + i * d, f.begin() + (i + 1) * d,
                              scene.gaussians[i].feature.begin());
            }
            p.lr = config.lr_decoder;
            p.weight_decay = config.decoder_weight_decay;
            opt.decoder_kernel.step(scene.decoder.kernel.data(), dec_grads.kernel.data(),
                                    scene.decoder.kernel.size(), p);
            opt.decoder_bias.step(scene.decoder.bias.data(), dec_grads.bias.data(),
                                  scene.decoder.bias.size(), p);
        }

        if (sink && (iter % config.metric_interval == 0 || iter == config.iterations)) {
            sink({iter, rgb_loss_value, feat_loss_value, psnr_value});
        }

        if (observer) observer(iter, scene);

        if (config.densify_enabled && iter % config.densify_interval == 0 &&
            iter >= config.densify_start && iter <= config.densify_end) {
            DensifyResult result = densify_and_prune(scene, stats, config, densify_rng);
            const std::size_t m = result.old_index.size();
            opt.position.remap(result.old_index, 3);
            opt.log_scale.remap(result.old_index, 3);
            opt.rotation.remap(result.old_index, 4);
            opt.opacity.remap(result.old_index, 1);
            opt.sh.remap(result.old_index, static_cast<std::size_t>(n_sh));
            opt.feature.remap(result.old_index, static_cast<std::size_t>(scene.feature_dim));
            scene = std::move(result.scene);
            stats.grad_norm_accum.assign(m, 0.0);
            stats.update_count.assign(m, 0);
        }
    }
    return scene;
}

}  // namespace featsplat
