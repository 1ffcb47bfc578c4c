// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "featsplat/camera.hpp"
#include "featsplat/extractor.hpp"
#include "featsplat/gaussian.hpp"
#include "featsplat/rasterizer.hpp"

namespace featsplat {

// Synthetic desk-scale scene generator backing the test and acceptance
// fixtures: a known Gaussian ground truth, cameras on a ring, self-rendered
// RGB images and feature maps rendered through a random ground-truth decoder.
struct SynthConfig {
    int gaussians = 20;
    int feature_dim = 8;
    int decoder_out = 8;  // ground-truth feature map channels
    int views = 10;
    int holdout_views = 2;
    int width = 64, height = 64;
    int feat_width = 32, feat_height = 32;
    int sh_degree = 1;
    double camera_radius = 4.0;
    std::uint64_t seed = 0;
};

struct SynthScene {
    Scene scene;  // ground truth, decoder included
    std::vector<CameraView> cams;
    std::vector<bool> holdout;
    std::vector<FeatureImage> images;     // rendered RGB per view
    std::vector<FeatureImage> feat_maps;  // decoder(feature render) per view
};

inline Scene synth_random_scene(const SynthConfig& cfg, Rng& rng) {
    Scene scene;
    scene.feature_dim = cfg.feature_dim;
    scene.sh_degree = cfg.sh_degree;
    const int n_sh = sh_coeff_count(cfg.sh_degree);
    for (int i = 0; i < cfg.gaussians; ++i) {
        Gaussian3D g;
        g.mean = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
        for (int k = 0; k < 3; ++k) g.log_scale[k] = std::log(rng.uniform(0.08, 0.3));
        Eigen::Vector4d q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        g.rotation = q.normalized();
        g.opacity_logit = rng.uniform(0.5, 2.5);
        g.sh.assign(static_cast<std::size_t>(3) * n_sh, 0.0);
        for (int c = 0; c < 3; ++c) {
            g.sh_at(0, c) = rng.uniform(-1.2, 1.2);  // DC: colors spread over [0.16, 0.84]
            for (int l = 1; l < n_sh; ++l) g.sh_at(l, c) = rng.uniform(-0.2, 0.2);
        }
        g.feature.resize(cfg.feature_dim);
        for (double& f : g.feature) f = rng.uniform();
        scene.gaussians.push_back(std::move(g));
    }
    return scene;
}

inline std::vector<CameraView> synth_cameras(const SynthConfig& cfg, Rng& rng) {
    std::vector<CameraView> cams;
    for (int i = 0; i < cfg.views; ++i) {
        const double angle = 2.0 * M_PI * i / cfg.views + rng.uniform(-0.05, 0.05);
        const double height = rng.uniform(-1.0, 1.0);
        const Eigen::Vector3d pos(cfg.camera_radius * std::cos(angle), height,
                                  cfg.camera_radius * std::sin(angle));
        cams.push_back(make_lookat_camera(pos, Eigen::Vector3d::Zero(), cfg.width, cfg.height,
                                          0.9 * cfg.width));
    }
    return cams;
}

inline SynthScene synth_scene(const SynthConfig& cfg) {
    Rng master(cfg.seed);
    Rng scene_rng = master.fork();
    Rng cam_rng = master.fork();
    Rng decoder_rng = master.fork();

    SynthScene out;
    out.scene = synth_random_scene(cfg, scene_rng);
    out.scene.decoder =
        FeatureDecoder::random_init(cfg.feature_dim, cfg.decoder_out, decoder_rng);
    // A random bias keeps the ground-truth decoder clearly distinct from the
    // identity baseline.
    for (double& b : out.scene.decoder.bias) b = decoder_rng.uniform(-0.1, 0.1);

    out.cams = synth_cameras(cfg, cam_rng);
    for (int i = 0; i < cfg.views; ++i) {
        out.holdout.push_back(i >= cfg.views - cfg.holdout_views);
        out.images.push_back(rasterize_rgb(out.scene, out.cams[i]).image);
        RenderOutput low =
            rasterize_features(out.scene, out.cams[i], cfg.feat_width, cfg.feat_height);
        out.feat_maps.push_back(decoder_apply(out.scene.decoder, low.image));
    }
    return out;
}

// Perturbed copy of a ground-truth scene for recovery fits: geometry jittered,
// features re-drawn uniform [0,1), decoder freshly initialized.
inline Scene synth_perturbed_init(const Scene& gt, int decoder_out, std::uint64_t seed) {
    Rng rng(seed);
    Scene init = gt;
    for (auto& g : init.gaussians) {
        for (int k = 0; k < 3; ++k) {
            g.mean[k] += 0.05 * rng.normal();
            g.log_scale[k] += 0.1 * rng.normal();
        }
        Eigen::Vector4d jitter(0.05 * rng.normal(), 0.05 * rng.normal(), 0.05 * rng.normal(),
                               0.05 * rng.normal());
        g.rotation = (g.rotation + jitter).normalized();
        g.opacity_logit += 0.1 * rng.normal();
        for (double& s : g.sh) s += 0.05 * rng.normal();
        for (double& f : g.feature) f = rng.uniform();
    }
    init.decoder = FeatureDecoder::random_init(gt.feature_dim, decoder_out, rng);
    return init;
}

namespace detail {

// Fraction of the pixel's blended mass contributed by gaussian `target` at
// (px, py): the visibility test for correspondence generation.
inline double visible_weight(const Scene& scene, const SplatList& list, const CameraView& cam,
                             int target, double px, double py) {
    if (px < 0.0 || py < 0.0 || px >= cam.width || py >= cam.height) return 0.0;
    const int tx = static_cast<int>(px) / raster::kTileSize;
    const int ty = static_cast<int>(py) / raster::kTileSize;
    const auto& tile = list.tile_splats[static_cast<std::size_t>(ty) * list.tiles_x + tx];
    std::vector<double> scratch(scene.feature_dim, 0.0);
    double final_t = 1.0;
    int contribs = 0;
    double w_target = 0.0;
    featsplat::detail::composite_pixel(scene, list, ChannelMode::kFeature, tile.data(),
                                       static_cast<int>(tile.size()), px, py, true,
                                       scratch.data(), scene.feature_dim, final_t, contribs,
                                       [&](int idx, double alpha, double t_before) {
                                           if (list.splats[idx].gaussian_index == target)
                                               w_target += alpha * t_before;
                                       });
    const double total = 1.0 - final_t;
    return total > 0.2 ? w_target / total : 0.0;
}

}  // namespace detail

// Pixel correspondences between two views from the known geometry: ground-truth
// Gaussian means projected into both cameras, kept only where the Gaussian
// visibly dominates the pixel in both views (occluded centers are not valid
// matches; the pixel there shows the splats in front).
inline CorrespondencePair synth_correspondences(const Scene& gt, const CameraView& cam_a,
                                                const CameraView& cam_b, int view_a, int view_b,
                                                double min_visible_weight = 0.5) {
    CorrespondencePair pair;
    pair.view_a = view_a;
    pair.view_b = view_b;
    const SplatList list_a = build_splat_list(gt, cam_a, ChannelMode::kFeature);
    const SplatList list_b = build_splat_list(gt, cam_b, ChannelMode::kFeature);
    for (int i = 0; i < gt.count(); ++i) {
        const auto sa = project_gaussian(gt.gaussians[i], cam_a, i);
        const auto sb = project_gaussian(gt.gaussians[i], cam_b, i);
        if (!sa || !sb) continue;
        const double ax = sa->mean2d.x(), ay = sa->mean2d.y();
        const double bx = sb->mean2d.x(), by = sb->mean2d.y();
        if (ax < 1.0 || ax > cam_a.width - 1.0 || ay < 1.0 || ay > cam_a.height - 1.0) continue;
        if (bx < 1.0 || bx > cam_b.width - 1.0 || by < 1.0 || by > cam_b.height - 1.0) continue;
        if (detail::visible_weight(gt, list_a, cam_a, i, ax, ay) < min_visible_weight) continue;
        if (detail::visible_weight(gt, list_b, cam_b, i, bx, by) < min_visible_weight) continue;
        pair.pixels.push_back({ax, ay, bx, by});
    }
    return pair;
}

// Position-dominated, zero-mean 2D pretext targets: patch coordinates plus a
// weak color component. A stand-in for 2D-only pretraining — features of the
// same 3D point disagree across views because the point lands at different
// image positions.
inline FeatureImage synth_pretext_target(const FeatureImage& image, int gh, int gw) {
    const FeatureImage rgb = bilinear_resize(image, gh, gw);
    FeatureImage t(gh, gw, 8);
    for (int py = 0; py < gh; ++py)
        for (int px = 0; px < gw; ++px) {
            const double u = (px + 0.5) / gw - 0.5;
            const double v = (py + 0.5) / gh - 0.5;
            const double* c = rgb.pixel(py, px);
            double* o = t.pixel(py, px);
            o[0] = u;
            o[1] = v;
            o[2] = 2.0 * u * v;
            o[3] = u * u - v * v;
            o[4] = 0.5 * std::sin(2.0 * M_PI * u);
            o[5] = 0.5 * std::sin(2.0 * M_PI * v);
            o[6] = 0.3 * (c[0] - 0.5);
            o[7] = 0.3 * (c[1] - 0.5);
        }
    return t;
}

// Pretrains a toy encoder on the 2D pretext over the library's training views.
// Produces the "pre-trained 2D feature extractor" the fine-tuning stage starts
// from: diverse, deterministic and deliberately view-inconsistent.
inline FeatureExtractor synth_pretrain_2d(FeatureExtractor extractor, const SceneLibrary& lib,
                                          int steps, double lr, std::uint64_t seed = 777) {
    require(extractor.trainable(), "synth_pretrain_2d: needs a toy extractor");
    require(extractor.toy.out_dim == 8, "synth_pretrain_2d: pretext targets are 8-channel");
    std::vector<std::pair<int, int>> train;
    for (int s = 0; s < static_cast<int>(lib.scenes.size()); ++s)
        for (int v = 0; v < static_cast<int>(lib.scenes[s].views.size()); ++v)
            if (!lib.scenes[s].views[v].holdout) train.emplace_back(s, v);
    require(!train.empty(), "synth_pretrain_2d: library has no training views");

    AdamState adam;
    AdamParams params;
    params.lr = lr;
    params.weight_decay = 1e-4;
    Rng rng(seed);
    const int p = extractor.toy.patch_size;
    for (int step = 0; step < steps; ++step) {
        const auto& [s, v] = train[rng.uniform_int(train.size())];
        const FeatureImage& img = lib.scenes[s].views[v].image;
        const int gh = img.height / p, gw = img.width / p;
        const FeatureImage target = synth_pretext_target(img, gh, gw);

        detail::ToyForwardCache cache;
        const ExtractResult res = detail::toy_forward(extractor.toy, img, &cache);
        FeatureImage grad(gh, gw, 8);
        const double n = static_cast<double>(res.features.data.size());
        for (std::size_t k = 0; k < res.features.data.size(); ++k) {
            const double d = res.features.data[k] - target.data[k];
            grad.data[k] = (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) / n;
        }
        ToyPatchEncoder g = detail::toy_backward(extractor.toy, cache, grad);
        std::vector<double> theta = extractor.toy.flatten();
        const std::vector<double> flat = g.flatten();
        adam.step(theta.data(), flat.data(), theta.size(), params);
        extractor.toy.unflatten(theta);
    }
    return extractor;
}

// A K-scene synthetic library for fine-tuning experiments. Scene decoders all
// share decoder_out channels so one extractor dimension fits every scene.
inline SceneLibrary synth_library(const SynthConfig& base, int scenes) {
    SceneLibrary lib;
    for (int s = 0; s < scenes; ++s) {
        SynthConfig cfg = base;
        cfg.seed = base.seed + 1000ULL * (s + 1);
        SynthScene synth = synth_scene(cfg);
        LibraryScene ls;
        ls.id = "synth-" + std::to_string(s);
        ls.scene = std::move(synth.scene);
        for (int v = 0; v < static_cast<int>(synth.cams.size()); ++v) {
            LibraryView lv;
            lv.cam = synth.cams[v];
            lv.image = synth.images[v];
            lv.holdout = synth.holdout[v];
            ls.views.push_back(std::move(lv));
        }
        lib.scenes.push_back(std::move(ls));
    }
    return lib;
}

}  // namespace featsplat
