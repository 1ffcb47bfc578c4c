// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>
#include <featsplat/extractor.hpp>
#include <featsplat/io.hpp>
#include <featsplat/probe.hpp>
#include <featsplat/rasterizer.hpp>
#include <featsplat/synth.hpp>
#include <featsplat/trainer.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace featsplat;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitNumeric = 3;

struct LoadedScene {
    SceneManifest manifest;
    std::vector<TrainView> views;
};

LoadedScene load_training_data(const std::string& manifest_path) {
    LoadedScene out;
    out.manifest = load_manifest(manifest_path);
    for (const auto& v : out.manifest.views) {
        TrainView tv;
        tv.cam = v.cam;
        tv.image = load_image(out.manifest.resolve(v.cam.image_path));
        require(tv.image.height == v.cam.height && tv.image.width == v.cam.width,
                "fit: image '" + v.cam.image_path + "' does not match the manifest dimensions");
        tv.feat_map = load_fmap(out.manifest.resolve(v.cam.feature_path));
        require(tv.feat_map.channels == out.manifest.feature_channels,
                "fit: feature map '" + v.cam.feature_path +
                    "' disagrees with the manifest channel count");
        out.views.push_back(std::move(tv));
    }
    return out;
}

Scene random_init_scene(const std::vector<TrainView>& views, int gaussians, int feature_dim,
                        int sh_degree, Rng& rng) {
    Eigen::Vector3d center = Eigen::Vector3d::Zero();
    for (const auto& v : views) center += v.cam.position();
    center /= static_cast<double>(views.size());
    double radius = 0.0;
    for (const auto& v : views) radius = std::max(radius, (v.cam.position() - center).norm());
    const double extent = std::max(0.5 * radius, 1e-3);

    Scene scene;
    scene.feature_dim = feature_dim;
    scene.sh_degree = sh_degree;
    const int n_sh = sh_coeff_count(sh_degree);
    for (int i = 0; i < gaussians; ++i) {
        Gaussian3D g;
        for (int k = 0; k < 3; ++k) g.mean[k] = center[k] + extent * rng.uniform(-1.0, 1.0);
        for (int k = 0; k < 3; ++k) g.log_scale[k] = std::log(extent * rng.uniform(0.02, 0.15));
        Eigen::Vector4d q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
        g.rotation = q.normalized();
        g.opacity_logit = logit(0.1);
        g.sh.assign(static_cast<std::size_t>(3) * n_sh, 0.0);
        for (int c = 0; c < 3; ++c) g.sh_at(0, c) = rng.uniform(-1.0, 1.0);
        g.feature.resize(feature_dim);
        for (double& f : g.feature) f = rng.uniform();
        scene.gaussians.push_back(std::move(g));
    }
    return scene;
}

struct LibraryEntry {
    std::string manifest;
    std::string checkpoint;
};

std::vector<LibraryEntry> load_library_spec(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "library: cannot open '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ValidationError("library: invalid JSON in '" + path + "': " + e.what());
    }
    std::vector<LibraryEntry> entries;
    const fs::path base = fs::path(path).parent_path();
    for (const auto& js : j.at("scenes")) {
        LibraryEntry e;
        e.manifest = (base / js.at("manifest").get<std::string>()).string();
        e.checkpoint = (base / js.at("checkpoint").get<std::string>()).string();
        entries.push_back(std::move(e));
    }
    require(!entries.empty(), "library: '" + path + "' lists no scenes");
    return entries;
}

SceneLibrary load_library(const std::string& path) {
    SceneLibrary lib;
    for (const auto& entry : load_library_spec(path)) {
        LibraryScene ls;
        ls.scene = load_checkpoint(entry.checkpoint);
        require(!ls.scene.decoder.empty(),
                "library: checkpoint '" + entry.checkpoint + "' carries no decoder");
        const SceneManifest manifest = load_manifest(entry.manifest);
        ls.id = manifest.scene_id;
        for (const auto& v : manifest.views) {
            LibraryView lv;
            lv.cam = v.cam;
            lv.image = load_image(manifest.resolve(v.cam.image_path));
            lv.holdout = v.holdout;
            ls.views.push_back(std::move(lv));
        }
        lib.scenes.push_back(std::move(ls));
    }
    return lib;
}

std::string record_path_for(const std::string& out_path) { return out_path + ".runrecord.json"; }

// ---------------------------------------------------------------------------

int cmd_synth(const std::string& out_dir, int scenes, SynthConfig cfg) {
    fs::create_directories(out_dir);
    json library = {{"scenes", json::array()}};
    for (int s = 0; s < scenes; ++s) {
        SynthConfig scene_cfg = cfg;
        scene_cfg.seed = cfg.seed + 1000ULL * (s + 1);
        const SynthScene synth = synth_scene(scene_cfg);

        const fs::path scene_dir = fs::path(out_dir) / ("scene_" + std::to_string(s));
        fs::create_directories(scene_dir / "images");
        fs::create_directories(scene_dir / "features");

        SceneManifest manifest;
        manifest.scene_id = "synth-" + std::to_string(s);
        manifest.feature_channels = cfg.decoder_out;
        for (int v = 0; v < static_cast<int>(synth.cams.size()); ++v) {
            char img_name[64], feat_name[64];
            std::snprintf(img_name, sizeof img_name, "images/view_%02d.png", v);
            std::snprintf(feat_name, sizeof feat_name, "features/view_%02d.fmap", v);
            save_image((scene_dir / img_name).string(), synth.images[v]);
            save_fmap((scene_dir / feat_name).string(), synth.feat_maps[v]);
            ManifestView mv;
            mv.cam = synth.cams[v];
            mv.cam.image_path = img_name;
            mv.cam.feature_path = feat_name;
            mv.holdout = synth.holdout[v];
            manifest.views.push_back(mv);
        }
        save_manifest((scene_dir / "manifest.json").string(), manifest);
        save_checkpoint((scene_dir / "gt_scene.gspl").string(), synth.scene);

        // Correspondences between the held-out views, from the known geometry.
        json corr = json::array();
        std::vector<int> holdouts;
        for (int v = 0; v < static_cast<int>(synth.cams.size()); ++v)
            if (synth.holdout[v]) holdouts.push_back(v);
        for (std::size_t a = 0; a < holdouts.size(); ++a)
            for (std::size_t b = a + 1; b < holdouts.size(); ++b) {
                const CorrespondencePair pair = synth_correspondences(
                    synth.scene, synth.cams[holdouts[a]], synth.cams[holdouts[b]], holdouts[a],
                    holdouts[b]);
                json jp = {{"view_a", pair.view_a},
                           {"view_b", pair.view_b},
                           {"pixels", json::array()}};
                for (const auto& px : pair.pixels)
                    jp["pixels"].push_back({px[0], px[1], px[2], px[3]});
                corr.push_back(jp);
            }
        {
            std::ofstream out(scene_dir / "correspondences.json");
            out << corr.dump(2) << "\n";
        }

        library["scenes"].push_back(
            {{"manifest", "scene_" + std::to_string(s) + "/manifest.json"},
             {"checkpoint", "scene_" + std::to_string(s) + "/gt_scene.gspl"}});
    }
    {
        std::ofstream out(fs::path(out_dir) / "library.json");
        out << library.dump(2) << "\n";
    }
    write_run_record((fs::path(out_dir) / "synth.runrecord.json").string(), "synth",
                     {{"scenes", scenes},
                      {"gaussians", cfg.gaussians},
                      {"feature_dim", cfg.feature_dim},
                      {"decoder_out", cfg.decoder_out},
                      {"views", cfg.views},
                      {"holdout_views", cfg.holdout_views},
                      {"width", cfg.width},
                      {"height", cfg.height},
                      {"feat_width", cfg.feat_width},
                      {"feat_height", cfg.feat_height},
                      {"sh_degree", cfg.sh_degree}},
                     cfg.seed);
    return 0;
}

int cmd_fit(const std::string& manifest_path, const std::string& out_path,
            const std::string& metrics_path, const std::string& init_path, int init_gaussians,
            int sh_degree, FitConfig cfg) {
    cfg.validate();
    const LoadedScene data = load_training_data(manifest_path);

    Rng rng(cfg.seed ^ 0x5eed5eedULL);
    Scene init;
    if (!init_path.empty()) {
        init = load_checkpoint(init_path);
        require(init.feature_dim == cfg.feature_dim,
                "fit: init checkpoint feature_dim differs from --feature-dim");
    } else {
        init = random_init_scene(data.views, init_gaussians, cfg.feature_dim, sh_degree, rng);
    }

    std::ofstream metrics(metrics_path);
    require(metrics.good(), "fit: cannot open metrics path '" + metrics_path + "'");
    const Scene fitted = fit_scene(data.views, init, cfg, [&](const MetricRecord& m) {
        metrics << json{{"iteration", m.iteration},
                        {"loss_rgb", m.loss_rgb},
                        {"loss_feat", m.loss_feat},
                        {"psnr", m.psnr}}
                       .dump()
                << "\n";
    });
    save_checkpoint(out_path, fitted);
    write_run_record(record_path_for(out_path), "fit",
                     {{"manifest", manifest_path},
                      {"iterations", cfg.iterations},
                      {"feature_dim", cfg.feature_dim},
                      {"lambda_dssim", cfg.lambda_dssim},
                      {"densify", cfg.densify_enabled},
                      {"rgb_loss", cfg.rgb_loss_enabled},
                      {"feature_loss", cfg.feature_loss_enabled},
                      {"init", init_path.empty() ? json("random") : json(init_path)},
                      {"gaussians", fitted.count()}},
                     cfg.seed);
    return 0;
}

int cmd_render(const std::string& checkpoint_path, const std::string& manifest_path,
               int view_index, const std::string& mode, const std::string& out_path, int width,
               int height) {
    const Scene scene = load_checkpoint(checkpoint_path);
    const SceneManifest manifest = load_manifest(manifest_path, /*check_files=*/false);
    require(view_index >= 0 && view_index < static_cast<int>(manifest.views.size()),
            "render: view index out of range");
    const CameraView cam = manifest.views[view_index].cam;
    const int out_w = width > 0 ? width : cam.width;
    const int out_h = height > 0 ? height : cam.height;

    if (mode == "rgb") {
        const RenderOutput out = rasterize_rgb(scene, cam.scaled_to(out_w, out_h));
        save_image(out_path, out.image);
    } else if (mode == "feature") {
        const RenderOutput out = rasterize_features(scene, cam, out_w, out_h);
        save_fmap(out_path, out.image);
    } else if (mode == "feature-high") {
        require(!scene.decoder.empty(), "render: checkpoint has no decoder for feature-high");
        const RenderOutput out = rasterize_features(scene, cam, out_w, out_h);
        save_fmap(out_path, decoder_apply(scene.decoder, out.image));
    } else if (mode == "pca") {
        require(!scene.decoder.empty(), "render: checkpoint has no decoder for pca");
        const RenderOutput out = rasterize_features(scene, cam, out_w, out_h);
        save_image(out_path, pca_visualize(decoder_apply(scene.decoder, out.image)));
    } else {
        throw ValidationError("render: unknown mode '" + mode + "'");
    }
    write_run_record(record_path_for(out_path), "render",
                     {{"checkpoint", checkpoint_path},
                      {"manifest", manifest_path},
                      {"view", view_index},
                      {"mode", mode},
                      {"width", out_w},
                      {"height", out_h}},
                     0);
    return 0;
}

int cmd_finetune(const std::string& library_path, const std::string& out_path,
                 const std::string& init_path, int patch_size, int out_dim, FinetuneConfig cfg) {
    const SceneLibrary lib = load_library(library_path);
    if (out_dim <= 0) out_dim = lib.scenes.front().scene.decoder.out_channels;

    Rng rng(cfg.seed ^ 0xf1eef1eeULL);
    FeatureExtractor extractor = init_path.empty()
                                     ? FeatureExtractor::make_toy(patch_size, out_dim, rng)
                                     : load_extractor(init_path);

    const bool has_holdout = [&] {
        for (const auto& s : lib.scenes)
            for (const auto& v : s.views)
                if (v.holdout) return true;
        return false;
    }();
    const double before = has_holdout ? holdout_target_l1(extractor, lib) : 0.0;

    const FeatureExtractor tuned = finetune(extractor, lib, cfg);
    const double after = has_holdout ? holdout_target_l1(tuned, lib) : 0.0;

    save_extractor(out_path, tuned);
    json record = {{"library", library_path},
                   {"lr", cfg.lr},
                   {"weight_decay", cfg.weight_decay},
                   {"batch_size", cfg.batch_size},
                   {"epochs", cfg.epochs},
                   {"horizontal_flip", cfg.horizontal_flip},
                   {"patch_size", tuned.toy.patch_size},
                   {"out_dim", tuned.toy.out_dim}};
    if (has_holdout) {
        record["holdout_l1_before"] = before;
        record["holdout_l1_after"] = after;
    }
    write_run_record(record_path_for(out_path), "finetune", record, cfg.seed);
    return 0;
}

struct ProbeEntry {
    std::string orig, tuned, labels, depth, valid;
    bool eval = false;
};

int cmd_probe(const std::string& data_path, const std::string& task, const std::string& assembly,
              const std::string& out_path, ProbeTrainConfig cfg) {
    std::ifstream in(data_path);
    require(in.good(), "probe: cannot open '" + data_path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ValidationError("probe: invalid JSON in '" + data_path + "': " + e.what());
    }
    const fs::path base = fs::path(data_path).parent_path();
    auto resolve = [&](const std::string& p) { return (base / p).string(); };

    std::vector<ProbeEntry> entries;
    for (const auto& je : j.at("entries")) {
        ProbeEntry e;
        e.orig = je.at("orig").get<std::string>();
        e.tuned = je.value("tuned", "");
        e.labels = je.value("labels", "");
        e.depth = je.value("depth", "");
        e.valid = je.value("valid", "");
        e.eval = je.value("eval", false);
        entries.push_back(std::move(e));
    }
    require(!entries.empty(), "probe: dataset lists no entries");

    auto assemble_entry = [&](const ProbeEntry& e) {
        const FeatureImage orig = load_fmap(resolve(e.orig));
        if (assembly == "none" || (e.tuned.empty() && assembly != "concat-self")) {
            AssembledFeatures af;
            af.data = orig;
            af.strategy = AssemblyStrategy::kConcat;
            af.orig_channels = orig.channels;
            return af;
        }
        const FeatureImage tuned = assembly == "concat-self" ? orig : load_fmap(resolve(e.tuned));
        return assemble(orig, tuned, assembly_from_string(assembly));
    };

    json record;
    if (task == "seg") {
        const int num_classes = j.at("num_classes").get<int>();
        std::vector<AssembledFeatures> train_feats;
        std::vector<LabelMap> train_labels;
        std::vector<const ProbeEntry*> eval_entries;
        for (const auto& e : entries) {
            require(!e.labels.empty(), "probe: seg entry without labels");
            if (e.eval) {
                eval_entries.push_back(&e);
            } else {
                train_feats.push_back(assemble_entry(e));
                train_labels.push_back(load_label_map(resolve(e.labels)));
            }
        }
        require(!train_feats.empty(), "probe: no training entries");
        const SegProbe probe = train_seg_probe(train_feats, train_labels, num_classes, cfg);

        if (eval_entries.empty())
            for (const auto& e : entries) eval_entries.push_back(&e);
        double miou = 0, macc = 0, aacc = 0;
        for (const ProbeEntry* e : eval_entries) {
            const LabelMap gt = load_label_map(resolve(e->labels));
            const LabelMap pred = predict_seg(probe, assemble_entry(*e), gt.height, gt.width);
            const SegMetrics m = metrics_seg(pred, gt);
            miou += m.miou;
            macc += m.macc;
            aacc += m.aacc;
        }
        const double n = static_cast<double>(eval_entries.size());
        record = {{"task", "seg"},   {"assembly", assembly}, {"miou", miou / n},
                  {"macc", macc / n}, {"aacc", aacc / n}};
    } else if (task == "depth") {
        std::vector<DepthTrainSample> train;
        std::vector<const ProbeEntry*> eval_entries;
        auto token_of = [](const AssembledFeatures& af) {
            std::vector<double> token(af.data.channels, 0.0);
            const int np = af.data.height * af.data.width;
            for (int pi = 0; pi < np; ++pi)
                for (int c = 0; c < af.data.channels; ++c)
                    token[c] += af.data.data[static_cast<std::size_t>(pi) * af.data.channels + c];
            for (double& t : token) t /= np;
            return token;
        };
        for (const auto& e : entries) {
            require(!e.depth.empty(), "probe: depth entry without depth map");
            if (e.eval) {
                eval_entries.push_back(&e);
                continue;
            }
            DepthTrainSample s;
            AssembledFeatures af = assemble_entry(e);
            s.token = token_of(af);
            s.features = std::move(af.data);
            s.depth = load_fmap(resolve(e.depth));
            s.valid = e.valid.empty() ? FeatureImage(s.depth.height, s.depth.width, 1, 1.0)
                                      : load_fmap(resolve(e.valid));
            train.push_back(std::move(s));
        }
        require(!train.empty(), "probe: no training entries");
        const DepthProbe probe = train_depth_probe(train, cfg);

        double rmse = 0, absrel = 0;
        std::size_t n_eval = 0;
        auto eval_one = [&](const ProbeEntry& e) {
            AssembledFeatures af = assemble_entry(e);
            const std::vector<double> token = token_of(af);
            const FeatureImage gt = load_fmap(resolve(e.depth));
            const FeatureImage mask = e.valid.empty()
                                          ? FeatureImage(gt.height, gt.width, 1, 1.0)
                                          : load_fmap(resolve(e.valid));
            const FeatureImage pred = predict_depth(probe, af.data, token, gt.height, gt.width);
            const DepthMetrics m = metrics_depth(pred, gt, mask);
            rmse += m.rmse;
            absrel += m.absrel;
            ++n_eval;
        };
        if (eval_entries.empty())
            for (const auto& e : entries) eval_one(e);
        else
            for (const ProbeEntry* e : eval_entries) eval_one(*e);
        record = {{"task", "depth"},     {"assembly", assembly},
                  {"rmse", rmse / n_eval}, {"absrel", absrel / n_eval},
                  {"d_min", probe.d_min},  {"d_max", probe.d_max}};
    } else {
        throw ValidationError("probe: unknown task '" + task + "'");
    }

    record["epochs"] = cfg.epochs;
    record["lr"] = cfg.lr;
    {
        std::ofstream out(out_path);
        require(out.good(), "probe: cannot open '" + out_path + "'");
        out << record.dump(2) << "\n";
    }
    write_run_record(record_path_for(out_path), "probe", record, cfg.seed);
    return 0;
}

int cmd_eval(const std::string& task, const std::string& pred_path, const std::string& gt_path,
             const std::string& mask_path, const std::string& out_path) {
    json record;
    if (task == "seg") {
        const LabelMap pred = load_label_map(pred_path);
        const LabelMap gt = load_label_map(gt_path);
        const SegMetrics m = metrics_seg(pred, gt);
        record = {{"task", "seg"}, {"miou", m.miou}, {"macc", m.macc}, {"aacc", m.aacc}};
    } else if (task == "depth") {
        const FeatureImage pred = load_fmap(pred_path);
        const FeatureImage gt = load_fmap(gt_path);
        const FeatureImage mask = mask_path.empty() ? FeatureImage(gt.height, gt.width, 1, 1.0)
                                                    : load_fmap(mask_path);
        const DepthMetrics m = metrics_depth(pred, gt, mask);
        record = {{"task", "depth"}, {"rmse", m.rmse}, {"absrel", m.absrel}};
    } else {
        throw ValidationError("eval: unknown task '" + task + "'");
    }
    {
        std::ofstream out(out_path);
        require(out.good(), "eval: cannot open '" + out_path + "'");
        out << record.dump(2) << "\n";
    }
    write_run_record(record_path_for(out_path), "eval", record, 0);
    std::cout << record.dump() << "\n";
    return 0;
}

int cmd_viz(const std::string& input_path, const std::string& out_path) {
    const FeatureImage features = load_fmap(input_path);
    save_image(out_path, pca_visualize(features));
    write_run_record(record_path_for(out_path), "viz", {{"input", input_path}}, 0);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"featsplat: feature-Gaussian splatting engine"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    auto* synth = app.add_subcommand("synth", "generate a synthetic scene library");
    std::string synth_out;
    int synth_scenes = 1;
    bool synth_decoder_out_set = false;
    SynthConfig scfg;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--scenes", synth_scenes, "number of scenes");
    synth->add_option("--gaussians", scfg.gaussians, "gaussians per scene");
    synth->add_option("--feature-dim", scfg.feature_dim, "per-gaussian feature dimension D");
    synth->add_option("--decoder-out", scfg.decoder_out, "ground-truth feature map channels")
        ->each([&](const std::string&) { synth_decoder_out_set = true; });
    synth->add_option("--views", scfg.views, "views per scene");
    synth->add_option("--holdout", scfg.holdout_views, "held-out views per scene");
    synth->add_option("--width", scfg.width, "image width");
    synth->add_option("--height", scfg.height, "image height");
    synth->add_option("--feat-width", scfg.feat_width, "feature map width");
    synth->add_option("--feat-height", scfg.feat_height, "feature map height");
    synth->add_option("--sh-degree", scfg.sh_degree, "SH degree of the ground truth");
    synth->add_option("--seed", scfg.seed, "rng seed");

    auto* fit = app.add_subcommand("fit", "fit a feature-Gaussian scene to a manifest");
    std::string fit_manifest, fit_out, fit_metrics, fit_init;
    int fit_init_gaussians = 1000, fit_sh_degree = 3;
    FitConfig fcfg;
    bool fit_densify = false, fit_no_rgb = false, fit_no_feat = false;
    fit->add_option("--manifest", fit_manifest, "scene manifest")->required();
    fit->add_option("--out", fit_out, "output checkpoint (.gspl)")->required();
    fit->add_option("--metrics", fit_metrics, "metric log path (.jsonl)");
    fit->add_option("--init", fit_init, "initial checkpoint (otherwise random init)");
    fit->add_option("--init-gaussians", fit_init_gaussians, "gaussian count for random init");
    fit->add_option("--sh-degree", fit_sh_degree, "SH degree for random init");
    fit->add_option("--iterations", fcfg.iterations, "optimization iterations");
    fit->add_option("--feature-dim", fcfg.feature_dim, "per-gaussian feature dimension D");
    fit->add_flag("--any-feature-dim", fcfg.allow_any_feature_dim,
                  "allow feature dims outside {32,64,128}");
    fit->add_option("--lambda-dssim", fcfg.lambda_dssim, "D-SSIM mixing weight");
    fit->add_option("--seed", fcfg.seed, "rng seed");
    fit->add_option("--metric-interval", fcfg.metric_interval, "iterations between metric rows");
    fit->add_flag("--densify", fit_densify, "enable clone/split/prune");
    fit->add_flag("--disable-rgb-loss", fit_no_rgb, "skip the RGB loss entirely");
    fit->add_flag("--disable-feature-loss", fit_no_feat, "skip the feature loss entirely");

    auto* render = app.add_subcommand("render", "render a fitted checkpoint");
    std::string render_checkpoint, render_manifest, render_mode = "rgb", render_out;
    int render_view = 0, render_w = 0, render_h = 0;
    render->add_option("--checkpoint", render_checkpoint, "scene checkpoint")->required();
    render->add_option("--manifest", render_manifest, "manifest providing camera poses")
        ->required();
    render->add_option("--view", render_view, "view index into the manifest");
    render->add_option("--mode", render_mode, "rgb | feature | feature-high | pca");
    render->add_option("--out", render_out, "output file")->required();
    render->add_option("--width", render_w, "override output width");
    render->add_option("--height", render_h, "override output height");

    auto* ft = app.add_subcommand("finetune", "3D-aware fine-tuning of the toy extractor");
    std::string ft_library, ft_out, ft_init;
    int ft_patch = 8, ft_dim = 0;
    FinetuneConfig ftcfg;
    bool ft_no_flip = false;
    ft->add_option("--library", ft_library, "scene library JSON")->required();
    ft->add_option("--out", ft_out, "output extractor checkpoint (.fext)")->required();
    ft->add_option("--init", ft_init, "initial extractor checkpoint");
    ft->add_option("--patch-size", ft_patch, "toy encoder patch size");
    ft->add_option("--dim", ft_dim, "extractor feature dimension (default: decoder C_out)");
    ft->add_option("--lr", ftcfg.lr, "learning rate");
    ft->add_option("--weight-decay", ftcfg.weight_decay, "AdamW weight decay");
    ft->add_option("--batch-size", ftcfg.batch_size, "batch size");
    ft->add_option("--epochs", ftcfg.epochs, "epochs over the training views");
    ft->add_flag("--no-flip", ft_no_flip, "disable horizontal-flip augmentation");
    ft->add_option("--seed", ftcfg.seed, "rng seed");
    ft->add_option("--max-steps", ftcfg.max_steps, "cap on optimizer steps");

    auto* probe = app.add_subcommand("probe", "train and evaluate a linear probe");
    std::string probe_data, probe_task, probe_assembly = "concat", probe_out;
    ProbeTrainConfig pcfg;
    probe->add_option("--data", probe_data, "probe dataset JSON")->required();
    probe->add_option("--task", probe_task, "seg | depth")->required();
    probe->add_option("--assembly", probe_assembly,
                      "concat | add | linear-fusion | concat-self | none");
    probe->add_option("--out", probe_out, "metrics record path")->required();
    probe->add_option("--epochs", pcfg.epochs, "training epochs");
    probe->add_option("--lr", pcfg.lr, "learning rate");
    probe->add_option("--poly-power", pcfg.poly_power, "poly lr decay power");
    probe->add_option("--seed", pcfg.seed, "rng seed");

    auto* ev = app.add_subcommand("eval", "compute metrics from prediction files");
    std::string ev_task, ev_pred, ev_gt, ev_mask, ev_out;
    ev->add_option("--task", ev_task, "seg | depth")->required();
    ev->add_option("--pred", ev_pred, "prediction file (png for seg, fmap for depth)")->required();
    ev->add_option("--gt", ev_gt, "ground truth file")->required();
    ev->add_option("--mask", ev_mask, "validity mask (depth only)");
    ev->add_option("--out", ev_out, "metrics record path")->required();

    auto* viz = app.add_subcommand("viz", "PCA visualization of a feature map");
    std::string viz_in, viz_out;
    viz->add_option("--input", viz_in, "input feature map (.fmap)")->required();
    viz->add_option("--out", viz_out, "output PNG")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth) {
            if (!synth_decoder_out_set) scfg.decoder_out = scfg.feature_dim;
            return cmd_synth(synth_out, synth_scenes, scfg);
        }
        if (*fit) {
            fcfg.densify_enabled = fit_densify;
            fcfg.rgb_loss_enabled = !fit_no_rgb;
            fcfg.feature_loss_enabled = !fit_no_feat;
            if (fit_metrics.empty()) fit_metrics = fit_out + ".metrics.jsonl";
            return cmd_fit(fit_manifest, fit_out, fit_metrics, fit_init, fit_init_gaussians,
                           fit_sh_degree, fcfg);
        }
        if (*render)
            return cmd_render(render_checkpoint, render_manifest, render_view, render_mode,
                              render_out, render_w, render_h);
        if (*ft) {
            ftcfg.horizontal_flip = !ft_no_flip;
            return cmd_finetune(ft_library, ft_out, ft_init, ft_patch, ft_dim, ftcfg);
        }
        if (*probe) return cmd_probe(probe_data, probe_task, probe_assembly, probe_out, pcfg);
        if (*ev) return cmd_eval(ev_task, ev_pred, ev_gt, ev_mask, ev_out);
        if (*viz) return cmd_viz(viz_in, viz_out);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
