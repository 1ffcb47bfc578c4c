// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "featsplat/camera.hpp"
#include "featsplat/extractor.hpp"
#include "featsplat/gaussian.hpp"
#include "featsplat/image.hpp"
#include "featsplat/png.hpp"
#include "featsplat/probe.hpp"

namespace featsplat {

inline constexpr const char* kVersion = "featsplat-0.1.0";

namespace io_detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), 4);
}
inline std::uint32_t read_u32(std::istream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
inline void write_f32(std::ostream& out, double v) {
    const float f = static_cast<float>(v);
    out.write(reinterpret_cast<const char*>(&f), 4);
}
inline double read_f32(std::istream& in) {
    float f = 0.0f;
    in.read(reinterpret_cast<char*>(&f), 4);
    return static_cast<double>(f);
}
inline void write_f32_vec(std::ostream& out, const std::vector<double>& v) {
    for (double x : v) write_f32(out, x);
}
inline void read_f32_vec(std::istream& in, std::vector<double>& v) {
    for (double& x : v) x = read_f32(in);
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "cannot open '" + path + "' for writing");
    return out;
}
inline std::ifstream open_in(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "cannot open '" + path + "'");
    return in;
}

}  // namespace io_detail

// ---------------------------------------------------------------------------
// FMAP: magic "FMAP", version u32=1, H u32, W u32, C u32, then H*W*C float32
// little-endian, row-major, channel-innermost.
// ---------------------------------------------------------------------------

inline void save_fmap(const std::string& path, const FeatureImage& img) {
    require(img.all_finite(), "fmap: refusing to write non-finite values to '" + path + "'");
    auto out = io_detail::open_out(path);
    out.write("FMAP", 4);
    io_detail::write_u32(out, 1);
    io_detail::write_u32(out, static_cast<std::uint32_t>(img.height));
    io_detail::write_u32(out, static_cast<std::uint32_t>(img.width));
    io_detail::write_u32(out, static_cast<std::uint32_t>(img.channels));
    io_detail::write_f32_vec(out, img.data);
    require(out.good(), "fmap: write failed for '" + path + "'");
}

inline FeatureImage load_fmap(const std::string& path) {
    auto in = io_detail::open_in(path);
    char magic[4];
    in.read(magic, 4);
    require(in.good() && std::memcmp(magic, "FMAP", 4) == 0,
            "fmap: bad magic in '" + path + "'");
    require(io_detail::read_u32(in) == 1, "fmap: unsupported version in '" + path + "'");
    const int h = static_cast<int>(io_detail::read_u32(in));
    const int w = static_cast<int>(io_detail::read_u32(in));
    const int c = static_cast<int>(io_detail::read_u32(in));
    require(h > 0 && w > 0 && c > 0, "fmap: bad dimensions in '" + path + "'");
    FeatureImage img(h, w, c);
    io_detail::read_f32_vec(in, img.data);
    require(in.good(), "fmap: truncated file '" + path + "'");
    require(img.all_finite(), "fmap: non-finite values in '" + path + "'");
    return img;
}

// ---------------------------------------------------------------------------
// GSPL scene checkpoint: magic "GSPL", version u32=1, M u32, D u32, sh_degree
// u32, per-Gaussian records (mean f32x3, log-scale f32x3, quaternion f32x4,
// opacity-logit f32, SH f32x3*(L+1)^2, feature f32xD), then decoder C_out u32,
// kernel f32[C_out*D*9], bias f32[C_out]. A C_out of 0 means no decoder.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::string& path, const Scene& scene) {
    scene.validate();
    auto out = io_detail::open_out(path);
    out.write("GSPL", 4);
    io_detail::write_u32(out, 1);
    io_detail::write_u32(out, static_cast<std::uint32_t>(scene.count()));
    io_detail::write_u32(out, static_cast<std::uint32_t>(scene.feature_dim));
    io_detail::write_u32(out, static_cast<std::uint32_t>(scene.sh_degree));
    for (const auto& g : scene.gaussians) {
        for (int i = 0; i < 3; ++i) io_detail::write_f32(out, g.mean[i]);
        for (int i = 0; i < 3; ++i) io_detail::write_f32(out, g.log_scale[i]);
        for (int i = 0; i < 4; ++i) io_detail::write_f32(out, g.rotation[i]);
        io_detail::write_f32(out, g.opacity_logit);
        io_detail::write_f32_vec(out, g.sh);
        io_detail::write_f32_vec(out, g.feature);
    }
    if (scene.decoder.empty()) {
        io_detail::write_u32(out, 0);
    } else {
        io_detail::write_u32(out, static_cast<std::uint32_t>(scene.decoder.out_channels));
        io_detail::write_f32_vec(out, scene.decoder.kernel);
        io_detail::write_f32_vec(out, scene.decoder.bias);
    }
    require(out.good(), "checkpoint: write failed for '" + path + "'");
}

inline Scene load_checkpoint(const std::string& path) {
    auto in = io_detail::open_in(path);
    char magic[4];
    in.read(magic, 4);
    require(in.good() && std::memcmp(magic, "GSPL", 4) == 0,
            "checkpoint: bad magic in '" + path + "'");
    require(io_detail::read_u32(in) == 1, "checkpoint: unsupported version in '" + path + "'");
    Scene scene;
    const int m = static_cast<int>(io_detail::read_u32(in));
    scene.feature_dim = static_cast<int>(io_detail::read_u32(in));
    scene.sh_degree = static_cast<int>(io_detail::read_u32(in));
    require(m >= 0 && scene.sh_degree >= 0 && scene.sh_degree <= 3,
            "checkpoint: bad header in '" + path + "'");
    const int n_sh = 3 * sh_coeff_count(scene.sh_degree);
    scene.gaussians.resize(m);
    for (auto& g : scene.gaussians) {
        for (int i = 0; i < 3; ++i) g.mean[i] = io_detail::read_f32(in);
        for (int i = 0; i < 3; ++i) g.log_scale[i] = io_detail::read_f32(in);
        for (int i = 0; i < 4; ++i) g.rotation[i] = io_detail::read_f32(in);
        g.opacity_logit = io_detail::read_f32(in);
        g.sh.resize(n_sh);
        io_detail::read_f32_vec(in, g.sh);
        g.feature.resize(scene.feature_dim);
        io_detail::read_f32_vec(in, g.feature);
    }
    const int c_out = static_cast<int>(io_detail::read_u32(in));
    if (c_out > 0) {
        scene.decoder.in_channels = scene.feature_dim;
        scene.decoder.out_channels = c_out;
        scene.decoder.kernel.resize(static_cast<std::size_t>(c_out) * scene.feature_dim * 9);
        scene.decoder.bias.resize(c_out);
        io_detail::read_f32_vec(in, scene.decoder.kernel);
        io_detail::read_f32_vec(in, scene.decoder.bias);
    }
    require(in.good(), "checkpoint: truncated file '" + path + "'");
    scene.validate();
    return scene;
}

// ---------------------------------------------------------------------------
// FEXT extractor checkpoint: magic "FEXT", version u32=1, kind u32 (0 = toy
// patch encoder), patch u32, out_dim u32, then the flat parameter vector as
// f32. File-backed extractors hold no parameters and are not checkpointable.
// ---------------------------------------------------------------------------

inline void save_extractor(const std::string& path, const FeatureExtractor& extractor) {
    require(extractor.kind == FeatureExtractor::Kind::kToyPatchEncoder,
            "extractor checkpoint: file-backed extractors have no parameters to save");
    auto out = io_detail::open_out(path);
    out.write("FEXT", 4);
    io_detail::write_u32(out, 1);
    io_detail::write_u32(out, 0);
    io_detail::write_u32(out, static_cast<std::uint32_t>(extractor.toy.patch_size));
    io_detail::write_u32(out, static_cast<std::uint32_t>(extractor.toy.out_dim));
    FeatureExtractor copy = extractor;
    io_detail::write_f32_vec(out, copy.toy.flatten());
    require(out.good(), "extractor checkpoint: write failed for '" + path + "'");
}

inline FeatureExtractor load_extractor(const std::string& path) {
    auto in = io_detail::open_in(path);
    char magic[4];
    in.read(magic, 4);
    require(in.good() && std::memcmp(magic, "FEXT", 4) == 0,
            "extractor checkpoint: bad magic in '" + path + "'");
    require(io_detail::read_u32(in) == 1,
            "extractor checkpoint: unsupported version in '" + path + "'");
    require(io_detail::read_u32(in) == 0, "extractor checkpoint: unknown extractor kind");
    const int patch = static_cast<int>(io_detail::read_u32(in));
    const int dim = static_cast<int>(io_detail::read_u32(in));
    Rng dummy(0);
    FeatureExtractor e = FeatureExtractor::make_toy(patch, dim, dummy);
    std::vector<double> flat(e.toy.param_count());
    io_detail::read_f32_vec(in, flat);
    require(in.good(), "extractor checkpoint: truncated file '" + path + "'");
    e.toy.unflatten(flat);
    return e;
}

// ---------------------------------------------------------------------------
// Scene manifest (JSON): scene id, feature channel count and per-view entries
// with image path, feature-map path, intrinsics and the row-major 4x4
// world-to-camera transform.
// ---------------------------------------------------------------------------

struct ManifestView {
    CameraView cam;  // image_path / feature_path filled in
    bool holdout = false;
};

struct SceneManifest {
    std::string scene_id;
    int feature_channels = 0;
    std::vector<ManifestView> views;
    std::string base_dir;  // resolves relative paths

    std::string resolve(const std::string& p) const {
        std::filesystem::path fp(p);
        if (fp.is_absolute() || base_dir.empty()) return p;
        return (std::filesystem::path(base_dir) / fp).string();
    }
};

inline nlohmann::json manifest_to_json(const SceneManifest& m) {
    nlohmann::json views = nlohmann::json::array();
    for (const auto& v : m.views) {
        nlohmann::json jv;
        jv["image"] = v.cam.image_path;
        jv["features"] = v.cam.feature_path;
        jv["width"] = v.cam.width;
        jv["height"] = v.cam.height;
        jv["fx"] = v.cam.fx;
        jv["fy"] = v.cam.fy;
        jv["cx"] = v.cam.cx;
        jv["cy"] = v.cam.cy;
        std::vector<double> w2c(16);
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 4; ++c) w2c[r * 4 + c] = v.cam.world_to_camera(r, c);
        jv["world_to_camera"] = w2c;
        if (v.holdout) jv["holdout"] = true;
        views.push_back(jv);
    }
    return {{"scene_id", m.scene_id},
            {"feature_channels", m.feature_channels},
            {"views", views}};
}

inline SceneManifest manifest_from_json(const nlohmann::json& j, const std::string& base_dir) {
    SceneManifest m;
    m.base_dir = base_dir;
    m.scene_id = j.at("scene_id").get<std::string>();
    m.feature_channels = j.at("feature_channels").get<int>();
    for (const auto& jv : j.at("views")) {
        ManifestView v;
        v.cam.image_path = jv.at("image").get<std::string>();
        v.cam.feature_path = jv.at("features").get<std::string>();
        v.cam.width = jv.at("width").get<int>();
        v.cam.height = jv.at("height").get<int>();
        v.cam.fx = jv.at("fx").get<double>();
        v.cam.fy = jv.at("fy").get<double>();
        v.cam.cx = jv.at("cx").get<double>();
        v.cam.cy = jv.at("cy").get<double>();
        const auto w2c = jv.at("world_to_camera").get<std::vector<double>>();
        require(w2c.size() == 16, "manifest: world_to_camera must hold 16 scalars");
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 4; ++c) v.cam.world_to_camera(r, c) = w2c[r * 4 + c];
        v.cam.validate();
        v.holdout = jv.value("holdout", false);
        m.views.push_back(v);
    }
    return m;
}

inline void save_manifest(const std::string& path, const SceneManifest& m) {
    std::ofstream out(path);
    require(out.good(), "manifest: cannot open '" + path + "' for writing");
    out << manifest_to_json(m).dump(2) << "\n";
    require(out.good(), "manifest: write failed for '" + path + "'");
}

// Loads and validates a manifest. With check_files, every referenced file must
// exist (feature files are named in the error, the fit command's exit-2 path).
inline SceneManifest load_manifest(const std::string& path, bool check_files = true) {
    std::ifstream in(path);
    require(in.good(), "manifest: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("manifest: invalid JSON in '" + path + "': " + e.what());
    }
    SceneManifest m =
        manifest_from_json(j, std::filesystem::path(path).parent_path().string());
    if (check_files) {
        for (const auto& v : m.views) {
            const std::string img = m.resolve(v.cam.image_path);
            const std::string feat = m.resolve(v.cam.feature_path);
            require(std::filesystem::exists(img), "manifest: missing image file '" + img + "'");
            require(std::filesystem::exists(feat),
                    "manifest: missing feature file '" + feat + "'");
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Image <-> FeatureImage conversion (8-bit PNG, [0,1] range) and label maps.
// ---------------------------------------------------------------------------

inline FeatureImage load_image(const std::string& path) {
    const PngImage png = png_load(path);
    FeatureImage img(png.height, png.width, 3);
    for (int y = 0; y < png.height; ++y)
        for (int x = 0; x < png.width; ++x)
            for (int c = 0; c < 3; ++c) {
                const int src_c = png.channels == 1 ? 0 : c;
                img.at(y, x, c) =
                    png.pixels[(static_cast<std::size_t>(y) * png.width + x) * png.channels +
                               src_c] /
                    255.0;
            }
    return img;
}

inline void save_image(const std::string& path, const FeatureImage& img) {
    require(img.channels == 3 || img.channels == 1, "save_image: expected 1 or 3 channels");
    PngImage png;
    png.width = img.width;
    png.height = img.height;
    png.channels = img.channels;
    png.pixels.resize(img.data.size());
    for (std::size_t i = 0; i < img.data.size(); ++i) {
        const double v = std::clamp(img.data[i], 0.0, 1.0);
        png.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    png_save(path, png);
}

inline LabelMap load_label_map(const std::string& path) {
    const PngImage png = png_load(path);
    require(png.channels == 1, "labels: expected an 8-bit grayscale PNG");
    LabelMap lm;
    lm.height = png.height;
    lm.width = png.width;
    lm.ids.resize(png.pixels.size());
    for (std::size_t i = 0; i < png.pixels.size(); ++i) lm.ids[i] = png.pixels[i];
    return lm;
}

inline void save_label_map(const std::string& path, const LabelMap& lm) {
    PngImage png;
    png.width = lm.width;
    png.height = lm.height;
    png.channels = 1;
    png.pixels.resize(lm.ids.size());
    for (std::size_t i = 0; i < lm.ids.size(); ++i)
        png.pixels[i] = static_cast<std::uint8_t>(std::clamp(lm.ids[i], 0, 255));
    png_save(path, png);
}

// ---------------------------------------------------------------------------
// Run records: every command writes a machine-readable record of its config,
// version and seed next to its primary output.
// ---------------------------------------------------------------------------

inline void write_run_record(const std::string& path, const std::string& command,
                             const nlohmann::json& config, std::uint64_t seed) {
    nlohmann::json j = {{"command", command},
                        {"version", kVersion},
                        {"seed", seed},
                        {"config", config}};
    std::ofstream out(path);
    require(out.good(), "run record: cannot open '" + path + "' for writing");
    out << j.dump(2) << "\n";
    require(out.good(), "run record: write failed for '" + path + "'");
}

}  // namespace featsplat
