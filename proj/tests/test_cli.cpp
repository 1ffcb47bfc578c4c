// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cstdlib>
#include <featsplat/io.hpp>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace featsplat;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kWork = [] {
    fs::path p = fs::temp_directory_path() / "featsplat_cli_tests";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}();

int run_cli(const std::string& args, const std::string& log_name = "") {
    std::ostringstream cmd;
    cmd << FEATSPLAT_CLI_PATH << " " << args;
    if (!log_name.empty())
        cmd << " >" << (kWork / log_name).string() << " 2>&1";
    else
        cmd << " >/dev/null 2>&1";
    const int rc = std::system(cmd.str().c_str());
    return WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

const std::string kSceneDir = (kWork / "data").string();

void ensure_synth() {
    static bool done = [] {
        REQUIRE(run_cli("synth --out " + kSceneDir +
                        " --scenes 2 --gaussians 12 --feature-dim 8 --views 6 --holdout 2"
                        " --width 48 --height 48 --feat-width 24 --feat-height 24 --seed 11") ==
                0);
        return true;
    }();
    (void)done;
}

}  // namespace

TEST_CASE("synth writes manifests, images, feature maps, checkpoints and run record") {
    ensure_synth();
    CHECK(fs::exists(kWork / "data/library.json"));
    CHECK(fs::exists(kWork / "data/synth.runrecord.json"));
    CHECK(fs::exists(kWork / "data/scene_0/manifest.json"));
    CHECK(fs::exists(kWork / "data/scene_0/gt_scene.gspl"));
    CHECK(fs::exists(kWork / "data/scene_1/correspondences.json"));

    const SceneManifest m = load_manifest((kWork / "data/scene_0/manifest.json").string());
    CHECK(m.views.size() == 6);
    CHECK(m.feature_channels == 8);
    int holdouts = 0;
    for (const auto& v : m.views) holdouts += v.holdout ? 1 : 0;
    CHECK(holdouts == 2);
}

TEST_CASE("fit honors the default feature dim 64 in the checkpoint header") {
    ensure_synth();
    const std::string out = (kWork / "fit_d64.gspl").string();
    REQUIRE(run_cli("fit --manifest " + kSceneDir + "/scene_0/manifest.json --out " + out +
                    " --iterations 3 --init-gaussians 40 --seed 2") == 0);
    const Scene scene = load_checkpoint(out);
    CHECK(scene.feature_dim == 64);  // CLI default
    CHECK(fs::exists(out + ".runrecord.json"));

    json record;
    std::ifstream(out + ".runrecord.json") >> record;
    CHECK(record["config"]["feature_dim"] == 64);
    CHECK(record["version"] == kVersion);
}

TEST_CASE("fit rejects feature dims outside 32/64/128 without the override") {
    ensure_synth();
    const std::string base = "fit --manifest " + kSceneDir +
                             "/scene_0/manifest.json --out " + (kWork / "fit_d8.gspl").string() +
                             " --iterations 2 --feature-dim 8 --init-gaussians 10";
    CHECK(run_cli(base) == 2);
    CHECK(run_cli(base + " --any-feature-dim") == 0);
}

TEST_CASE("seeded fits are byte-identical and emit parseable metric logs") {
    ensure_synth();
    const std::string a = (kWork / "det_a.gspl").string();
    const std::string b = (kWork / "det_b.gspl").string();
    const std::string common = "fit --manifest " + kSceneDir +
                               "/scene_0/manifest.json --iterations 30 --feature-dim 8"
                               " --any-feature-dim --init " +
                               kSceneDir + "/scene_0/gt_scene.gspl --seed 77 --metric-interval 10";
    REQUIRE(run_cli(common + " --out " + a) == 0);
    REQUIRE(run_cli(common + " --out " + b) == 0);
    CHECK(file_bytes(a) == file_bytes(b));

    std::ifstream metrics(a + ".metrics.jsonl");
    std::string line;
    int rows = 0;
    while (std::getline(metrics, line)) {
        const json j = json::parse(line);
        CHECK(j.contains("iteration"));
        CHECK(j.contains("loss_rgb"));
        CHECK(j.contains("loss_feat"));
        CHECK(j.contains("psnr"));
        ++rows;
    }
    CHECK(rows == 3);
}

TEST_CASE("missing feature files fail validation with exit code 2 naming the path") {
    ensure_synth();
    const fs::path broken = kWork / "broken";
    fs::copy(kWork / "data/scene_0", broken, fs::copy_options::recursive);
    fs::remove(broken / "features/view_02.fmap");
    const int rc = run_cli("fit --manifest " + (broken / "manifest.json").string() +
                               " --out " + (kWork / "broken.gspl").string() +
                               " --iterations 2 --feature-dim 8 --any-feature-dim",
                           "missing_feat.log");
    CHECK(rc == 2);
    CHECK(slurp(kWork / "missing_feat.log").find("view_02.fmap") != std::string::npos);
}

TEST_CASE("render modes produce the contracted file shapes") {
    ensure_synth();
    const std::string fit_out = (kWork / "render_scene.gspl").string();
    REQUIRE(run_cli("fit --manifest " + kSceneDir + "/scene_0/manifest.json --out " + fit_out +
                    " --iterations 10 --feature-dim 8 --any-feature-dim --init " + kSceneDir +
                    "/scene_0/gt_scene.gspl --seed 3") == 0);

    const std::string base = "render --checkpoint " + fit_out + " --manifest " + kSceneDir +
                             "/scene_0/manifest.json --view 1 ";
    REQUIRE(run_cli(base + "--mode rgb --out " + (kWork / "r.png").string()) == 0);
    REQUIRE(run_cli(base + "--mode feature --out " + (kWork / "r.fmap").string()) == 0);
    REQUIRE(run_cli(base + "--mode feature-high --out " + (kWork / "rh.fmap").string()) == 0);
    REQUIRE(run_cli(base + "--mode pca --out " + (kWork / "rp.png").string()) == 0);

    CHECK(load_fmap((kWork / "r.fmap").string()).channels == 8);        // C = D
    CHECK(load_fmap((kWork / "rh.fmap").string()).channels == 8);       // C = decoder C_out
    CHECK(png_load((kWork / "rp.png").string()).channels == 3);          // pca is a 3-channel PNG
    CHECK(png_load((kWork / "r.png").string()).channels == 3);

    // Malformed checkpoint magic is a validation failure.
    const fs::path junk = kWork / "junk.gspl";
    {
        std::ofstream out(junk, std::ios::binary);
        out << "XXXXGARBAGE";
    }
    CHECK(run_cli("render --checkpoint " + junk.string() + " --manifest " + kSceneDir +
                  "/scene_0/manifest.json --mode rgb --out " + (kWork / "x.png").string()) == 2);
}

TEST_CASE("finetune defaults land in the run record and epochs 3 is accepted") {
    ensure_synth();
    const std::string out = (kWork / "enc.fext").string();
    REQUIRE(run_cli("finetune --library " + kSceneDir + "/library.json --out " + out +
                    " --patch-size 8 --seed 5") == 0);
    json record;
    std::ifstream(out + ".runrecord.json") >> record;
    CHECK(record["config"]["lr"] == 1e-5);
    CHECK(record["config"]["weight_decay"] == 1e-4);
    CHECK(record["config"]["batch_size"] == 2);
    CHECK(record["config"]["epochs"] == 1);
    CHECK(record["config"].contains("holdout_l1_before"));
    CHECK(record["config"].contains("holdout_l1_after"));

    CHECK(run_cli("finetune --library " + kSceneDir + "/library.json --out " +
                  (kWork / "enc3.fext").string() + " --patch-size 8 --epochs 3 --seed 5") == 0);

    // An empty library is a validation failure.
    const fs::path empty = kWork / "empty_library.json";
    {
        std::ofstream outj(empty);
        outj << R"({"scenes": []})";
    }
    CHECK(run_cli("finetune --library " + empty.string() + " --out " +
                  (kWork / "none.fext").string()) == 2);
}

TEST_CASE("eval on a pred==gt fixture emits mIoU 1.0") {
    LabelMap lm{8, 8, {}};
    lm.ids.assign(64, 0);
    for (int i = 32; i < 64; ++i) lm.ids[i] = 1;
    const fs::path gt = kWork / "gt_labels.png";
    save_label_map(gt.string(), lm);

    const std::string out = (kWork / "eval_metrics.json").string();
    REQUIRE(run_cli("eval --task seg --pred " + gt.string() + " --gt " + gt.string() +
                    " --out " + out) == 0);
    json record;
    std::ifstream(out) >> record;
    CHECK(record["miou"] == 1.0);
    CHECK(record["aacc"] == 1.0);
}

TEST_CASE("probe seg runs end-to-end with concat and concat-self assemblies") {
    // Tiny separable dataset written to disk: class = left/right half.
    const fs::path dir = kWork / "probe_data";
    fs::create_directories(dir);
    json dataset = {{"num_classes", 2}, {"entries", json::array()}};
    Rng rng(9);
    for (int i = 0; i < 3; ++i) {
        FeatureImage orig(8, 8, 4);
        FeatureImage tuned(8, 8, 4);
        LabelMap lm{16, 16, {}};
        lm.ids.assign(256, 0);
        for (int py = 0; py < 8; ++py)
            for (int px = 0; px < 8; ++px) {
                const int cls = px < 4 ? 0 : 1;
                orig.at(py, px, cls) = 1.0;
                orig.at(py, px, 2) = 0.05 * rng.normal();
                tuned.at(py, px, 3 - cls) = -1.0;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) lm.at(py * 2 + dy, px * 2 + dx) = cls;
            }
        const std::string o = "orig_" + std::to_string(i) + ".fmap";
        const std::string t = "tuned_" + std::to_string(i) + ".fmap";
        const std::string l = "labels_" + std::to_string(i) + ".png";
        save_fmap((dir / o).string(), orig);
        save_fmap((dir / t).string(), tuned);
        save_label_map((dir / l).string(), lm);
        dataset["entries"].push_back(
            {{"orig", o}, {"tuned", t}, {"labels", l}, {"eval", i == 2}});
    }
    {
        std::ofstream out(dir / "dataset.json");
        out << dataset.dump();
    }

    for (const std::string assembly : {"concat", "concat-self", "add", "linear-fusion"}) {
        const std::string out = (kWork / ("probe_" + assembly + ".json")).string();
        REQUIRE(run_cli("probe --data " + (dir / "dataset.json").string() +
                        " --task seg --assembly " + assembly + " --epochs 30 --lr 0.5 --out " +
                        out) == 0);
        json record;
        std::ifstream(out) >> record;
        CHECK(record["task"] == "seg");
        CHECK(record["assembly"] == assembly);
        CHECK(record["miou"].get<double>() >= 0.99);
    }
}

TEST_CASE("probe depth runs end-to-end and emits rmse/absrel with the probe range") {
    const fs::path dir = kWork / "depth_data";
    fs::create_directories(dir);
    json dataset = {{"num_classes", 0}, {"entries", json::array()}};
    for (int i = 0; i < 3; ++i) {
        const int gh = 8, gw = 8;
        FeatureImage feats(gh, gw, 2);
        FeatureImage depth(gh, gw, 1);
        FeatureImage valid(gh, gw, 1, 1.0);
        for (int pi = 0; pi < gh * gw; ++pi) {
            const double t = (pi + i * 0.33) / static_cast<double>(gh * gw);
            depth.data[pi] = 1.0 + 2.0 * t;
            feats.data[pi * 2] = t;
            feats.data[pi * 2 + 1] = 1.0 - t;
        }
        const std::string f = "feats_" + std::to_string(i) + ".fmap";
        const std::string d = "depth_" + std::to_string(i) + ".fmap";
        const std::string v = "valid_" + std::to_string(i) + ".fmap";
        save_fmap((dir / f).string(), feats);
        save_fmap((dir / d).string(), depth);
        save_fmap((dir / v).string(), valid);
        dataset["entries"].push_back(
            {{"orig", f}, {"depth", d}, {"valid", v}, {"eval", i == 2}});
    }
    {
        std::ofstream out(dir / "dataset.json");
        out << dataset.dump();
    }
    const std::string out = (kWork / "probe_depth.json").string();
    REQUIRE(run_cli("probe --data " + (dir / "dataset.json").string() +
                    " --task depth --assembly none --epochs 800 --lr 2.0 --out " + out) == 0);
    json record;
    std::ifstream(out) >> record;
    CHECK(record["task"] == "depth");
    CHECK(record["d_min"].get<double>() < record["d_max"].get<double>());
    CHECK(record["rmse"].get<double>() < 0.2);  // range is 2.0; the probe must track it
    CHECK(record["absrel"].get<double>() < 0.1);
    CHECK(fs::exists(out + ".runrecord.json"));
}

TEST_CASE("viz exports a pca png from a feature map") {
    Rng rng(10);
    FeatureImage f(12, 12, 6);
    for (double& v : f.data) v = rng.uniform(-1, 1);
    const fs::path in = kWork / "viz_in.fmap";
    save_fmap(in.string(), f);
    const fs::path out = kWork / "viz_out.png";
    REQUIRE(run_cli("viz --input " + in.string() + " --out " + out.string()) == 0);
    const PngImage png = png_load(out.string());
    CHECK(png.width == 12);
    CHECK(png.height == 12);
    CHECK(png.channels == 3);
}
