// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <condition_variable>
#include <deque>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "featsplat/camera.hpp"
#include "featsplat/gaussian.hpp"
#include "featsplat/image.hpp"
#include "featsplat/optim.hpp"
#include "featsplat/rasterizer.hpp"

namespace featsplat {

// Desk-scale stand-in for a ViT feature extractor: per-patch linear embedding,
// two residual blocks of per-patch linear + tanh followed by 3x3 neighborhood
// mixing over the patch grid, and a learned global token from the mean patch
// embedding. Differentiable end-to-end; small enough that the full fine-tuning
// gradient can be finite-difference checked.
struct ToyPatchEncoder {
    int patch_size = 14;
    int out_dim = 64;

    std::vector<double> embed_w;  // out_dim x (3*P*P)
    std::vector<double> embed_b;  // out_dim
    struct Block {
        std::vector<double> w;  // out_dim x out_dim
        std::vector<double> b;  // out_dim
        FeatureDecoder mix;     // 3x3 grid mixing, out_dim -> out_dim
    };
    std::array<Block, 2> blocks;
    std::vector<double> token_w;  // out_dim x out_dim
    std::vector<double> token_b;  // out_dim

    static ToyPatchEncoder random_init(int patch_size, int out_dim, Rng& rng) {
        ToyPatchEncoder e;
        e.patch_size = patch_size;
        e.out_dim = out_dim;
        auto init = [&rng](std::vector<double>& v, std::size_t n, double fan_in) {
            v.resize(n);
            const double bound = 1.0 / std::sqrt(fan_in);
            for (double& x : v) x = rng.uniform(-bound, bound);
        };
        const int in = 3 * patch_size * patch_size;
        init(e.embed_w, static_cast<std::size_t>(out_dim) * in, in);
        e.embed_b.assign(out_dim, 0.0);
        for (auto& blk : e.blocks) {
            init(blk.w, static_cast<std::size_t>(out_dim) * out_dim, out_dim);
            blk.b.assign(out_dim, 0.0);
            blk.mix = FeatureDecoder::random_init(out_dim, out_dim, rng);
        }
        init(e.token_w, static_cast<std::size_t>(out_dim) * out_dim, out_dim);
        e.token_b.assign(out_dim, 0.0);
        return e;
    }

    std::size_t param_count() const {
        std::size_t n = embed_w.size() + embed_b.size() + token_w.size() + token_b.size();
        for (const auto& blk : blocks)
            n += blk.w.size() + blk.b.size() + blk.mix.kernel.size() + blk.mix.bias.size();
        return n;
    }

    template <typename Fn>
    void for_each_segment(Fn&& fn) {
        fn(embed_w);
        fn(embed_b);
        for (auto& blk : blocks) {
            fn(blk.w);
            fn(blk.b);
            fn(blk.mix.kernel);
            fn(blk.mix.bias);
        }
        fn(token_w);
        fn(token_b);
    }

    std::vector<double> flatten() {
        std::vector<double> out;
        out.reserve(param_count());
        for_each_segment(
            [&out](std::vector<double>& seg) { out.insert(out.end(), seg.begin(), seg.end()); });
        return out;
    }

    void unflatten(const std::vector<double>& flat) {
        std::size_t off = 0;
        for_each_segment([&](std::vector<double>& seg) {
            std::copy(flat.begin() + off, flat.begin() + off + seg.size(), seg.begin());
            off += seg.size();
        });
    }
};

struct ExtractResult {
    FeatureImage features;      // patch grid, C = out_dim
    std::vector<double> token;  // global token, length out_dim
};

namespace detail {

struct ToyForwardCache {
    std::vector<double> patches;  // (gh*gw) x (3*P*P), patch-major
    FeatureImage e0;
    std::array<FeatureImage, 2> block_in;
    std::array<FeatureImage, 2> z;
    int gh = 0, gw = 0;
};

inline ExtractResult toy_forward(const ToyPatchEncoder& enc, const FeatureImage& image,
                                 ToyForwardCache* cache) {
    require(image.channels == 3, "extract: expected a 3-channel image");
    const int p = enc.patch_size;
    require(image.height % p == 0 && image.width % p == 0,
            "extract: image dimensions must be divisible by patch_size");
    const int gh = image.height / p, gw = image.width / p;
    const int c = enc.out_dim;
    const int in_dim = 3 * p * p;

    std::vector<double> patches(static_cast<std::size_t>(gh) * gw * in_dim);
    for (int py = 0; py < gh; ++py)
        for (int px = 0; px < gw; ++px) {
            double* dst = patches.data() + (static_cast<std::size_t>(py) * gw + px) * in_dim;
            int k = 0;
            for (int y = 0; y < p; ++y)
                for (int x = 0; x < p; ++x)
                    for (int ch = 0; ch < 3; ++ch)
                        dst[k++] = image.at(py * p + y, px * p + x, ch);
        }

    FeatureImage e(gh, gw, c);
    for (int pi = 0; pi < gh * gw; ++pi) {
        const double* src = patches.data() + static_cast<std::size_t>(pi) * in_dim;
        double* dst = e.data.data() + static_cast<std::size_t>(pi) * c;
        for (int o = 0; o < c; ++o) {
            double acc = enc.embed_b[o];
            const double* w = enc.embed_w.data() + static_cast<std::size_t>(o) * in_dim;
            for (int i = 0; i < in_dim; ++i) acc += w[i] * src[i];
            dst[o] = acc;
        }
    }
    if (cache) {
        cache->patches = std::move(patches);
        cache->e0 = e;
        cache->gh = gh;
        cache->gw = gw;
    }

    for (int blk = 0; blk < 2; ++blk) {
        const auto& b = enc.blocks[blk];
        if (cache) cache->block_in[blk] = e;
        FeatureImage z(gh, gw, c);
        for (int pi = 0; pi < gh * gw; ++pi) {
            const double* src = e.data.data() + static_cast<std::size_t>(pi) * c;
            double* dst = z.data.data() + static_cast<std::size_t>(pi) * c;
            for (int o = 0; o < c; ++o) {
                double acc = b.b[o];
                const double* w = b.w.data() + static_cast<std::size_t>(o) * c;
                for (int i = 0; i < c; ++i) acc += w[i] * src[i];
                dst[o] = std::tanh(acc);
            }
        }
        if (cache) cache->z[blk] = z;
        FeatureImage mixed = decoder_apply(b.mix, z);
        for (std::size_t i = 0; i < e.data.size(); ++i) e.data[i] += mixed.data[i];
    }

    ExtractResult out;
    std::vector<double> mean(c, 0.0);
    for (int pi = 0; pi < gh * gw; ++pi)
        for (int o = 0; o < c; ++o) mean[o] += e.data[static_cast<std::size_t>(pi) * c + o];
    for (int o = 0; o < c; ++o) mean[o] /= static_cast<double>(gh * gw);
    out.token.assign(c, 0.0);
    for (int o = 0; o < c; ++o) {
        double acc = enc.token_b[o];
        const double* w = enc.token_w.data() + static_cast<std::size_t>(o) * c;
        for (int i = 0; i < c; ++i) acc += w[i] * mean[i];
        out.token[o] = acc;
    }
    out.features = std::move(e);
    return out;
}

// Backward of toy_forward w.r.t. all parameters given dL/d(feature map).
// The global token does not enter the fine-tuning loss, so its projection
// receives no gradient here (it still sees AdamW weight decay).
inline ToyPatchEncoder toy_backward(const ToyPatchEncoder& enc, const ToyForwardCache& cache,
                                    const FeatureImage& grad_out) {
    const int c = enc.out_dim;
    const int in_dim = 3 * enc.patch_size * enc.patch_size;
    const int np = cache.gh * cache.gw;

    ToyPatchEncoder g = enc;  // same shapes
    g.for_each_segment([](std::vector<double>& seg) { std::fill(seg.begin(), seg.end(), 0.0); });

    FeatureImage d_e = grad_out;
    for (int blk = 1; blk >= 0; --blk) {
        const auto& b = enc.blocks[blk];
        auto& gb = g.blocks[blk];
        // e_out = e_in + mix(z); d_e covers the residual path already.
        DecoderGrads mg = decoder_backward(b.mix, cache.z[blk], d_e);
        gb.mix.kernel = std::move(mg.kernel);
        gb.mix.bias = std::move(mg.bias);
        // z = tanh(W e_in + b)
        for (int pi = 0; pi < np; ++pi) {
            const double* zv = cache.z[blk].data.data() + static_cast<std::size_t>(pi) * c;
            const double* dz = mg.input.data.data() + static_cast<std::size_t>(pi) * c;
            const double* e_in = cache.block_in[blk].data.data() + static_cast<std::size_t>(pi) * c;
            double* de = d_e.data.data() + static_cast<std::size_t>(pi) * c;
            for (int o = 0; o < c; ++o) {
                const double d_raw = dz[o] * (1.0 - zv[o] * zv[o]);
                if (d_raw == 0.0) continue;
                gb.b[o] += d_raw;
                double* gw = gb.w.data() + static_cast<std::size_t>(o) * c;
                const double* w = b.w.data() + static_cast<std::size_t>(o) * c;
                for (int i = 0; i < c; ++i) {
                    gw[i] += d_raw * e_in[i];
                    de[i] += d_raw * w[i];
                }
            }
        }
    }
    for (int pi = 0; pi < np; ++pi) {
        const double* de = d_e.data.data() + static_cast<std::size_t>(pi) * c;
        const double* patch = cache.patches.data() + static_cast<std::size_t>(pi) * in_dim;
        for (int o = 0; o < c; ++o) {
            if (de[o] == 0.0) continue;
            g.embed_b[o] += de[o];
            double* gw = g.embed_w.data() + static_cast<std::size_t>(o) * in_dim;
            for (int i = 0; i < in_dim; ++i) gw[i] += de[o] * patch[i];
        }
    }
    return g;
}

}  // namespace detail

// The 2D feature extractor abstraction: either the trainable toy patch encoder
// or a file-backed frozen extractor serving registered precomputed feature maps
// (the ingest path for foundation-model features).
struct FeatureExtractor {
    enum class Kind { kToyPatchEncoder, kFileBacked };

    Kind kind = Kind::kToyPatchEncoder;
    ToyPatchEncoder toy;
    std::map<std::string, FeatureImage> registry;  // file-backed: image key -> map
    int file_patch_size = 14;

    static FeatureExtractor make_toy(int patch_size, int out_dim, Rng& rng) {
        FeatureExtractor e;
        e.kind = Kind::kToyPatchEncoder;
        e.toy = ToyPatchEncoder::random_init(patch_size, out_dim, rng);
        return e;
    }

    static FeatureExtractor make_file_backed(int patch_size = 14) {
        FeatureExtractor e;
        e.kind = Kind::kFileBacked;
        e.file_patch_size = patch_size;
        return e;
    }

    int patch_size() const {
        return kind == Kind::kToyPatchEncoder ? toy.patch_size : file_patch_size;
    }

    bool trainable() const { return kind == Kind::kToyPatchEncoder; }

    void register_features(const std::string& key, FeatureImage map) {
        registry[key] = std::move(map);
    }

    // Dense patch-grid features plus one global token. The file-backed kind
    // returns the registered map verbatim; its token is the mean patch token.
    ExtractResult extract(const FeatureImage& image, const std::string& key = "") const {
        if (kind == Kind::kToyPatchEncoder) {
            return detail::toy_forward(toy, image, nullptr);
        }
        auto it = registry.find(key);
        require(it != registry.end(),
                "extract: no feature map registered for image '" + key + "'");
        ExtractResult out;
        out.features = it->second;
        out.token.assign(out.features.channels, 0.0);
        const int np = out.features.height * out.features.width;
        for (int pi = 0; pi < np; ++pi)
            for (int c = 0; c < out.features.channels; ++c)
                out.token[c] += out.features.data[static_cast<std::size_t>(pi) * out.features.channels + c];
        for (double& v : out.token) v /= static_cast<double>(np);
        return out;
    }
};

// One library view: camera, its RGB image and whether it is held out of
// fine-tuning (evaluation only).
struct LibraryView {
    CameraView cam;
    FeatureImage image;
    bool holdout = false;
};

struct LibraryScene {
    std::string id;
    Scene scene;
    std::vector<LibraryView> views;
};

// K fitted scenes with decoders, preloaded in memory; read-only during
// fine-tuning.
struct SceneLibrary {
    std::vector<LibraryScene> scenes;

    std::size_t train_view_count() const {
        std::size_t n = 0;
        for (const auto& s : scenes)
            for (const auto& v : s.views)
                if (!v.holdout) ++n;
        return n;
    }
};

struct FinetuneConfig {
    double lr = 1e-5;
    double weight_decay = 1e-4;
    int batch_size = 2;
    int epochs = 1;
    bool horizontal_flip = true;
    std::uint64_t seed = 0;
    long max_steps = -1;  // >= 0 caps optimizer steps; 0 returns theta unchanged

    void validate() const {
        require(epochs >= 1, "finetune: epochs must be >= 1");
        require(batch_size >= 1, "finetune: batch_size must be >= 1");
        require(lr > 0.0, "finetune: learning rate must be positive");
    }
};

struct FinetuneStepInfo {
    long step = 0;
    int epoch = 0;
    double loss = 0.0;
    std::vector<std::pair<int, int>> batch_views;  // (scene, view) pairs of this step
};

using FinetuneObserver = std::function<void(const FinetuneStepInfo&)>;

namespace detail {

struct FinetuneSample {
    int scene = 0, view = 0, epoch = 0;
    bool flip = false;
};

struct PreparedBatch {
    std::vector<FeatureImage> images;
    std::vector<FeatureImage> targets;  // resized to the extractor patch grid
    std::vector<FinetuneSample> samples;
};

// Renders the fine-tuning target for one view: F_high = decoder(feature render
// at image resolution), bilinearly downsampled to the extractor's patch grid.
inline FeatureImage render_target(const LibraryScene& scene, const LibraryView& view, int gh,
                                  int gw) {
    RenderOutput low = rasterize_features(scene.scene, view.cam, view.image.width,
                                          view.image.height);
    FeatureImage high = decoder_apply(scene.scene.decoder, low.image);
    return bilinear_resize(high, gh, gw);
}

// Bounded producer/consumer queue: target rendering for upcoming batches runs
// concurrently with the optimizer step on the current one.
class BatchQueue {
public:
    explicit BatchQueue(std::size_t capacity) : capacity_(capacity) {}

    void push(PreparedBatch batch) {
        std::unique_lock lk(mu_);
        cv_space_.wait(lk, [&] { return queue_.size() < capacity_ || closed_; });
        if (closed_) return;
        queue_.push_back(std::move(batch));
        cv_data_.notify_one();
    }

    std::optional<PreparedBatch> pop() {
        std::unique_lock lk(mu_);
        cv_data_.wait(lk, [&] { return !queue_.empty() || done_; });
        if (queue_.empty()) return std::nullopt;
        PreparedBatch b = std::move(queue_.front());
        queue_.pop_front();
        cv_space_.notify_one();
        return b;
    }

    void finish() {
        std::lock_guard lk(mu_);
        done_ = true;
        cv_data_.notify_all();
    }

    void close() {
        std::lock_guard lk(mu_);
        closed_ = true;
        done_ = true;
        cv_space_.notify_all();
        cv_data_.notify_all();
    }

private:
    std::size_t capacity_;
    std::mutex mu_;
    std::condition_variable cv_data_, cv_space_;
    std::deque<PreparedBatch> queue_;
    bool done_ = false, closed_ = false;
};

// Consumer half of the fine-tuning loop: one AdamW step per batch, gradients
// meaned over the batch samples.
inline void consume_batches(BatchQueue& queue, ToyPatchEncoder& enc, AdamState& adam,
                            const AdamParams& adam_params, const FinetuneObserver& observer,
                            long& step) {
    while (auto batch = queue.pop()) {
        const int n = static_cast<int>(batch->images.size());
        std::vector<double> theta = enc.flatten();
        std::vector<double> grad(theta.size(), 0.0);
        double batch_loss = 0.0;

        for (int i = 0; i < n; ++i) {
            ToyForwardCache cache;
            ExtractResult res = toy_forward(enc, batch->images[i], &cache);
            const FeatureImage& target = batch->targets[i];
            require(res.features.same_shape(target), "finetune: target/output grid mismatch");

            const double norm = static_cast<double>(res.features.data.size()) * n;
            FeatureImage grad_map(res.features.height, res.features.width,
                                  res.features.channels);
            double sample_loss = 0.0;
            for (std::size_t k = 0; k < res.features.data.size(); ++k) {
                const double d = res.features.data[k] - target.data[k];
                sample_loss += std::abs(d);
                grad_map.data[k] = (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) / norm;
            }
            batch_loss += sample_loss / static_cast<double>(res.features.data.size());

            ToyPatchEncoder sample_grads = toy_backward(enc, cache, grad_map);
            const std::vector<double> flat = sample_grads.flatten();
            for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += flat[k];
        }
        batch_loss /= n;

        adam.step(theta.data(), grad.data(), theta.size(), adam_params);
        enc.unflatten(theta);
        ++step;

        if (observer) {
            FinetuneStepInfo info;
            info.step = step;
            info.epoch = batch->samples.front().epoch;
            info.loss = batch_loss;
            for (const auto& s : batch->samples) info.batch_views.emplace_back(s.scene, s.view);
            observer(info);
        }
    }
}

}  // namespace detail

// 3D-aware fine-tuning: epoch-wise shuffled passes over all training views,
// rendering F_high targets on the fly, L1 loss against the extractor output on
// the patch grid, AdamW steps on theta only. The scene library is never
// mutated. Deterministic given the seed: the epoch order and per-sample flip
// decisions are precomputed, so the render pipeline consumes no RNG.
inline FeatureExtractor finetune(const FeatureExtractor& extractor, const SceneLibrary& lib,
                                 const FinetuneConfig& cfg,
                                 const FinetuneObserver& observer = nullptr) {
    cfg.validate();
    require(extractor.trainable(), "finetune: file-backed extractor is not trainable");
    require(!lib.scenes.empty() && lib.train_view_count() > 0,
            "finetune: scene library has no training views");
    if (cfg.max_steps == 0) return extractor;

    FeatureExtractor tuned = extractor;
    ToyPatchEncoder& enc = tuned.toy;
    const int p = enc.patch_size;

    std::vector<std::pair<int, int>> all_views;
    for (int s = 0; s < static_cast<int>(lib.scenes.size()); ++s) {
        for (int v = 0; v < static_cast<int>(lib.scenes[s].views.size()); ++v) {
            const LibraryView& view = lib.scenes[s].views[v];
            if (view.holdout) continue;
            require(view.image.height % p == 0 && view.image.width % p == 0,
                    "finetune: view image not divisible by patch size");
            require(lib.scenes[s].scene.decoder.out_channels == enc.out_dim,
                    "finetune: scene decoder output dim differs from extractor dim");
            all_views.emplace_back(s, v);
        }
    }

    // Precomputed schedule: one shuffled pass per epoch, sampling without
    // replacement, plus per-sample flip coins.
    Rng rng(cfg.seed);
    std::vector<detail::FinetuneSample> schedule;
    for (int e = 0; e < cfg.epochs; ++e) {
        std::vector<std::pair<int, int>> order = all_views;
        rng.shuffle(order);
        for (const auto& [s, v] : order) {
            detail::FinetuneSample smp;
            smp.scene = s;
            smp.view = v;
            smp.epoch = e;
            smp.flip = cfg.horizontal_flip && rng.coin();
            schedule.push_back(smp);
        }
    }

    long total_steps = (static_cast<long>(schedule.size()) + cfg.batch_size - 1) / cfg.batch_size;
    if (cfg.max_steps >= 0) total_steps = std::min(total_steps, cfg.max_steps);

    detail::BatchQueue queue(2);
    std::exception_ptr producer_error;
    std::thread producer([&] {
        try {
            for (long step = 0; step < total_steps; ++step) {
                detail::PreparedBatch batch;
                const std::size_t begin = static_cast<std::size_t>(step) * cfg.batch_size;
                const std::size_t end =
                    std::min(schedule.size(), begin + static_cast<std::size_t>(cfg.batch_size));
                for (std::size_t i = begin; i < end; ++i) {
                    const auto& smp = schedule[i];
                    const LibraryScene& scene = lib.scenes[smp.scene];
                    const LibraryView& view = scene.views[smp.view];
                    const int gh = view.image.height / p, gw = view.image.width / p;
                    FeatureImage image = view.image;
                    FeatureImage target = detail::render_target(scene, view, gh, gw);
                    if (smp.flip) {
                        image = flip_horizontal(image);
                        target = flip_horizontal(target);
                    }
                    batch.images.push_back(std::move(image));
                    batch.targets.push_back(std::move(target));
                    batch.samples.push_back(smp);
                }
                queue.push(std::move(batch));
            }
        } catch (...) {
            producer_error = std::current_exception();
        }
        queue.finish();
    });

    AdamState adam;
    AdamParams adam_params;
    adam_params.lr = cfg.lr;
    adam_params.weight_decay = cfg.weight_decay;

    long step = 0;
    try {
        detail::consume_batches(queue, enc, adam, adam_params, observer, step);
    } catch (...) {
        queue.close();  // unblock the producer before propagating
        producer.join();
        throw;
    }
    producer.join();
    if (producer_error) std::rethrow_exception(producer_error);
    return tuned;
}

// Pixel correspondences between two views, in image pixel coordinates
// (ax, ay) <-> (bx, by).
struct CorrespondencePair {
    int view_a = 0, view_b = 0;
    std::vector<std::array<double, 4>> pixels;
};

// Mean cosine distance between extracted features at corresponding pixels
// (bilinear sampling on the patch grids). Lower is more view-consistent.
inline double multiview_consistency(const FeatureExtractor& extractor,
                                    const std::vector<LibraryView>& views,
                                    const std::vector<CorrespondencePair>& pairs) {
    std::size_t total = 0;
    for (const auto& pr : pairs) total += pr.pixels.size();
    require(total > 0, "multiview_consistency: empty correspondence set");

    std::map<int, ExtractResult> extracted;
    auto features_of = [&](int v) -> const FeatureImage& {
        auto it = extracted.find(v);
        if (it == extracted.end())
            it = extracted.emplace(v, extractor.extract(views[v].image)).first;
        return it->second.features;
    };

    const double p = static_cast<double>(extractor.patch_size());
    double sum = 0.0;
    std::vector<double> fa, fb;
    for (const auto& pr : pairs) {
        const FeatureImage& map_a = features_of(pr.view_a);
        const FeatureImage& map_b = features_of(pr.view_b);
        fa.resize(map_a.channels);
        fb.resize(map_b.channels);
        for (const auto& px : pr.pixels) {
            bilinear_sample(map_a, px[0] / p, px[1] / p, fa.data());
            bilinear_sample(map_b, px[2] / p, px[3] / p, fb.data());
            double dot = 0.0, na = 0.0, nb = 0.0;
            for (int c = 0; c < map_a.channels; ++c) {
                dot += fa[c] * fb[c];
                na += fa[c] * fa[c];
                nb += fb[c] * fb[c];
            }
            const double denom = std::sqrt(na * nb);
            sum += denom < 1e-24 ? 0.0 : 1.0 - dot / denom;
        }
    }
    return sum / static_cast<double>(total);
}

// Mean L1 between extractor outputs and rendered targets on held-out views;
// the evaluation harness for fine-tuning efficacy.
inline double holdout_target_l1(const FeatureExtractor& extractor, const SceneLibrary& lib) {
    double sum = 0.0;
    int count = 0;
    const int p = extractor.patch_size();
    for (const auto& scene : lib.scenes) {
        for (const auto& view : scene.views) {
            if (!view.holdout) continue;
            const int gh = view.image.height / p, gw = view.image.width / p;
            FeatureImage target = detail::render_target(scene, view, gh, gw);
            ExtractResult res = extractor.extract(view.image);
            sum += mean_abs_diff(res.features, target);
            ++count;
        }
    }
    require(count > 0, "holdout_target_l1: library has no held-out views");
    return sum / count;
}

}  // namespace featsplat
