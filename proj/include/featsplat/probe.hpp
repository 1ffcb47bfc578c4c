// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <limits>
#include <string>
#include <vector>

#include "featsplat/common.hpp"
#include "featsplat/image.hpp"
#include "featsplat/optim.hpp"

namespace featsplat {

inline constexpr int kIgnoreLabel = 255;
inline constexpr int kDepthBins = 256;

enum class AssemblyStrategy { kConcat, kAdd, kLinearFusion };

inline AssemblyStrategy assembly_from_string(const std::string& s) {
    if (s == "concat" || s == "concat-self") return AssemblyStrategy::kConcat;
    if (s == "add") return AssemblyStrategy::kAdd;
    if (s == "linear-fusion") return AssemblyStrategy::kLinearFusion;
    throw ValidationError("unknown assembly strategy '" + s + "'");
}

// Original and fine-tuned features combined for probing. For linear-fusion the
// data is the channel stack; the trainable map back to orig_channels lives in
// the probe and is trained jointly with it.
struct AssembledFeatures {
    FeatureImage data;
    AssemblyStrategy strategy = AssemblyStrategy::kConcat;
    int orig_channels = 0;
};

inline AssembledFeatures assemble(const FeatureImage& orig, const FeatureImage& tuned,
                                  AssemblyStrategy strategy) {
    require(orig.height == tuned.height && orig.width == tuned.width,
            "assemble: spatial grid mismatch");
    AssembledFeatures out;
    out.strategy = strategy;
    out.orig_channels = orig.channels;
    switch (strategy) {
        case AssemblyStrategy::kAdd: {
            require(orig.channels == tuned.channels, "assemble: add requires equal channels");
            out.data = orig;
            for (std::size_t i = 0; i < out.data.data.size(); ++i)
                out.data.data[i] += tuned.data[i];
            break;
        }
        case AssemblyStrategy::kConcat:
        case AssemblyStrategy::kLinearFusion: {
            if (strategy == AssemblyStrategy::kLinearFusion)
                require(orig.channels == tuned.channels,
                        "assemble: linear-fusion requires equal channels");
            out.data = FeatureImage(orig.height, orig.width, orig.channels + tuned.channels);
            for (int y = 0; y < orig.height; ++y)
                for (int x = 0; x < orig.width; ++x) {
                    double* dst = out.data.pixel(y, x);
                    const double* a = orig.pixel(y, x);
                    const double* b = tuned.pixel(y, x);
                    std::copy(a, a + orig.channels, dst);
                    std::copy(b, b + tuned.channels, dst + orig.channels);
                }
            break;
        }
    }
    return out;
}

// Per-pixel integer class ids; kIgnoreLabel pixels are excluded everywhere.
struct LabelMap {
    int height = 0, width = 0;
    std::vector<int> ids;

    int at(int y, int x) const { return ids[static_cast<std::size_t>(y) * width + x]; }
    int& at(int y, int x) { return ids[static_cast<std::size_t>(y) * width + x]; }
};

namespace detail {

// Precomputed bilinear taps from a src grid onto a dst grid (pixel-center
// convention, border clamped). Shared by the upsample and its transpose.
struct ResizeTaps {
    int src_h = 0, src_w = 0, dst_h = 0, dst_w = 0;
    std::vector<std::array<int, 4>> idx;
    std::vector<std::array<double, 4>> w;
};

inline ResizeTaps build_resize_taps(int src_h, int src_w, int dst_h, int dst_w) {
    ResizeTaps t;
    t.src_h = src_h;
    t.src_w = src_w;
    t.dst_h = dst_h;
    t.dst_w = dst_w;
    t.idx.resize(static_cast<std::size_t>(dst_h) * dst_w);
    t.w.resize(t.idx.size());
    const double sx = static_cast<double>(src_w) / dst_w;
    const double sy = static_cast<double>(src_h) / dst_h;
    for (int y = 0; y < dst_h; ++y)
        for (int x = 0; x < dst_w; ++x) {
            const double fx = (x + 0.5) * sx - 0.5;
            const double fy = (y + 0.5) * sy - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            int y0 = static_cast<int>(std::floor(fy));
            const double tx = fx - x0;
            const double ty = fy - y0;
            const int x1 = std::clamp(x0 + 1, 0, src_w - 1);
            const int y1 = std::clamp(y0 + 1, 0, src_h - 1);
            x0 = std::clamp(x0, 0, src_w - 1);
            y0 = std::clamp(y0, 0, src_h - 1);
            auto& idx = t.idx[static_cast<std::size_t>(y) * dst_w + x];
            auto& w = t.w[static_cast<std::size_t>(y) * dst_w + x];
            idx = {y0 * src_w + x0, y0 * src_w + x1, y1 * src_w + x0, y1 * src_w + x1};
            w = {(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty};
        }
    return t;
}

inline void softmax_inplace(double* v, int n) {
    double mx = v[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, v[i]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        v[i] = std::exp(v[i] - mx);
        sum += v[i];
    }
    for (int i = 0; i < n; ++i) v[i] /= sum;
}

}  // namespace detail

struct ProbeTrainConfig {
    int epochs = 40;
    double lr = 1e-2;
    double momentum = 0.9;
    double poly_power = 0.9;
    std::uint64_t seed = 0;
};

// Linear segmentation head over patch tokens; logits are bilinearly upsampled
// to label resolution before the cross-entropy. For linear-fusion assemblies a
// jointly trained linear map first fuses the stack back to orig_channels.
struct SegProbe {
    int in_channels = 0;
    int num_classes = 0;
    std::vector<double> weight;  // num_classes x in_channels
    std::vector<double> bias;    // num_classes

    bool has_fusion = false;
    int fusion_in = 0;
    std::vector<double> fusion_w;  // in_channels x fusion_in
    std::vector<double> fusion_b;  // in_channels

    // Fused per-patch features (identity unless linear-fusion).
    FeatureImage fuse(const FeatureImage& raw) const {
        if (!has_fusion) return raw;
        FeatureImage out(raw.height, raw.width, in_channels);
        for (int pi = 0; pi < raw.height * raw.width; ++pi) {
            const double* x = raw.data.data() + static_cast<std::size_t>(pi) * raw.channels;
            double* o = out.data.data() + static_cast<std::size_t>(pi) * in_channels;
            for (int c = 0; c < in_channels; ++c) {
                double acc = fusion_b[c];
                const double* w = fusion_w.data() + static_cast<std::size_t>(c) * fusion_in;
                for (int i = 0; i < fusion_in; ++i) acc += w[i] * x[i];
                o[c] = acc;
            }
        }
        return out;
    }

    FeatureImage logits(const FeatureImage& features) const {
        const FeatureImage f = fuse(features);
        FeatureImage out(f.height, f.width, num_classes);
        for (int pi = 0; pi < f.height * f.width; ++pi) {
            const double* x = f.data.data() + static_cast<std::size_t>(pi) * in_channels;
            double* o = out.data.data() + static_cast<std::size_t>(pi) * num_classes;
            for (int k = 0; k < num_classes; ++k) {
                double acc = bias[k];
                const double* w = weight.data() + static_cast<std::size_t>(k) * in_channels;
                for (int c = 0; c < in_channels; ++c) acc += w[c] * x[c];
                o[k] = acc;
            }
        }
        return out;
    }
};

inline LabelMap predict_seg(const SegProbe& probe, const AssembledFeatures& features, int out_h,
                            int out_w) {
    const FeatureImage grid = probe.logits(features.data);
    const FeatureImage up = bilinear_resize(grid, out_h, out_w);
    LabelMap pred;
    pred.height = out_h;
    pred.width = out_w;
    pred.ids.resize(static_cast<std::size_t>(out_h) * out_w);
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) {
            const double* l = up.pixel(y, x);
            int best = 0;
            for (int k = 1; k < probe.num_classes; ++k)
                if (l[k] > l[best]) best = k;
            pred.at(y, x) = best;
        }
    return pred;
}

// Minimizes per-pixel cross-entropy on bilinearly upsampled logits; ignore
// pixels excluded. SGD with momentum and a polynomial lr schedule.
inline SegProbe train_seg_probe(const std::vector<AssembledFeatures>& features,
                                const std::vector<LabelMap>& labels, int num_classes,
                                const ProbeTrainConfig& cfg = {}) {
    require(!features.empty() && features.size() == labels.size(),
            "train_seg_probe: need matching feature/label lists");
    const AssemblyStrategy strategy = features.front().strategy;
    const int raw_channels = features.front().data.channels;

    SegProbe probe;
    probe.num_classes = num_classes;
    if (strategy == AssemblyStrategy::kLinearFusion) {
        probe.has_fusion = true;
        probe.fusion_in = raw_channels;
        probe.in_channels = features.front().orig_channels;
        Rng rng(cfg.seed + 1);
        probe.fusion_w.resize(static_cast<std::size_t>(probe.in_channels) * raw_channels);
        const double bound = 1.0 / std::sqrt(static_cast<double>(raw_channels));
        for (double& w : probe.fusion_w) w = rng.uniform(-bound, bound);
        probe.fusion_b.assign(probe.in_channels, 0.0);
    } else {
        probe.in_channels = raw_channels;
    }
    probe.weight.assign(static_cast<std::size_t>(num_classes) * probe.in_channels, 0.0);
    probe.bias.assign(num_classes, 0.0);

    // Any labeled pixel at all?
    bool any_labeled = false;
    for (const auto& lm : labels)
        for (int id : lm.ids)
            if (id != kIgnoreLabel) any_labeled = true;
    require(any_labeled, "train_seg_probe: all pixels carry the ignore label");

    SgdMomentum opt_w(cfg.momentum), opt_b(cfg.momentum), opt_fw(cfg.momentum),
        opt_fb(cfg.momentum);
    Rng order_rng(cfg.seed);
    const long max_steps = static_cast<long>(cfg.epochs) * features.size();
    long step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order(features.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        order_rng.shuffle(order);

        for (int img : order) {
            const FeatureImage& raw = features[img].data;
            const LabelMap& lm = labels[img];
            const FeatureImage fused = probe.fuse(raw);
            const FeatureImage grid = probe.logits(raw);
            const auto taps =
                detail::build_resize_taps(grid.height, grid.width, lm.height, lm.width);

            long labeled = 0;
            for (int id : lm.ids)
                if (id != kIgnoreLabel) ++labeled;
            if (labeled == 0) continue;

            // d loss / d grid logits, scattered through the upsample taps.
            FeatureImage d_grid(grid.height, grid.width, num_classes);
            std::vector<double> probs(num_classes);
            for (int y = 0; y < lm.height; ++y)
                for (int x = 0; x < lm.width; ++x) {
                    const int gt = lm.at(y, x);
                    if (gt == kIgnoreLabel) continue;
                    require(gt >= 0 && gt < num_classes, "train_seg_probe: label out of range");
                    const auto& idx = taps.idx[static_cast<std::size_t>(y) * lm.width + x];
                    const auto& w = taps.w[static_cast<std::size_t>(y) * lm.width + x];
                    for (int k = 0; k < num_classes; ++k) {
                        double v = 0.0;
                        for (int tform = 0; tform < 4; ++tform)
                            v += w[tform] * grid.data[static_cast<std::size_t>(idx[tform]) *
                                                          num_classes + k];
                        probs[k] = v;
                    }
                    detail::softmax_inplace(probs.data(), num_classes);
                    for (int k = 0; k < num_classes; ++k) {
                        const double d = (probs[k] - (k == gt ? 1.0 : 0.0)) / labeled;
                        for (int tform = 0; tform < 4; ++tform)
                            d_grid.data[static_cast<std::size_t>(idx[tform]) * num_classes + k] +=
                                w[tform] * d;
                    }
                }

            std::vector<double> gw(probe.weight.size(), 0.0), gb(num_classes, 0.0);
            std::vector<double> gfw, gfb;
            FeatureImage d_fused(grid.height, grid.width, probe.in_channels);
            for (int pi = 0; pi < grid.height * grid.width; ++pi) {
                const double* dl = d_grid.data.data() + static_cast<std::size_t>(pi) * num_classes;
                const double* f = fused.data.data() + static_cast<std::size_t>(pi) * probe.in_channels;
                double* df = d_fused.data.data() + static_cast<std::size_t>(pi) * probe.in_channels;
                for (int k = 0; k < num_classes; ++k) {
                    if (dl[k] == 0.0) continue;
                    gb[k] += dl[k];
                    double* row = gw.data() + static_cast<std::size_t>(k) * probe.in_channels;
                    const double* wr = probe.weight.data() +
                                       static_cast<std::size_t>(k) * probe.in_channels;
                    for (int c = 0; c < probe.in_channels; ++c) {
                        row[c] += dl[k] * f[c];
                        df[c] += dl[k] * wr[c];
                    }
                }
            }
            if (probe.has_fusion) {
                gfw.assign(probe.fusion_w.size(), 0.0);
                gfb.assign(probe.fusion_b.size(), 0.0);
                for (int pi = 0; pi < grid.height * grid.width; ++pi) {
                    const double* df = d_fused.data.data() +
                                       static_cast<std::size_t>(pi) * probe.in_channels;
                    const double* x = raw.data.data() + static_cast<std::size_t>(pi) * raw_channels;
                    for (int c = 0; c < probe.in_channels; ++c) {
                        if (df[c] == 0.0) continue;
                        gfb[c] += df[c];
                        double* row = gfw.data() + static_cast<std::size_t>(c) * probe.fusion_in;
                        for (int i = 0; i < probe.fusion_in; ++i) row[i] += df[c] * x[i];
                    }
                }
            }

            const double lr = poly_lr(cfg.lr, step, max_steps, cfg.poly_power);
            opt_w.step(probe.weight.data(), gw.data(), gw.size(), lr);
            opt_b.step(probe.bias.data(), gb.data(), gb.size(), lr);
            if (probe.has_fusion) {
                opt_fw.step(probe.fusion_w.data(), gfw.data(), gfw.size(), lr);
                opt_fb.step(probe.fusion_b.data(), gfb.data(), gfb.size(), lr);
            }
            ++step;
        }
    }
    return probe;
}

// Depth head: patch token concatenated with the global token, a linear layer
// over 256 uniformly distributed bins, softmax-expectation readout.
struct DepthProbe {
    int feature_channels = 0;    // C; the linear map takes 2C inputs
    std::vector<double> weight;  // kDepthBins x 2C
    std::vector<double> bias;    // kDepthBins
    double d_min = 0.0, d_max = 1.0;

    double bin_center(int b) const {
        const double w = (d_max - d_min) / kDepthBins;
        return d_min + (b + 0.5) * w;
    }
    int nearest_bin(double depth) const {
        const double w = (d_max - d_min) / kDepthBins;
        const int b = static_cast<int>(std::floor((depth - d_min) / w));
        return std::clamp(b, 0, kDepthBins - 1);
    }
};

namespace detail {

inline void depth_logits(const DepthProbe& probe, const double* patch, const double* token,
                         double* out) {
    const int c = probe.feature_channels;
    for (int b = 0; b < kDepthBins; ++b) {
        double acc = probe.bias[b];
        const double* w = probe.weight.data() + static_cast<std::size_t>(b) * 2 * c;
        for (int i = 0; i < c; ++i) acc += w[i] * patch[i] + w[c + i] * token[i];
        out[b] = acc;
    }
}

}  // namespace detail

// Softmax-expectation depth at patch resolution, bilinearly upsampled to the
// requested resolution. Output always lies within [d_min, d_max].
inline FeatureImage predict_depth(const DepthProbe& probe, const FeatureImage& features,
                                  const std::vector<double>& global_token, int out_h, int out_w) {
    require(features.channels == probe.feature_channels, "predict_depth: channel mismatch");
    require(static_cast<int>(global_token.size()) == probe.feature_channels,
            "predict_depth: token length mismatch");
    FeatureImage grid(features.height, features.width, 1);
    std::vector<double> logits(kDepthBins);
    for (int pi = 0; pi < features.height * features.width; ++pi) {
        detail::depth_logits(probe,
                             features.data.data() + static_cast<std::size_t>(pi) * features.channels,
                             global_token.data(), logits.data());
        detail::softmax_inplace(logits.data(), kDepthBins);
        double d = 0.0;
        for (int b = 0; b < kDepthBins; ++b) d += logits[b] * probe.bin_center(b);
        grid.data[pi] = d;
    }
    return bilinear_resize(grid, out_h, out_w);
}

struct DepthTrainSample {
    FeatureImage features;            // patch grid
    std::vector<double> token;        // global token
    FeatureImage depth;               // full-res, C=1
    FeatureImage valid;               // full-res, C=1, >0.5 where ground truth exists
};

// Classification training over 256 bins; the target is the nearest bin to the
// ground-truth depth, the depth range comes from the training split's 1st/99th
// percentiles.
inline DepthProbe train_depth_probe(const std::vector<DepthTrainSample>& samples,
                                    const ProbeTrainConfig& cfg = {}) {
    require(!samples.empty(), "train_depth_probe: no samples");
    const int c = samples.front().features.channels;

    std::vector<double> depths;
    for (const auto& s : samples)
        for (std::size_t i = 0; i < s.depth.data.size(); ++i)
            if (s.valid.data[i] > 0.5) depths.push_back(s.depth.data[i]);
    require(!depths.empty(), "train_depth_probe: empty valid mask");
    std::sort(depths.begin(), depths.end());
    auto percentile = [&](double p) {
        const double pos = p * (depths.size() - 1);
        const std::size_t lo = static_cast<std::size_t>(pos);
        const std::size_t hi = std::min(lo + 1, depths.size() - 1);
        return depths[lo] + (pos - lo) * (depths[hi] - depths[lo]);
    };

    DepthProbe probe;
    probe.feature_channels = c;
    probe.d_min = percentile(0.01);
    probe.d_max = percentile(0.99);
    if (!(probe.d_max > probe.d_min)) probe.d_max = probe.d_min + 1e-6;
    probe.weight.assign(static_cast<std::size_t>(kDepthBins) * 2 * c, 0.0);
    probe.bias.assign(kDepthBins, 0.0);

    SgdMomentum opt_w(cfg.momentum), opt_b(cfg.momentum);
    Rng order_rng(cfg.seed);
    const long max_steps = static_cast<long>(cfg.epochs) * samples.size();
    long step = 0;
    std::vector<double> logits(kDepthBins);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order(samples.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        order_rng.shuffle(order);
        for (int si : order) {
            const auto& s = samples[si];
            const int gh = s.features.height, gw = s.features.width;
            // Per-patch targets sampled at patch centers; a patch is used only
            // when all four depth taps are valid.
            const double sy = static_cast<double>(s.depth.height) / gh;
            const double sx = static_cast<double>(s.depth.width) / gw;
            std::vector<std::pair<int, int>> targets;  // (patch index, bin)
            for (int py = 0; py < gh; ++py)
                for (int px = 0; px < gw; ++px) {
                    double d, v;
                    bilinear_sample(s.depth, (px + 0.5) * sx, (py + 0.5) * sy, &d);
                    bilinear_sample(s.valid, (px + 0.5) * sx, (py + 0.5) * sy, &v);
                    if (v > 0.999) targets.emplace_back(py * gw + px, probe.nearest_bin(d));
                }
            if (targets.empty()) continue;

            std::vector<double> gw_buf(probe.weight.size(), 0.0), gb(kDepthBins, 0.0);
            for (const auto& [pi, bin] : targets) {
                const double* patch =
                    s.features.data.data() + static_cast<std::size_t>(pi) * c;
                detail::depth_logits(probe, patch, s.token.data(), logits.data());
                detail::softmax_inplace(logits.data(), kDepthBins);
                for (int b = 0; b < kDepthBins; ++b) {
                    const double d = (logits[b] - (b == bin ? 1.0 : 0.0)) / targets.size();
                    if (d == 0.0) continue;
                    gb[b] += d;
                    double* row = gw_buf.data() + static_cast<std::size_t>(b) * 2 * c;
                    for (int i = 0; i < c; ++i) {
                        row[i] += d * patch[i];
                        row[c + i] += d * s.token[i];
                    }
                }
            }
            const double lr = poly_lr(cfg.lr, step, max_steps, cfg.poly_power);
            opt_w.step(probe.weight.data(), gw_buf.data(), gw_buf.size(), lr);
            opt_b.step(probe.bias.data(), gb.data(), gb.size(), lr);
            ++step;
        }
    }
    return probe;
}

struct SegMetrics {
    double miou = 0.0;
    double macc = 0.0;
    double aacc = 0.0;
};

// Standard definitions: per-class IoU averaged over classes present in the
// ground truth, mean per-class accuracy, overall pixel accuracy.
inline SegMetrics metrics_seg(const LabelMap& pred, const LabelMap& gt) {
    require(pred.height == gt.height && pred.width == gt.width, "metrics_seg: shape mismatch");
    int max_class = 0;
    for (int id : gt.ids)
        if (id != kIgnoreLabel) max_class = std::max(max_class, id);
    for (int id : pred.ids)
        if (id != kIgnoreLabel) max_class = std::max(max_class, id);
    const int k = max_class + 1;
    std::vector<long> tp(k, 0), fp(k, 0), fn(k, 0), gt_count(k, 0);
    long correct = 0, total = 0;
    for (std::size_t i = 0; i < gt.ids.size(); ++i) {
        const int g = gt.ids[i];
        if (g == kIgnoreLabel) continue;
        const int p = pred.ids[i];
        ++total;
        ++gt_count[g];
        if (p == g) {
            ++correct;
            ++tp[g];
        } else {
            ++fn[g];
            if (p >= 0 && p < k) ++fp[p];
        }
    }
    require(total > 0, "metrics_seg: no labeled pixels");
    SegMetrics m;
    int present = 0;
    for (int c = 0; c < k; ++c) {
        if (gt_count[c] == 0) continue;  // classes absent from GT excluded
        ++present;
        m.miou += static_cast<double>(tp[c]) / static_cast<double>(tp[c] + fp[c] + fn[c]);
        m.macc += static_cast<double>(tp[c]) / static_cast<double>(gt_count[c]);
    }
    m.miou /= present;
    m.macc /= present;
    m.aacc = static_cast<double>(correct) / static_cast<double>(total);
    return m;
}

struct DepthMetrics {
    double rmse = 0.0;
    double absrel = 0.0;
};

inline DepthMetrics metrics_depth(const FeatureImage& pred, const FeatureImage& gt,
                                  const FeatureImage& mask) {
    require(pred.same_shape(gt) && pred.height == mask.height && pred.width == mask.width,
            "metrics_depth: shape mismatch");
    double sq = 0.0, rel = 0.0;
    long n = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        if (mask.data[i] <= 0.5) continue;
        const double d = pred.data[i] - gt.data[i];
        sq += d * d;
        rel += std::abs(d) / gt.data[i];
        ++n;
    }
    require(n > 0, "metrics_depth: empty mask");
    return {std::sqrt(sq / n), rel / n};
}

// Top-3 principal components of the pixel-feature matrix, each min-max
// normalized to [0,1]. Sign convention: the largest-magnitude loading of each
// component is positive. Constant features produce a zero image.
inline FeatureImage pca_visualize(const FeatureImage& features) {
    require(features.channels >= 3, "pca_visualize: needs at least 3 channels");
    const int n = features.height * features.width;
    const int c = features.channels;

    Eigen::VectorXd mean = Eigen::VectorXd::Zero(c);
    for (int pi = 0; pi < n; ++pi)
        for (int ch = 0; ch < c; ++ch)
            mean[ch] += features.data[static_cast<std::size_t>(pi) * c + ch];
    mean /= static_cast<double>(n);

    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(c, c);
    Eigen::VectorXd x(c);
    for (int pi = 0; pi < n; ++pi) {
        for (int ch = 0; ch < c; ++ch)
            x[ch] = features.data[static_cast<std::size_t>(pi) * c + ch] - mean[ch];
        cov.noalias() += x * x.transpose();
    }
    cov /= static_cast<double>(n);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    FeatureImage out(features.height, features.width, 3);
    for (int comp = 0; comp < 3; ++comp) {
        Eigen::VectorXd v = solver.eigenvectors().col(c - 1 - comp);  // descending eigenvalues
        int max_i = 0;
        for (int i = 1; i < c; ++i)
            if (std::abs(v[i]) > std::abs(v[max_i])) max_i = i;
        if (v[max_i] < 0.0) v = -v;

        double lo = std::numeric_limits<double>::infinity();
        double hi = -std::numeric_limits<double>::infinity();
        std::vector<double> proj(n);
        for (int pi = 0; pi < n; ++pi) {
            double acc = 0.0;
            for (int ch = 0; ch < c; ++ch)
                acc += v[ch] * (features.data[static_cast<std::size_t>(pi) * c + ch] - mean[ch]);
            proj[pi] = acc;
            lo = std::min(lo, acc);
            hi = std::max(hi, acc);
        }
        const double range = hi - lo;
        for (int pi = 0; pi < n; ++pi)
            out.data[static_cast<std::size_t>(pi) * 3 + comp] =
                range < 1e-12 ? 0.0 : (proj[pi] - lo) / range;
    }
    return out;
}

}  // namespace featsplat
