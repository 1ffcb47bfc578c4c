// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <cstring>
#include <vector>

#include "featsplat/common.hpp"
#include "featsplat/image.hpp"

namespace featsplat {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline int sh_coeff_count(int degree) { return (degree + 1) * (degree + 1); }

// One splat. Scale is stored as log-scale, opacity as a pre-sigmoid logit and the
// quaternion unnormalized; activations are applied on use so optimization stays
// unconstrained. sh holds 3*(L+1)^2 values laid out coefficient-major: sh[l*3 + c].
struct Gaussian3D {
    Eigen::Vector3d mean = Eigen::Vector3d::Zero();
    Eigen::Vector3d log_scale = Eigen::Vector3d::Zero();
    Eigen::Vector4d rotation = Eigen::Vector4d(1, 0, 0, 0);  // (w, x, y, z)
    double opacity_logit = 0.0;
    std::vector<double> sh;       // 3 * (L+1)^2
    std::vector<double> feature;  // D

    Eigen::Vector3d scale() const {
        return log_scale.array().exp().matrix();
    }
    double opacity() const { return sigmoid(opacity_logit); }
    Eigen::Vector4d unit_rotation() const { return rotation / rotation.norm(); }

    double sh_at(int coeff, int channel) const { return sh[coeff * 3 + channel]; }
    double& sh_at(int coeff, int channel) { return sh[coeff * 3 + channel]; }
};

// Scene-specific up-projection: one 3x3 convolution (zero padding, stride 1)
// mapping a rendered D-channel feature image to the extractor's dimension.
// kernel layout: [c_out][c_in][ky][kx] flattened, offsets ky, kx in {0,1,2}
// addressing input rows y-1..y+1 (cross-correlation convention).
struct FeatureDecoder {
    int in_channels = 0;
    int out_channels = 0;
    std::vector<double> kernel;  // out * in * 9
    std::vector<double> bias;    // out

    bool empty() const { return kernel.empty(); }

    double k(int co, int ci, int ky, int kx) const {
        return kernel[((static_cast<std::size_t>(co) * in_channels + ci) * 3 + ky) * 3 + kx];
    }
    double& k(int co, int ci, int ky, int kx) {
        return kernel[((static_cast<std::size_t>(co) * in_channels + ci) * 3 + ky) * 3 + kx];
    }

    static FeatureDecoder identity(int channels) {
        FeatureDecoder d;
        d.in_channels = d.out_channels = channels;
        d.kernel.assign(static_cast<std::size_t>(channels) * channels * 9, 0.0);
        d.bias.assign(channels, 0.0);
        for (int c = 0; c < channels; ++c) d.k(c, c, 1, 1) = 1.0;
        return d;
    }

    // Kernel entries i.i.d. uniform in +-1/sqrt(9*C_in), bias zero.
    static FeatureDecoder random_init(int in_channels, int out_channels, Rng& rng) {
        FeatureDecoder d;
        d.in_channels = in_channels;
        d.out_channels = out_channels;
        d.kernel.resize(static_cast<std::size_t>(out_channels) * in_channels * 9);
        d.bias.assign(out_channels, 0.0);
        const double bound = 1.0 / std::sqrt(9.0 * in_channels);
        for (double& w : d.kernel) w = rng.uniform(-bound, bound);
        return d;
    }
};

// Applies the decoder: same spatial size, zero padding, linear in the input.
inline FeatureImage decoder_apply(const FeatureDecoder& dec, const FeatureImage& f_low) {
    require(f_low.channels == dec.in_channels,
            "decoder_apply: input has " + std::to_string(f_low.channels) +
                " channels, decoder expects " + std::to_string(dec.in_channels));
    const int h = f_low.height, w = f_low.width;
    FeatureImage out(h, w, dec.out_channels);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double* o = out.pixel(y, x);
            for (int co = 0; co < dec.out_channels; ++co) o[co] = dec.bias[co];
            for (int ky = 0; ky < 3; ++ky) {
                const int yy = y + ky - 1;
                if (yy < 0 || yy >= h) continue;
                for (int kx = 0; kx < 3; ++kx) {
                    const int xx = x + kx - 1;
                    if (xx < 0 || xx >= w) continue;
                    const double* in = f_low.pixel(yy, xx);
                    for (int co = 0; co < dec.out_channels; ++co) {
                        double acc = 0.0;
                        for (int ci = 0; ci < dec.in_channels; ++ci)
                            acc += dec.k(co, ci, ky, kx) * in[ci];
                        o[co] += acc;
                    }
                }
            }
        }
    }
    return out;
}

struct DecoderGrads {
    std::vector<double> kernel;
    std::vector<double> bias;
    FeatureImage input;  // dL/d f_low
};

// Backward of decoder_apply for upstream dL/d out.
inline DecoderGrads decoder_backward(const FeatureDecoder& dec, const FeatureImage& f_low,
                                     const FeatureImage& grad_out) {
    require(grad_out.channels == dec.out_channels && grad_out.height == f_low.height &&
                grad_out.width == f_low.width,
            "decoder_backward: gradient shape mismatch");
    DecoderGrads g;
    g.kernel.assign(dec.kernel.size(), 0.0);
    g.bias.assign(dec.bias.size(), 0.0);
    g.input = FeatureImage(f_low.height, f_low.width, f_low.channels);
    const int h = f_low.height, w = f_low.width;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double* go = grad_out.pixel(y, x);
            for (int co = 0; co < dec.out_channels; ++co) g.bias[co] += go[co];
            for (int ky = 0; ky < 3; ++ky) {
                const int yy = y + ky - 1;
                if (yy < 0 || yy >= h) continue;
                for (int kx = 0; kx < 3; ++kx) {
                    const int xx = x + kx - 1;
                    if (xx < 0 || xx >= w) continue;
                    const double* in = f_low.pixel(yy, xx);
                    double* gi = g.input.pixel(yy, xx);
                    for (int co = 0; co < dec.out_channels; ++co) {
                        const double up = go[co];
                        if (up == 0.0) continue;
                        for (int ci = 0; ci < dec.in_channels; ++ci) {
                            g.kernel[((static_cast<std::size_t>(co) * dec.in_channels + ci) * 3 + ky) * 3 +
                                     kx] += up * in[ci];
                            gi[ci] += up * dec.k(co, ci, ky, kx);
                        }
                    }
                }
            }
        }
    }
    return g;
}

// The full scene: Gaussians sharing one feature dimension D, plus the
// scene-specific decoder and the SH degree used for view-dependent color.
struct Scene {
    std::vector<Gaussian3D> gaussians;
    int feature_dim = 0;
    int sh_degree = 3;
    FeatureDecoder decoder;

    int count() const { return static_cast<int>(gaussians.size()); }

    void validate() const {
        require(feature_dim >= 0, "scene: negative feature dim");
        require(sh_degree >= 0 && sh_degree <= 3, "scene: SH degree must be in [0,3]");
        const std::size_t n_sh = static_cast<std::size_t>(3) * sh_coeff_count(sh_degree);
        for (const auto& g : gaussians) {
            require(g.sh.size() == n_sh, "scene: SH coefficient count mismatch");
            require(static_cast<int>(g.feature.size()) == feature_dim,
                    "scene: feature length differs from scene feature_dim");
            require(g.rotation.norm() > 1e-12, "scene: zero quaternion");
        }
        if (!decoder.empty()) {
            require(decoder.in_channels == feature_dim,
                    "scene: decoder input channels differ from feature_dim");
            for (double w : decoder.kernel)
                require(is_finite(w), "scene: non-finite decoder kernel weight");
            for (double b : decoder.bias) require(is_finite(b), "scene: non-finite decoder bias");
        }
    }
};

// FNV-1a over all Gaussian parameter bytes; used to detect a scene mutated
// between a forward render and its backward pass.
inline std::uint64_t scene_param_hash(const Scene& scene) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* p, std::size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ULL;
        }
    };
    const int m = scene.count();
    mix(&m, sizeof(m));
    mix(&scene.feature_dim, sizeof(scene.feature_dim));
    mix(&scene.sh_degree, sizeof(scene.sh_degree));
    for (const auto& g : scene.gaussians) {
        mix(g.mean.data(), 3 * sizeof(double));
        mix(g.log_scale.data(), 3 * sizeof(double));
        mix(g.rotation.data(), 4 * sizeof(double));
        mix(&g.opacity_logit, sizeof(double));
        mix(g.sh.data(), g.sh.size() * sizeof(double));
        mix(g.feature.data(), g.feature.size() * sizeof(double));
    }
    return h;
}

}  // namespace featsplat
