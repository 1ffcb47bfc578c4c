// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "featsplat/image.hpp"

namespace featsplat {

namespace ssim_const {
inline constexpr int kWindow = 11;
inline constexpr double kSigma = 1.5;
inline constexpr double kC1 = 0.01 * 0.01;
inline constexpr double kC2 = 0.03 * 0.03;
}  // namespace ssim_const

namespace detail {

inline const std::array<double, ssim_const::kWindow>& ssim_window_1d() {
    static const std::array<double, ssim_const::kWindow> w = [] {
        std::array<double, ssim_const::kWindow> g{};
        const int half = ssim_const::kWindow / 2;
        double sum = 0.0;
        for (int i = 0; i < ssim_const::kWindow; ++i) {
            const double d = i - half;
            g[i] = std::exp(-d * d / (2.0 * ssim_const::kSigma * ssim_const::kSigma));
            sum += g[i];
        }
        for (double& v : g) v /= sum;
        return g;
    }();
    return w;
}

// Separable 11x11 Gaussian convolution with zero padding (same size). The
// kernel is symmetric, so this is its own adjoint.
inline FeatureImage gaussian_blur(const FeatureImage& img) {
    const auto& w = ssim_window_1d();
    const int half = ssim_const::kWindow / 2;
    FeatureImage tmp(img.height, img.width, img.channels);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            double* o = tmp.pixel(y, x);
            for (int k = 0; k < ssim_const::kWindow; ++k) {
                const int xx = x + k - half;
                if (xx < 0 || xx >= img.width) continue;
                const double* in = img.pixel(y, xx);
                for (int c = 0; c < img.channels; ++c) o[c] += w[k] * in[c];
            }
        }
    FeatureImage out(img.height, img.width, img.channels);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            double* o = out.pixel(y, x);
            for (int k = 0; k < ssim_const::kWindow; ++k) {
                const int yy = y + k - half;
                if (yy < 0 || yy >= img.height) continue;
                const double* in = tmp.pixel(yy, x);
                for (int c = 0; c < img.channels; ++c) o[c] += w[k] * in[c];
            }
        }
    return out;
}

inline FeatureImage elementwise_product(const FeatureImage& a, const FeatureImage& b) {
    FeatureImage out(a.height, a.width, a.channels);
    for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] * b.data[i];
    return out;
}

}  // namespace detail

struct RgbLoss {
    double total = 0.0;
    double l1 = 0.0;
    double dssim = 0.0;  // (1 - SSIM)/2
    FeatureImage grad;   // dL/d render
};

// (1-lambda)*mean|render-gt| + lambda*(1-SSIM)/2 with the standard 11x11
// sigma=1.5 window on [0,1]-range images. Returns the analytic gradient w.r.t.
// the render. With lambda == 0 the SSIM term is skipped entirely, so the loss
// reduces exactly to mean L1.
inline RgbLoss loss_rgb(const FeatureImage& render, const FeatureImage& gt, double lambda_dssim) {
    require(render.same_shape(gt), "loss_rgb: shape mismatch");
    require(lambda_dssim >= 0.0 && lambda_dssim <= 1.0, "loss_rgb: lambda outside [0,1]");
    const double n = static_cast<double>(render.data.size());

    RgbLoss out;
    out.grad = FeatureImage(render.height, render.width, render.channels);

    double l1_sum = 0.0;
    for (std::size_t i = 0; i < render.data.size(); ++i) {
        const double d = render.data[i] - gt.data[i];
        l1_sum += std::abs(d);
        const double sign = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
        out.grad.data[i] = (1.0 - lambda_dssim) * sign / n;
    }
    out.l1 = l1_sum / n;

    if (lambda_dssim > 0.0) {
        using namespace ssim_const;
        const FeatureImage mu_x = detail::gaussian_blur(render);
        const FeatureImage mu_y = detail::gaussian_blur(gt);
        const FeatureImage xx = detail::gaussian_blur(detail::elementwise_product(render, render));
        const FeatureImage yy = detail::gaussian_blur(detail::elementwise_product(gt, gt));
        const FeatureImage xy = detail::gaussian_blur(detail::elementwise_product(render, gt));

        // Per-pixel upstream factors for the three convolution routes into x.
        FeatureImage g_mu(render.height, render.width, render.channels);
        FeatureImage g_xx(render.height, render.width, render.channels);
        FeatureImage g_xy(render.height, render.width, render.channels);

        double ssim_sum = 0.0;
        const double upstream = -0.5 * lambda_dssim / n;  // d total / d ssim_map(p)
        for (std::size_t i = 0; i < render.data.size(); ++i) {
            const double mx = mu_x.data[i], my = mu_y.data[i];
            const double sx = xx.data[i] - mx * mx;
            const double sy = yy.data[i] - my * my;
            const double sxy = xy.data[i] - mx * my;
            const double a1 = 2.0 * mx * my + kC1;
            const double a2 = 2.0 * sxy + kC2;
            const double b1 = mx * mx + my * my + kC1;
            const double b2 = sx + sy + kC2;
            const double denom = b1 * b2;
            const double ssim = a1 * a2 / denom;
            ssim_sum += ssim;

            const double d_mu_direct = 2.0 * my * a2 / denom - 2.0 * mx * a1 * a2 / (b1 * denom);
            const double d_sx = -a1 * a2 / (b2 * denom);
            const double d_sxy = 2.0 * a1 / denom;
            // sigma_x^2 and sigma_xy also depend on mu_x.
            const double d_mu = d_mu_direct + d_sx * (-2.0 * mx) + d_sxy * (-my);

            g_mu.data[i] = upstream * d_mu;
            g_xx.data[i] = upstream * d_sx;
            g_xy.data[i] = upstream * d_sxy;
        }
        const double mean_ssim = ssim_sum / n;
        out.dssim = (1.0 - mean_ssim) / 2.0;

        const FeatureImage conv_mu = detail::gaussian_blur(g_mu);
        const FeatureImage conv_xx = detail::gaussian_blur(g_xx);
        const FeatureImage conv_xy = detail::gaussian_blur(g_xy);
        for (std::size_t i = 0; i < render.data.size(); ++i) {
            out.grad.data[i] += conv_mu.data[i] + 2.0 * render.data[i] * conv_xx.data[i] +
                                gt.data[i] * conv_xy.data[i];
        }
    }

    out.total = (1.0 - lambda_dssim) * out.l1 + lambda_dssim * out.dssim;
    return out;
}

struct FeatLoss {
    double total = 0.0;
    FeatureImage grad;
};

// Mean absolute error over all H*W*C entries; subgradient 0 at exact ties.
inline FeatLoss loss_feat(const FeatureImage& f_high, const FeatureImage& gt_feat) {
    require(f_high.same_shape(gt_feat), "loss_feat: shape mismatch");
    const double n = static_cast<double>(f_high.data.size());
    FeatLoss out;
    out.grad = FeatureImage(f_high.height, f_high.width, f_high.channels);
    double sum = 0.0;
    for (std::size_t i = 0; i < f_high.data.size(); ++i) {
        const double d = f_high.data[i] - gt_feat.data[i];
        sum += std::abs(d);
        out.grad.data[i] = (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) / n;
    }
    out.total = sum / n;
    return out;
}

}  // namespace featsplat
