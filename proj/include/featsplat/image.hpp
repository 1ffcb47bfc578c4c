// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include "featsplat/common.hpp"

namespace featsplat {

// Dense H x W x C map, row-major with channels innermost. Covers RGB images,
// low/high-dimensional feature renders and ground-truth feature maps alike.
struct FeatureImage {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> data;

    FeatureImage() = default;
    FeatureImage(int h, int w, int c, double fill = 0.0)
        : height(h), width(w), channels(c),
          data(static_cast<std::size_t>(h) * w * c, fill) {}

    double& at(int y, int x, int c) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    double at(int y, int x, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    double* pixel(int y, int x) {
        return data.data() + (static_cast<std::size_t>(y) * width + x) * channels;
    }
    const double* pixel(int y, int x) const {
        return data.data() + (static_cast<std::size_t>(y) * width + x) * channels;
    }

    std::size_t size() const { return data.size(); }
    bool same_shape(const FeatureImage& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }

    bool all_finite() const {
        for (double v : data)
            if (!is_finite(v)) return false;
        return true;
    }
};

// Bilinear sample at continuous position (x, y) in pixel-center coordinates:
// the center of pixel (i, j) is at (i + 0.5, j + 0.5). Clamps at the border.
inline void bilinear_sample(const FeatureImage& img, double x, double y, double* out) {
    double fx = x - 0.5;
    double fy = y - 0.5;
    int x0 = static_cast<int>(std::floor(fx));
    int y0 = static_cast<int>(std::floor(fy));
    double tx = fx - x0;
    double ty = fy - y0;
    int x1 = std::clamp(x0 + 1, 0, img.width - 1);
    int y1 = std::clamp(y0 + 1, 0, img.height - 1);
    x0 = std::clamp(x0, 0, img.width - 1);
    y0 = std::clamp(y0, 0, img.height - 1);
    const double* p00 = img.pixel(y0, x0);
    const double* p01 = img.pixel(y0, x1);
    const double* p10 = img.pixel(y1, x0);
    const double* p11 = img.pixel(y1, x1);
    for (int c = 0; c < img.channels; ++c) {
        double top = p00[c] * (1.0 - tx) + p01[c] * tx;
        double bot = p10[c] * (1.0 - tx) + p11[c] * tx;
        out[c] = top * (1.0 - ty) + bot * ty;
    }
}

// Bilinear resize. Source pixel centers map proportionally onto the target grid.
inline FeatureImage bilinear_resize(const FeatureImage& img, int out_h, int out_w) {
    if (out_h == img.height && out_w == img.width) return img;
    FeatureImage out(out_h, out_w, img.channels);
    const double sx = static_cast<double>(img.width) / out_w;
    const double sy = static_cast<double>(img.height) / out_h;
    for (int y = 0; y < out_h; ++y) {
        for (int x = 0; x < out_w; ++x) {
            bilinear_sample(img, (x + 0.5) * sx, (y + 0.5) * sy, out.pixel(y, x));
        }
    }
    return out;
}

inline FeatureImage flip_horizontal(const FeatureImage& img) {
    FeatureImage out(img.height, img.width, img.channels);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double* src = img.pixel(y, img.width - 1 - x);
            double* dst = out.pixel(y, x);
            std::copy(src, src + img.channels, dst);
        }
    return out;
}

inline double mean_abs_diff(const FeatureImage& a, const FeatureImage& b) {
    require(a.same_shape(b), "mean_abs_diff: shape mismatch");
    double sum = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) sum += std::abs(a.data[i] - b.data[i]);
    return sum / static_cast<double>(a.data.size());
}

inline double mean_sq_diff(const FeatureImage& a, const FeatureImage& b) {
    require(a.same_shape(b), "mean_sq_diff: shape mismatch");
    double sum = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        double d = a.data[i] - b.data[i];
        sum += d * d;
    }
    return sum / static_cast<double>(a.data.size());
}

// PSNR in dB for images on the [0, 1] range.
inline double psnr(const FeatureImage& render, const FeatureImage& gt) {
    double mse = mean_sq_diff(render, gt);
    if (mse <= 0.0) return 99.0;
    return -10.0 * std::log10(mse);
}

}  // namespace featsplat
