// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <featsplat/loss.hpp>

#include "support/test_utils.hpp"

using namespace featsplat;

namespace {

FeatureImage random_image(Rng& rng, int h, int w, int c, double lo = 0.0, double hi = 1.0) {
    FeatureImage img(h, w, c);
    for (double& v : img.data) v = rng.uniform(lo, hi);
    return img;
}

}  // namespace

TEST_CASE("loss_rgb is zero when render equals ground truth") {
    Rng rng(1);
    const FeatureImage img = random_image(rng, 16, 16, 3);
    const RgbLoss loss = loss_rgb(img, img, 0.2);
    CHECK(loss.total == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(loss.l1 == 0.0);
    CHECK(loss.dssim == doctest::Approx(0.0).epsilon(1e-12));
    for (double g : loss.grad.data) CHECK(std::abs(g) < 1e-12);
}

TEST_CASE("constant offset contributes exactly 0.1*(1-lambda) through the L1 term") {
    Rng rng(2);
    const FeatureImage gt = random_image(rng, 12, 12, 3, 0.15, 0.8);
    FeatureImage render = gt;
    for (double& v : render.data) v += 0.1;
    const double lambda = 0.2;
    const RgbLoss loss = loss_rgb(render, gt, lambda);
    CHECK(loss.l1 == doctest::Approx(0.1).epsilon(1e-12));
    CHECK((1.0 - lambda) * loss.l1 == doctest::Approx(0.1 * (1.0 - lambda)).epsilon(1e-12));
}

TEST_CASE("with lambda 0 loss_rgb reduces exactly to mean L1") {
    Rng rng(3);
    const FeatureImage gt = random_image(rng, 9, 14, 3);
    const FeatureImage render = random_image(rng, 9, 14, 3);
    const RgbLoss loss = loss_rgb(render, gt, 0.0);
    double l1 = 0.0;
    for (std::size_t i = 0; i < gt.data.size(); ++i) l1 += std::abs(render.data[i] - gt.data[i]);
    l1 /= static_cast<double>(gt.data.size());
    CHECK(loss.total == l1);  // bitwise: the SSIM path must not run at all
    CHECK(loss.dssim == 0.0);
}

TEST_CASE("loss_rgb gradient matches finite differences") {
    Rng rng(4);
    FeatureImage render = random_image(rng, 14, 14, 3, 0.05, 0.95);
    const FeatureImage gt = random_image(rng, 14, 14, 3, 0.05, 0.95);
    const double lambda = 0.35;
    const RgbLoss loss = loss_rgb(render, gt, lambda);

    const double eps = 1e-6;
    Rng pick(5);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t i = pick.uniform_int(render.data.size());
        const double orig = render.data[i];
        render.data[i] = orig + eps;
        const double hi = loss_rgb(render, gt, lambda).total;
        render.data[i] = orig - eps;
        const double lo = loss_rgb(render, gt, lambda).total;
        render.data[i] = orig;
        const double fd = (hi - lo) / (2 * eps);
        const double rel = std::abs(fd - loss.grad.data[i]) /
                           std::max({std::abs(fd), std::abs(loss.grad.data[i]), 1e-12});
        CHECK(rel < 1e-4);
    }
}

TEST_CASE("dssim reacts to structural noise") {
    Rng rng(6);
    const FeatureImage gt = random_image(rng, 16, 16, 3, 0.2, 0.8);
    FeatureImage noisy = gt;
    for (std::size_t i = 0; i < noisy.data.size(); ++i)
        noisy.data[i] += 0.2 * (rng.uniform() - 0.5);
    const RgbLoss loss = loss_rgb(noisy, gt, 1.0);
    CHECK(loss.dssim > 0.0);
    CHECK(loss.dssim < 0.5);  // (1 - SSIM)/2 is bounded by 1 and the noise is mild
}

TEST_CASE("loss_feat values and oracle") {
    Rng rng(7);
    const FeatureImage a = random_image(rng, 8, 10, 16, -1.0, 1.0);

    CHECK(loss_feat(a, a).total == 0.0);

    FeatureImage shifted = a;
    for (double& v : shifted.data) v += 0.37;
    CHECK(loss_feat(shifted, a).total == doctest::Approx(0.37).epsilon(1e-12));
    CHECK(loss_feat(a, shifted).total == doctest::Approx(0.37).epsilon(1e-12));

    const FeatureImage b = random_image(rng, 8, 10, 16, -1.0, 1.0);
    double oracle = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) oracle += std::abs(a.data[i] - b.data[i]);
    oracle /= static_cast<double>(a.data.size());
    CHECK(loss_feat(a, b).total == doctest::Approx(oracle).epsilon(1e-7));
}

TEST_CASE("loss_feat subgradient is zero at exact ties") {
    FeatureImage a(2, 2, 1);
    FeatureImage b(2, 2, 1);
    a.data = {1.0, 2.0, 3.0, 4.0};
    b.data = {1.0, 5.0, 1.0, 4.0};
    const FeatLoss loss = loss_feat(a, b);
    CHECK(loss.grad.data[0] == 0.0);
    CHECK(loss.grad.data[1] < 0.0);
    CHECK(loss.grad.data[2] > 0.0);
    CHECK(loss.grad.data[3] == 0.0);
}

TEST_CASE("loss functions reject shape mismatches") {
    const FeatureImage a(4, 4, 3);
    const FeatureImage b(4, 5, 3);
    CHECK_THROWS_AS(loss_rgb(a, b, 0.2), ValidationError);
    CHECK_THROWS_AS(loss_feat(a, b), ValidationError);
}

TEST_CASE("psnr of identical images is capped and of offset images matches closed form") {
    Rng rng(8);
    const FeatureImage img = random_image(rng, 8, 8, 3);
    CHECK(psnr(img, img) == 99.0);
    FeatureImage off = img;
    for (double& v : off.data) v += 0.1;
    CHECK(psnr(off, img) == doctest::Approx(-10.0 * std::log10(0.01)).epsilon(1e-9));
}
