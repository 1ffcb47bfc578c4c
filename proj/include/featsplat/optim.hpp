// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "featsplat/common.hpp"

namespace featsplat {

struct AdamParams {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled (AdamW) when > 0
};

// Plain Adam / AdamW over a flat parameter buffer. One instance per parameter
// group; moment buffers always shape-match the parameters.
class AdamState {
public:
    void ensure_size(std::size_t n) {
        if (m_.size() != n) {
            m_.assign(n, 0.0);
            v_.assign(n, 0.0);
        }
    }

    // Remaps state after the gaussian set changed: new slot i takes the old
    // state at old_index[i]*stride, or zeros when old_index[i] < 0.
    void remap(const std::vector<int>& old_index, std::size_t stride) {
        std::vector<double> m(old_index.size() * stride, 0.0);
        std::vector<double> v(old_index.size() * stride, 0.0);
        if (m_.empty()) {  // group never stepped yet
            m_.swap(m);
            v_.swap(v);
            return;
        }
        for (std::size_t i = 0; i < old_index.size(); ++i) {
            if (old_index[i] < 0) continue;
            const std::size_t src = static_cast<std::size_t>(old_index[i]) * stride;
            for (std::size_t k = 0; k < stride; ++k) {
                m[i * stride + k] = m_[src + k];
                v[i * stride + k] = v_[src + k];
            }
        }
        m_.swap(m);
        v_.swap(v);
    }

    void step(double* params, const double* grads, std::size_t n, const AdamParams& p) {
        ensure_size(n);
        ++step_count_;
        const double bias1 = 1.0 - std::pow(p.beta1, static_cast<double>(step_count_));
        const double bias2 = 1.0 - std::pow(p.beta2, static_cast<double>(step_count_));
        for (std::size_t i = 0; i < n; ++i) {
            m_[i] = p.beta1 * m_[i] + (1.0 - p.beta1) * grads[i];
            v_[i] = p.beta2 * v_[i] + (1.0 - p.beta2) * grads[i] * grads[i];
            const double m_hat = m_[i] / bias1;
            const double v_hat = v_[i] / bias2;
            double update = m_hat / (std::sqrt(v_hat) + p.eps);
            if (p.weight_decay > 0.0) update += p.weight_decay * params[i];
            params[i] -= p.lr * update;
        }
    }

    long step_count() const { return step_count_; }

private:
    std::vector<double> m_, v_;
    long step_count_ = 0;
};

// Exponential interpolation from lr_init at t=0 to lr_final at t=max_steps.
inline double exp_lr_decay(double lr_init, double lr_final, long t, long max_steps) {
    if (max_steps <= 0 || lr_init <= 0.0 || lr_final <= 0.0) return lr_init;
    const double frac = std::min(1.0, static_cast<double>(t) / static_cast<double>(max_steps));
    return lr_init * std::pow(lr_final / lr_init, frac);
}

// SGD with momentum and polynomial lr decay (linear-probe training).
class SgdMomentum {
public:
    explicit SgdMomentum(double momentum = 0.9) : momentum_(momentum) {}

    void step(double* params, const double* grads, std::size_t n, double lr) {
        if (vel_.size() != n) vel_.assign(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            vel_[i] = momentum_ * vel_[i] + grads[i];
            params[i] -= lr * vel_[i];
        }
    }

private:
    double momentum_;
    std::vector<double> vel_;
};

inline double poly_lr(double base_lr, long t, long max_steps, double power = 0.9) {
    const double frac = std::min(1.0, static_cast<double>(t) / static_cast<double>(max_steps));
    return base_lr * std::pow(1.0 - frac, power);
}

}  // namespace featsplat
