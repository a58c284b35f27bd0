// SPDX-License-Identifier: Apache-2.0
//
// ADAM with bias correction and the cosine learning-rate schedule.

#pragma once

#include <cmath>
#include <cstddef>
#include <iostream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "iqt/tensor.hpp"

namespace iqt {

// Per-parameter first/second moment state. Slots are matched to parameters
// positionally, so the same parameter list must be passed to every step.
template <typename T>
struct AdamState {
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T epsilon = T(1e-8);
    long long t = 0;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;

    void init(const std::vector<Tensor<T>*>& params) {
        m.clear();
        v.clear();
        m.reserve(params.size());
        v.reserve(params.size());
        for (const Tensor<T>* p : params) {
            m.emplace_back(p->size(), T(0));
            v.emplace_back(p->size(), T(0));
        }
        t = 0;
    }
};

// One ADAM update over all parameters, reading gradients accumulated on the
// tensors. A parameter without a gradient buffer is treated as zero-gradient.
template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, AdamState<T>& state, T lr) {
    if (lr <= T(0)) throw std::invalid_argument("adam_step: learning rate must be positive");
    if (state.m.size() != params.size() || state.v.size() != params.size())
        throw std::invalid_argument("adam_step: state holds " + std::to_string(state.m.size()) +
                                    " slots for " + std::to_string(params.size()) + " parameters");
    state.t += 1;
    const T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(state.beta1), static_cast<double>(state.t)));
    const T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(state.beta2), static_cast<double>(state.t)));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<T>& p = *params[i];
        if (state.m[i].size() != p.size())
            throw std::invalid_argument("adam_step: parameter " + std::to_string(i) + " has " +
                                        std::to_string(p.size()) + " elements, state slot has " +
                                        std::to_string(state.m[i].size()));
        auto& val = p.mutable_value();
        const bool has_grad = p.has_grad();
        const std::vector<T>* grad = has_grad ? &p.grad() : nullptr;
        for (std::size_t j = 0; j < val.size(); ++j) {
            const T g = has_grad ? (*grad)[j] : T(0);
            T& mj = state.m[i][j];
            T& vj = state.v[i][j];
            mj = state.beta1 * mj + (T(1) - state.beta1) * g;
            vj = state.beta2 * vj + (T(1) - state.beta2) * g * g;
            const T mhat = mj / bc1;
            const T vhat = vj / bc2;
            val[j] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
        }
    }
}

// lr(step) = lr0 * 0.5 * (1 + cos(pi * step / total)). Decays to exactly 0 at
// step == total_steps; steps past the end clamp to 0 with a warning.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
    if (total_steps == 0) return lr0;
    if (step > total_steps) {
        std::cerr << "cosine_lr: step " << step << " exceeds total_steps " << total_steps << ", clamping lr to 0\n";
        return 0.0;
    }
    return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

} // namespace iqt
