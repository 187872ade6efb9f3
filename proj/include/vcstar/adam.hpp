#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "tensor.hpp"

namespace vcstar {

// Bias-corrected adaptive-moment optimizer state for a fixed parameter list.
struct AdamState {
    std::vector<std::vector<float>> first_moment;
    std::vector<std::vector<float>> second_moment;
    int64_t step_count = 0;

    static AdamState for_params(const std::vector<Tensor>& params) {
        AdamState s;
        for (const auto& p : params) {
            s.first_moment.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
            s.second_moment.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
        }
        return s;
    }
};

struct AdamConfig {
    float lr = 2e-4f;
    float beta1 = 0.5f;
    float beta2 = 0.999f;
    float epsilon = 1e-8f;
};

// In-place update from the gradients currently held by the params.
inline void adam_step(std::vector<Tensor>& params, AdamState& state, const AdamConfig& cfg) {
    if (params.size() != state.first_moment.size())
        throw ShapeError("adam_step: state does not match parameter list");
    state.step_count += 1;
    double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(state.step_count));
    double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(state.step_count));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& value = params[pi].mutable_value();
        const auto& grad = params[pi].grad();
        auto& m = state.first_moment[pi];
        auto& v = state.second_moment[pi];
        if (m.size() != value.size())
            throw ShapeError("adam_step: moment buffer does not match parameter shape");
        for (size_t i = 0; i < value.size(); ++i) {
            float g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0f - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0f - cfg.beta2) * g * g;
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            value[i] -= static_cast<float>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.epsilon));
        }
    }
}

inline void zero_grads(std::vector<Tensor>& params) {
    for (auto& p : params) p.zero_grad();
}

}  // namespace vcstar
