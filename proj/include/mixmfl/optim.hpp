#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mixmfl/error.hpp"
#include "mixmfl/param_bundle.hpp"

namespace mixmfl {

enum class OptimizerKind { Adam, Sgd };

struct OptimizerState {
    OptimizerKind kind = OptimizerKind::Adam;
    double learning_rate = 4e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t step = 0;
    // Adam moments keyed by parameter name.
    std::map<std::string, std::vector<double>> first_moment;
    std::map<std::string, std::vector<double>> second_moment;
};

/// One optimizer update over the named parameters; their gradients are
/// cleared afterwards. Every listed parameter must carry a gradient.
inline void optimizer_step(ParamBundle& params, const std::vector<std::string>& keys, OptimizerState& state) {
    for (const auto& key : keys) {
        if (!params.at(key).has_grad()) fail(ErrorKind::MissingGrad, "parameter " + key + " has no gradient");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bias1 = 1.0 - std::pow(state.beta1, t);
    const double bias2 = 1.0 - std::pow(state.beta2, t);
    for (const auto& key : keys) {
        Tensor& p = params.at(key);
        auto w = p.mutable_values();
        auto g = p.grad();
        if (state.kind == OptimizerKind::Sgd) {
            for (std::size_t i = 0; i < w.size(); ++i) w[i] -= state.learning_rate * g[i];
        } else {
            auto& m = state.first_moment[key];
            auto& v = state.second_moment[key];
            if (m.size() != w.size()) m.assign(w.size(), 0.0);
            if (v.size() != w.size()) v.assign(w.size(), 0.0);
            for (std::size_t i = 0; i < w.size(); ++i) {
                m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
                v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
                double m_hat = m[i] / bias1;
                double v_hat = v[i] / bias2;
                w[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
            }
        }
        p.zero_grad();
    }
}

inline void optimizer_step(ParamBundle& params, OptimizerState& state) {
    optimizer_step(params, params.keys(), state);
}

}  // namespace mixmfl
