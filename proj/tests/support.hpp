#pragma once

// Test-only helpers: central finite-difference gradient checking and random
// tensor factories.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "mixmfl/param_bundle.hpp"
#include "mixmfl/tensor.hpp"

namespace mixmfl::testing {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps near-zero components from
/// turning round-off into large relative errors.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares tape gradients of scalar f(inputs) against central differences
/// for every component of every input.
inline GradCheckResult gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                 std::vector<Tensor> inputs, double h = 1e-6) {
    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    {
        GradTape tape;
        Tensor loss = f(inputs);
        tape.backward(loss);
    }
    GradCheckResult result;
    for (auto& t : inputs) {
        std::vector<double> analytic(t.grad().begin(), t.grad().end());
        if (analytic.empty()) analytic.assign(t.numel(), 0.0);
        auto v = t.mutable_values();
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double orig = v[i];
            v[i] = orig + h;
            const double up = f(inputs).item();
            v[i] = orig - h;
            const double down = f(inputs).item();
            v[i] = orig;
            const double numeric = (up - down) / (2.0 * h);
            result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic[i], numeric));
            ++result.checked;
        }
    }
    return result;
}

/// Same check over every tensor of a parameter bundle.
inline GradCheckResult gradcheck_bundle(const std::function<Tensor(const ParamBundle&)>& f, ParamBundle& params,
                                        double h = 1e-6) {
    std::vector<std::string> keys = params.keys();
    std::vector<Tensor> inputs;
    for (const auto& k : keys) inputs.push_back(params.at(k));
    return gradcheck(
        [&](const std::vector<Tensor>& ts) {
            ParamBundle view;
            for (std::size_t i = 0; i < keys.size(); ++i) view.set(keys[i], ts[i]);
            return f(view);
        },
        inputs, h);
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = u(rng);
    return Tensor(std::move(shape), std::move(v));
}

/// Values bounded away from zero in magnitude, so kinks of relu/abs are not
/// straddled by finite differences.
inline Tensor random_away_from_zero(Shape shape, std::mt19937_64& rng, double lo = 0.2, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::bernoulli_distribution sign(0.5);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = sign(rng) ? u(rng) : -u(rng);
    return Tensor(std::move(shape), std::move(v));
}

/// Scalar reduction with random weights, so every output element carries a
/// distinct upstream gradient.
inline Tensor weighted_sum(const Tensor& t, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Tensor w = random_tensor(t.shape(), rng);
    return sum(mul(t, w));
}

}  // namespace mixmfl::testing
