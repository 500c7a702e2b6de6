#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

#include "mixmfl/error.hpp"
#include "mixmfl/param_bundle.hpp"
#include "mixmfl/tensor.hpp"

namespace mixmfl {

struct LossConfig {
    double mu = 0.5;       // weight of the modality classification loss
    double gamma = 0.0001; // weight of the entropy triplet loss
    double alpha = 1.0;    // triplet margin
    double entropy_epsilon = 1e-8;
    double fedprox_mu = 0.01;

    void validate() const {
        if (mu < 0 || gamma < 0 || alpha < 0 || entropy_epsilon < 0 || fedprox_mu < 0) {
            fail(ErrorKind::ConfigError, "loss weights, margin and epsilon must be non-negative");
        }
    }
};

inline constexpr double kDiceEpsilon = 1e-7;

/// Soft Dice loss: mean over samples and classes of
/// 1 - 2Σpg / (Σp² + Σg² + ε). Accepts K×H×W or N×K×H×W.
inline Tensor dice_loss(const Tensor& probs, const Tensor& target) {
    if (probs.shape() != target.shape() || (probs.dim() != 3 && probs.dim() != 4)) {
        fail(ErrorKind::ShapeMismatch, "dice_loss: " + shape_str(probs.shape()) + " vs " + shape_str(target.shape()));
    }
    std::size_t plane = probs.shape()[probs.dim() - 1] * probs.shape()[probs.dim() - 2];
    Shape rows{probs.numel() / plane, plane};
    Tensor p = reshape(probs, rows);
    Tensor g = reshape(target.detach(), rows);
    Tensor overlap = sum_last(mul(p, g));
    Tensor denom = add_scalar(add(sum_last(mul(p, p)), sum_last(mul(g, g))), kDiceEpsilon);
    Tensor ratio = div(scale(overlap, 2.0), denom);
    return add_scalar(scale(mean(ratio), -1.0), 1.0);
}

/// Mean cross-entropy of modality logits (one row per representation
/// instance) against the true modality index of each row.
inline Tensor modality_ce(const Tensor& logits, const std::vector<std::size_t>& labels) {
    if (labels.empty() || logits.dim() != 2) fail(ErrorKind::EmptyBatch, "modality_ce needs at least one instance");
    std::size_t rows = logits.size(0), classes = logits.size(1);
    if (labels.size() != rows) fail(ErrorKind::ShapeMismatch, "modality_ce: label count differs from logit rows");
    std::vector<double> onehot(rows * classes, 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
        if (labels[i] >= classes) fail(ErrorKind::ShapeMismatch, "modality label out of range");
        onehot[i * classes + labels[i]] = 1.0;
    }
    Tensor picked = sum(mul(log_softmax(logits, -1), Tensor({rows, classes}, std::move(onehot))));
    return scale(picked, -1.0 / static_cast<double>(rows));
}

/// Gaussian entropy ½ln(2πe·σ²) per row of an N×C matrix, σ² being the
/// population variance of the row's components floored at `epsilon`.
inline Tensor gaussian_entropy_rows(const Tensor& rows, double epsilon) {
    if (rows.dim() != 2) fail(ErrorKind::ShapeMismatch, "gaussian_entropy_rows expects N×C");
    if (rows.size(1) < 2) fail(ErrorKind::VectorTooShort, "entropy needs at least two components");
    Tensor var = clamp_min(variance_last(rows), epsilon);
    return add_scalar(scale(log(var), 0.5), 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e));
}

inline Tensor gaussian_entropy(const Tensor& v, double epsilon) {
    if (v.numel() < 2) fail(ErrorKind::VectorTooShort, "entropy needs at least two components");
    return reshape(gaussian_entropy_rows(reshape(v, {1, v.numel()}), epsilon), {1});
}

/// Triplet sets for a batch of `num_samples` samples. Row blocks are grouped
/// by sample: sample i owns rows [i·k, (i+1)·k) of each matrix, with k the
/// per-sample count of that set.
struct TripletBatch {
    std::size_t num_samples = 0;
    std::size_t num_modalities = 0;  // modalities held by the client
    Tensor anchors;                  // (I·a)×C
    Tensor positives;                // (I·p)×C
    Tensor negatives;                // (I·q)×C
};

namespace detail {

// Per-sample |H(x) - H(y)| over all x in block i of `left`, y in block i of
// `right`, laid out as I×(a·b).
inline Tensor pairwise_entropy_gaps(const Tensor& h_left, std::size_t a, const Tensor& h_right, std::size_t b,
                                    std::size_t samples) {
    std::vector<std::size_t> li, ri;
    for (std::size_t i = 0; i < samples; ++i) {
        for (std::size_t x = 0; x < a; ++x) {
            for (std::size_t y = 0; y < b; ++y) {
                li.push_back(i * a + x);
                ri.push_back(i * b + y);
            }
        }
    }
    Tensor gaps = abs(sub(index_select(h_left, li), index_select(h_right, ri)));
    return reshape(gaps, {samples, a * b});
}

}  // namespace detail

/// (1/I) Σ_i max(0, MaxDis(A_i, P_i) - MinDis(A_i, N_i) + α), with
/// Dis(u, v) = |H(u) - H(v)|. Clients with fewer than two modalities
/// contribute zero.
inline Tensor triplet_entropy_loss(const TripletBatch& batch, double alpha, double epsilon) {
    if (batch.num_modalities < 2) return Tensor::scalar(0.0);
    if (batch.num_samples == 0 || !batch.anchors.defined() || !batch.positives.defined() ||
        !batch.negatives.defined()) {
        fail(ErrorKind::EmptyTripletSet, "anchor, positive and negative sets must be nonempty");
    }
    std::size_t n = batch.num_samples;
    auto per_sample = [n](const Tensor& t) {
        if (t.size(0) % n != 0) fail(ErrorKind::ShapeMismatch, "triplet set rows not divisible by sample count");
        return t.size(0) / n;
    };
    std::size_t a = per_sample(batch.anchors), p = per_sample(batch.positives), q = per_sample(batch.negatives);
    Tensor ha = gaussian_entropy_rows(batch.anchors, epsilon);
    Tensor hp = gaussian_entropy_rows(batch.positives, epsilon);
    Tensor hn = gaussian_entropy_rows(batch.negatives, epsilon);
    Tensor max_pos = max_last(detail::pairwise_entropy_gaps(ha, a, hp, p, n));
    Tensor min_neg = min_last(detail::pairwise_entropy_gaps(ha, a, hn, q, n));
    return mean(relu(add_scalar(sub(max_pos, min_neg), alpha)));
}

/// l_seg + μ·l_cls + γ·l_tri.
inline Tensor total_loss(const Tensor& l_seg, const Tensor& l_cls, const Tensor& l_tri, const LossConfig& cfg) {
    for (const Tensor* t : {&l_seg, &l_cls, &l_tri}) {
        if (t->numel() != 1) fail(ErrorKind::NonScalarLoss, "loss components must be scalars");
        if (!std::isfinite(t->item())) fail(ErrorKind::NonFiniteValue, "non-finite loss component");
    }
    return add(l_seg, add(scale(l_cls, cfg.mu), scale(l_tri, cfg.gamma)));
}

inline double total_loss(double l_seg, double l_cls, double l_tri, const LossConfig& cfg) {
    return total_loss(Tensor::scalar(l_seg), Tensor::scalar(l_cls), Tensor::scalar(l_tri), cfg).item();
}

/// (μ/2)·‖w - w_global‖² over the canonical flat layout; w_global is a constant.
inline Tensor fedprox_term(const ParamBundle& w, const ParamBundle& w_global, double fedprox_mu) {
    require_same_manifest(w, w_global, "fedprox_term");
    Tensor total = Tensor::scalar(0.0);
    for (const auto& [key, t] : w) {
        Tensor d = sub(t, w_global.at(key).detach());
        total = add(total, sum(mul(d, d)));
    }
    return scale(total, fedprox_mu / 2.0);
}

}  // namespace mixmfl
