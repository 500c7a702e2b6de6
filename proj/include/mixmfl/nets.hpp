#pragma once

// Per-client network: one modality-tailored encoder per modality, a single
// modality-shared encoder, a pair-wise fusion layer and a modality classifier
// (both used only by the decoupling losses), and the segmentation decoder.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mixmfl/error.hpp"
#include "mixmfl/modality.hpp"
#include "mixmfl/param_bundle.hpp"
#include "mixmfl/tensor.hpp"

namespace mixmfl {

struct ArchConfig {
    std::size_t num_modalities = 4;
    std::size_t channels = 16;          // encoder width C
    std::size_t decoder_channels = 16;  // hidden width of the decoder
    std::size_t num_classes = 3;
    std::size_t kernel = 3;
};

enum class Origin { Tailored, Shared };

/// Representations of one minibatch, keyed by modality.
struct RepSet {
    std::map<ModalityId, Tensor> tailored_maps;   // N×C×h×w
    std::map<ModalityId, Tensor> shared_maps;     // N×C×h×w
    std::map<ModalityId, Tensor> tailored_pooled; // N×C
    std::map<ModalityId, Tensor> shared_pooled;   // N×C
};

/// Decoder input: one map per modality in global order, plus the shared map.
struct DecoderInput {
    std::vector<std::pair<ModalityId, Tensor>> modality_maps;
    Tensor shared_map;
};

inline std::string tailored_prefix(ModalityId m) { return "tailored." + std::to_string(m.index); }

namespace detail {

inline void add_conv(ParamBundle& b, const std::string& prefix, std::size_t cout, std::size_t cin, std::size_t k) {
    b.set(prefix + ".weight", Tensor::zeros({cout, cin, k, k}, true));
    b.set(prefix + ".bias", Tensor::zeros({cout}, true));
}

inline void add_linear(ParamBundle& b, const std::string& prefix, std::size_t out, std::size_t in) {
    b.set(prefix + ".weight", Tensor::zeros({out, in}, true));
    b.set(prefix + ".bias", Tensor::zeros({out}, true));
}

inline void add_encoder(ParamBundle& b, const std::string& prefix, const ArchConfig& arch) {
    add_conv(b, prefix + ".conv1", arch.channels, 1, arch.kernel);
    add_conv(b, prefix + ".conv2", arch.channels, arch.channels, arch.kernel);
}

// fan_in of the layer a parameter belongs to: the weight's trailing extents.
inline std::size_t fan_in_of(const ParamBundle& b, const std::string& key) {
    std::string layer = key.substr(0, key.rfind('.'));
    const Shape& ws = b.at(layer + ".weight").shape();
    std::size_t fan = 1;
    for (std::size_t i = 1; i < ws.size(); ++i) fan *= ws[i];
    return fan;
}

inline Tensor encoder_forward(const Tensor& image, const ParamBundle& params, const std::string& prefix) {
    Tensor x = image;
    if (x.dim() == 3) x = reshape(x, {1, x.size(0), x.size(1), x.size(2)});
    if (x.dim() != 4 || x.size(1) != 1) {
        fail(ErrorKind::ShapeMismatch, "encoder expects N×1×H×W images, got " + shape_str(image.shape()));
    }
    Tensor h = relu(conv2d(x, params.at(prefix + ".conv1.weight"), params.at(prefix + ".conv1.bias")));
    return relu(conv2d(h, params.at(prefix + ".conv2.weight"), params.at(prefix + ".conv2.bias")));
}

}  // namespace detail

/// Zero-valued bundle with the full layout (every modality's tailored encoder).
inline ParamBundle make_param_layout(const ArchConfig& arch) {
    if (arch.num_modalities == 0 || arch.channels == 0 || arch.decoder_channels == 0 || arch.num_classes == 0 ||
        arch.kernel == 0 || arch.kernel % 2 == 0) {
        fail(ErrorKind::BadDims, "architecture dimensions must be positive and the kernel odd");
    }
    ParamBundle b;
    for (std::size_t m = 0; m < arch.num_modalities; ++m) detail::add_encoder(b, tailored_prefix({m}), arch);
    detail::add_encoder(b, "shared", arch);
    detail::add_linear(b, "fusion", arch.channels, 2 * arch.channels);
    detail::add_linear(b, "classifier", arch.num_modalities, arch.channels);
    detail::add_conv(b, "decoder.conv1", arch.decoder_channels, (arch.num_modalities + 1) * arch.channels,
                     arch.kernel);
    detail::add_conv(b, "decoder.conv2", arch.num_classes, arch.decoder_channels, arch.kernel);
    return b;
}

/// Uniform init in [-a, a], a = sqrt(1/fan_in), drawn in canonical key order
/// from a single seeded stream.
inline ParamBundle init_params(const ArchConfig& arch, std::uint64_t seed) {
    ParamBundle b = make_param_layout(arch);
    std::mt19937_64 rng(seed);
    for (auto& [key, t] : b) {
        double a = std::sqrt(1.0 / static_cast<double>(detail::fan_in_of(b, key)));
        std::uniform_real_distribution<double> dist(-a, a);
        for (auto& v : t.mutable_values()) v = dist(rng);
    }
    return b;
}

inline Tensor encode_tailored(const Tensor& image, ModalityId m, const ParamBundle& params) {
    std::string prefix = tailored_prefix(m);
    if (!params.contains(prefix + ".conv1.weight")) {
        fail(ErrorKind::UnknownModality, "no tailored encoder for modality " + std::to_string(m.index));
    }
    return detail::encoder_forward(image, params, prefix);
}

inline Tensor encode_shared(const Tensor& image, const ParamBundle& params) {
    return detail::encoder_forward(image, params, "shared");
}

/// relu(W [a; b] + bias) row-wise; a, b: N×C.
inline Tensor fuse_pair(const Tensor& a, const Tensor& b, const ParamBundle& params) {
    if (a.shape() != b.shape() || a.dim() != 2) {
        fail(ErrorKind::ShapeMismatch, "fuse_pair: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    return relu(linear(concat({a, b}, 1), params.at("fusion.weight"), params.at("fusion.bias")));
}

/// Modality logits for pooled representations (N×C). Shared-origin inputs
/// pass through the gradient reversal layer first.
inline Tensor classify_modality(const Tensor& pooled, Origin origin, const ParamBundle& params,
                                double grl_lambda = 1.0) {
    Tensor x = pooled.dim() == 1 ? reshape(pooled, {1, pooled.numel()}) : pooled;
    if (origin == Origin::Shared) x = grl(x, grl_lambda);
    return linear(x, params.at("classifier.weight"), params.at("classifier.bias"));
}

/// Per-pixel class logits N×K×H×W from the full, globally ordered map list.
inline Tensor decode(const DecoderInput& input, const ParamBundle& params) {
    std::size_t expected = params.at("decoder.conv1.weight").size(1);
    std::size_t channels = params.at("shared.conv2.weight").size(0);
    std::size_t num_modalities = expected / channels - 1;
    if (input.modality_maps.size() != num_modalities || !input.shared_map.defined()) {
        fail(ErrorKind::IncompleteRepList, "decoder needs " + std::to_string(num_modalities) +
                                               " modality maps plus the shared map");
    }
    std::vector<Tensor> parts;
    for (std::size_t i = 0; i < input.modality_maps.size(); ++i) {
        if (input.modality_maps[i].first.index != i) {
            fail(ErrorKind::IncompleteRepList, "modality maps out of global order at position " + std::to_string(i));
        }
        parts.push_back(input.modality_maps[i].second);
    }
    parts.push_back(input.shared_map);
    Tensor x = concat(parts, 1);
    Tensor h = relu(conv2d(x, params.at("decoder.conv1.weight"), params.at("decoder.conv1.bias")));
    return conv2d(h, params.at("decoder.conv2.weight"), params.at("decoder.conv2.bias"));
}

}  // namespace mixmfl
