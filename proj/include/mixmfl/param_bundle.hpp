#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mixmfl/error.hpp"
#include "mixmfl/tensor.hpp"

namespace mixmfl {

/// Which part of the network a parameter belongs to. Determines the
/// aggregation group a parameter is federated within.
enum class Role { Classifier, Decoder, Fusion, Shared, Tailored };

struct ManifestEntry {
    std::string name;
    Shape shape;
    bool operator==(const ManifestEntry&) const = default;
};

using Manifest = std::vector<ManifestEntry>;

/// Named parameter collection. Keys are dotted paths ("shared.conv1.weight",
/// "tailored.2.conv1.bias", ...); the canonical order is the lexicographic
/// key order, which fixes the flat-vector layout.
///
/// Copies are deep: a copied bundle never aliases the source's storage, so
/// bundles can be handed between clients and the server as plain values.
class ParamBundle {
public:
    ParamBundle() = default;
    ParamBundle(const ParamBundle& other) { *this = other; }
    ParamBundle(ParamBundle&&) noexcept = default;
    ParamBundle& operator=(const ParamBundle& other) {
        if (this == &other) return *this;
        params_.clear();
        for (const auto& [name, t] : other.params_) params_.emplace(name, t.clone());
        return *this;
    }
    ParamBundle& operator=(ParamBundle&&) noexcept = default;

    void set(const std::string& name, Tensor t) { params_[name] = std::move(t); }
    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    void erase(const std::string& name) { params_.erase(name); }

    const Tensor& at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) fail(ErrorKind::BundleMismatch, "no parameter named " + name);
        return it->second;
    }
    Tensor& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) fail(ErrorKind::BundleMismatch, "no parameter named " + name);
        return it->second;
    }

    std::size_t size() const { return params_.size(); }
    bool empty() const { return params_.empty(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }

    std::vector<std::string> keys() const {
        std::vector<std::string> out;
        out.reserve(params_.size());
        for (const auto& kv : params_) out.push_back(kv.first);
        return out;
    }

    std::size_t numel() const {
        std::size_t n = 0;
        for (const auto& kv : params_) n += kv.second.numel();
        return n;
    }

    Manifest manifest() const {
        Manifest m;
        for (const auto& [name, t] : params_) m.push_back({name, t.shape()});
        return m;
    }

    /// Canonical flat float64 layout: parameters in key order, each row-major.
    std::vector<double> flatten() const {
        std::vector<double> flat;
        flat.reserve(numel());
        for (const auto& kv : params_) {
            auto v = kv.second.values();
            flat.insert(flat.end(), v.begin(), v.end());
        }
        return flat;
    }

    static ParamBundle unflatten(const Manifest& manifest, std::span<const double> flat,
                                 bool requires_grad = true) {
        ParamBundle b;
        std::size_t offset = 0;
        for (const auto& e : manifest) {
            std::size_t n = shape_numel(e.shape);
            if (offset + n > flat.size()) fail(ErrorKind::BundleMismatch, "flat vector too short for manifest");
            b.set(e.name, Tensor(e.shape, std::vector<double>(flat.begin() + offset, flat.begin() + offset + n),
                                 requires_grad));
            offset += n;
        }
        if (offset != flat.size()) fail(ErrorKind::BundleMismatch, "flat vector longer than manifest");
        return b;
    }

    /// Deep copy of the entries whose keys satisfy `keep`.
    template <typename Pred>
    ParamBundle filter(Pred keep) const {
        ParamBundle b;
        for (const auto& [name, t] : params_) {
            if (keep(name)) b.set(name, t.clone());
        }
        return b;
    }

    /// Overwrites (deep copy) every entry of `src` into this bundle.
    void assign_from(const ParamBundle& src) {
        for (const auto& [name, t] : src) set(name, t.clone());
    }

    void zero_grad() {
        for (auto& kv : params_) kv.second.zero_grad();
    }

    bool operator==(const ParamBundle& other) const {
        return manifest() == other.manifest() && flatten() == other.flatten();
    }

private:
    std::map<std::string, Tensor> params_;
};

inline Role role_of(const std::string& key) {
    auto head = key.substr(0, key.find('.'));
    if (head == "classifier") return Role::Classifier;
    if (head == "decoder") return Role::Decoder;
    if (head == "fusion") return Role::Fusion;
    if (head == "shared") return Role::Shared;
    if (head == "tailored") return Role::Tailored;
    fail(ErrorKind::BundleMismatch, "key with unknown role: " + key);
}

/// Modality index of a "tailored.<m>.*" key.
inline std::optional<std::size_t> tailored_modality_of(const std::string& key) {
    if (role_of(key) != Role::Tailored) return std::nullopt;
    auto first = key.find('.');
    auto second = key.find('.', first + 1);
    return static_cast<std::size_t>(std::stoul(key.substr(first + 1, second - first - 1)));
}

inline void require_same_manifest(const ParamBundle& a, const ParamBundle& b, const char* what) {
    if (a.manifest() != b.manifest()) fail(ErrorKind::BundleMismatch, std::string(what) + ": bundles differ in layout");
}

}  // namespace mixmfl
