#pragma once

#include <algorithm>
#include <cstddef>
#include <set>
#include <string>
#include <vector>

#include "mixmfl/error.hpp"

namespace mixmfl {

/// Position of a modality in the experiment-wide modality list.
struct ModalityId {
    std::size_t index = 0;
    auto operator<=>(const ModalityId&) const = default;
};

/// The fixed, ordered list of modalities for one experiment.
class ModalityList {
public:
    ModalityList() = default;
    explicit ModalityList(std::vector<std::string> labels) : labels_(std::move(labels)) {
        std::set<std::string> seen(labels_.begin(), labels_.end());
        if (seen.size() != labels_.size() || labels_.empty()) {
            fail(ErrorKind::ConfigError, "modality labels must be unique and nonempty");
        }
    }

    static ModalityList brats() { return ModalityList({"T1", "T1c", "T2", "FLAIR"}); }

    std::size_t size() const { return labels_.size(); }
    const std::string& label(ModalityId m) const { return labels_.at(m.index); }
    const std::vector<std::string>& labels() const { return labels_; }

    ModalityId id(const std::string& label) const {
        auto it = std::find(labels_.begin(), labels_.end(), label);
        if (it == labels_.end()) fail(ErrorKind::UnknownModality, "unknown modality label " + label);
        return ModalityId{static_cast<std::size_t>(it - labels_.begin())};
    }

    std::vector<ModalityId> all() const {
        std::vector<ModalityId> out;
        for (std::size_t i = 0; i < labels_.size(); ++i) out.push_back({i});
        return out;
    }

private:
    std::vector<std::string> labels_;
};

/// Sorted set of modality ids held by one client.
using ModalitySet = std::vector<ModalityId>;

inline bool holds(const ModalitySet& set, ModalityId m) {
    return std::find(set.begin(), set.end(), m) != set.end();
}

inline ModalitySet missing_from(const ModalitySet& held, std::size_t num_modalities) {
    ModalitySet out;
    for (std::size_t i = 0; i < num_modalities; ++i) {
        if (!holds(held, {i})) out.push_back({i});
    }
    return out;
}

}  // namespace mixmfl
