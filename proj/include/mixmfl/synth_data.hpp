#pragma once

// Synthetic mix-modal segmentation benchmark. Each scene is a round tumor
// core surrounded by an edema ring. Core-sensitive modalities render only
// the core, edema-sensitive ones only the ring, so the two modality
// families carry complementary evidence.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "mixmfl/binary_io.hpp"
#include "mixmfl/error.hpp"
#include "mixmfl/modality.hpp"

namespace mixmfl {

enum SegClass : std::uint8_t { kBackground = 0, kCore = 1, kEdema = 2 };
inline constexpr std::size_t kNumSegClasses = 3;

struct SceneSpec {
    std::size_t height = 32;
    std::size_t width = 32;
    double core_radius_min = 3.0;
    double core_radius_max = 6.0;
    double edema_thickness_min = 2.0;
    double edema_thickness_max = 4.0;
    double noise_sigma = 0.1;

    void validate() const {
        if (height < 4 || width < 4) fail(ErrorKind::BadSpec, "image must be at least 4x4");
        if (core_radius_min <= 0 || core_radius_max < core_radius_min) fail(ErrorKind::BadSpec, "bad core radius range");
        if (edema_thickness_min <= 0 || edema_thickness_max < edema_thickness_min) {
            fail(ErrorKind::BadSpec, "bad edema thickness range");
        }
        if (noise_sigma < 0) fail(ErrorKind::BadSpec, "negative noise sigma");
    }
};

struct ModalityProfile {
    double core_contrast = 0.0;
    double edema_contrast = 0.0;
};

/// T1 and T1c see the core only; T2 and FLAIR see the edema only.
inline std::vector<ModalityProfile> default_profiles() {
    return {{0.7, 0.0}, {1.0, 0.0}, {0.0, 1.0}, {0.0, 0.7}};
}

struct Sample {
    // One H×W image per global modality; empty when not exposed to the client.
    std::vector<std::vector<double>> images;
    std::vector<std::uint8_t> mask;
};

/// Renders every modality of one scene: contrast·indicator + shift + noise.
inline Sample generate_sample(const SceneSpec& spec, const std::vector<ModalityProfile>& profiles,
                              double intensity_shift, double size_scale, std::uint64_t seed) {
    spec.validate();
    if (profiles.empty() || size_scale <= 0) fail(ErrorKind::BadSpec, "need profiles and a positive size scale");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double radius = size_scale * (spec.core_radius_min + unit(rng) * (spec.core_radius_max - spec.core_radius_min));
    const double thickness =
        size_scale * (spec.edema_thickness_min + unit(rng) * (spec.edema_thickness_max - spec.edema_thickness_min));
    const double outer = radius + thickness;
    auto center_in = [&](std::size_t extent) {
        double lo = std::min(outer, extent / 2.0), hi = std::max(extent - outer, extent / 2.0);
        return lo + unit(rng) * (hi - lo);
    };
    const double cy = center_in(spec.height), cx = center_in(spec.width);

    Sample s;
    const std::size_t plane = spec.height * spec.width;
    s.mask.resize(plane);
    for (std::size_t y = 0; y < spec.height; ++y) {
        for (std::size_t x = 0; x < spec.width; ++x) {
            double d = std::hypot(y + 0.5 - cy, x + 0.5 - cx);
            s.mask[y * spec.width + x] = d <= radius ? kCore : (d <= outer ? kEdema : kBackground);
        }
    }
    std::normal_distribution<double> noise(0.0, 1.0);
    for (const auto& profile : profiles) {
        std::vector<double> img(plane);
        for (std::size_t i = 0; i < plane; ++i) {
            double contrast = s.mask[i] == kCore ? profile.core_contrast
                                                 : (s.mask[i] == kEdema ? profile.edema_contrast : 0.0);
            img[i] = contrast + intensity_shift + spec.noise_sigma * noise(rng);
        }
        s.images.push_back(std::move(img));
    }
    return s;
}

struct ClientDataSpec {
    ModalitySet modalities;
    std::size_t num_samples = 20;
    double intensity_shift = 0.0;
    double size_scale = 1.0;
    double train_fraction = 0.7;
};

struct ClientDataset {
    std::size_t client_id = 0;
    ClientDataSpec spec;
    std::vector<Sample> train;
    std::vector<Sample> test;
};

struct DataConfig {
    SceneSpec scene;
    std::vector<std::string> modalities{"T1", "T1c", "T2", "FLAIR"};
    std::vector<ModalityProfile> profiles = default_profiles();
    std::size_t modalities_per_client = 2;
    std::size_t samples_per_client = 20;
    double train_fraction = 0.7;
    double shift_scale = 0.2;  // per-client additive shift drawn from [-s, s]
    double size_skew = 0.25;   // per-client lesion size factor drawn from [1-k, 1+k]
    bool iid = false;
    // Explicit client modality subsets (labels); empty means every
    // `modalities_per_client`-subset of the modality list.
    std::vector<std::vector<std::string>> clients;
};

namespace detail {

inline void subsets_of(std::size_t n, std::size_t k, std::size_t start, ModalitySet& current,
                       std::vector<ModalitySet>& out) {
    if (current.size() == k) {
        out.push_back(current);
        return;
    }
    for (std::size_t i = start; i < n; ++i) {
        current.push_back({i});
        subsets_of(n, k, i + 1, current, out);
        current.pop_back();
    }
}

}  // namespace detail

/// Every k-element subset of {0..n-1}, lexicographic.
inline std::vector<ModalitySet> modality_subsets(std::size_t n, std::size_t k) {
    std::vector<ModalitySet> out;
    ModalitySet current;
    detail::subsets_of(n, k, 0, current, out);
    return out;
}

inline std::size_t train_count(std::size_t n, double fraction) {
    if (n < 2) return n;
    auto t = static_cast<std::size_t>(std::llround(static_cast<double>(n) * fraction));
    return std::clamp<std::size_t>(t, 1, n - 1);
}

inline std::vector<ClientDataSpec> plan_clients(const DataConfig& cfg, std::uint64_t seed) {
    ModalityList list(cfg.modalities);
    if (cfg.profiles.size() != list.size()) fail(ErrorKind::ConfigError, "one profile per modality required");
    if (cfg.samples_per_client == 0) fail(ErrorKind::ConfigError, "samples_per_client must be positive");
    std::vector<ModalitySet> subsets;
    if (!cfg.clients.empty()) {
        for (const auto& labels : cfg.clients) {
            ModalitySet set;
            for (const auto& l : labels) set.push_back(list.id(l));
            std::sort(set.begin(), set.end());
            set.erase(std::unique(set.begin(), set.end()), set.end());
            subsets.push_back(set);
        }
    } else {
        if (cfg.modalities_per_client == 0 || cfg.modalities_per_client >= list.size()) {
            fail(ErrorKind::ConfigError, "modalities_per_client must be in [1, M-1]");
        }
        subsets = modality_subsets(list.size(), cfg.modalities_per_client);
    }
    std::vector<ClientDataSpec> specs;
    std::mt19937_64 rng(derive_seed(seed, 0x5eed'da7aull));
    std::uniform_real_distribution<double> sym(-1.0, 1.0);
    for (const auto& subset : subsets) {
        ClientDataSpec spec;
        spec.num_samples = cfg.samples_per_client;
        spec.train_fraction = cfg.train_fraction;
        double shift = sym(rng), skew = sym(rng);
        if (cfg.iid) {
            spec.modalities = list.all();
        } else {
            if (subset.empty() || subset.size() >= list.size()) {
                fail(ErrorKind::ConfigError, "client modality sets must be nonempty proper subsets");
            }
            spec.modalities = subset;
            spec.intensity_shift = cfg.shift_scale * shift;
            spec.size_scale = 1.0 + cfg.size_skew * skew;
        }
        specs.push_back(spec);
    }
    return specs;
}

/// Generates every client's dataset; a pure function of (cfg, seed).
inline std::vector<ClientDataset> build_federation(const DataConfig& cfg, std::uint64_t seed) {
    cfg.scene.validate();
    auto specs = plan_clients(cfg, seed);
    std::vector<ClientDataset> out;
    for (std::size_t k = 0; k < specs.size(); ++k) {
        ClientDataset ds;
        ds.client_id = k;
        ds.spec = specs[k];
        std::size_t n_train = train_count(ds.spec.num_samples, ds.spec.train_fraction);
        for (std::size_t i = 0; i < ds.spec.num_samples; ++i) {
            Sample s = generate_sample(cfg.scene, cfg.profiles, ds.spec.intensity_shift, ds.spec.size_scale,
                                       derive_seed(seed, k, i));
            for (std::size_t m = 0; m < s.images.size(); ++m) {
                if (!holds(ds.spec.modalities, {m})) s.images[m].clear();
            }
            (i < n_train ? ds.train : ds.test).push_back(std::move(s));
        }
        out.push_back(std::move(ds));
    }
    return out;
}

struct DatasetFile {
    std::uint64_t seed = 0;
    std::size_t height = 0, width = 0;
    std::vector<std::string> modalities;
    std::vector<ClientDataset> clients;
};

inline void save_dataset(const std::string& path, const DatasetFile& file) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail(ErrorKind::IoError, "cannot open " + path + " for writing");
    BinaryWriter w(os);
    w.put_magic("MXDS");
    w.put<std::uint32_t>(1);
    w.put<std::uint64_t>(file.seed);
    w.put<std::uint64_t>(file.height);
    w.put<std::uint64_t>(file.width);
    w.put<std::uint64_t>(file.modalities.size());
    for (const auto& l : file.modalities) w.put_string(l);
    w.put<std::uint64_t>(file.clients.size());
    for (const auto& c : file.clients) {
        w.put<std::uint64_t>(c.client_id);
        std::vector<std::uint64_t> mods;
        for (auto m : c.spec.modalities) mods.push_back(m.index);
        w.put_vector(mods);
        w.put<double>(c.spec.intensity_shift);
        w.put<double>(c.spec.size_scale);
        w.put<double>(c.spec.train_fraction);
        w.put<std::uint64_t>(c.train.size());
        w.put<std::uint64_t>(c.test.size());
        for (const auto* split : {&c.train, &c.test}) {
            for (const auto& s : *split) {
                for (auto m : c.spec.modalities) w.put_vector(s.images.at(m.index));
                w.put_vector(s.mask);
            }
        }
    }
}

inline DatasetFile load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(ErrorKind::IoError, "cannot open " + path);
    BinaryReader r(is);
    r.expect_magic("MXDS");
    if (r.get<std::uint32_t>() != 1) fail(ErrorKind::IoError, "unsupported dataset version");
    DatasetFile file;
    file.seed = r.get<std::uint64_t>();
    file.height = r.get<std::uint64_t>();
    file.width = r.get<std::uint64_t>();
    auto num_modalities = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < num_modalities; ++i) file.modalities.push_back(r.get_string());
    auto num_clients = r.get<std::uint64_t>();
    const std::size_t plane = file.height * file.width;
    for (std::uint64_t k = 0; k < num_clients; ++k) {
        ClientDataset c;
        c.client_id = r.get<std::uint64_t>();
        for (auto m : r.get_vector<std::uint64_t>()) c.spec.modalities.push_back({m});
        c.spec.intensity_shift = r.get<double>();
        c.spec.size_scale = r.get<double>();
        c.spec.train_fraction = r.get<double>();
        auto n_train = r.get<std::uint64_t>();
        auto n_test = r.get<std::uint64_t>();
        c.spec.num_samples = n_train + n_test;
        for (std::uint64_t i = 0; i < n_train + n_test; ++i) {
            Sample s;
            s.images.resize(num_modalities);
            for (auto m : c.spec.modalities) {
                s.images.at(m.index) = r.get_vector<double>();
                if (s.images[m.index].size() != plane) fail(ErrorKind::IoError, "image size mismatch in dataset");
            }
            s.mask = r.get_vector<std::uint8_t>();
            if (s.mask.size() != plane) fail(ErrorKind::IoError, "mask size mismatch in dataset");
            (i < n_train ? c.train : c.test).push_back(std::move(s));
        }
        file.clients.push_back(std::move(c));
    }
    return file;
}

}  // namespace mixmfl
