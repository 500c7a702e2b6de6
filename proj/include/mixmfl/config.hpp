#pragma once

// JSON experiment configs. Every key is optional and defaults to the values
// in ExperimentConfig; unknown keys are rejected with their full path.

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "mixmfl/error.hpp"
#include "mixmfl/experiment_config.hpp"
#include "mixmfl/metrics.hpp"

namespace mixmfl {

using Json = nlohmann::json;

namespace detail {

// Reads fields of one JSON object and reports leftovers as unknown keys.
class ObjectReader {
public:
    ObjectReader(const Json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
        if (!obj_.is_object()) fail(ErrorKind::ConfigError, where() + ": expected an object");
    }

    template <typename T>
    void read(const char* key, T& out) {
        seen_.insert(key);
        auto it = obj_.find(key);
        if (it == obj_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const Json::exception& e) {
            fail(ErrorKind::ConfigError, child(key) + ": " + e.what());
        }
    }

    template <typename F>
    void nested(const char* key, F&& f) {
        seen_.insert(key);
        auto it = obj_.find(key);
        if (it == obj_.end()) return;
        ObjectReader sub(*it, child(key));
        f(sub);
        sub.finish();
    }

    const Json* raw(const char* key) {
        seen_.insert(key);
        auto it = obj_.find(key);
        return it == obj_.end() ? nullptr : &*it;
    }

    void finish() const {
        for (const auto& [key, value] : obj_.items()) {
            if (!seen_.count(key)) fail(ErrorKind::ConfigError, "unknown key \"" + child(key) + "\"");
        }
    }

    std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    std::string where() const { return path_.empty() ? "<root>" : path_; }
    const Json& obj_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace detail

inline Algo parse_algo(const std::string& s) {
    if (s == "mdm") return Algo::Mdm;
    if (s == "fedavg") return Algo::FedAvg;
    if (s == "fedprox") return Algo::FedProx;
    fail(ErrorKind::ConfigError, "algo: expected mdm|fedavg|fedprox, got \"" + s + "\"");
}

inline OptimizerKind parse_optimizer(const std::string& s) {
    if (s == "adam") return OptimizerKind::Adam;
    if (s == "sgd") return OptimizerKind::Sgd;
    fail(ErrorKind::ConfigError, "optimizer: expected adam|sgd, got \"" + s + "\"");
}

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd"; }

/// Overlays the values present in `j` onto `cfg` and validates the result.
inline void apply_config_json(const Json& j, ExperimentConfig& cfg) {
    detail::ObjectReader root(j, "");
    root.read("seed", cfg.seed);
    if (const Json* a = root.raw("algo")) {
        if (!a->is_string()) fail(ErrorKind::ConfigError, "algo: expected a string");
        cfg.algo = parse_algo(a->get<std::string>());
    }
    root.read("rounds", cfg.rounds);
    root.read("local_epochs", cfg.local_epochs);
    root.read("batch_size", cfg.batch_size);
    root.read("threads", cfg.threads);
    if (const Json* o = root.raw("optimizer")) {
        if (!o->is_string()) fail(ErrorKind::ConfigError, "optimizer: expected a string");
        cfg.optimizer = parse_optimizer(o->get<std::string>());
    }
    root.read("learning_rate", cfg.learning_rate);
    root.read("grl_lambda", cfg.grl_lambda);
    root.read("output_dir", cfg.output_dir);
    root.nested("loss", [&](detail::ObjectReader& r) {
        r.read("mu", cfg.loss.mu);
        r.read("gamma", cfg.loss.gamma);
        r.read("alpha", cfg.loss.alpha);
        r.read("entropy_epsilon", cfg.loss.entropy_epsilon);
        r.read("fedprox_mu", cfg.loss.fedprox_mu);
    });
    root.nested("memory", [&](detail::ObjectReader& r) {
        r.read("enabled", cfg.memory.enabled);
        r.read("capacity", cfg.memory.capacity);
        r.read("centers", cfg.memory.centers);
        r.read("kmeans_iters", cfg.memory.kmeans_iters);
    });
    root.nested("ablation", [&](detail::ObjectReader& r) {
        r.read("no_tailored_updating", cfg.ablation.no_tailored_updating);
        r.read("no_memory", cfg.ablation.no_memory);
        r.read("no_triplet", cfg.ablation.no_triplet);
        r.read("no_cls", cfg.ablation.no_cls);
    });
    root.nested("model", [&](detail::ObjectReader& r) {
        r.read("channels", cfg.model.channels);
        r.read("decoder_channels", cfg.model.decoder_channels);
        r.read("kernel", cfg.model.kernel);
    });
    root.nested("data", [&](detail::ObjectReader& r) {
        auto& d = cfg.data;
        r.nested("scene", [&](detail::ObjectReader& s) {
            s.read("height", d.scene.height);
            s.read("width", d.scene.width);
            s.read("core_radius_min", d.scene.core_radius_min);
            s.read("core_radius_max", d.scene.core_radius_max);
            s.read("edema_thickness_min", d.scene.edema_thickness_min);
            s.read("edema_thickness_max", d.scene.edema_thickness_max);
            s.read("noise_sigma", d.scene.noise_sigma);
        });
        r.read("modalities", d.modalities);
        if (const Json* p = r.raw("profiles")) {
            if (!p->is_array()) fail(ErrorKind::ConfigError, "data.profiles: expected an array");
            d.profiles.clear();
            for (std::size_t i = 0; i < p->size(); ++i) {
                detail::ObjectReader pr((*p)[i], "data.profiles[" + std::to_string(i) + "]");
                ModalityProfile prof;
                pr.read("core_contrast", prof.core_contrast);
                pr.read("edema_contrast", prof.edema_contrast);
                pr.finish();
                d.profiles.push_back(prof);
            }
        }
        r.read("modalities_per_client", d.modalities_per_client);
        r.read("samples_per_client", d.samples_per_client);
        r.read("train_fraction", d.train_fraction);
        r.read("shift_scale", d.shift_scale);
        r.read("size_skew", d.size_skew);
        r.read("iid", d.iid);
        r.read("clients", d.clients);
    });
    root.finish();
    try {
        cfg.validate();
    } catch (const Error& e) {
        fail(ErrorKind::ConfigError, e.what());
    }
}

/// Parses config text; empty or whitespace-only text yields the defaults.
inline ExperimentConfig parse_config_text(const std::string& text, ExperimentConfig base = {}) {
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) {
        apply_config_json(Json::object(), base);
        return base;
    }
    Json j;
    try {
        j = Json::parse(text);
    } catch (const Json::parse_error& e) {
        fail(ErrorKind::ConfigError, std::string("invalid JSON: ") + e.what());
    }
    apply_config_json(j, base);
    return base;
}

inline ExperimentConfig parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) fail(ErrorKind::ConfigError, "cannot read config file " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config_text(ss.str());
}

/// Full config as JSON; parse_config_text(to_json(c).dump()) reproduces c.
inline Json to_json(const ExperimentConfig& c) {
    Json profiles = Json::array();
    for (const auto& p : c.data.profiles) {
        profiles.push_back({{"core_contrast", p.core_contrast}, {"edema_contrast", p.edema_contrast}});
    }
    const auto& s = c.data.scene;
    return {
        {"seed", c.seed},
        {"algo", to_string(c.algo)},
        {"rounds", c.rounds},
        {"local_epochs", c.local_epochs},
        {"batch_size", c.batch_size},
        {"threads", c.threads},
        {"optimizer", to_string(c.optimizer)},
        {"learning_rate", c.learning_rate},
        {"grl_lambda", c.grl_lambda},
        {"output_dir", c.output_dir},
        {"loss",
         {{"mu", c.loss.mu},
          {"gamma", c.loss.gamma},
          {"alpha", c.loss.alpha},
          {"entropy_epsilon", c.loss.entropy_epsilon},
          {"fedprox_mu", c.loss.fedprox_mu}}},
        {"memory",
         {{"enabled", c.memory.enabled},
          {"capacity", c.memory.capacity},
          {"centers", c.memory.centers},
          {"kmeans_iters", c.memory.kmeans_iters}}},
        {"ablation",
         {{"no_tailored_updating", c.ablation.no_tailored_updating},
          {"no_memory", c.ablation.no_memory},
          {"no_triplet", c.ablation.no_triplet},
          {"no_cls", c.ablation.no_cls}}},
        {"model",
         {{"channels", c.model.channels}, {"decoder_channels", c.model.decoder_channels}, {"kernel", c.model.kernel}}},
        {"data",
         {{"scene",
           {{"height", s.height},
            {"width", s.width},
            {"core_radius_min", s.core_radius_min},
            {"core_radius_max", s.core_radius_max},
            {"edema_thickness_min", s.edema_thickness_min},
            {"edema_thickness_max", s.edema_thickness_max},
            {"noise_sigma", s.noise_sigma}}},
          {"modalities", c.data.modalities},
          {"profiles", profiles},
          {"modalities_per_client", c.data.modalities_per_client},
          {"samples_per_client", c.data.samples_per_client},
          {"train_fraction", c.data.train_fraction},
          {"shift_scale", c.data.shift_scale},
          {"size_skew", c.data.size_skew},
          {"iid", c.data.iid},
          {"clients", c.data.clients}}},
    };
}

/// Summary of a finished run: the config (including seed), per-client final
/// mDice and per-class Dice, and the federation average.
inline Json summary_json(const ExperimentConfig& cfg, const std::vector<RoundReport>& reports,
                         const std::vector<std::string>& client_names) {
    Json j;
    j["config"] = to_json(cfg);
    j["seed"] = cfg.seed;
    j["rounds_completed"] = reports.empty() ? 0 : reports.back().round;
    if (reports.empty()) return j;
    const RoundReport& last = reports.back();
    Json clients = Json::array();
    for (const auto& c : last.clients) {
        Json row;
        row["client"] = c.client;
        row["name"] = c.client < client_names.size() ? client_names[c.client] : std::to_string(c.client);
        row["mdice"] = c.mdice;
        for (std::size_t i = 0; i < c.class_dice.size(); ++i) {
            row[class_name(foreground_classes()[i])] = c.class_dice[i];
        }
        clients.push_back(row);
    }
    j["clients"] = clients;
    j["average_mdice"] = last.average_mdice;
    j["shared_alignment"] = last.shared_alignment;
    j["initial_shared_alignment"] = reports.front().shared_alignment;
    return j;
}

}  // namespace mixmfl
