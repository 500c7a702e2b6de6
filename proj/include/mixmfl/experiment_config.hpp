#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "mixmfl/error.hpp"
#include "mixmfl/losses.hpp"
#include "mixmfl/nets.hpp"
#include "mixmfl/optim.hpp"
#include "mixmfl/synth_data.hpp"

namespace mixmfl {

enum class Algo { Mdm, FedAvg, FedProx };

inline const char* to_string(Algo a) {
    switch (a) {
        case Algo::Mdm: return "mdm";
        case Algo::FedAvg: return "fedavg";
        case Algo::FedProx: return "fedprox";
    }
    return "?";
}

/// Single-component removals of the full method.
struct AblationFlags {
    bool no_tailored_updating = false;  // tailored encoders aggregated over all clients
    bool no_memory = false;
    bool no_triplet = false;
    bool no_cls = false;
};

struct MemoryConfig {
    bool enabled = true;
    std::size_t capacity = 200;  // prototypes kept per modality
    std::size_t centers = 8;     // k-means centers per modality per local epoch
    std::size_t kmeans_iters = 50;
};

struct ExperimentConfig {
    std::uint64_t seed = 1;
    Algo algo = Algo::Mdm;
    std::size_t rounds = 40;
    std::size_t local_epochs = 5;
    std::size_t batch_size = 4;
    std::size_t threads = 0;  // 0: one per client
    OptimizerKind optimizer = OptimizerKind::Adam;
    double learning_rate = 4e-4;
    double grl_lambda = 1.0;
    LossConfig loss;
    MemoryConfig memory;
    AblationFlags ablation;
    ArchConfig model;  // num_modalities is taken from the data config
    DataConfig data;
    std::string output_dir = "out";

    bool tailored_updating() const { return algo == Algo::Mdm && !ablation.no_tailored_updating; }
    bool memory_active() const { return algo == Algo::Mdm && memory.enabled && !ablation.no_memory; }
    bool cls_active() const { return algo == Algo::Mdm && !ablation.no_cls; }
    bool triplet_active() const { return algo == Algo::Mdm && !ablation.no_triplet; }
    bool prox_active() const { return algo == Algo::FedProx; }

    ArchConfig arch() const {
        ArchConfig a = model;
        a.num_modalities = data.modalities.size();
        a.num_classes = kNumSegClasses;
        return a;
    }

    void validate() const {
        if (batch_size == 0) fail(ErrorKind::ConfigError, "batch_size must be positive");
        if (learning_rate <= 0) fail(ErrorKind::ConfigError, "learning rate must be positive");
        if (grl_lambda < 0) fail(ErrorKind::ConfigError, "grl_lambda must be non-negative");
        if (memory.capacity == 0 || memory.centers == 0) {
            fail(ErrorKind::ConfigError, "memory capacity and centers must be positive");
        }
        loss.validate();
        data.scene.validate();
        if (data.profiles.size() != data.modalities.size()) {
            fail(ErrorKind::ConfigError, "data.profiles needs one entry per modality");
        }
    }
};

}  // namespace mixmfl
