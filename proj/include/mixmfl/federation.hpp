#pragma once

// Synchronous mix-modal federated training. Each round the server
// broadcasts parameters, clients train locally (optionally on worker
// threads), and after the barrier the server aggregates tailored encoders
// within their modality groups and everything else over all clients, then
// refreshes the prototype banks.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "mixmfl/binary_io.hpp"
#include "mixmfl/error.hpp"
#include "mixmfl/experiment_config.hpp"
#include "mixmfl/losses.hpp"
#include "mixmfl/metrics.hpp"
#include "mixmfl/modality.hpp"
#include "mixmfl/nets.hpp"
#include "mixmfl/optim.hpp"
#include "mixmfl/param_bundle.hpp"
#include "mixmfl/proto_memory.hpp"
#include "mixmfl/synth_data.hpp"
#include "mixmfl/tensor.hpp"

namespace mixmfl {

struct ClientState {
    std::size_t id = 0;
    ModalitySet modalities;
    ClientDataset data;
    ParamBundle params;
    OptimizerState optimizer;

    std::size_t num_train() const { return data.train.size(); }
};

/// Who contributes to which parameters. tailored_groups[m] lists the
/// clients whose tailored encoder for modality m is averaged.
struct AggregationPlan {
    std::vector<std::vector<std::size_t>> tailored_groups;
    std::vector<std::size_t> global_group;
    bool tailored_scoped = true;
};

inline AggregationPlan plan_aggregation(const std::vector<ModalitySet>& client_modalities, std::size_t num_modalities,
                                        bool tailored_scoped = true) {
    if (client_modalities.empty()) fail(ErrorKind::EmptyFederation, "no clients to plan for");
    AggregationPlan plan;
    plan.tailored_scoped = tailored_scoped;
    plan.tailored_groups.resize(num_modalities);
    for (std::size_t k = 0; k < client_modalities.size(); ++k) {
        plan.global_group.push_back(k);
        for (std::size_t m = 0; m < num_modalities; ++m) {
            if (!tailored_scoped || holds(client_modalities[k], {m})) plan.tailored_groups[m].push_back(k);
        }
    }
    return plan;
}

struct WeightedBundle {
    const ParamBundle* params = nullptr;
    double weight = 0.0;
};

/// Parameter-wise weighted mean with weights w_k / Σw, summed in list order.
inline ParamBundle aggregate(const std::vector<WeightedBundle>& uploads) {
    if (uploads.empty()) fail(ErrorKind::EmptyGroup, "aggregation group is empty");
    const ParamBundle& first = *uploads.front().params;
    double total = 0.0;
    for (const auto& u : uploads) {
        require_same_manifest(first, *u.params, "aggregate");
        total += u.weight;
    }
    if (total <= 0.0) fail(ErrorKind::EmptyGroup, "aggregation weights sum to zero");
    ParamBundle out = first;
    for (auto& [key, t] : out) {
        auto dst = t.mutable_values();
        std::fill(dst.begin(), dst.end(), 0.0);
        for (const auto& u : uploads) {
            double w = u.weight / total;
            auto src = u.params->at(key).values();
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += w * src[i];
        }
    }
    return out;
}

/// Keys of the full layout that a client with `modalities` holds. With
/// scoped tailored updating a client never holds encoders of modalities it
/// lacks.
inline std::vector<std::string> client_keys(const ParamBundle& layout, const ModalitySet& modalities,
                                            bool tailored_scoped) {
    std::vector<std::string> keys;
    for (const auto& [key, t] : layout) {
        auto m = tailored_modality_of(key);
        if (!m || !tailored_scoped || holds(modalities, {*m})) keys.push_back(key);
    }
    return keys;
}

inline ParamBundle restrict_to(const ParamBundle& full, const std::vector<std::string>& keys) {
    ParamBundle b;
    for (const auto& k : keys) b.set(k, full.at(k).clone());
    return b;
}

struct Upload {
    std::size_t client = 0;
    ParamBundle params;
    std::size_t num_samples = 0;
    // Prototypes per modality index, concatenated over local epochs.
    std::map<std::size_t, std::vector<Vec>> prototypes;
    std::vector<LossTrace> epochs;
};

/// New server bundle: each tailored key averaged over its modality group,
/// every other key over the global group. Keys whose group is empty keep
/// their previous value.
inline ParamBundle aggregate_round(const std::vector<Upload>& uploads, const AggregationPlan& plan,
                                   const ParamBundle& previous) {
    auto by_client = [&](std::size_t k) -> const Upload& {
        for (const auto& u : uploads) {
            if (u.client == k) return u;
        }
        fail(ErrorKind::EmptyGroup, "missing upload from client " + std::to_string(k));
    };
    ParamBundle next = previous;
    auto merge = [&](const std::vector<std::size_t>& group, auto&& key_filter) {
        if (group.empty()) return;
        std::vector<ParamBundle> parts;
        parts.reserve(group.size());
        for (auto k : group) parts.push_back(by_client(k).params.filter(key_filter));
        std::vector<WeightedBundle> weighted;
        for (std::size_t i = 0; i < group.size(); ++i) {
            weighted.push_back({&parts[i], static_cast<double>(by_client(group[i]).num_samples)});
        }
        next.assign_from(aggregate(weighted));
    };
    merge(plan.global_group, [](const std::string& key) { return role_of(key) != Role::Tailored; });
    for (std::size_t m = 0; m < plan.tailored_groups.size(); ++m) {
        merge(plan.tailored_groups[m], [m](const std::string& key) { return tailored_modality_of(key) == m; });
    }
    return next;
}

/// Switches and constants of one client's local optimization.
struct TrainSettings {
    std::size_t epochs = 5;
    std::size_t batch_size = 4;
    bool use_memory = true;
    bool use_cls = true;
    bool use_triplet = true;
    bool use_prox = false;
    LossConfig loss;
    double grl_lambda = 1.0;
    std::size_t prototype_centers = 8;
    std::size_t kmeans_iters = 50;
    std::size_t num_modalities = 4;
    std::uint64_t seed = 1;

    static TrainSettings from(const ExperimentConfig& cfg) {
        TrainSettings s;
        s.epochs = cfg.local_epochs;
        s.batch_size = cfg.batch_size;
        s.use_memory = cfg.memory_active();
        s.use_cls = cfg.cls_active();
        s.use_triplet = cfg.triplet_active();
        s.use_prox = cfg.prox_active();
        s.loss = cfg.loss;
        s.grl_lambda = cfg.grl_lambda;
        s.prototype_centers = cfg.memory.centers;
        s.kmeans_iters = cfg.memory.kmeans_iters;
        s.num_modalities = cfg.data.modalities.size();
        s.seed = cfg.seed;
        return s;
    }
};

/// Encoders, compensation and decoder over one batch of samples.
struct ForwardPass {
    RepSet reps;
    Tensor logits;  // N×K×H×W
    std::size_t retrievals = 0;
    std::size_t misses = 0;
};

inline Tensor batch_images(const std::vector<const Sample*>& batch, ModalityId m, std::size_t h, std::size_t w) {
    std::vector<double> data;
    data.reserve(batch.size() * h * w);
    for (const auto* s : batch) {
        const auto& img = s->images.at(m.index);
        if (img.size() != h * w) fail(ErrorKind::UnknownModality, "sample lacks modality " + std::to_string(m.index));
        data.insert(data.end(), img.begin(), img.end());
    }
    return Tensor({batch.size(), 1, h, w}, std::move(data));
}

inline Tensor batch_onehot(const std::vector<const Sample*>& batch, std::size_t classes, std::size_t plane) {
    std::vector<double> data(batch.size() * classes * plane, 0.0);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        for (std::size_t p = 0; p < plane; ++p) data[(i * classes + batch[i]->mask[p]) * plane + p] = 1.0;
    }
    return Tensor({batch.size(), classes, 1, plane}, std::move(data));
}

inline ForwardPass forward_batch(const ParamBundle& params, const ModalitySet& modalities,
                                 const std::vector<const Sample*>& batch, std::size_t h, std::size_t w,
                                 const PrototypeBank* bank, std::size_t num_modalities) {
    ForwardPass fp;
    Tensor shared_sum;
    for (auto m : modalities) {
        Tensor x = batch_images(batch, m, h, w);
        Tensor t = encode_tailored(x, m, params);
        Tensor s = encode_shared(x, params);
        fp.reps.tailored_pooled[m] = global_average_pool(t);
        fp.reps.shared_pooled[m] = global_average_pool(s);
        fp.reps.tailored_maps[m] = t;
        fp.reps.shared_maps[m] = s;
        shared_sum = shared_sum.defined() ? add(shared_sum, s) : s;
    }
    CompensationResult comp = compensate(fp.reps, bank, num_modalities);
    fp.retrievals = comp.retrievals;
    fp.misses = comp.misses;
    DecoderInput input{std::move(comp.maps), scale(shared_sum, 1.0 / static_cast<double>(modalities.size()))};
    fp.logits = decode(input, params);
    return fp;
}

/// Pixel-wise argmax over the class axis of N×K×H×W logits, one mask per sample.
inline std::vector<std::vector<std::uint8_t>> argmax_masks(const Tensor& logits) {
    std::size_t n = logits.size(0), k = logits.size(1), plane = logits.size(2) * logits.size(3);
    auto v = logits.values();
    std::vector<std::vector<std::uint8_t>> masks(n, std::vector<std::uint8_t>(plane));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < plane; ++p) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < k; ++c) {
                if (v[(i * k + c) * plane + p] > v[(i * k + best) * plane + p]) best = c;
            }
            masks[i][p] = static_cast<std::uint8_t>(best);
        }
    }
    return masks;
}

namespace detail {

// Regroups modality-major rows (j·N + i) into sample-major order (i·J + j).
inline Tensor sample_major(const std::vector<Tensor>& per_group, std::size_t n) {
    Tensor stacked = concat(per_group, 0);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < per_group.size(); ++j) rows.push_back(j * n + i);
    }
    return index_select(stacked, rows);
}

inline TripletBatch build_triplets(const RepSet& reps, const ModalitySet& modalities, const ParamBundle& params,
                                   std::size_t n) {
    TripletBatch batch;
    batch.num_samples = n;
    batch.num_modalities = modalities.size();
    if (modalities.size() < 2) return batch;
    std::vector<Tensor> anchors, positives, negatives;
    for (auto a : modalities) anchors.push_back(reps.shared_pooled.at(a));
    for (auto a : modalities) {
        for (auto b : modalities) {
            if (a != b) positives.push_back(fuse_pair(reps.shared_pooled.at(a), reps.shared_pooled.at(b), params));
            negatives.push_back(fuse_pair(reps.shared_pooled.at(a), reps.tailored_pooled.at(b), params));
        }
    }
    batch.anchors = sample_major(anchors, n);
    batch.positives = sample_major(positives, n);
    batch.negatives = sample_major(negatives, n);
    return batch;
}

inline Tensor classification_loss(const RepSet& reps, const ModalitySet& modalities, const ParamBundle& params,
                                  double grl_lambda, std::size_t n) {
    std::vector<Tensor> tailored, shared;
    std::vector<std::size_t> labels;
    for (auto m : modalities) {
        tailored.push_back(reps.tailored_pooled.at(m));
        shared.push_back(reps.shared_pooled.at(m));
        labels.insert(labels.end(), n, m.index);
    }
    std::vector<std::size_t> all_labels = labels;
    all_labels.insert(all_labels.end(), labels.begin(), labels.end());
    Tensor logits_t = classify_modality(concat(tailored, 0), Origin::Tailored, params, grl_lambda);
    Tensor logits_s = classify_modality(concat(shared, 0), Origin::Shared, params, grl_lambda);
    return modality_ce(concat({logits_t, logits_s}, 0), all_labels);
}

}  // namespace detail

/// Keys a client actually optimizes: its encoders and decoder, plus the
/// classifier and fusion layer when the losses that use them are active.
inline std::vector<std::string> trainable_keys(const ParamBundle& params, const ModalitySet& modalities,
                                               const TrainSettings& s) {
    std::vector<std::string> keys;
    for (const auto& [key, t] : params) {
        switch (role_of(key)) {
            case Role::Tailored:
                if (holds(modalities, {*tailored_modality_of(key)})) keys.push_back(key);
                break;
            case Role::Classifier:
                if (s.use_cls) keys.push_back(key);
                break;
            case Role::Fusion:
                if (s.use_triplet && modalities.size() >= 2) keys.push_back(key);
                break;
            default:
                keys.push_back(key);
        }
    }
    return keys;
}

/// E local epochs of minibatch training starting from `round_params`.
inline Upload local_train(ClientState& client, const ParamBundle& round_params, const PrototypeBank* snapshot,
                          const TrainSettings& s, std::size_t round) {
    client.params = round_params;
    const ParamBundle global = round_params;
    const auto keys = trainable_keys(client.params, client.modalities, s);
    const auto& train = client.data.train;
    if (train.empty()) fail(ErrorKind::ConfigError, "client " + std::to_string(client.id) + " has no training data");
    const std::size_t plane = train.front().mask.size();
    const std::size_t h = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(plane))));
    const std::size_t w = plane / h;
    const std::size_t classes = client.params.at("decoder.conv2.bias").numel();

    Upload up;
    up.client = client.id;
    up.num_samples = train.size();
    for (std::size_t epoch = 0; epoch < s.epochs; ++epoch) {
        std::vector<std::size_t> order(train.size());
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(derive_seed(s.seed, 0x5affull, client.id, round, epoch));
        std::shuffle(order.begin(), order.end(), rng);

        std::map<std::size_t, std::vector<Vec>> collected;
        LossTrace trace;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += s.batch_size) {
            std::vector<const Sample*> batch;
            for (std::size_t i = start; i < std::min(order.size(), start + s.batch_size); ++i) {
                batch.push_back(&train[order[i]]);
            }
            const std::size_t n = batch.size();
            GradTape tape;
            ForwardPass fp = forward_batch(client.params, client.modalities, batch, h, w,
                                           s.use_memory ? snapshot : nullptr, s.num_modalities);
            Tensor probs = softmax(fp.logits, 1);
            Tensor target = reshape(batch_onehot(batch, classes, plane), probs.shape());
            Tensor l_seg = dice_loss(probs, target);
            Tensor l_cls = s.use_cls ? detail::classification_loss(fp.reps, client.modalities, client.params,
                                                                   s.grl_lambda, n)
                                     : Tensor::scalar(0.0);
            Tensor l_tri = s.use_triplet
                               ? triplet_entropy_loss(detail::build_triplets(fp.reps, client.modalities, client.params, n),
                                                      s.loss.alpha, s.loss.entropy_epsilon)
                               : Tensor::scalar(0.0);
            Tensor loss = total_loss(l_seg, l_cls, l_tri, s.loss);
            Tensor l_prox = Tensor::scalar(0.0);
            if (s.use_prox) {
                l_prox = fedprox_term(client.params, global, s.loss.fedprox_mu);
                loss = add(loss, l_prox);
            }
            tape.backward(loss);
            optimizer_step(client.params, keys, client.optimizer);

            if (s.use_memory) {
                for (auto m : client.modalities) {
                    auto v = fp.reps.tailored_pooled.at(m).values();
                    std::size_t c = v.size() / n;
                    for (std::size_t i = 0; i < n; ++i) collected[m.index].emplace_back(v.begin() + i * c, v.begin() + (i + 1) * c);
                }
            }
            trace.seg += l_seg.item();
            trace.cls += l_cls.item();
            trace.tri += l_tri.item();
            trace.prox += l_prox.item();
            trace.total += loss.item();
            trace.retrievals += fp.retrievals;
            trace.misses += fp.misses;
            ++batches;
        }
        for (double* v : {&trace.seg, &trace.cls, &trace.tri, &trace.prox, &trace.total}) *v /= static_cast<double>(batches);
        up.epochs.push_back(trace);

        if (s.use_memory) {
            for (auto& [m, reps] : collected) {
                // Too few representations for z centers: skip this epoch's push.
                if (reps.size() < s.prototype_centers) continue;
                auto protos = extract_prototypes(reps, s.prototype_centers,
                                                 derive_seed(s.seed, 0xc1u, client.id, round, epoch, m), s.kmeans_iters);
                auto& dst = up.prototypes[m];
                dst.insert(dst.end(), protos.begin(), protos.end());
            }
        }
    }
    up.params = client.params;
    return up;
}

/// Runs f(k) for k in [0, count) on up to `threads` workers. Exceptions are
/// collected per task and the lowest-index one is rethrown after the join.
template <typename F>
inline void parallel_for_clients(std::size_t count, std::size_t threads, F&& f) {
    std::vector<std::exception_ptr> errors(count);
    threads = std::max<std::size_t>(1, std::min(threads, count));
    if (threads == 1) {
        for (std::size_t k = 0; k < count; ++k) {
            try {
                f(k);
            } catch (...) {
                errors[k] = std::current_exception();
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back([&] {
                for (std::size_t k = next++; k < count; k = next++) {
                    try {
                        f(k);
                    } catch (...) {
                        errors[k] = std::current_exception();
                    }
                }
            });
        }
        for (auto& th : pool) th.join();
    }
    for (std::size_t k = 0; k < count; ++k) {
        if (!errors[k]) continue;
        try {
            std::rethrow_exception(errors[k]);
        } catch (const Error& e) {
            throw Error(e.kind(), "client " + std::to_string(k) + ": " + e.what());
        }
    }
}

/// Mean pairwise cosine distance between shared pooled vectors of the same
/// sample's different modalities.
inline double shared_alignment(const RepSet& reps) {
    std::vector<const Tensor*> pooled;
    for (const auto& [m, t] : reps.shared_pooled) pooled.push_back(&t);
    if (pooled.size() < 2) return 0.0;
    std::size_t n = pooled[0]->size(0), c = pooled[0]->size(1);
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t a = 0; a < pooled.size(); ++a) {
            for (std::size_t b = a + 1; b < pooled.size(); ++b) {
                auto va = pooled[a]->values().subspan(i * c, c), vb = pooled[b]->values().subspan(i * c, c);
                total += 1.0 - cosine_similarity(Vec(va.begin(), va.end()), Vec(vb.begin(), vb.end()));
                ++pairs;
            }
        }
    }
    return total / static_cast<double>(pairs);
}

struct ClientEvaluation {
    ClientRoundResult result;
    double alignment = 0.0;
    bool has_alignment = false;
};

inline ClientEvaluation evaluate_client(const ClientState& client, const PrototypeBank* bank, std::size_t num_modalities) {
    ClientEvaluation ev;
    ev.result.client = client.id;
    const auto& test = client.data.test;
    const auto& classes = foreground_classes();
    ev.result.class_dice.assign(classes.size(), 0.0);
    if (test.empty()) return ev;
    std::vector<const Sample*> batch;
    for (const auto& s : test) batch.push_back(&s);
    const std::size_t plane = test.front().mask.size();
    const std::size_t h = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(plane))));
    ForwardPass fp = forward_batch(client.params, client.modalities, batch, h, plane / h, bank, num_modalities);
    auto preds = argmax_masks(fp.logits);
    for (std::size_t i = 0; i < test.size(); ++i) {
        for (std::size_t j = 0; j < classes.size(); ++j) {
            ev.result.class_dice[j] += dice_score(preds[i], test[i].mask, classes[j]);
        }
    }
    double sum = 0.0;
    for (auto& d : ev.result.class_dice) {
        d /= static_cast<double>(test.size());
        sum += d;
    }
    ev.result.mdice = sum / static_cast<double>(classes.size());
    if (client.modalities.size() >= 2) {
        ev.alignment = shared_alignment(fp.reps);
        ev.has_alignment = true;
    }
    return ev;
}

/// Server plus clients for one experiment. Construction builds the data,
/// initializes parameters and records the round-0 evaluation.
class Experiment {
public:
    explicit Experiment(ExperimentConfig cfg) : Experiment(cfg, build_federation(cfg.data, cfg.seed)) {}

    Experiment(ExperimentConfig cfg, std::vector<ClientDataset> datasets) : cfg_(std::move(cfg)) {
        cfg_.validate();
        if (datasets.empty()) fail(ErrorKind::EmptyFederation, "no clients configured");
        const ArchConfig arch = cfg_.arch();
        global_ = init_params(arch, derive_seed(cfg_.seed, 0x1a17ull));
        std::vector<ModalitySet> sets;
        for (auto& ds : datasets) {
            ClientState c;
            c.id = clients_.size();
            c.modalities = ds.spec.modalities;
            c.data = std::move(ds);
            c.optimizer.kind = cfg_.optimizer;
            c.optimizer.learning_rate = cfg_.learning_rate;
            sets.push_back(c.modalities);
            clients_.push_back(std::move(c));
        }
        plan_ = plan_aggregation(sets, arch.num_modalities, cfg_.tailored_updating());
        bank_ = PrototypeBank(arch.num_modalities, arch.channels, cfg_.memory.capacity);
        broadcast();
        reports_.push_back(evaluate());
    }

    const ExperimentConfig& config() const { return cfg_; }
    std::size_t completed_rounds() const { return round_; }
    const std::vector<RoundReport>& reports() const { return reports_; }
    const ParamBundle& global_params() const { return global_; }
    const PrototypeBank& bank() const { return bank_; }
    const AggregationPlan& plan() const { return plan_; }
    const std::vector<ClientState>& clients() const { return clients_; }
    const std::vector<Upload>& last_uploads() const { return last_uploads_; }

    std::size_t worker_threads() const { return cfg_.threads == 0 ? clients_.size() : cfg_.threads; }

    /// Broadcast, local training, barrier, aggregation, bank refresh, evaluation.
    const RoundReport& run_round() {
        const std::size_t t = round_ + 1;
        const TrainSettings settings = TrainSettings::from(cfg_);
        const PrototypeBank snapshot = bank_;
        std::vector<ParamBundle> round_params;
        for (const auto& c : clients_) round_params.push_back(c.params);
        std::vector<Upload> uploads(clients_.size());
        parallel_for_clients(clients_.size(), worker_threads(), [&](std::size_t k) {
            uploads[k] = local_train(clients_[k], round_params[k], &snapshot, settings, t);
        });
        global_ = aggregate_round(uploads, plan_, global_);
        for (const auto& up : uploads) {
            for (const auto& [m, protos] : up.prototypes) bank_.push({m}, protos);
        }
        round_ = t;
        broadcast();
        RoundReport report = evaluate();
        for (std::size_t k = 0; k < clients_.size(); ++k) report.clients[k].losses = uploads[k].epochs.empty()
                                                                                      ? LossTrace{}
                                                                                      : uploads[k].epochs.back();
        last_uploads_ = std::move(uploads);
        reports_.push_back(std::move(report));
        return reports_.back();
    }

    RoundReport evaluate() const {
        RoundReport report;
        report.round = round_;
        const PrototypeBank* bank = cfg_.memory_active() ? &bank_ : nullptr;
        std::vector<ClientEvaluation> evals(clients_.size());
        parallel_for_clients(clients_.size(), worker_threads(), [&](std::size_t k) {
            evals[k] = evaluate_client(clients_[k], bank, cfg_.data.modalities.size());
        });
        double align = 0.0;
        std::size_t aligned = 0;
        for (auto& ev : evals) {
            report.clients.push_back(ev.result);
            if (ev.has_alignment) {
                align += ev.alignment;
                ++aligned;
            }
        }
        report.average_mdice = average_mdice(report.clients);
        report.shared_alignment = aligned ? align / static_cast<double>(aligned) : 0.0;
        return report;
    }

    /// Pooled tailored and shared representations of every test sample.
    std::vector<RepresentationRecord> collect_representations() const {
        std::vector<RepresentationRecord> rows;
        ModalityList labels(cfg_.data.modalities);
        const PrototypeBank* bank = cfg_.memory_active() ? &bank_ : nullptr;
        for (const auto& c : clients_) {
            if (c.data.test.empty()) continue;
            std::vector<const Sample*> batch;
            for (const auto& s : c.data.test) batch.push_back(&s);
            const std::size_t plane = batch.front()->mask.size();
            const std::size_t h = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(plane))));
            ForwardPass fp = forward_batch(c.params, c.modalities, batch, h, plane / h, bank, labels.size());
            for (std::size_t i = 0; i < batch.size(); ++i) {
                for (auto m : c.modalities) {
                    for (auto [origin, map] : {std::pair{"tailored", &fp.reps.tailored_pooled},
                                               std::pair{"shared", &fp.reps.shared_pooled}}) {
                        const Tensor& t = map->at(m);
                        std::size_t dim = t.size(1);
                        auto v = t.values().subspan(i * dim, dim);
                        rows.push_back({c.id, labels.label(m), origin, {v.begin(), v.end()}});
                    }
                }
            }
        }
        return rows;
    }

    void save_checkpoint(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) fail(ErrorKind::IoError, "cannot open " + path + " for writing");
        BinaryWriter w(os);
        w.put_magic("MXCK");
        w.put<std::uint32_t>(1);
        w.put<std::uint64_t>(round_);
        write_bundle(w, global_);
        w.put<std::uint64_t>(clients_.size());
        for (const auto& c : clients_) {
            const auto& o = c.optimizer;
            w.put<std::uint64_t>(o.step);
            w.put<std::uint64_t>(o.first_moment.size());
            for (const auto& [key, m] : o.first_moment) {
                w.put_string(key);
                w.put_vector(m);
                w.put_vector(o.second_moment.at(key));
            }
        }
        w.put<std::uint64_t>(bank_.num_modalities());
        for (std::size_t m = 0; m < bank_.num_modalities(); ++m) {
            const auto& q = bank_.entries({m});
            w.put<std::uint64_t>(q.size());
            for (const auto& v : q) w.put_vector(v);
        }
        w.put<std::uint64_t>(reports_.size());
        for (const auto& r : reports_) write_report(w, r);
    }

    /// Restores a state written by save_checkpoint for the same config.
    void load_checkpoint(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) fail(ErrorKind::IoError, "cannot open " + path);
        BinaryReader r(is);
        r.expect_magic("MXCK");
        if (r.get<std::uint32_t>() != 1) fail(ErrorKind::IoError, "unsupported checkpoint version");
        round_ = r.get<std::uint64_t>();
        ParamBundle g = read_bundle(r);
        require_same_manifest(g, global_, "checkpoint");
        global_ = std::move(g);
        if (r.get<std::uint64_t>() != clients_.size()) fail(ErrorKind::IoError, "checkpoint client count differs");
        for (auto& c : clients_) {
            auto& o = c.optimizer;
            o.step = r.get<std::uint64_t>();
            o.first_moment.clear();
            o.second_moment.clear();
            auto n = r.get<std::uint64_t>();
            for (std::uint64_t i = 0; i < n; ++i) {
                auto key = r.get_string();
                o.first_moment[key] = r.get_vector<double>();
                o.second_moment[key] = r.get_vector<double>();
            }
        }
        if (r.get<std::uint64_t>() != bank_.num_modalities()) fail(ErrorKind::IoError, "checkpoint bank layout differs");
        PrototypeBank bank(bank_.num_modalities(), bank_.dim(), bank_.capacity());
        for (std::size_t m = 0; m < bank.num_modalities(); ++m) {
            auto n = r.get<std::uint64_t>();
            std::vector<Vec> protos;
            for (std::uint64_t i = 0; i < n; ++i) protos.push_back(r.get_vector<double>());
            bank.push({m}, protos);
        }
        bank_ = std::move(bank);
        reports_.clear();
        auto n = r.get<std::uint64_t>();
        for (std::uint64_t i = 0; i < n; ++i) reports_.push_back(read_report(r));
        broadcast();
    }

private:
    void broadcast() {
        for (auto& c : clients_) {
            c.params = restrict_to(global_, client_keys(global_, c.modalities, plan_.tailored_scoped));
        }
    }

    static void write_bundle(BinaryWriter& w, const ParamBundle& b) {
        auto manifest = b.manifest();
        w.put<std::uint64_t>(manifest.size());
        for (const auto& e : manifest) {
            w.put_string(e.name);
            std::vector<std::uint64_t> shape(e.shape.begin(), e.shape.end());
            w.put_vector(shape);
        }
        w.put_vector(b.flatten());
    }

    static ParamBundle read_bundle(BinaryReader& r) {
        Manifest manifest;
        auto n = r.get<std::uint64_t>();
        for (std::uint64_t i = 0; i < n; ++i) {
            ManifestEntry e;
            e.name = r.get_string();
            for (auto d : r.get_vector<std::uint64_t>()) e.shape.push_back(d);
            manifest.push_back(std::move(e));
        }
        auto flat = r.get_vector<double>();
        return ParamBundle::unflatten(manifest, flat);
    }

    static void write_report(BinaryWriter& w, const RoundReport& r) {
        w.put<std::uint64_t>(r.round);
        w.put<double>(r.average_mdice);
        w.put<double>(r.shared_alignment);
        w.put<std::uint64_t>(r.clients.size());
        for (const auto& c : r.clients) {
            w.put<std::uint64_t>(c.client);
            w.put_vector(c.class_dice);
            w.put<double>(c.mdice);
            for (double v : {c.losses.seg, c.losses.cls, c.losses.tri, c.losses.prox, c.losses.total}) w.put<double>(v);
            w.put<std::uint64_t>(c.losses.retrievals);
            w.put<std::uint64_t>(c.losses.misses);
        }
    }

    static RoundReport read_report(BinaryReader& r) {
        RoundReport rep;
        rep.round = r.get<std::uint64_t>();
        rep.average_mdice = r.get<double>();
        rep.shared_alignment = r.get<double>();
        auto n = r.get<std::uint64_t>();
        for (std::uint64_t i = 0; i < n; ++i) {
            ClientRoundResult c;
            c.client = r.get<std::uint64_t>();
            c.class_dice = r.get_vector<double>();
            c.mdice = r.get<double>();
            for (double* v : {&c.losses.seg, &c.losses.cls, &c.losses.tri, &c.losses.prox, &c.losses.total}) {
                *v = r.get<double>();
            }
            c.losses.retrievals = r.get<std::uint64_t>();
            c.losses.misses = r.get<std::uint64_t>();
            rep.clients.push_back(std::move(c));
        }
        return rep;
    }

    ExperimentConfig cfg_;
    ParamBundle global_;
    std::vector<ClientState> clients_;
    AggregationPlan plan_;
    PrototypeBank bank_;
    std::size_t round_ = 0;
    std::vector<RoundReport> reports_;
    std::vector<Upload> last_uploads_;
};

}  // namespace mixmfl
