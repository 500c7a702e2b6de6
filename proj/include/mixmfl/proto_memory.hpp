#pragma once

// Modality memory: k-means prototypes of pooled tailored representations,
// stored per modality in bounded FIFO banks and retrieved by summed cosine
// similarity to compensate modalities a client does not hold.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <limits>
#include <map>
#include <ostream>
#include <random>
#include <vector>

#include "mixmfl/binary_io.hpp"
#include "mixmfl/error.hpp"
#include "mixmfl/modality.hpp"
#include "mixmfl/nets.hpp"
#include "mixmfl/tensor.hpp"

namespace mixmfl {

using Vec = std::vector<double>;

inline double squared_distance(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

inline double cosine_similarity(const Vec& a, const Vec& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

struct ClusterResult {
    std::vector<Vec> centers;
    std::vector<std::size_t> assignments;
    double objective = 0.0;
    // Objective after each assignment step.
    std::vector<double> objective_history;
};

namespace detail {

inline double assign_points(const std::vector<Vec>& points, const std::vector<Vec>& centers,
                            std::vector<std::size_t>& assignments) {
    double objective = 0.0;
    assignments.resize(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
        std::size_t best = 0;
        double best_d = squared_distance(points[i], centers[0]);
        for (std::size_t c = 1; c < centers.size(); ++c) {
            double d = squared_distance(points[i], centers[c]);
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        assignments[i] = best;
        objective += best_d;
    }
    return objective;
}

// k-means++ seeding: first center uniform, the rest sampled ∝ D².
inline std::vector<Vec> seed_centers(const std::vector<Vec>& points, std::size_t z, std::mt19937_64& rng) {
    std::vector<Vec> centers;
    std::uniform_int_distribution<std::size_t> pick(0, points.size() - 1);
    centers.push_back(points[pick(rng)]);
    std::vector<double> d2(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) d2[i] = squared_distance(points[i], centers[0]);
    while (centers.size() < z) {
        double total = 0.0;
        for (double d : d2) total += d;
        std::size_t chosen = 0;
        if (total <= 0.0) {
            chosen = pick(rng);
        } else {
            double u = std::uniform_real_distribution<double>(0.0, total)(rng);
            double acc = 0.0;
            chosen = points.size() - 1;
            for (std::size_t i = 0; i < points.size(); ++i) {
                acc += d2[i];
                if (d2[i] > 0.0 && u < acc) {
                    chosen = i;
                    break;
                }
            }
        }
        centers.push_back(points[chosen]);
        for (std::size_t i = 0; i < points.size(); ++i) {
            d2[i] = std::min(d2[i], squared_distance(points[i], centers.back()));
        }
    }
    return centers;
}

// Cluster means and sizes of an assignment; empty clusters keep `centers`.
inline void recompute_means(const std::vector<Vec>& points, const std::vector<std::size_t>& assignments,
                            std::vector<Vec>& centers, std::vector<std::size_t>& counts) {
    const std::size_t dim = points[0].size();
    std::vector<Vec> sums(centers.size(), Vec(dim, 0.0));
    counts.assign(centers.size(), 0);
    for (std::size_t i = 0; i < points.size(); ++i) {
        auto c = assignments[i];
        ++counts[c];
        for (std::size_t d = 0; d < dim; ++d) sums[c][d] += points[i][d];
    }
    for (std::size_t c = 0; c < centers.size(); ++c) {
        if (counts[c] == 0) continue;
        for (std::size_t d = 0; d < dim; ++d) centers[c][d] = sums[c][d] / static_cast<double>(counts[c]);
    }
}

inline double partition_objective(const std::vector<Vec>& points, const std::vector<std::size_t>& assignments,
                                  const std::vector<Vec>& centers) {
    double objective = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) objective += squared_distance(points[i], centers[assignments[i]]);
    return objective;
}

// Hartigan single-point moves: relocate a point whenever that strictly
// lowers the objective, i.e. n_b/(n_b+1)·|x-μ_b|² < n_a/(n_a-1)·|x-μ_a|².
// Lloyd fixpoints can still admit such moves; the refined partition stays
// a Lloyd fixpoint.
inline void hartigan_refine(const std::vector<Vec>& points, ClusterResult& r, std::size_t max_passes) {
    std::vector<std::size_t> counts;
    recompute_means(points, r.assignments, r.centers, counts);
    for (std::size_t pass = 0; pass < max_passes; ++pass) {
        bool moved = false;
        for (std::size_t i = 0; i < points.size(); ++i) {
            const std::size_t a = r.assignments[i];
            if (counts[a] <= 1) continue;
            const double na = static_cast<double>(counts[a]);
            const double remove_gain = na / (na - 1.0) * squared_distance(points[i], r.centers[a]);
            std::size_t target = a;
            double best_cost = remove_gain;
            for (std::size_t b = 0; b < r.centers.size(); ++b) {
                if (b == a) continue;
                const double nb = static_cast<double>(counts[b]);
                const double add_cost = counts[b] == 0 ? 0.0 : nb / (nb + 1.0) * squared_distance(points[i], r.centers[b]);
                if (add_cost < best_cost) {
                    best_cost = add_cost;
                    target = b;
                }
            }
            // Relative slack keeps round-off from triggering endless moves.
            if (target == a || best_cost >= remove_gain * (1.0 - 1e-12)) continue;
            if (counts[target] == 0) r.centers[target] = points[i];
            r.assignments[i] = target;
            recompute_means(points, r.assignments, r.centers, counts);
            r.objective = partition_objective(points, r.assignments, r.centers);
            r.objective_history.push_back(r.objective);
            moved = true;
        }
        if (!moved) break;
    }
}

}  // namespace detail

/// Lloyd's algorithm from a k-means++ seeding, followed by Hartigan
/// single-point refinement. Lloyd stops at an assignment fixpoint or after
/// `max_iters` update steps; empty clusters keep their previous center.
inline ClusterResult kmeans(const std::vector<Vec>& points, std::size_t z, std::size_t max_iters, std::uint64_t seed) {
    if (z == 0 || points.size() < z) {
        fail(ErrorKind::TooFewPoints, "k-means needs at least z=" + std::to_string(z) + " points, got " +
                                          std::to_string(points.size()));
    }
    std::size_t dim = points[0].size();
    for (const auto& p : points) {
        if (p.size() != dim) fail(ErrorKind::DimMismatch, "k-means points differ in dimension");
    }
    std::mt19937_64 rng(seed);
    ClusterResult result;
    result.centers = detail::seed_centers(points, z, rng);
    std::vector<std::size_t> previous;
    for (std::size_t it = 0;; ++it) {
        result.objective = detail::assign_points(points, result.centers, result.assignments);
        result.objective_history.push_back(result.objective);
        if ((it > 0 && result.assignments == previous) || it == max_iters) break;
        std::vector<Vec> sums(z, Vec(dim, 0.0));
        std::vector<std::size_t> counts(z, 0);
        for (std::size_t i = 0; i < points.size(); ++i) {
            auto c = result.assignments[i];
            ++counts[c];
            for (std::size_t d = 0; d < dim; ++d) sums[c][d] += points[i][d];
        }
        for (std::size_t c = 0; c < z; ++c) {
            if (counts[c] == 0) continue;
            for (std::size_t d = 0; d < dim; ++d) result.centers[c][d] = sums[c][d] / static_cast<double>(counts[c]);
        }
        previous = result.assignments;
    }
    detail::hartigan_refine(points, result, max_iters);
    return result;
}

/// Best-objective result over `restarts` independently derived seedings.
inline ClusterResult kmeans_restarts(const std::vector<Vec>& points, std::size_t z, std::size_t max_iters,
                                     std::uint64_t seed, std::size_t restarts) {
    ClusterResult best = kmeans(points, z, max_iters, derive_seed(seed, 0));
    for (std::size_t r = 1; r < restarts; ++r) {
        ClusterResult candidate = kmeans(points, z, max_iters, derive_seed(seed, r));
        if (candidate.objective < best.objective) best = std::move(candidate);
    }
    return best;
}

/// z cluster centers of one epoch's pooled representations, sorted
/// lexicographically so the order does not depend on seeding.
inline std::vector<Vec> extract_prototypes(const std::vector<Vec>& reps, std::size_t z, std::uint64_t seed,
                                           std::size_t max_iters = 50) {
    ClusterResult r = kmeans(reps, z, max_iters, seed);
    std::sort(r.centers.begin(), r.centers.end());
    return std::move(r.centers);
}

/// Per-modality FIFO queues of prototype vectors, oldest first.
class PrototypeBank {
public:
    PrototypeBank() = default;
    PrototypeBank(std::size_t num_modalities, std::size_t dim, std::size_t capacity)
        : dim_(dim), capacity_(capacity), queues_(num_modalities) {
        if (capacity == 0 || dim == 0) fail(ErrorKind::ConfigError, "bank capacity and dimension must be positive");
    }

    std::size_t num_modalities() const { return queues_.size(); }
    std::size_t dim() const { return dim_; }
    std::size_t capacity() const { return capacity_; }
    std::size_t size(ModalityId m) const { return queues_.at(m.index).size(); }
    const std::deque<Vec>& entries(ModalityId m) const { return queues_.at(m.index); }

    void push(ModalityId m, const std::vector<Vec>& protos) {
        if (m.index >= queues_.size()) fail(ErrorKind::UnknownModality, "bank has no queue for modality");
        for (const auto& p : protos) {
            if (p.size() != dim_) {
                fail(ErrorKind::DimMismatch, "prototype of length " + std::to_string(p.size()) + ", bank expects " +
                                                 std::to_string(dim_));
            }
        }
        auto& q = queues_[m.index];
        for (const auto& p : protos) {
            q.push_back(p);
            if (q.size() > capacity_) q.pop_front();
        }
    }

    /// FNV-1a over the bank contents; equal banks give equal fingerprints.
    std::uint64_t fingerprint() const {
        std::uint64_t h = 1469598103934665603ull;
        auto mix = [&h](const void* data, std::size_t n) {
            auto* bytes = static_cast<const unsigned char*>(data);
            for (std::size_t i = 0; i < n; ++i) {
                h ^= bytes[i];
                h *= 1099511628211ull;
            }
        };
        for (const auto& q : queues_) {
            std::uint64_t n = q.size();
            mix(&n, sizeof n);
            for (const auto& v : q) mix(v.data(), v.size() * sizeof(double));
        }
        return h;
    }

    /// CSV rows "modality,slot,c0..c{C-1}".
    void write_csv(std::ostream& os, const ModalityList* labels = nullptr) const {
        os << "modality,slot";
        for (std::size_t d = 0; d < dim_; ++d) os << ",c" << d;
        os << '\n';
        os.precision(17);
        for (std::size_t m = 0; m < queues_.size(); ++m) {
            for (std::size_t s = 0; s < queues_[m].size(); ++s) {
                if (labels) {
                    os << labels->label({m});
                } else {
                    os << m;
                }
                os << ',' << s;
                for (double v : queues_[m][s]) os << ',' << v;
                os << '\n';
            }
        }
    }

    bool operator==(const PrototypeBank&) const = default;

private:
    std::size_t dim_ = 0;
    std::size_t capacity_ = 0;
    std::vector<std::deque<Vec>> queues_;
};

struct Retrieval {
    std::size_t slot = 0;
    Vec prototype;
    double score = 0.0;
};

/// argmax over the bank queue of c of Σ_queries cosine(query, q); ties go to
/// the oldest slot.
inline Retrieval retrieve(const std::vector<Vec>& queries, const PrototypeBank& bank, ModalityId c) {
    const auto& queue = bank.entries(c);
    if (queue.empty()) fail(ErrorKind::EmptyBank, "no prototypes stored for modality " + std::to_string(c.index));
    if (queries.empty()) fail(ErrorKind::EmptyBatch, "retrieval needs at least one query");
    Retrieval best;
    best.score = -std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s < queue.size(); ++s) {
        double score = 0.0;
        for (const auto& q : queries) score += cosine_similarity(q, queue[s]);
        if (score > best.score) {
            best.score = score;
            best.slot = s;
        }
    }
    best.prototype = queue[best.slot];
    return best;
}

struct CompensationResult {
    // One N×C×h×w map per global modality, in global order.
    std::vector<std::pair<ModalityId, Tensor>> maps;
    std::size_t retrievals = 0;
    std::size_t misses = 0;
};

/// Fills the maps of modalities absent from `reps` with spatially broadcast
/// prototypes retrieved per sample, using every present tailored pooled
/// vector of that sample as a query. Without a bank (memory disabled) or
/// when a queue is empty, absent modalities get zero maps; empty queues are
/// counted as misses.
inline CompensationResult compensate(const RepSet& reps, const PrototypeBank* bank, std::size_t num_modalities) {
    if (reps.tailored_maps.empty()) fail(ErrorKind::IncompleteRepList, "compensation needs at least one modality");
    const Tensor& any = reps.tailored_maps.begin()->second;
    const std::size_t n = any.size(0), c = any.size(1), h = any.size(2), w = any.size(3);
    CompensationResult out;
    for (std::size_t m = 0; m < num_modalities; ++m) {
        ModalityId id{m};
        if (auto it = reps.tailored_maps.find(id); it != reps.tailored_maps.end()) {
            out.maps.emplace_back(id, it->second);
            continue;
        }
        if (!bank || bank->size(id) == 0) {
            if (bank) out.misses += n;
            out.maps.emplace_back(id, Tensor::zeros({n, c, h, w}));
            continue;
        }
        std::vector<double> rows(n * c);
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<Vec> queries;
            for (const auto& [held, pooled] : reps.tailored_pooled) {
                auto v = pooled.values();
                queries.emplace_back(v.begin() + i * c, v.begin() + (i + 1) * c);
            }
            Retrieval r = retrieve(queries, *bank, id);
            std::copy(r.prototype.begin(), r.prototype.end(), rows.begin() + i * c);
            ++out.retrievals;
        }
        out.maps.emplace_back(id, broadcast_spatial(Tensor({n, c}, std::move(rows)), h, w));
    }
    return out;
}

}  // namespace mixmfl
