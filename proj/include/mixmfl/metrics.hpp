#pragma once

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mixmfl/error.hpp"
#include "mixmfl/synth_data.hpp"

namespace mixmfl {

/// 2|A∩B| / (|A|+|B|) for class c; 1 when c is absent from both masks.
inline double dice_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, std::uint8_t c) {
    if (pred.size() != truth.size()) fail(ErrorKind::ShapeMismatch, "dice_score: masks differ in size");
    std::size_t a = 0, b = 0, both = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        bool p = pred[i] == c, t = truth[i] == c;
        a += p;
        b += t;
        both += p && t;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

inline const std::vector<std::uint8_t>& foreground_classes() {
    static const std::vector<std::uint8_t> classes{kCore, kEdema};
    return classes;
}

inline double mdice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth,
                    const std::vector<std::uint8_t>& classes = foreground_classes()) {
    double s = 0.0;
    for (auto c : classes) s += dice_score(pred, truth, c);
    return s / static_cast<double>(classes.size());
}

inline const char* class_name(std::uint8_t c) {
    switch (c) {
        case kBackground: return "background";
        case kCore: return "core";
        case kEdema: return "edema";
    }
    return "unknown";
}

/// Mean per-epoch loss components of the last local epoch of a round.
struct LossTrace {
    double seg = 0.0;
    double cls = 0.0;
    double tri = 0.0;
    double prox = 0.0;
    double total = 0.0;
    std::size_t retrievals = 0;
    std::size_t misses = 0;
};

struct ClientRoundResult {
    std::size_t client = 0;
    // Dice per foreground class, in foreground_classes() order, averaged
    // over the client's test samples.
    std::vector<double> class_dice;
    double mdice = 0.0;
    LossTrace losses;
};

struct RoundReport {
    std::size_t round = 0;
    std::vector<ClientRoundResult> clients;
    double average_mdice = 0.0;    // unweighted mean over clients
    double shared_alignment = 0.0; // mean pairwise cosine distance of shared reps
};

inline double average_mdice(const std::vector<ClientRoundResult>& clients) {
    if (clients.empty()) return 0.0;
    double s = 0.0;
    for (const auto& c : clients) s += c.mdice;
    return s / static_cast<double>(clients.size());
}

inline void write_results_header(std::ostream& os) {
    os << "round,client,class,dice,mdice,loss_seg,loss_cls,loss_tri,loss_total\n";
}

/// One row per (client, foreground class); values printed with round-trip
/// precision so identical runs give identical bytes.
inline void write_results_rows(std::ostream& os, const RoundReport& report) {
    auto flags = os.flags();
    os << std::setprecision(17);
    for (const auto& c : report.clients) {
        for (std::size_t j = 0; j < c.class_dice.size(); ++j) {
            os << report.round << ',' << c.client << ',' << class_name(foreground_classes()[j]) << ','
               << c.class_dice[j] << ',' << c.mdice << ',' << c.losses.seg << ',' << c.losses.cls << ','
               << c.losses.tri << ',' << c.losses.total << '\n';
        }
    }
    os.flags(flags);
}

struct RepresentationRecord {
    std::size_t client = 0;
    std::string modality;
    std::string origin;  // "tailored" | "shared"
    std::vector<double> values;
};

inline void write_representations_csv(const std::string& path, const std::vector<RepresentationRecord>& rows) {
    std::ofstream os(path);
    if (!os) fail(ErrorKind::IoError, "cannot open " + path + " for writing");
    std::size_t dim = rows.empty() ? 0 : rows.front().values.size();
    os << "client,modality,origin";
    for (std::size_t d = 0; d < dim; ++d) os << ",c" << d;
    os << '\n' << std::setprecision(17);
    for (const auto& r : rows) {
        os << r.client << ',' << r.modality << ',' << r.origin;
        for (double v : r.values) os << ',' << v;
        os << '\n';
    }
    if (!os) fail(ErrorKind::IoError, "write to " + path + " failed");
}

}  // namespace mixmfl
