#pragma once

// File-producing drivers behind the command-line tool: a single experiment
// with checkpoint/resume, and the five-variant ablation sweep.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <string>
#include <vector>

#include "mixmfl/config.hpp"
#include "mixmfl/federation.hpp"

namespace mixmfl {

struct RunOptions {
    bool resume = false;                   // continue from <out>/checkpoint.mxck if present
    std::optional<std::size_t> stop_after; // stop once this many rounds are complete
    bool export_representations = true;
};

struct RunOutcome {
    std::vector<RoundReport> reports;
    std::size_t completed_rounds = 0;
    bool finished = false;  // all configured rounds done
};

namespace files {
inline constexpr const char* kResults = "results.csv";
inline constexpr const char* kSummary = "summary.json";
inline constexpr const char* kCheckpoint = "checkpoint.mxck";
inline constexpr const char* kRepresentations = "representations.csv";
inline constexpr const char* kBank = "prototype_bank.csv";
inline constexpr const char* kAblation = "ablation.csv";
}  // namespace files

inline std::vector<std::string> client_names(const Experiment& exp) {
    ModalityList labels(exp.config().data.modalities);
    std::vector<std::string> names;
    for (const auto& c : exp.clients()) {
        std::string name;
        for (auto m : c.modalities) name += (name.empty() ? "" : "+") + labels.label(m);
        names.push_back(name);
    }
    return names;
}

inline void write_results_csv(const std::filesystem::path& path, const std::vector<RoundReport>& reports) {
    std::ofstream os(path);
    if (!os) fail(ErrorKind::IoError, "cannot open " + path.string() + " for writing");
    write_results_header(os);
    for (const auto& r : reports) write_results_rows(os, r);
    if (!os) fail(ErrorKind::IoError, "write to " + path.string() + " failed");
}

/// Runs (or resumes) one experiment into cfg.output_dir. A checkpoint is
/// written after every round, so an interrupted run resumed with
/// `resume = true` ends with the same results file as an uninterrupted one.
inline RunOutcome run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
    namespace fs = std::filesystem;
    const fs::path out(cfg.output_dir);
    fs::create_directories(out);
    Experiment exp(cfg);
    if (opts.resume && fs::exists(out / files::kCheckpoint)) exp.load_checkpoint((out / files::kCheckpoint).string());

    const std::size_t target = opts.stop_after ? std::min(*opts.stop_after, cfg.rounds) : cfg.rounds;
    while (exp.completed_rounds() < target) {
        exp.run_round();
        exp.save_checkpoint((out / files::kCheckpoint).string());
    }
    write_results_csv(out / files::kResults, exp.reports());

    RunOutcome outcome{exp.reports(), exp.completed_rounds(), exp.completed_rounds() >= cfg.rounds};
    if (outcome.finished) {
        std::ofstream js(out / files::kSummary);
        js << std::setw(2) << summary_json(cfg, exp.reports(), client_names(exp)) << '\n';
        if (!js) fail(ErrorKind::IoError, "cannot write summary");
        if (opts.export_representations) {
            write_representations_csv((out / files::kRepresentations).string(), exp.collect_representations());
        }
        std::ofstream bank(out / files::kBank);
        ModalityList labels(cfg.data.modalities);
        exp.bank().write_csv(bank, &labels);
    }
    return outcome;
}

struct AblationVariant {
    std::string name;
    AblationFlags flags;
};

inline std::vector<AblationVariant> ablation_variants() {
    std::vector<AblationVariant> v(5);
    v[0].name = "full";
    v[1].name = "no-tailored";
    v[1].flags.no_tailored_updating = true;
    v[2].name = "no-memory";
    v[2].flags.no_memory = true;
    v[3].name = "no-triplet";
    v[3].flags.no_triplet = true;
    v[4].name = "no-cls";
    v[4].flags.no_cls = true;
    return v;
}

struct AblationRow {
    std::string variant;
    std::vector<double> client_mdice;
    double average_mdice = 0.0;
};

/// Full model plus the four single removals with a shared seed. Each
/// variant runs into <out>/<name>/; the comparison table goes to
/// <out>/ablation.csv with one row per variant.
inline std::vector<AblationRow> run_ablation(const ExperimentConfig& base, const RunOptions& opts = {}) {
    namespace fs = std::filesystem;
    const fs::path out(base.output_dir);
    fs::create_directories(out);
    std::vector<AblationRow> rows;
    for (const auto& v : ablation_variants()) {
        ExperimentConfig cfg = base;
        cfg.algo = Algo::Mdm;
        cfg.ablation = v.flags;
        cfg.output_dir = (out / v.name).string();
        RunOutcome r = run_experiment(cfg, opts);
        AblationRow row{v.name, {}, r.reports.back().average_mdice};
        for (const auto& c : r.reports.back().clients) row.client_mdice.push_back(c.mdice);
        rows.push_back(std::move(row));
    }
    std::ofstream os(out / files::kAblation);
    if (!os) fail(ErrorKind::IoError, "cannot write ablation table");
    os << "variant,seed";
    for (std::size_t k = 0; k < rows.front().client_mdice.size(); ++k) os << ",client" << k;
    os << ",average\n" << std::setprecision(17);
    for (const auto& row : rows) {
        os << row.variant << ',' << base.seed;
        for (double d : row.client_mdice) os << ',' << d;
        os << ',' << row.average_mdice << '\n';
    }
    return rows;
}

}  // namespace mixmfl
