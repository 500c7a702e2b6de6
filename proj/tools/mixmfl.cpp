// Command-line front end: run, ablate and dump-data subcommands.
//
// Exit codes: 0 success, 1 run failure, 2 configuration failure.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mixmfl/mixmfl.hpp"

namespace {

constexpr int kExitRunFailure = 1;
constexpr int kExitConfigFailure = 2;

struct CommonFlags {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::string> algo;
    std::optional<std::size_t> rounds;
    std::optional<std::size_t> epochs;
    std::optional<std::size_t> threads;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_algo) {
    cmd->add_option("--config", f.config_path, "JSON experiment config")->required();
    cmd->add_option("--seed", f.seed, "Experiment seed");
    cmd->add_option("--out", f.out, "Output directory");
    if (with_algo) cmd->add_option("--algo", f.algo, "mdm | fedavg | fedprox");
    cmd->add_option("--rounds", f.rounds, "Federated rounds");
    cmd->add_option("--epochs", f.epochs, "Local epochs per round");
    cmd->add_option("--threads", f.threads, "Client worker threads (0: one per client)");
}

// Precedence for every field: flag, then environment (output dir only),
// then config file, then built-in default.
mixmfl::ExperimentConfig resolve(const CommonFlags& f) {
    using namespace mixmfl;
    ExperimentConfig cfg = parse_config_file(f.config_path);
    if (const char* env = std::getenv("MIXMFL_OUT"); env && *env) cfg.output_dir = env;
    if (f.seed) cfg.seed = *f.seed;
    if (f.out) cfg.output_dir = *f.out;
    if (f.algo) cfg.algo = parse_algo(*f.algo);
    if (f.rounds) cfg.rounds = *f.rounds;
    if (f.epochs) cfg.local_epochs = *f.epochs;
    if (f.threads) cfg.threads = *f.threads;
    try {
        cfg.validate();
    } catch (const Error& e) {
        fail(ErrorKind::ConfigError, e.what());
    }
    return cfg;
}

void print_report(const mixmfl::RoundReport& r) {
    std::cout << "round " << r.round << " average mDice " << r.average_mdice << " alignment " << r.shared_alignment
              << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Mix-modal federated learning simulator"};
    app.require_subcommand(1);

    CommonFlags run_flags;
    bool resume = false;
    std::optional<std::size_t> stop_after;
    auto* run = app.add_subcommand("run", "Run one experiment");
    add_common(run, run_flags, true);
    run->add_flag("--resume", resume, "Continue from the checkpoint in the output directory");
    run->add_option("--stop-after", stop_after, "Stop after this many completed rounds");

    CommonFlags ablate_flags;
    auto* ablate = app.add_subcommand("ablate", "Run the full model and its four single-component removals");
    add_common(ablate, ablate_flags, false);

    CommonFlags dump_flags;
    std::string dataset_path;
    auto* dump = app.add_subcommand("dump-data", "Write the synthetic federation to a binary dataset file");
    dump->add_option("--config", dump_flags.config_path, "JSON experiment config")->required();
    dump->add_option("--seed", dump_flags.seed, "Experiment seed");
    dump->add_option("--file", dataset_path, "Destination file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : kExitConfigFailure;
    }

    mixmfl::ExperimentConfig cfg;
    try {
        if (run->parsed()) cfg = resolve(run_flags);
        if (ablate->parsed()) cfg = resolve(ablate_flags);
        if (dump->parsed()) cfg = resolve(dump_flags);
    } catch (const mixmfl::Error& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfigFailure;
    }

    try {
        if (run->parsed()) {
            mixmfl::RunOptions opts;
            opts.resume = resume;
            opts.stop_after = stop_after;
            auto outcome = mixmfl::run_experiment(cfg, opts);
            print_report(outcome.reports.back());
            std::cout << (outcome.finished ? "finished " : "stopped after ") << outcome.completed_rounds
                      << " rounds; results in " << cfg.output_dir << '\n';
        } else if (ablate->parsed()) {
            for (const auto& row : mixmfl::run_ablation(cfg)) {
                std::cout << row.variant << " average mDice " << row.average_mdice << '\n';
            }
        } else if (dump->parsed()) {
            mixmfl::DatasetFile file;
            file.seed = cfg.seed;
            file.height = cfg.data.scene.height;
            file.width = cfg.data.scene.width;
            file.modalities = cfg.data.modalities;
            file.clients = mixmfl::build_federation(cfg.data, cfg.seed);
            mixmfl::save_dataset(dataset_path, file);
            std::cout << "wrote " << file.clients.size() << " clients to " << dataset_path << '\n';
        }
    } catch (const mixmfl::Error& e) {
        std::cerr << "error [" << mixmfl::to_string(e.kind()) << "]: " << e.what() << '\n';
        return e.kind() == mixmfl::ErrorKind::ConfigError ? kExitConfigFailure : kExitRunFailure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRunFailure;
    }
    return 0;
}
