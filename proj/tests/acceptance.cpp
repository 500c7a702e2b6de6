// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Property criteria rerun the relevant unit-test binaries;
// the comparative criteria train the reference configuration over a seed
// suite.

#include <sys/wait.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "mixmfl/mixmfl.hpp"

namespace fs = std::filesystem;
using namespace mixmfl;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

int failures = 0;

void verdict(bool pass, const std::string& name, const std::string& detail) {
    if (!pass) ++failures;
    std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
}

std::string fmt(double v, int precision = 4) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(precision) << v;
    return os.str();
}

std::string sci(double v) {
    std::ostringstream os;
    os << std::scientific << std::setprecision(2) << v;
    return os.str();
}

// Runs a unit-test binary restricted to `filter`; true when it exits 0.
bool run_gtest(const std::string& binary, const std::string& filter) {
    std::string cmd = "\"" + binary + "\" --gtest_brief=1 --gtest_filter='" + filter + "' > /dev/null 2>&1";
    int status = std::system(cmd.c_str());
    return WIFEXITED(status) && WEXITSTATUS(status) == 0;
}

// ---------------------------------------------------------------------------
// Property criteria

void check_gradients() {
    auto start = Clock::now();
    bool ok = run_gtest(MIXMFL_TEST_TENSOR, "Seeds/OpGradients.*") &&
              run_gtest(MIXMFL_TEST_NETS, "Seeds/NetGradients.*") &&
              run_gtest(MIXMFL_TEST_LOSSES, "Seeds/LossGradients.*");
    double secs = seconds_since(start);
    verdict(ok && secs < 120.0, "gradient-suite",
            std::string(ok ? "all" : "not all") + " finite-difference checks within 1e-4 over seeds 1..20, " +
                fmt(secs, 1) + " s (limit 120 s)");
}

// Shared-encoder parameter gradients through the modality classifier, with
// and without the reversal layer.
void check_grl() {
    ArchConfig arch;
    arch.num_modalities = 4;
    arch.channels = 4;
    arch.decoder_channels = 4;
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        ParamBundle p = init_params(arch, seed);
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> u(-1, 1);
        std::vector<double> img(3 * 6 * 6);
        for (auto& v : img) v = u(rng);
        Tensor image({3, 1, 6, 6}, img);
        auto shared_grads = [&](Origin origin) {
            ParamBundle q = p;
            GradTape tape;
            Tensor logits = classify_modality(global_average_pool(encode_shared(image, q)), origin, q, 1.0);
            tape.backward(modality_ce(logits, {0, 2, 3}));
            std::map<std::string, std::vector<double>> g;
            for (const auto& [key, t] : q) {
                if (role_of(key) == Role::Shared) g[key] = std::vector<double>(t.grad().begin(), t.grad().end());
            }
            return g;
        };
        auto plain = shared_grads(Origin::Tailored), reversed = shared_grads(Origin::Shared);
        for (const auto& [key, g] : plain) {
            for (std::size_t i = 0; i < g.size(); ++i) worst = std::max(worst, std::abs(reversed[key][i] + g[i]));
        }
    }
    verdict(worst <= 1e-12, "grl-contract",
            "max |g_reversed + g_plain| over shared-encoder parameters = " + sci(worst) + " (limit 1e-12)");
}

void check_aggregation() {
    bool ok = run_gtest(MIXMFL_TEST_FEDERATION, "Aggregate.*:AggregateRound.*:Plan.*");
    verdict(ok, "aggregation-oracle",
            std::string(ok ? "matches" : "does not match") +
                " the flat weighted mean within 1e-12; modality-isolation perturbation bit-exact");
}

void check_memory() {
    bool ok = run_gtest(MIXMFL_TEST_PROTO_MEMORY, "Retrieve.*:Bank.*:KMeans.*");
    verdict(ok, "memory-oracles",
            std::string(ok ? "all" : "not all") +
                " of: retrieval vs exhaustive scan on 1000 banks, FIFO, k-means vs brute force (n<=8, z<=3), "
                "monotone objective");
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void check_determinism(const ExperimentConfig& reference) {
    const fs::path root = fs::temp_directory_path() / "mixmfl_acceptance_determinism";
    fs::remove_all(root);
    ExperimentConfig cfg = reference;
    cfg.rounds = 3;
    std::vector<std::string> csvs;
    for (auto [name, threads] : {std::pair{"a", 0}, std::pair{"b", 0}, std::pair{"serial", 1}}) {
        cfg.threads = static_cast<std::size_t>(threads);
        cfg.output_dir = (root / name).string();
        run_experiment(cfg);
        csvs.push_back(slurp(root / name / files::kResults));
    }
    fs::remove_all(root);
    bool ok = !csvs[0].empty() && csvs[0] == csvs[1] && csvs[0] == csvs[2];
    verdict(ok, "determinism",
            std::string(ok ? "byte-identical" : "differing") +
                " result CSVs across two threaded runs and one serial run");
}

// ---------------------------------------------------------------------------
// Comparative criteria

struct RunResult {
    RoundReport initial;
    RoundReport final;
};

struct Job {
    std::string variant;
    std::uint64_t seed;
    ExperimentConfig cfg;
};

// Trains every job to completion on up to `workers` threads; each
// experiment runs its clients serially so results do not depend on the
// worker count.
std::map<std::pair<std::string, std::uint64_t>, RunResult> run_jobs(const std::vector<Job>& jobs, std::size_t workers) {
    std::map<std::pair<std::string, std::uint64_t>, RunResult> out;
    std::mutex mu;
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(jobs.size());
    auto work = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            try {
                ExperimentConfig cfg = jobs[i].cfg;
                cfg.threads = 1;
                Experiment exp(cfg);
                while (exp.completed_rounds() < cfg.rounds) exp.run_round();
                std::lock_guard lock(mu);
                out[{jobs[i].variant, jobs[i].seed}] = {exp.reports().front(), exp.reports().back()};
                std::cerr << "  " << jobs[i].variant << " seed " << jobs[i].seed << ": average mDice "
                          << fmt(exp.reports().back().average_mdice) << '\n';
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::max<std::size_t>(1, std::min(workers, jobs.size())); ++t) pool.emplace_back(work);
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return out;
}

std::vector<Job> make_jobs(const std::string& variant, const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds) {
    std::vector<Job> jobs;
    for (auto s : seeds) {
        Job j{variant, s, cfg};
        j.cfg.seed = s;
        jobs.push_back(std::move(j));
    }
    return jobs;
}

// Index of the client whose modalities are exactly the given labels.
std::size_t client_with(const ExperimentConfig& cfg, const std::vector<std::string>& labels) {
    auto specs = plan_clients(cfg.data, cfg.seed);
    ModalityList list(cfg.data.modalities);
    ModalitySet want;
    for (const auto& l : labels) want.push_back(list.id(l));
    std::sort(want.begin(), want.end());
    for (std::size_t k = 0; k < specs.size(); ++k) {
        if (specs[k].modalities == want) return k;
    }
    fail(ErrorKind::ConfigError, "no client holds exactly the requested modalities");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MixMFL acceptance suite"};
    std::string config_path = std::string(MIXMFL_CONFIG_DIR) + "/reference.json";
    std::size_t num_seeds = 5;
    std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());
    bool properties_only = false;
    app.add_option("--config", config_path, "Reference experiment config");
    app.add_option("--seeds", num_seeds, "Seed suite size (seeds 1..N)");
    app.add_option("--jobs", jobs, "Experiments trained concurrently");
    app.add_flag("--properties-only", properties_only, "Skip the training-based comparisons");
    CLI11_PARSE(app, argc, argv);

    try {
        ExperimentConfig reference = parse_config_file(config_path);
        reference.validate();

        check_gradients();
        check_grl();
        check_aggregation();
        check_memory();
        check_determinism(reference);
        if (properties_only) return failures == 0 ? 0 : 1;

        std::vector<std::uint64_t> seeds;
        for (std::uint64_t s = 1; s <= num_seeds; ++s) seeds.push_back(s);
        auto mean_over = [&](auto&& f) {
            double sum = 0.0;
            for (auto s : seeds) sum += f(s);
            return sum / static_cast<double>(seeds.size());
        };

        // MDM against the federated baselines.
        std::vector<Job> baseline_jobs;
        for (auto [name, algo] : {std::pair{"mdm", Algo::Mdm}, std::pair{"fedavg", Algo::FedAvg},
                                  std::pair{"fedprox", Algo::FedProx}}) {
            ExperimentConfig cfg = reference;
            cfg.algo = algo;
            auto j = make_jobs(name, cfg, seeds);
            baseline_jobs.insert(baseline_jobs.end(), j.begin(), j.end());
        }
        std::cerr << "training MDM, FedAvg and FedProx over " << seeds.size() << " seeds\n";
        auto start = Clock::now();
        auto results = run_jobs(baseline_jobs, jobs);
        const double baseline_secs = seconds_since(start);
        auto avg = [&](const std::string& v, std::uint64_t s) { return results.at({v, s}).final.average_mdice; };

        std::size_t wins = 0;
        std::string per_seed;
        for (auto s : seeds) {
            double gap = 100.0 * (avg("mdm", s) - avg("fedavg", s));
            if (gap >= 2.0) ++wins;
            per_seed += (per_seed.empty() ? "" : " ") + fmt(gap, 2);
        }
        const double mdm_mean = mean_over([&](auto s) { return avg("mdm", s); });
        const double fedavg_mean = mean_over([&](auto s) { return avg("fedavg", s); });
        const double fedprox_mean = mean_over([&](auto s) { return avg("fedprox", s); });
        const std::size_t needed = (seeds.size() * 4 + 4) / 5;
        verdict(wins >= needed && mdm_mean > fedprox_mean && baseline_secs < 900.0, "mdm-vs-baselines",
                "MDM - FedAvg per seed (points) [" + per_seed + "], " + std::to_string(wins) + "/" +
                    std::to_string(seeds.size()) + " seeds >= 2 points (need " + std::to_string(needed) +
                    "); means MDM " + fmt(mdm_mean) + " FedAvg " + fmt(fedavg_mean) + " FedProx " +
                    fmt(fedprox_mean) + "; " + fmt(baseline_secs, 0) + " s (limit 900 s)");

        // Single-component removals, plus the iid reference.
        std::vector<Job> ablation_jobs;
        for (const auto& v : ablation_variants()) {
            if (v.name == "full") continue;
            ExperimentConfig cfg = reference;
            cfg.ablation = v.flags;
            auto j = make_jobs(v.name, cfg, seeds);
            ablation_jobs.insert(ablation_jobs.end(), j.begin(), j.end());
        }
        ExperimentConfig iid = reference;
        iid.data.iid = true;
        auto iid_jobs = make_jobs("iid", iid, seeds);
        ablation_jobs.insert(ablation_jobs.end(), iid_jobs.begin(), iid_jobs.end());
        std::cerr << "training ablations and the iid reference over " << seeds.size() << " seeds\n";
        results.merge(run_jobs(ablation_jobs, jobs));

        bool all_lower = true;
        std::string ablation_detail = "full " + fmt(mdm_mean);
        for (const auto& v : ablation_variants()) {
            if (v.name == "full") continue;
            double m = mean_over([&](auto s) { return avg(v.name, s); });
            all_lower = all_lower && m < mdm_mean;
            ablation_detail += ", " + v.name + " " + fmt(m);
        }
        verdict(all_lower, "ablations", "seed-suite mean average mDice: " + ablation_detail);

        const std::size_t t1_client = client_with(reference, {"T1", "T1c"});
        auto edema = [&](const std::string& v, std::uint64_t s) {
            return results.at({v, s}).final.clients.at(t1_client).class_dice.at(1);
        };
        const double edema_on = mean_over([&](auto s) { return edema("mdm", s); });
        const double edema_off = mean_over([&](auto s) { return edema("no-memory", s); });
        verdict(edema_on > edema_off, "compensation",
                "T1+T1c client edema Dice, memory on " + fmt(edema_on) + " vs off " + fmt(edema_off));

        const double align_init = mean_over([&](auto s) { return results.at({"mdm", s}).initial.shared_alignment; });
        const double align_final = mean_over([&](auto s) { return results.at({"mdm", s}).final.shared_alignment; });
        const double align_nocls = mean_over([&](auto s) { return results.at({"no-cls", s}).final.shared_alignment; });
        verdict(align_final < align_init && align_final < align_nocls, "alignment",
                "mean shared cosine distance: initial " + fmt(align_init, 5) + ", trained " + fmt(align_final, 5) +
                    ", no-cls " + fmt(align_nocls, 5));

        const double iid_mean = mean_over([&](auto s) { return avg("iid", s); });
        verdict(std::isfinite(iid_mean), "iid-reference",
                "report only: iid average mDice " + fmt(iid_mean) + " vs mix-modal MDM " + fmt(mdm_mean));
    } catch (const std::exception& e) {
        std::cout << "FAIL acceptance-run: " << e.what() << std::endl;
        return 1;
    }
    return failures == 0 ? 0 : 1;
}
