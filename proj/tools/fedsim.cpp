// Command-line front end: partition | train | eval | sweep.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fedsim/experiment.hpp"
#include "fedsim/log.hpp"

namespace fs = std::filesystem;
using namespace fedsim;

namespace {

enum ExitCode { kOk = 0, kError = 1, kConfigInvalid = 2, kNumericFailure = 3 };

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::size_t jobs = 1;
};

void add_common(CLI::App* cmd, Common& c, bool with_jobs) {
    cmd->add_option("--config", c.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "Override the config seed");
    cmd->add_option("--out", c.out, "Output directory (default: config 'out' or runs/<hash>)");
    if (with_jobs) cmd->add_option("--jobs", c.jobs, "Worker threads")->check(CLI::PositiveNumber);
}

ExperimentConfig resolve(const Common& c) {
    ExperimentConfig cfg = load_config(c.config);
    if (c.seed) cfg.set_seed(*c.seed);
    return cfg;
}

fs::path out_dir(const Common& c, const ExperimentConfig& cfg) {
    if (!c.out.empty()) return c.out;
    if (!cfg.out.empty()) return cfg.out;
    return fs::path("runs") / cfg.hash();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated learning simulator with client-level evaluation"};
    app.require_subcommand(1);

    Common pc, tc, ec, sc;
    auto* partition_cmd = app.add_subcommand("partition", "Write client splits and label histograms");
    add_common(partition_cmd, pc, false);

    auto* train_cmd = app.add_subcommand("train", "Run a federation and write checkpoints and round logs");
    add_common(train_cmd, tc, true);
    bool resume = false;
    std::optional<std::size_t> stop_after;
    std::size_t checkpoint_every = 1;
    train_cmd->add_flag("--resume", resume, "Continue from <out>/checkpoint");
    train_cmd->add_option("--stop-after-round", stop_after, "Stop once this many rounds are complete");
    train_cmd->add_option("--checkpoint-every", checkpoint_every, "Rounds between checkpoints")
        ->check(CLI::PositiveNumber);

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint (initial, personalized, template, ...)");
    add_common(eval_cmd, ec, true);
    std::string checkpoint;
    eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint directory (default: <out>/checkpoint)");

    auto* sweep_cmd = app.add_subcommand("sweep", "Run a grid of experiments into one results table");
    add_common(sweep_cmd, sc, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfigInvalid;
    }

    try {
        if (*partition_cmd) {
            const ExperimentConfig cfg = resolve(pc);
            const fs::path out = out_dir(pc, cfg);
            const ExperimentData data = load_data(cfg);
            write_partition(cfg, data, make_splits(cfg, data, cfg.test_mode), out);
            std::cout << "wrote " << (out / "splits.json").string() << "\n";
        } else if (*train_cmd) {
            const ExperimentConfig cfg = resolve(tc);
            const fs::path out = out_dir(tc, cfg);
            const FederationState state = run_train(cfg, {out, tc.jobs, resume, stop_after, checkpoint_every});
            std::cout << "trained " << state.round << " rounds; checkpoint in " << (out / "checkpoint").string()
                      << "\n";
        } else if (*eval_cmd) {
            const ExperimentConfig cfg = resolve(ec);
            const fs::path out = out_dir(ec, cfg);
            const fs::path ck = checkpoint.empty() ? out / "checkpoint" : fs::path(checkpoint);
            const EvalSummary s = run_eval(cfg, ck, out, ec.jobs);
            std::cout << "initial " << s.initial.mean << " +- " << s.initial.std << "\n";
            for (const auto& p : s.personalized)
                std::cout << "personalized tau_f=" << p.tau_f << " " << p.mean << " +- " << p.std << "\n";
            if (s.templates) std::cout << "template " << s.templates->mean << " +- " << s.templates->std << "\n";
        } else if (*sweep_cmd) {
            std::ifstream in(sc.config);
            nlohmann::json grid;
            try {
                grid = nlohmann::json::parse(in);
            } catch (const nlohmann::json::parse_error& e) {
                throw ConfigError(sc.config + ": " + e.what());
            }
            const fs::path out = sc.out.empty() ? fs::path("runs") / "sweep" : fs::path(sc.out);
            const std::size_t ran = run_sweep(grid, out, sc.jobs, sc.seed);
            std::cout << "ran " << ran << " cells; results in " << (out / "results.csv").string() << "\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigInvalid;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kNumericFailure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kError;
    }
    return kOk;
}
