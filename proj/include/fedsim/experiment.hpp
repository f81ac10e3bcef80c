#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedsim/config.hpp"
#include "fedsim/data.hpp"
#include "fedsim/eval.hpp"
#include "fedsim/fl.hpp"

namespace fedsim {

struct ExperimentData {
    LabeledDataset train;
    LabeledDataset test;
};

/// Loads or generates the configured train and test sets.
ExperimentData load_data(const ExperimentConfig& cfg);

/// Partition of the train set plus per-client test indices in the given mode.
std::vector<ClientSplit> make_splits(const ExperimentConfig& cfg, const ExperimentData& data, TestMode mode);

/// Writes splits.json and label_histogram.csv into out.
void write_partition(const ExperimentConfig& cfg, const ExperimentData& data, const std::vector<ClientSplit>& splits,
                     const std::filesystem::path& out);

struct TrainOptions {
    std::filesystem::path out;
    std::size_t jobs = 1;
    bool resume = false;
    std::optional<std::size_t> stop_after_round;
    std::size_t checkpoint_every = 1;  // rounds; the last round is always saved
};

struct Checkpoint {
    std::string config_hash;
    FederationState state;
};

void save_checkpoint(const std::filesystem::path& dir, const std::string& config_hash, const FederationState& state);
/// Verifies the hash and parameter layout against the config; throws ConfigError on mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& dir, const ExperimentConfig& cfg, const Architecture& arch);

/// Runs (or resumes) the federation and writes checkpoint/, rounds.csv,
/// splits.json, label_histogram.csv and config.json into opts.out.
FederationState run_train(const ExperimentConfig& cfg, const TrainOptions& opts);

struct EvalSummary {
    EvalReport initial;
    std::vector<EvalReport> personalized;  // one per eval.tau_f entry
    std::optional<EvalReport> templates;
};

/// Evaluates a checkpoint and writes reports under out/eval.
EvalSummary run_eval(const ExperimentConfig& cfg, const std::filesystem::path& checkpoint,
                     const std::filesystem::path& out, std::size_t jobs);

/// Runs every cell of a grid, skipping cells whose results already exist,
/// and writes results.csv. Returns the number of cells run (not skipped).
std::size_t run_sweep(const nlohmann::json& grid, const std::filesystem::path& out, std::size_t jobs,
                      std::optional<std::uint64_t> seed_override = std::nullopt);

/// Expands a sweep file into its cells, in a fixed order.
std::vector<ExperimentConfig> expand_grid(const nlohmann::json& grid, std::optional<std::uint64_t> seed_override);

void write_report(const std::filesystem::path& dir, const std::string& name, const EvalReport& report,
                  const std::string& config_hash);

/// Writes through a temporary file and renames, so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace fedsim
