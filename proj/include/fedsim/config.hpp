#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedsim/data.hpp"
#include "fedsim/eval.hpp"
#include "fedsim/fl.hpp"
#include "fedsim/network.hpp"

namespace fedsim {

/// Invalid or inconsistent experiment configuration.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DatasetConfig {
    std::string kind = "synthetic";  // synthetic | idx
    // synthetic
    int classes = 10;
    std::size_t train_per_class = 500;
    std::size_t test_per_class = 100;
    std::size_t dim = 32;
    double spread = 0.5;
    // idx
    std::string train_images, train_labels, test_images, test_labels;
    std::size_t train_limit = 0;  // 0 keeps everything
    std::size_t test_limit = 0;
};

struct EvalConfig {
    std::vector<std::size_t> tau_f{0, 1, 2, 3, 4, 5, 10};
    Part part = Part::Full;
    std::optional<double> lr;  // defaults to base_lr * 0.01
    bool templates = true;
    bool in_out = false;
    bool layer_cosine = true;
};

/// One experiment: data, network, partition, federation and evaluation.
/// Every field has a default; a config file only lists what it changes.
struct ExperimentConfig {
    std::uint64_t seed = 0;
    DatasetConfig dataset;
    Shape input_shape;              // empty: the dataset's flattened sample
    std::vector<LayerSpec> layers;  // empty: a two-hidden-layer MLP
    PartitionSpec partition;
    TestMode test_mode = TestMode::Matched;
    FLConfig fl;
    std::optional<std::size_t> budget;  // K * tau, checked against rounds and local_epochs
    EvalConfig eval;
    std::string out;  // output directory; not part of the hash

    /// Throws ConfigError on unknown keys, bad values or a budget mismatch.
    static ExperimentConfig from_json(const nlohmann::json& j);
    /// Fully defaulted form; from_json(to_json()) round-trips.
    nlohmann::json to_json() const;
    /// Hash of everything that affects training (evaluation settings excluded).
    std::string hash() const;
    /// Sets the one seed that drives data, partition, initialization and training.
    void set_seed(std::uint64_t s);

    Architecture architecture(const Shape& sample_shape, int num_classes) const;
    double finetune_lr() const { return eval.lr.value_or(fl.base_lr * 0.01); }
};

ExperimentConfig load_config(const std::filesystem::path& path);

/// FNV-1a 64 as 16 lowercase hex digits.
std::string fnv1a_hex(std::string_view bytes);

}  // namespace fedsim
