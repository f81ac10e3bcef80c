#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedsim/tensor.hpp"

namespace fedsim {

/// Samples stored back to back, one row of shape_size(sample_shape) floats each.
struct LabeledDataset {
    Shape sample_shape;
    std::vector<float> features;
    std::vector<int> labels;
    int num_classes = 0;

    std::size_t size() const { return labels.size(); }
    std::size_t sample_size() const { return shape_size(sample_shape); }
    std::span<const float> sample(std::size_t i) const {
        return {features.data() + i * sample_size(), sample_size()};
    }
    /// Stacks the selected samples into a (n, sample_shape...) batch.
    Tensor gather(std::span<const std::size_t> indices) const;
    std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
    /// Checks the length and label-range invariants; throws std::invalid_argument.
    void validate() const;
};

struct ClientSplit {
    std::size_t client_id = 0;
    std::vector<std::size_t> train_indices;
    std::vector<std::size_t> test_indices;
};

enum class PartitionMode { Shard, Dirichlet, Iid };

struct PartitionSpec {
    PartitionMode mode = PartitionMode::Shard;
    std::size_t num_clients = 100;
    std::size_t shards_per_client = 10;
    double beta = 0.5;
    std::uint64_t seed = 0;
};

std::string to_string(PartitionMode mode);
PartitionMode partition_mode_from_string(const std::string& name);

/// Label-sorted shards of size floor(|D| / (N s)); each client draws s of them.
/// Samples past N * s * shard_size are dropped with a warning.
std::vector<ClientSplit> shard_partition(const LabeledDataset& ds, const PartitionSpec& spec);

/// Per class, Dirichlet(beta) proportions over clients, rounded to exact
/// counts by largest remainder.
std::vector<ClientSplit> dirichlet_partition(const LabeledDataset& ds, const PartitionSpec& spec);

/// Seeded shuffle dealt round-robin into N near-equal parts.
std::vector<ClientSplit> iid_partition(const LabeledDataset& ds, const PartitionSpec& spec);

std::vector<ClientSplit> partition(const LabeledDataset& ds, const PartitionSpec& spec);

/// Largest-remainder apportionment of total over weights; result sums to total.
std::vector<std::size_t> apportion(std::size_t total, std::span<const double> weights);

enum class TestMode { Matched, Global };

/// Assigns test indices. Matched: floor(train/5) test samples per client,
/// restricted to and proportional to the client's train classes. Global:
/// every client receives the whole test set.
std::vector<ClientSplit> split_client_test(const LabeledDataset& train, const LabeledDataset& test,
                                           std::vector<ClientSplit> splits, TestMode mode, std::uint64_t seed);

/// C isotropic Gaussian clusters around random unit-norm means. The means
/// depend only on (classes, dim, seed); stream selects an independent sample
/// draw so that train and test sets share their clusters.
LabeledDataset synthetic_gaussian(int classes, std::size_t per_class, std::size_t dim, double spread,
                                  std::uint64_t seed, std::uint64_t stream = 0);

/// Cluster means used by synthetic_gaussian, row-major (classes x dim).
std::vector<double> synthetic_means(int classes, std::size_t dim, std::uint64_t seed);

/// IDX (ubyte) image/label pair; pixels scaled to [0, 1].
LabeledDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Selects a subset of samples (in the given order).
LabeledDataset subset(const LabeledDataset& ds, std::span<const std::size_t> indices);

/// Class histogram of a set of indices.
std::vector<std::size_t> label_histogram(const LabeledDataset& ds, std::span<const std::size_t> indices);

nlohmann::json splits_to_json(const std::vector<ClientSplit>& splits);
std::vector<ClientSplit> splits_from_json(const nlohmann::json& j);

}  // namespace fedsim
