#include "fedsim/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <stdexcept>

#include "fedsim/log.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

namespace {
// Stream tags for derive_seed.
constexpr std::uint64_t kShardStream = 11;
constexpr std::uint64_t kDirichletStream = 12;
constexpr std::uint64_t kIidStream = 13;
constexpr std::uint64_t kTestStream = 14;
constexpr std::uint64_t kMeanStream = 15;
constexpr std::uint64_t kSampleStream = 16;
}  // namespace

Tensor LabeledDataset::gather(std::span<const std::size_t> indices) const {
    Shape shape{indices.size()};
    shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
    Tensor t(shape);
    const std::size_t row = sample_size();
    for (std::size_t k = 0; k < indices.size(); ++k) {
        auto src = sample(indices[k]);
        std::copy(src.begin(), src.end(), t.data.begin() + static_cast<std::ptrdiff_t>(k * row));
    }
    return t;
}

std::vector<int> LabeledDataset::gather_labels(std::span<const std::size_t> indices) const {
    std::vector<int> out(indices.size());
    for (std::size_t k = 0; k < indices.size(); ++k) out[k] = labels[indices[k]];
    return out;
}

void LabeledDataset::validate() const {
    if (features.size() != labels.size() * sample_size())
        throw std::invalid_argument("dataset: " + std::to_string(features.size()) + " feature values for " +
                                    std::to_string(labels.size()) + " samples of shape " +
                                    shape_to_string(sample_shape));
    for (int l : labels)
        if (l < 0 || l >= num_classes)
            throw std::invalid_argument("dataset: label " + std::to_string(l) + " outside [0, " +
                                        std::to_string(num_classes) + ")");
}

std::string to_string(PartitionMode mode) {
    switch (mode) {
        case PartitionMode::Shard: return "shard";
        case PartitionMode::Dirichlet: return "dirichlet";
        case PartitionMode::Iid: return "iid";
    }
    return "?";
}

PartitionMode partition_mode_from_string(const std::string& name) {
    if (name == "shard") return PartitionMode::Shard;
    if (name == "dirichlet") return PartitionMode::Dirichlet;
    if (name == "iid") return PartitionMode::Iid;
    throw std::invalid_argument("unknown partition mode '" + name + "' (expected shard|dirichlet|iid)");
}

std::vector<ClientSplit> shard_partition(const LabeledDataset& ds, const PartitionSpec& spec) {
    const std::size_t n = spec.num_clients, s = spec.shards_per_client;
    if (n == 0 || s == 0) throw std::invalid_argument("shard_partition: need at least one client and one shard");
    if (n * s > ds.size())
        throw std::invalid_argument("shard_partition: N*s = " + std::to_string(n * s) + " exceeds dataset size " +
                                    std::to_string(ds.size()));

    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return ds.labels[a] < ds.labels[b]; });

    const std::size_t shard_size = ds.size() / (n * s);
    const std::size_t dropped = ds.size() - n * s * shard_size;
    if (dropped > 0)
        log_warn("shard_partition: dropping " + std::to_string(dropped) +
                 " trailing label-sorted samples so that all shards have size " + std::to_string(shard_size));

    std::vector<std::size_t> shard_ids(n * s);
    std::iota(shard_ids.begin(), shard_ids.end(), 0);
    Rng rng(derive_seed(spec.seed, {kShardStream}));
    rng.shuffle(std::span(shard_ids));

    std::vector<ClientSplit> splits(n);
    for (std::size_t c = 0; c < n; ++c) {
        splits[c].client_id = c;
        auto& train = splits[c].train_indices;
        train.reserve(s * shard_size);
        for (std::size_t k = 0; k < s; ++k) {
            const std::size_t shard = shard_ids[c * s + k];
            for (std::size_t j = 0; j < shard_size; ++j) train.push_back(order[shard * shard_size + j]);
        }
        std::sort(train.begin(), train.end());
    }
    return splits;
}

std::vector<std::size_t> apportion(std::size_t total, std::span<const double> weights) {
    const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (!(sum > 0)) throw std::invalid_argument("apportion: weights must have a positive sum");
    std::vector<std::size_t> counts(weights.size());
    std::vector<double> frac(weights.size());
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (weights[i] < 0) throw std::invalid_argument("apportion: negative weight");
        const double quota = double(total) * weights[i] / sum;
        counts[i] = static_cast<std::size_t>(std::floor(quota));
        frac[i] = quota - std::floor(quota);
        assigned += counts[i];
    }
    // Floating error can push the floors past total; trim from the smallest remainders.
    while (assigned > total) {
        std::size_t worst = weights.size();
        for (std::size_t i = 0; i < weights.size(); ++i)
            if (counts[i] > 0 && (worst == weights.size() || frac[i] < frac[worst])) worst = i;
        --counts[worst];
        frac[worst] += 1.0;
        --assigned;
    }
    std::vector<std::size_t> order(weights.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
    for (std::size_t k = 0; assigned < total; k = (k + 1) % order.size()) {
        ++counts[order[k]];
        ++assigned;
    }
    return counts;
}

std::vector<ClientSplit> dirichlet_partition(const LabeledDataset& ds, const PartitionSpec& spec) {
    if (!(spec.beta > 0)) throw std::invalid_argument("dirichlet_partition: beta must be positive");
    const std::size_t n = spec.num_clients;
    if (n == 0) throw std::invalid_argument("dirichlet_partition: need at least one client");

    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(ds.num_classes));
    for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);

    Rng rng(derive_seed(spec.seed, {kDirichletStream}));
    std::vector<ClientSplit> splits(n);
    for (std::size_t c = 0; c < n; ++c) splits[c].client_id = c;

    std::vector<double> proportions(n);
    for (auto& members : by_class) {
        if (members.empty()) continue;
        rng.shuffle(std::span(members));
        double sum = 0;
        for (double& p : proportions) {
            p = rng.gamma(spec.beta);
            sum += p;
        }
        if (!(sum > 0)) {
            // Every draw underflowed (tiny beta): the limit is a one-hot vector.
            std::fill(proportions.begin(), proportions.end(), 0.0);
            proportions[rng.below(n)] = 1.0;
        }
        const auto counts = apportion(members.size(), proportions);
        std::size_t pos = 0;
        for (std::size_t c = 0; c < n; ++c)
            for (std::size_t k = 0; k < counts[c]; ++k) splits[c].train_indices.push_back(members[pos++]);
    }
    for (auto& split : splits) std::sort(split.train_indices.begin(), split.train_indices.end());
    return splits;
}

std::vector<ClientSplit> iid_partition(const LabeledDataset& ds, const PartitionSpec& spec) {
    const std::size_t n = spec.num_clients;
    if (n == 0 || n > ds.size()) throw std::invalid_argument("iid_partition: need 1 <= N <= |D|");
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(spec.seed, {kIidStream}));
    rng.shuffle(std::span(order));
    std::vector<ClientSplit> splits(n);
    for (std::size_t c = 0; c < n; ++c) splits[c].client_id = c;
    for (std::size_t k = 0; k < order.size(); ++k) splits[k % n].train_indices.push_back(order[k]);
    for (auto& split : splits) std::sort(split.train_indices.begin(), split.train_indices.end());
    return splits;
}

std::vector<ClientSplit> partition(const LabeledDataset& ds, const PartitionSpec& spec) {
    switch (spec.mode) {
        case PartitionMode::Shard: return shard_partition(ds, spec);
        case PartitionMode::Dirichlet: return dirichlet_partition(ds, spec);
        case PartitionMode::Iid: return iid_partition(ds, spec);
    }
    throw std::invalid_argument("partition: unknown mode");
}

std::vector<std::size_t> label_histogram(const LabeledDataset& ds, std::span<const std::size_t> indices) {
    std::vector<std::size_t> hist(static_cast<std::size_t>(ds.num_classes), 0);
    for (std::size_t i : indices) ++hist[static_cast<std::size_t>(ds.labels[i])];
    return hist;
}

std::vector<ClientSplit> split_client_test(const LabeledDataset& train, const LabeledDataset& test,
                                           std::vector<ClientSplit> splits, TestMode mode, std::uint64_t seed) {
    if (test.num_classes != train.num_classes)
        throw std::invalid_argument("split_client_test: train has " + std::to_string(train.num_classes) +
                                    " classes but test has " + std::to_string(test.num_classes));
    if (mode == TestMode::Global) {
        std::vector<std::size_t> all(test.size());
        std::iota(all.begin(), all.end(), 0);
        for (auto& split : splits) split.test_indices = all;
        return splits;
    }

    std::vector<std::vector<std::size_t>> pool(static_cast<std::size_t>(test.num_classes));
    for (std::size_t i = 0; i < test.size(); ++i) pool[static_cast<std::size_t>(test.labels[i])].push_back(i);

    for (auto& split : splits) {
        split.test_indices.clear();
        const std::size_t wanted = split.train_indices.size() / 5;
        if (wanted == 0) continue;
        const auto hist = label_histogram(train, split.train_indices);
        std::vector<double> weights(hist.begin(), hist.end());
        const auto counts = apportion(wanted, weights);
        Rng rng(derive_seed(seed, {kTestStream, split.client_id}));
        for (std::size_t c = 0; c < counts.size(); ++c) {
            if (counts[c] == 0) continue;
            const auto& members = pool[c];
            if (members.empty())
                throw std::invalid_argument("split_client_test: client " + std::to_string(split.client_id) +
                                            " trains on class " + std::to_string(c) +
                                            " which is absent from the test pool");
            if (counts[c] <= members.size()) {
                std::vector<std::size_t> candidates = members;
                for (std::size_t k = 0; k < counts[c]; ++k) {
                    const std::size_t j = k + static_cast<std::size_t>(rng.below(candidates.size() - k));
                    std::swap(candidates[k], candidates[j]);
                    split.test_indices.push_back(candidates[k]);
                }
            } else {
                log_warn("split_client_test: client " + std::to_string(split.client_id) + " needs " +
                         std::to_string(counts[c]) + " test samples of class " + std::to_string(c) + " but only " +
                         std::to_string(members.size()) + " exist; sampling with replacement");
                for (std::size_t k = 0; k < counts[c]; ++k) split.test_indices.push_back(members[rng.below(members.size())]);
            }
        }
        std::sort(split.test_indices.begin(), split.test_indices.end());
    }
    return splits;
}

std::vector<double> synthetic_means(int classes, std::size_t dim, std::uint64_t seed) {
    if (classes < 2) throw std::invalid_argument("synthetic_gaussian: need at least two classes");
    if (dim == 0) throw std::invalid_argument("synthetic_gaussian: zero dimension");
    Rng rng(derive_seed(seed, {kMeanStream}));
    std::vector<double> means(static_cast<std::size_t>(classes) * dim);
    for (int c = 0; c < classes; ++c) {
        double* m = means.data() + static_cast<std::size_t>(c) * dim;
        double norm = 0;
        for (std::size_t k = 0; k < dim; ++k) {
            m[k] = rng.normal();
            norm += m[k] * m[k];
        }
        norm = std::sqrt(norm);
        for (std::size_t k = 0; k < dim; ++k) m[k] /= norm;
    }
    return means;
}

LabeledDataset synthetic_gaussian(int classes, std::size_t per_class, std::size_t dim, double spread,
                                  std::uint64_t seed, std::uint64_t stream) {
    const auto means = synthetic_means(classes, dim, seed);
    LabeledDataset ds;
    ds.sample_shape = {dim};
    ds.num_classes = classes;
    const std::size_t total = per_class * static_cast<std::size_t>(classes);
    ds.features.resize(total * dim);
    ds.labels.resize(total);
    Rng rng(derive_seed(seed, {kSampleStream, stream}));
    for (std::size_t i = 0; i < total; ++i) {
        const int c = static_cast<int>(i % static_cast<std::size_t>(classes));
        ds.labels[i] = c;
        const double* m = means.data() + static_cast<std::size_t>(c) * dim;
        float* x = ds.features.data() + i * dim;
        for (std::size_t k = 0; k < dim; ++k) x[k] = static_cast<float>(m[k] + spread * rng.normal());
    }
    return ds;
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open IDX file " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t pos) {
    return (std::uint32_t(b[pos]) << 24) | (std::uint32_t(b[pos + 1]) << 16) | (std::uint32_t(b[pos + 2]) << 8) |
           std::uint32_t(b[pos + 3]);
}

}  // namespace

LabeledDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
    const auto img = read_file(images);
    const auto lab = read_file(labels);
    if (img.size() < 16) throw std::runtime_error("IDX images " + images.string() + ": truncated header");
    if (be32(img, 0) != 0x00000803)
        throw std::runtime_error("IDX images " + images.string() + ": bad magic (expected 0x00000803)");
    if (lab.size() < 8) throw std::runtime_error("IDX labels " + labels.string() + ": truncated header");
    if (be32(lab, 0) != 0x00000801)
        throw std::runtime_error("IDX labels " + labels.string() + ": bad magic (expected 0x00000801)");

    const std::size_t count = be32(img, 4), rows = be32(img, 8), cols = be32(img, 12);
    const std::size_t label_count = be32(lab, 4);
    if (img.size() != 16 + count * rows * cols)
        throw std::runtime_error("IDX images " + images.string() + ": truncated or oversized payload (" +
                                 std::to_string(img.size()) + " bytes for " + std::to_string(count) + " images)");
    if (lab.size() != 8 + label_count)
        throw std::runtime_error("IDX labels " + labels.string() + ": truncated or oversized payload");
    if (count != label_count)
        throw std::runtime_error("IDX count mismatch: " + images.string() + " has " + std::to_string(count) +
                                 " images but " + labels.string() + " has " + std::to_string(label_count) + " labels");

    LabeledDataset ds;
    ds.sample_shape = {rows, cols};
    ds.features.resize(count * rows * cols);
    for (std::size_t i = 0; i < ds.features.size(); ++i) ds.features[i] = float(img[16 + i]) / 255.0f;
    ds.labels.resize(count);
    int max_label = 0;
    for (std::size_t i = 0; i < count; ++i) {
        ds.labels[i] = lab[8 + i];
        max_label = std::max(max_label, ds.labels[i]);
    }
    ds.num_classes = max_label + 1;
    return ds;
}

LabeledDataset subset(const LabeledDataset& ds, std::span<const std::size_t> indices) {
    LabeledDataset out;
    out.sample_shape = ds.sample_shape;
    out.num_classes = ds.num_classes;
    out.features = ds.gather(indices).data;
    out.labels = ds.gather_labels(indices);
    return out;
}

nlohmann::json splits_to_json(const std::vector<ClientSplit>& splits) {
    nlohmann::json clients = nlohmann::json::array();
    for (const auto& s : splits)
        clients.push_back({{"client_id", s.client_id}, {"train", s.train_indices}, {"test", s.test_indices}});
    return {{"clients", clients}};
}

std::vector<ClientSplit> splits_from_json(const nlohmann::json& j) {
    std::vector<ClientSplit> out;
    for (const auto& c : j.at("clients")) {
        ClientSplit s;
        s.client_id = c.at("client_id").get<std::size_t>();
        s.train_indices = c.at("train").get<std::vector<std::size_t>>();
        s.test_indices = c.value("test", std::vector<std::size_t>{});
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace fedsim
