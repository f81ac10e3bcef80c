#pragma once

// Small federations shared by the test binaries.

#include <memory>

#include "fedsim/data.hpp"
#include "fedsim/fl.hpp"
#include "fedsim/network.hpp"

namespace fixtures {

struct Setup {
    fedsim::LabeledDataset train, test;
    std::vector<fedsim::ClientSplit> splits;
    std::unique_ptr<fedsim::Architecture> arch;
};

/// 10-class Gaussians split into num_clients shard clients with matched tests.
inline Setup make(std::size_t num_clients = 10, std::size_t shards = 2, std::uint64_t seed = 1,
                  std::size_t per_class = 60, std::size_t dim = 8, double spread = 0.3,
                  fedsim::TestMode mode = fedsim::TestMode::Matched) {
    Setup s;
    s.train = fedsim::synthetic_gaussian(10, per_class, dim, spread, seed, 0);
    s.test = fedsim::synthetic_gaussian(10, per_class, dim, spread, seed, 1);
    const fedsim::PartitionSpec ps{fedsim::PartitionMode::Shard, num_clients, shards, 0.5, seed};
    s.splits = fedsim::split_client_test(s.train, s.test, fedsim::partition(s.train, ps), mode, seed);
    s.arch = std::make_unique<fedsim::Architecture>(
        fedsim::Shape{dim}, std::vector<fedsim::LayerSpec>{fedsim::LayerSpec::dense(dim, 16), fedsim::LayerSpec::relu(),
                                                           fedsim::LayerSpec::dense(16, 12), fedsim::LayerSpec::relu(),
                                                           fedsim::LayerSpec::dense(12, 10)});
    return s;
}

inline fedsim::FLConfig config(fedsim::Algorithm alg, std::size_t num_clients = 10, std::uint64_t seed = 1) {
    fedsim::FLConfig cfg;
    cfg.algorithm = alg;
    cfg.num_clients = num_clients;
    cfg.fraction = 0.5;
    cfg.local_epochs = 2;
    cfg.rounds = 6;
    cfg.batch_size = 16;
    cfg.seed = seed;
    cfg.init = {fedsim::InitKind::HeUniform, seed};
    return cfg;
}

inline const std::vector<fedsim::Algorithm>& all_algorithms() {
    using A = fedsim::Algorithm;
    static const std::vector<A> algs{A::FedAvg, A::FedBABU, A::FedProx, A::FedProxBABU, A::FedPer,
                                     A::LGFedAvg, A::FedRep, A::Ditto, A::PerFedAvg, A::LocalOnly};
    return algs;
}

}  // namespace fixtures
