#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/network.hpp"
#include "fedsim/optim.hpp"
#include "fedsim/params.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

enum class Algorithm { FedAvg, FedBABU, FedProx, FedProxBABU, FedPer, LGFedAvg, FedRep, Ditto, PerFedAvg, LocalOnly };

std::string_view to_string(Algorithm alg);
Algorithm algorithm_from_string(std::string_view name);

enum class LocalRule { Joint, SequentialHeadThenBody, Proximal, Ditto, PerFedAvgFO };

/// How an algorithm decouples the network.
struct AlgorithmSpec {
    Part update = Part::Full;     // trained during local updates
    Part aggregate = Part::Full;  // averaged by the server
    LocalRule rule = LocalRule::Joint;
    Part shared = Part::Full;     // taken from the global model when a client's model is assembled
    bool persistent = false;      // clients keep their own parameters between rounds
    bool all_clients = false;     // every client trains every round (no sampling)
};

AlgorithmSpec algorithm_spec(Algorithm alg);

struct FLConfig {
    std::size_t num_clients = 100;
    double fraction = 0.1;
    std::size_t local_epochs = 1;
    std::size_t rounds = 320;
    std::size_t batch_size = 50;
    Algorithm algorithm = Algorithm::FedAvg;
    double mu = 0.0;                // FedProx
    double ditto_lambda = 0.75;
    double perfedavg_alpha = 0.01;  // inner step of Per-FedAvg (FO)
    double server_share = 0.0;      // fraction p of all client data the server also holds
    Part server_update_part = Part::Full;
    double base_lr = 0.1;
    float momentum = 0.9f;
    double lg_lr = 0.001;           // LG-FedAvg second phase
    InitScheme init;
    std::uint64_t seed = 0;
    std::size_t jobs = 1;

    /// Throws std::invalid_argument on out-of-range values.
    void validate() const;
};

/// Thrown when a loss or parameter turns NaN/Inf.
class NumericError : public std::runtime_error {
public:
    NumericError(std::size_t round, std::optional<std::size_t> client, const std::string& what);
    std::size_t round;
    std::optional<std::size_t> client;
};

/// A client's view of the shared training set.
struct ClientData {
    const LabeledDataset* data = nullptr;
    std::span<const std::size_t> indices;
    std::size_t size() const { return indices.size(); }
};

/// Maps (epoch, iteration) of one local update onto the global LR schedule.
/// Clients with a different number of iterations per epoch than the
/// reference are stretched onto the same positions.
struct StepSchedule {
    LRSchedule schedule;
    std::size_t offset = 0;
    std::size_t ref_iters = 1;
    std::optional<double> constant;

    double lr(std::size_t epoch, std::size_t iter, std::size_t iters) const;
    static StepSchedule fixed(double lr) { return {LRSchedule{lr, 1, 1.0}, 0, 1, lr}; }
};

struct LocalOptions {
    std::size_t epochs = 1;
    std::size_t batch_size = 50;
    float momentum = 0.9f;
    double mu = 0.0;
    double alpha = 0.01;
};

struct LocalResult {
    ParamVector params;
    double mean_loss = 0.0;
    std::size_t num_samples = 0;
};

/// Uniform sample without replacement of max(floor(N f), 1) ids, ascending.
std::vector<std::size_t> sample_clients(std::size_t num_clients, double fraction, Rng& rng);

/// tau epochs of ceil(n/B) minibatch steps from start, following alg.rule.
LocalResult local_update(const Architecture& arch, const ClientData& client, const ParamVector& start,
                         const AlgorithmSpec& alg, const LocalOptions& opts, const StepSchedule& sched, Rng& rng);

/// Ditto personal track: minimizes local loss + (lambda/2)||v - global||^2 from the personal model v.
LocalResult ditto_update(const Architecture& arch, const ClientData& client, const ParamVector& global,
                         const ParamVector& personal, double lambda, const LocalOptions& opts,
                         const StepSchedule& sched, Rng& rng);

using GradientFn = std::function<ParamVector(const ParamVector&)>;

/// First-order MAML update: adapted = params - alpha * support(params), then a
/// momentum-SGD step on params with gradient query(adapted) and rate beta.
void fo_maml_step(ParamVector& params, const GradientFn& support_grad, const GradientFn& query_grad, double alpha,
                  double beta, OptState& opt, const ParamMask& mask);

/// Per-FedAvg (first order). Each shuffled minibatch is halved by position
/// into support and query sets; beta follows sched.
LocalResult perfedavg_fo_update(const Architecture& arch, const ClientData& client, const ParamVector& start,
                                const LocalOptions& opts, const StepSchedule& sched, Rng& rng);

struct WeightedParams {
    std::size_t client_id = 0;
    std::reference_wrapper<const ParamVector> params;
    std::size_t num_samples = 0;
};

/// Sample-weighted average of the masked-in segments, accumulated in
/// ascending client-id order; masked-out segments are copied from previous.
ParamVector aggregate(std::span<const WeightedParams> updates, const ParamVector& previous, const ParamMask& mask);

/// One epoch of SGD on the server's shared pool, updating only part.
ParamVector server_side_update(const Architecture& arch, const ParamVector& global, const ClientData& pool,
                               Part part, double lr, std::size_t batch_size, float momentum, Rng& rng);

struct RoundLog {
    std::size_t round = 0;  // 1-based
    std::vector<std::size_t> clients;
    double mean_loss = 0.0;
    double lr = 0.0;
    double wall_seconds = 0.0;
};

struct FederationState {
    std::size_t round = 0;  // rounds completed
    ParamVector initial_global;
    ParamVector global;
    std::vector<std::optional<ParamVector>> personal;  // only for persistent algorithms
};

/// The round loop: sample, broadcast, local update, aggregate, and optionally
/// a server-side update on a shared pool.
class Federation {
public:
    Federation(const Architecture& arch, FLConfig cfg, const LabeledDataset& train, std::vector<ClientSplit> splits);

    const FLConfig& config() const { return cfg_; }
    const AlgorithmSpec& spec() const { return spec_; }
    const Architecture& architecture() const { return arch_; }
    const LRSchedule& schedule() const { return schedule_; }
    std::size_t ref_iters() const { return ref_iters_; }
    const std::vector<std::size_t>& server_pool() const { return server_pool_; }

    /// K rounds, plus a quarter of K for the LG-FedAvg head phase.
    std::size_t total_rounds() const;

    FederationState initial_state() const;
    RoundLog run_round(FederationState& state) const;
    /// Runs rounds until state.round == min(stop_after, total_rounds()).
    std::vector<RoundLog> run(FederationState& state,
                              std::size_t stop_after = std::numeric_limits<std::size_t>::max()) const;

    /// Model a client starts personalization from: the global shared parts
    /// over its own persistent parts (or the global model if it has none).
    ParamVector client_model(const FederationState& state, std::size_t client) const;
    std::vector<ParamVector> client_models(const FederationState& state) const;

    /// Called once per local update, in ascending client order, after the
    /// round's local phase (round is 1-based). Ditto reports its global track.
    using LocalObserver = std::function<void(std::size_t round, std::size_t client, const LocalResult& result)>;
    void set_local_observer(LocalObserver observer) { observer_ = std::move(observer); }

private:
    AlgorithmSpec spec_for_round(std::size_t round) const;
    StepSchedule step_schedule(std::size_t round) const;
    ClientData client_data(std::size_t client) const;

    const Architecture& arch_;
    FLConfig cfg_;
    AlgorithmSpec spec_;
    const LabeledDataset& train_;
    std::vector<ClientSplit> splits_;
    std::size_t ref_iters_ = 1;
    LRSchedule schedule_;
    std::vector<std::size_t> server_pool_;
    LocalObserver observer_;
};

std::pair<FederationState, std::vector<RoundLog>> run_federation(const Architecture& arch, const FLConfig& cfg,
                                                                  const LabeledDataset& train,
                                                                  const std::vector<ClientSplit>& splits);

}  // namespace fedsim
