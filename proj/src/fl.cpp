#include "fedsim/fl.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "fedsim/log.hpp"
#include "fedsim/parallel.hpp"
#include "fedsim/training.hpp"

namespace fedsim {

namespace {
constexpr std::uint64_t kSamplingStream = 21;
constexpr std::uint64_t kLocalStream = 22;
constexpr std::uint64_t kDittoStream = 23;
constexpr std::uint64_t kServerStream = 24;
constexpr std::uint64_t kPoolStream = 25;
}  // namespace

std::string_view to_string(Algorithm alg) {
    switch (alg) {
        case Algorithm::FedAvg: return "fedavg";
        case Algorithm::FedBABU: return "fedbabu";
        case Algorithm::FedProx: return "fedprox";
        case Algorithm::FedProxBABU: return "fedprox_babu";
        case Algorithm::FedPer: return "fedper";
        case Algorithm::LGFedAvg: return "lg_fedavg";
        case Algorithm::FedRep: return "fedrep";
        case Algorithm::Ditto: return "ditto";
        case Algorithm::PerFedAvg: return "perfedavg";
        case Algorithm::LocalOnly: return "local_only";
    }
    return "?";
}

Algorithm algorithm_from_string(std::string_view name) {
    for (Algorithm a : {Algorithm::FedAvg, Algorithm::FedBABU, Algorithm::FedProx, Algorithm::FedProxBABU,
                        Algorithm::FedPer, Algorithm::LGFedAvg, Algorithm::FedRep, Algorithm::Ditto,
                        Algorithm::PerFedAvg, Algorithm::LocalOnly})
        if (to_string(a) == name) return a;
    throw std::invalid_argument("unknown algorithm '" + std::string(name) + "'");
}

AlgorithmSpec algorithm_spec(Algorithm alg) {
    switch (alg) {
        case Algorithm::FedAvg: return {Part::Full, Part::Full, LocalRule::Joint, Part::Full, false, false};
        case Algorithm::FedBABU: return {Part::Body, Part::Body, LocalRule::Joint, Part::Full, false, false};
        case Algorithm::FedProx: return {Part::Full, Part::Full, LocalRule::Proximal, Part::Full, false, false};
        case Algorithm::FedProxBABU: return {Part::Body, Part::Body, LocalRule::Proximal, Part::Full, false, false};
        case Algorithm::FedPer: return {Part::Full, Part::Body, LocalRule::Joint, Part::Body, true, false};
        case Algorithm::LGFedAvg: return {Part::Full, Part::Head, LocalRule::Joint, Part::Head, true, false};
        case Algorithm::FedRep:
            return {Part::Full, Part::Body, LocalRule::SequentialHeadThenBody, Part::Body, true, false};
        case Algorithm::Ditto: return {Part::Full, Part::Full, LocalRule::Ditto, Part::None, true, false};
        case Algorithm::PerFedAvg: return {Part::Full, Part::Full, LocalRule::PerFedAvgFO, Part::Full, false, false};
        case Algorithm::LocalOnly: return {Part::Full, Part::None, LocalRule::Joint, Part::None, true, true};
    }
    throw std::invalid_argument("algorithm_spec: unknown algorithm");
}

void FLConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("FL config: " + m); };
    if (num_clients == 0) fail("N must be at least 1");
    if (!(fraction > 0.0 && fraction <= 1.0)) fail("fraction f must lie in (0, 1]");
    if (rounds == 0) fail("rounds K must be at least 1");
    if (batch_size == 0) fail("batch size B must be at least 1");
    if (mu < 0) fail("mu must be non-negative");
    if (ditto_lambda < 0) fail("lambda must be non-negative");
    if (perfedavg_alpha < 0) fail("Per-FedAvg alpha must be non-negative");
    if (!(server_share >= 0.0 && server_share < 1.0)) fail("server share p must lie in [0, 1)");
    if (!(base_lr > 0)) fail("base learning rate must be positive");
    if (!(momentum >= 0.0f && momentum < 1.0f)) fail("momentum must lie in [0, 1)");
    if (lg_lr < 0) fail("LG-FedAvg learning rate must be non-negative");
    if (server_update_part == Part::None) fail("server update part must be full, body or head");
}

NumericError::NumericError(std::size_t r, std::optional<std::size_t> c, const std::string& what)
    : std::runtime_error("round " + std::to_string(r) + (c ? " client " + std::to_string(*c) : std::string()) +
                         ": " + what),
      round(r),
      client(c) {}

double StepSchedule::lr(std::size_t epoch, std::size_t iter, std::size_t iters) const {
    if (constant) return *constant;
    const std::size_t within = iters == 0 ? 0 : iter * ref_iters / iters;
    return schedule.at(offset + epoch * ref_iters + within);
}

std::vector<std::size_t> sample_clients(std::size_t num_clients, double fraction, Rng& rng) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("sample_clients: f must lie in (0, 1]");
    const auto floor_nf = static_cast<std::size_t>(std::floor(double(num_clients) * fraction));
    const std::size_t m = std::min(num_clients, std::max<std::size_t>(floor_nf, 1));
    std::vector<std::size_t> ids(num_clients);
    std::iota(ids.begin(), ids.end(), 0);
    for (std::size_t k = 0; k < m; ++k) {
        const std::size_t j = k + static_cast<std::size_t>(rng.below(num_clients - k));
        std::swap(ids[k], ids[j]);
    }
    ids.resize(m);
    std::sort(ids.begin(), ids.end());
    return ids;
}

LocalResult local_update(const Architecture& arch, const ClientData& client, const ParamVector& start,
                         const AlgorithmSpec& alg, const LocalOptions& opts, const StepSchedule& sched, Rng& rng) {
    if (client.size() == 0) throw std::invalid_argument("local_update: client has no training data");
    if (alg.rule == LocalRule::PerFedAvgFO) return perfedavg_fo_update(arch, client, start, opts, sched, rng);

    LocalResult result{start, 0.0, client.size()};
    if (opts.epochs == 0) return result;

    OptState opt(start, opts.momentum);
    const ParamMask update = arch.mask(alg.update);
    EpochStats stats;
    switch (alg.rule) {
        case LocalRule::SequentialHeadThenBody: {
            const ParamMask head = arch.mask(Part::Head);
            ParamMask head_only = ParamMask::none(update.num_segments());
            ParamMask body_only = ParamMask::none(update.num_segments());
            for (std::size_t s = 0; s < update.num_segments(); ++s) {
                head_only.include[s] = update[s] && head[s];
                body_only.include[s] = update[s] && !head[s];
            }
            stats = train_epochs(arch, result.params, opt, client, opts.epochs, opts.batch_size, head_only, sched, rng);
            const EpochStats body = train_epochs(arch, result.params, opt, client, 1, opts.batch_size, body_only,
                                                 sched, rng, std::nullopt, opts.epochs - 1);
            stats.loss_sum += body.loss_sum;
            stats.samples += body.samples;
            break;
        }
        case LocalRule::Proximal:
            stats = train_epochs(arch, result.params, opt, client, opts.epochs, opts.batch_size, update, sched, rng,
                                 ProximalTerm{opts.mu, std::cref(start)});
            break;
        default:
            stats = train_epochs(arch, result.params, opt, client, opts.epochs, opts.batch_size, update, sched, rng);
            break;
    }
    result.mean_loss = stats.mean();
    return result;
}

LocalResult ditto_update(const Architecture& arch, const ClientData& client, const ParamVector& global,
                         const ParamVector& personal, double lambda, const LocalOptions& opts,
                         const StepSchedule& sched, Rng& rng) {
    if (lambda < 0) throw std::invalid_argument("ditto_update: lambda must be non-negative");
    if (client.size() == 0) throw std::invalid_argument("ditto_update: client has no training data");
    LocalResult result{personal, 0.0, client.size()};
    if (opts.epochs == 0) return result;
    OptState opt(personal, opts.momentum);
    // d/dv (lambda/2)||v - global||^2 = lambda (v - global): the proximal term with the global anchor.
    const EpochStats stats = train_epochs(arch, result.params, opt, client, opts.epochs, opts.batch_size,
                                          arch.mask(Part::Full), sched, rng, ProximalTerm{lambda, std::cref(global)});
    result.mean_loss = stats.mean();
    return result;
}

void fo_maml_step(ParamVector& params, const GradientFn& support_grad, const GradientFn& query_grad, double alpha,
                  double beta, OptState& opt, const ParamMask& mask) {
    ParamVector adapted = params;
    const ParamVector g_support = support_grad(params);
    const float a = static_cast<float>(alpha);
    for (std::size_t s = 0; s < params.num_segments(); ++s) {
        if (!mask[s]) continue;
        auto p = adapted.segment(s);
        auto g = g_support.segment(s);
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= a * g[i];
    }
    const ParamVector g_query = query_grad(adapted);
    sgd_step(params, g_query, opt, beta, mask);
}

LocalResult perfedavg_fo_update(const Architecture& arch, const ClientData& client, const ParamVector& start,
                                const LocalOptions& opts, const StepSchedule& sched, Rng& rng) {
    if (opts.batch_size < 2 || client.size() < 2)
        throw std::invalid_argument("perfedavg_fo_update: a batch of one sample cannot be split into support and query");
    LocalResult result{start, 0.0, client.size()};
    if (opts.epochs == 0) return result;

    OptState opt(start, opts.momentum);
    const ParamMask full = arch.mask(Part::Full);
    std::vector<std::size_t> order(client.indices.begin(), client.indices.end());
    const std::size_t iters = (order.size() + opts.batch_size - 1) / opts.batch_size;
    double loss_sum = 0;
    std::size_t counted = 0;
    for (std::size_t e = 0; e < opts.epochs; ++e) {
        rng.shuffle(std::span(order));
        for (std::size_t it = 0; it < iters; ++it) {
            const std::size_t lo = it * opts.batch_size;
            const std::size_t hi = std::min(order.size(), lo + opts.batch_size);
            if (hi - lo < 2) continue;  // a trailing single sample cannot be split
            const std::size_t mid = lo + (hi - lo) / 2;
            const std::span<const std::size_t> support(order.data() + lo, mid - lo);
            const std::span<const std::size_t> query(order.data() + mid, hi - mid);
            const Tensor xs = client.data->gather(support);
            const auto ys = client.data->gather_labels(support);
            const Tensor xq = client.data->gather(query);
            const auto yq = client.data->gather_labels(query);
            double query_loss = 0;
            fo_maml_step(
                result.params, [&](const ParamVector& p) { return arch.loss_and_grad(p, xs, ys).grads; },
                [&](const ParamVector& p) {
                    auto lg = arch.loss_and_grad(p, xq, yq);
                    query_loss = lg.loss;
                    return std::move(lg.grads);
                },
                opts.alpha, sched.lr(e, it, iters), opt, full);
            loss_sum += query_loss * double(query.size());
            counted += query.size();
        }
    }
    result.mean_loss = counted ? loss_sum / double(counted) : 0.0;
    return result;
}

ParamVector aggregate(std::span<const WeightedParams> updates, const ParamVector& previous, const ParamMask& mask) {
    if (updates.empty()) throw std::invalid_argument("aggregate: no client updates");
    if (mask.num_segments() != previous.num_segments()) throw std::invalid_argument("aggregate: mask layout mismatch");
    std::vector<const WeightedParams*> ordered;
    std::size_t total = 0;
    for (const auto& u : updates) {
        if (!u.params.get().same_layout(previous)) throw std::invalid_argument("aggregate: segmentation mismatch");
        ordered.push_back(&u);
        total += u.num_samples;
    }
    if (total == 0) throw std::invalid_argument("aggregate: total sample count is zero");
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const WeightedParams* a, const WeightedParams* b) { return a->client_id < b->client_id; });

    ParamVector out = previous;
    std::vector<double> acc;
    for (std::size_t s = 0; s < out.num_segments(); ++s) {
        if (!mask[s]) continue;
        acc.assign(out.segment_size(s), 0.0);
        for (const WeightedParams* u : ordered) {
            const double w = double(u->num_samples) / double(total);
            auto src = u->params.get().segment(s);
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * double(src[i]);
        }
        auto dst = out.segment(s);
        for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = static_cast<float>(acc[i]);
    }
    return out;
}

ParamVector server_side_update(const Architecture& arch, const ParamVector& global, const ClientData& pool, Part part,
                               double lr, std::size_t batch_size, float momentum, Rng& rng) {
    if (pool.size() == 0) throw std::invalid_argument("server_side_update: empty shared pool");
    ParamVector params = global;
    OptState opt(global, momentum);
    train_epochs(arch, params, opt, pool, 1, batch_size, arch.mask(part), StepSchedule::fixed(lr), rng);
    return params;
}

Federation::Federation(const Architecture& arch, FLConfig cfg, const LabeledDataset& train,
                       std::vector<ClientSplit> splits)
    : arch_(arch), cfg_(std::move(cfg)), spec_(algorithm_spec(cfg_.algorithm)), train_(train),
      splits_(std::move(splits)) {
    cfg_.validate();
    if (splits_.size() != cfg_.num_clients)
        throw std::invalid_argument("federation: " + std::to_string(splits_.size()) + " client splits for N = " +
                                    std::to_string(cfg_.num_clients));
    std::size_t max_n = 0;
    for (std::size_t c = 0; c < splits_.size(); ++c) {
        if (splits_[c].train_indices.empty())
            throw std::invalid_argument("federation: client " + std::to_string(c) + " has no training data");
        max_n = std::max(max_n, splits_[c].train_indices.size());
    }
    if (train_.num_classes != static_cast<int>(arch_.num_classes()))
        throw std::invalid_argument("federation: dataset has " + std::to_string(train_.num_classes) +
                                    " classes but the head outputs " + std::to_string(arch_.num_classes()));
    ref_iters_ = (max_n + cfg_.batch_size - 1) / cfg_.batch_size;
    schedule_ = LRSchedule{cfg_.base_lr, cfg_.rounds * cfg_.local_epochs * ref_iters_, 0.1};

    if (cfg_.server_share > 0) {
        std::vector<std::size_t> all;
        for (const auto& s : splits_) all.insert(all.end(), s.train_indices.begin(), s.train_indices.end());
        std::sort(all.begin(), all.end());
        const auto take = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::floor(cfg_.server_share * double(all.size()))));
        Rng rng(derive_seed(cfg_.seed, {kPoolStream}));
        for (std::size_t k = 0; k < take; ++k) {
            const std::size_t j = k + static_cast<std::size_t>(rng.below(all.size() - k));
            std::swap(all[k], all[j]);
        }
        all.resize(take);
        std::sort(all.begin(), all.end());
        server_pool_ = std::move(all);
    }
}

std::size_t Federation::total_rounds() const {
    if (cfg_.algorithm == Algorithm::LGFedAvg) return cfg_.rounds + std::max<std::size_t>(1, cfg_.rounds / 4);
    return cfg_.rounds;
}

AlgorithmSpec Federation::spec_for_round(std::size_t round) const {
    // LG-FedAvg starts from a FedAvg model trained for the full budget.
    if (cfg_.algorithm == Algorithm::LGFedAvg && round < cfg_.rounds) return algorithm_spec(Algorithm::FedAvg);
    return spec_;
}

StepSchedule Federation::step_schedule(std::size_t round) const {
    if (round >= cfg_.rounds) return StepSchedule::fixed(cfg_.lg_lr);
    return {schedule_, round * cfg_.local_epochs * ref_iters_, ref_iters_, std::nullopt};
}

ClientData Federation::client_data(std::size_t client) const {
    return {&train_, splits_[client].train_indices};
}

FederationState Federation::initial_state() const {
    FederationState state;
    state.initial_global = init_params(arch_, cfg_.init);
    state.global = state.initial_global;
    if (spec_.persistent) state.personal.assign(cfg_.num_clients, std::nullopt);
    return state;
}

namespace {

ParamVector assemble(const Architecture& arch, const FederationState& state, std::size_t client,
                     const AlgorithmSpec& spec) {
    if (!spec.persistent || client >= state.personal.size() || !state.personal[client]) return state.global;
    ParamVector model = *state.personal[client];
    copy_masked(model, state.global, arch.mask(spec.shared));
    return model;
}

}  // namespace

ParamVector Federation::client_model(const FederationState& state, std::size_t client) const {
    return assemble(arch_, state, client, spec_);
}

std::vector<ParamVector> Federation::client_models(const FederationState& state) const {
    std::vector<ParamVector> models;
    models.reserve(cfg_.num_clients);
    for (std::size_t c = 0; c < cfg_.num_clients; ++c) models.push_back(client_model(state, c));
    return models;
}

RoundLog Federation::run_round(FederationState& state) const {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t k = state.round;
    const AlgorithmSpec spec = spec_for_round(k);
    const StepSchedule sched = step_schedule(k);
    const LocalOptions opts{cfg_.local_epochs, cfg_.batch_size, cfg_.momentum, cfg_.mu, cfg_.perfedavg_alpha};

    std::vector<std::size_t> clients;
    if (spec.all_clients) {
        clients.resize(cfg_.num_clients);
        std::iota(clients.begin(), clients.end(), 0);
    } else {
        Rng sampler(derive_seed(cfg_.seed, {kSamplingStream, k}));
        clients = sample_clients(cfg_.num_clients, cfg_.fraction, sampler);
    }

    std::vector<LocalResult> results(clients.size());
    std::vector<LocalResult> personal_results(spec.rule == LocalRule::Ditto ? clients.size() : 0);
    parallel_for(clients.size(), cfg_.jobs, [&](std::size_t i) {
        const std::size_t c = clients[i];
        try {
            const ClientData data = client_data(c);
            Rng rng(derive_seed(cfg_.seed, {kLocalStream, k, c}));
            if (spec.rule == LocalRule::Ditto) {
                AlgorithmSpec global_track = algorithm_spec(Algorithm::FedAvg);
                results[i] = local_update(arch_, data, state.global, global_track, opts, sched, rng);
                const ParamVector& personal = state.personal[c] ? *state.personal[c] : state.global;
                Rng prng(derive_seed(cfg_.seed, {kDittoStream, k, c}));
                personal_results[i] =
                    ditto_update(arch_, data, state.global, personal, cfg_.ditto_lambda, opts, sched, prng);
            } else {
                results[i] = local_update(arch_, data, assemble(arch_, state, c, spec), spec, opts, sched, rng);
            }
        } catch (const NumericError&) {
            throw;
        } catch (const std::exception& e) {
            throw std::runtime_error("round " + std::to_string(k + 1) + " client " + std::to_string(c) + ": " +
                                     e.what());
        }
        const LocalResult& r = spec.rule == LocalRule::Ditto ? personal_results[i] : results[i];
        if (!std::isfinite(results[i].mean_loss) || !all_finite(results[i].params) || !std::isfinite(r.mean_loss) ||
            !all_finite(r.params))
            throw NumericError(k + 1, c, "non-finite loss or parameters after local update");
    });

    if (observer_)
        for (std::size_t i = 0; i < clients.size(); ++i) observer_(k + 1, clients[i], results[i]);

    std::vector<WeightedParams> updates;
    double loss_sum = 0;
    std::size_t samples = 0;
    for (std::size_t i = 0; i < clients.size(); ++i) {
        updates.push_back({clients[i], std::cref(results[i].params), results[i].num_samples});
        loss_sum += results[i].mean_loss * double(results[i].num_samples);
        samples += results[i].num_samples;
    }
    ParamVector next = aggregate(updates, state.global, arch_.mask(spec.aggregate));

    if (spec.persistent) {
        for (std::size_t i = 0; i < clients.size(); ++i)
            state.personal[clients[i]] =
                std::move(spec.rule == LocalRule::Ditto ? personal_results[i].params : results[i].params);
    }

    if (!server_pool_.empty() && k < cfg_.rounds) {
        Rng srng(derive_seed(cfg_.seed, {kServerStream, k}));
        const double lr = schedule_.at((k + 1) * cfg_.local_epochs * ref_iters_ - 1);
        next = server_side_update(arch_, next, ClientData{&train_, server_pool_}, cfg_.server_update_part, lr,
                                  cfg_.batch_size, cfg_.momentum, srng);
    }
    if (!all_finite(next)) throw NumericError(k + 1, std::nullopt, "non-finite global parameters after aggregation");

    state.global = std::move(next);
    state.round = k + 1;

    RoundLog log;
    log.round = k + 1;
    log.clients = std::move(clients);
    log.mean_loss = samples ? loss_sum / double(samples) : 0.0;
    log.lr = sched.lr(0, 0, 1);
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log_debug("round " + std::to_string(log.round) + " loss " + std::to_string(log.mean_loss));
    return log;
}

std::vector<RoundLog> Federation::run(FederationState& state, std::size_t stop_after) const {
    std::vector<RoundLog> logs;
    const std::size_t last = std::min(stop_after, total_rounds());
    while (state.round < last) logs.push_back(run_round(state));
    return logs;
}

std::pair<FederationState, std::vector<RoundLog>> run_federation(const Architecture& arch, const FLConfig& cfg,
                                                                  const LabeledDataset& train,
                                                                  const std::vector<ClientSplit>& splits) {
    Federation fed(arch, cfg, train, splits);
    FederationState state = fed.initial_state();
    auto logs = fed.run(state);
    return {std::move(state), std::move(logs)};
}

}  // namespace fedsim
