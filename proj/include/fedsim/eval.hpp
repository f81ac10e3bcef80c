#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/fl.hpp"
#include "fedsim/network.hpp"
#include "fedsim/params.hpp"

namespace fedsim {

/// Per-client accuracies in percent. Absent entries (clients with nothing to
/// evaluate) are excluded from mean and std; std is the population std.
struct EvalReport {
    std::vector<std::optional<double>> accuracy;
    double mean = 0.0;
    double std = 0.0;
    std::size_t tau_f = 0;
    Part part = Part::None;

    static EvalReport from(std::vector<std::optional<double>> accuracy, std::size_t tau_f = 0,
                           Part part = Part::None);
    std::size_t counted() const;
};

/// Everything evaluation reads. Splits carry the per-client test indices
/// (matched or global mode).
struct EvalContext {
    const Architecture& arch;
    const LabeledDataset& train;
    const LabeledDataset& test;
    const std::vector<ClientSplit>& splits;
    std::size_t batch_size = 50;
    std::size_t jobs = 1;
};

struct FinetuneOptions {
    Part part = Part::Full;
    std::size_t epochs = 0;  // tau_f
    double lr = 0.001;
    float momentum = 0.9f;
    std::size_t batch_size = 50;
    bool sequential = false;  // head for tau_f epochs, then body for one epoch
    std::uint64_t seed = 0;
};

/// Percent of the given samples the model classifies correctly.
double accuracy(const Architecture& arch, const ParamVector& params, const LabeledDataset& ds,
                std::span<const std::size_t> indices);

/// Accuracy of models[c] on client c's test split. Throws on an empty test split.
EvalReport initial_accuracy(const EvalContext& ctx, const std::vector<ParamVector>& models);

/// tau_f epochs of SGD on the client's train split touching only opts.part.
/// tau_f = 0 returns the model unchanged.
ParamVector fine_tune(const Architecture& arch, const ParamVector& model, const ClientData& client,
                      const FinetuneOptions& opts, std::size_t client_id);

std::vector<ParamVector> fine_tune_all(const EvalContext& ctx, const std::vector<ParamVector>& models,
                                       const FinetuneOptions& opts);

EvalReport personalized_accuracy(const EvalContext& ctx, const std::vector<ParamVector>& models,
                                 const FinetuneOptions& opts);

/// Per-class mean head inputs over the given train samples. Classes without
/// samples have no template.
std::vector<std::optional<std::vector<double>>> build_templates(const Architecture& arch, const ParamVector& params,
                                                                const LabeledDataset& ds,
                                                                std::span<const std::size_t> indices);

/// Class of the template with the largest cosine to each sample's
/// representation. Zero templates never win; ties go to the lowest class.
/// Throws when there is no template.
std::vector<int> template_predict(const Architecture& arch, const ParamVector& params,
                                  const std::vector<std::optional<std::vector<double>>>& templates,
                                  const LabeledDataset& ds, std::span<const std::size_t> indices);

/// Accuracy without the head: nearest template built from the client's own
/// train split.
EvalReport template_accuracy(const EvalContext& ctx, const std::vector<ParamVector>& models);

/// Accuracy over test samples whose class the client trains on (first) and
/// over the rest (second). Empty subsets are absent.
std::pair<EvalReport, EvalReport> in_out_class_accuracy(const EvalContext& ctx,
                                                        const std::vector<ParamVector>& models);

/// Per layer segment: mean cosine over all model pairs. A segment with a
/// zero-norm copy yields nullopt. Needs at least two models.
std::vector<std::optional<double>> interclient_cosine(const std::vector<ParamVector>& models);

struct CentralizedOptions {
    Part part = Part::Full;
    std::size_t epochs = 10;
    std::size_t batch_size = 50;
    double base_lr = 0.1;
    float momentum = 0.9f;
    std::uint64_t seed = 0;
};

struct CentralizedResult {
    std::vector<double> test_accuracy;  // after each epoch, percent
    ParamVector params;
};

/// Pooled (non-federated) training of opts.part with the step-decay schedule.
CentralizedResult centralized_train(const Architecture& arch, const ParamVector& init, const LabeledDataset& train,
                                    const LabeledDataset& test, const CentralizedOptions& opts);

}  // namespace fedsim
