#include "fedsim/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "fedsim/parallel.hpp"
#include "fedsim/training.hpp"

namespace fedsim {

namespace {

constexpr std::uint64_t kFinetuneStream = 31;
constexpr std::uint64_t kCentralStream = 32;
constexpr std::size_t kEvalChunk = 512;

void check_models(const EvalContext& ctx, const std::vector<ParamVector>& models) {
    if (models.size() != ctx.splits.size())
        throw std::invalid_argument("evaluation: " + std::to_string(models.size()) + " models for " +
                                    std::to_string(ctx.splits.size()) + " clients");
}

/// Applies f to consecutive chunks of the selected samples.
template <typename F>
void for_chunks(const LabeledDataset& ds, std::span<const std::size_t> indices, F&& f) {
    for (std::size_t lo = 0; lo < indices.size(); lo += kEvalChunk) {
        const auto idx = indices.subspan(lo, std::min(kEvalChunk, indices.size() - lo));
        f(idx, ds.gather(idx));
    }
}

std::vector<bool> train_classes(const LabeledDataset& train, const ClientSplit& split) {
    std::vector<bool> present(static_cast<std::size_t>(train.num_classes), false);
    for (std::size_t i : split.train_indices) present[static_cast<std::size_t>(train.labels[i])] = true;
    return present;
}

}  // namespace

EvalReport EvalReport::from(std::vector<std::optional<double>> acc, std::size_t tau_f, Part part) {
    EvalReport r;
    r.accuracy = std::move(acc);
    r.tau_f = tau_f;
    r.part = part;
    double sum = 0;
    std::size_t n = 0;
    for (const auto& a : r.accuracy)
        if (a) sum += *a, ++n;
    if (n == 0) return r;
    r.mean = sum / double(n);
    double sq = 0;
    for (const auto& a : r.accuracy)
        if (a) sq += (*a - r.mean) * (*a - r.mean);
    r.std = std::sqrt(sq / double(n));
    return r;
}

std::size_t EvalReport::counted() const {
    return static_cast<std::size_t>(std::count_if(accuracy.begin(), accuracy.end(), [](const auto& a) { return a.has_value(); }));
}

double accuracy(const Architecture& arch, const ParamVector& params, const LabeledDataset& ds,
                std::span<const std::size_t> indices) {
    if (indices.empty()) throw std::invalid_argument("accuracy: no samples to evaluate");
    std::size_t correct = 0;
    for_chunks(ds, indices, [&](std::span<const std::size_t> idx, const Tensor& x) {
        const Tensor logits = arch.forward(params, x);
        for (std::size_t i = 0; i < idx.size(); ++i)
            if (static_cast<int>(argmax(logits.row(i))) == ds.labels[idx[i]]) ++correct;
    });
    return 100.0 * double(correct) / double(indices.size());
}

EvalReport initial_accuracy(const EvalContext& ctx, const std::vector<ParamVector>& models) {
    check_models(ctx, models);
    std::vector<std::optional<double>> acc(models.size());
    parallel_for(models.size(), ctx.jobs, [&](std::size_t c) {
        if (ctx.splits[c].test_indices.empty())
            throw std::invalid_argument("evaluation: client " + std::to_string(c) + " has an empty test split");
        acc[c] = accuracy(ctx.arch, models[c], ctx.test, ctx.splits[c].test_indices);
    });
    return EvalReport::from(std::move(acc));
}

ParamVector fine_tune(const Architecture& arch, const ParamVector& model, const ClientData& client,
                      const FinetuneOptions& opts, std::size_t client_id) {
    ParamVector params = model;
    if (opts.epochs == 0) return params;
    OptState opt(params, opts.momentum);
    Rng rng(derive_seed(opts.seed, {kFinetuneStream, client_id}));
    const StepSchedule sched = StepSchedule::fixed(opts.lr);
    const ParamMask part = arch.mask(opts.part);
    if (!opts.sequential) {
        train_epochs(arch, params, opt, client, opts.epochs, opts.batch_size, part, sched, rng);
        return params;
    }
    const ParamMask head = arch.mask(Part::Head);
    ParamMask head_part = ParamMask::none(part.num_segments());
    ParamMask body_part = ParamMask::none(part.num_segments());
    for (std::size_t s = 0; s < part.num_segments(); ++s) {
        head_part.include[s] = part[s] && head[s];
        body_part.include[s] = part[s] && !head[s];
    }
    train_epochs(arch, params, opt, client, opts.epochs, opts.batch_size, head_part, sched, rng);
    train_epochs(arch, params, opt, client, 1, opts.batch_size, body_part, sched, rng);
    return params;
}

std::vector<ParamVector> fine_tune_all(const EvalContext& ctx, const std::vector<ParamVector>& models,
                                       const FinetuneOptions& opts) {
    check_models(ctx, models);
    std::vector<ParamVector> out(models.size());
    parallel_for(models.size(), ctx.jobs, [&](std::size_t c) {
        out[c] = fine_tune(ctx.arch, models[c], ClientData{&ctx.train, ctx.splits[c].train_indices}, opts, c);
    });
    return out;
}

EvalReport personalized_accuracy(const EvalContext& ctx, const std::vector<ParamVector>& models,
                                 const FinetuneOptions& opts) {
    EvalReport r = initial_accuracy(ctx, fine_tune_all(ctx, models, opts));
    r.tau_f = opts.epochs;
    r.part = opts.part;
    return r;
}

std::vector<std::optional<std::vector<double>>> build_templates(const Architecture& arch, const ParamVector& params,
                                                                const LabeledDataset& ds,
                                                                std::span<const std::size_t> indices) {
    const std::size_t d = arch.representation_dim();
    const auto classes = static_cast<std::size_t>(ds.num_classes);
    std::vector<std::vector<double>> sums(classes, std::vector<double>(d, 0.0));
    std::vector<std::size_t> counts(classes, 0);
    for_chunks(ds, indices, [&](std::span<const std::size_t> idx, const Tensor& x) {
        const Tensor rep = arch.representation(params, x);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto y = static_cast<std::size_t>(ds.labels[idx[i]]);
            const auto row = rep.row(i);
            for (std::size_t j = 0; j < d; ++j) sums[y][j] += row[j];
            ++counts[y];
        }
    });
    std::vector<std::optional<std::vector<double>>> templates(classes);
    for (std::size_t c = 0; c < classes; ++c) {
        if (counts[c] == 0) continue;
        for (double& v : sums[c]) v /= double(counts[c]);
        templates[c] = std::move(sums[c]);
    }
    return templates;
}

std::vector<int> template_predict(const Architecture& arch, const ParamVector& params,
                                  const std::vector<std::optional<std::vector<double>>>& templates,
                                  const LabeledDataset& ds, std::span<const std::size_t> indices) {
    std::vector<double> norms(templates.size(), 0.0);
    bool any = false;
    for (std::size_t c = 0; c < templates.size(); ++c) {
        if (!templates[c]) continue;
        any = true;
        double sq = 0;
        for (double v : *templates[c]) sq += v * v;
        norms[c] = std::sqrt(sq);
    }
    if (!any) throw std::invalid_argument("template_predict: the client has no templates");

    std::vector<int> predictions;
    predictions.reserve(indices.size());
    for_chunks(ds, indices, [&](std::span<const std::size_t> idx, const Tensor& x) {
        const Tensor rep = arch.representation(params, x);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const auto row = rep.row(i);
            double rnorm = 0;
            for (float v : row) rnorm += double(v) * double(v);
            rnorm = std::sqrt(rnorm);
            int best = -1;
            double best_cos = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < templates.size(); ++c) {
                if (!templates[c]) continue;
                double cos = -std::numeric_limits<double>::infinity();
                if (norms[c] > 0) {
                    double dot = 0;
                    for (std::size_t j = 0; j < row.size(); ++j) dot += double(row[j]) * (*templates[c])[j];
                    // A zero representation is equally close to every nonzero template.
                    cos = rnorm > 0 ? dot / (rnorm * norms[c]) : 0.0;
                }
                if (best < 0 || cos > best_cos) {
                    best = static_cast<int>(c);
                    best_cos = cos;
                }
            }
            predictions.push_back(best);
        }
    });
    return predictions;
}

EvalReport template_accuracy(const EvalContext& ctx, const std::vector<ParamVector>& models) {
    check_models(ctx, models);
    std::vector<std::optional<double>> acc(models.size());
    parallel_for(models.size(), ctx.jobs, [&](std::size_t c) {
        const ClientSplit& split = ctx.splits[c];
        if (split.test_indices.empty())
            throw std::invalid_argument("evaluation: client " + std::to_string(c) + " has an empty test split");
        const auto templates = build_templates(ctx.arch, models[c], ctx.train, split.train_indices);
        const auto pred = template_predict(ctx.arch, models[c], templates, ctx.test, split.test_indices);
        std::size_t correct = 0;
        for (std::size_t i = 0; i < pred.size(); ++i)
            if (pred[i] == ctx.test.labels[split.test_indices[i]]) ++correct;
        acc[c] = 100.0 * double(correct) / double(pred.size());
    });
    return EvalReport::from(std::move(acc));
}

std::pair<EvalReport, EvalReport> in_out_class_accuracy(const EvalContext& ctx,
                                                        const std::vector<ParamVector>& models) {
    check_models(ctx, models);
    std::vector<std::optional<double>> in(models.size()), out(models.size());
    parallel_for(models.size(), ctx.jobs, [&](std::size_t c) {
        const ClientSplit& split = ctx.splits[c];
        const auto present = train_classes(ctx.train, split);
        std::vector<std::size_t> in_idx, out_idx;
        for (std::size_t i : split.test_indices) {
            const auto y = static_cast<std::size_t>(ctx.test.labels[i]);
            (y < present.size() && present[y] ? in_idx : out_idx).push_back(i);
        }
        if (!in_idx.empty()) in[c] = accuracy(ctx.arch, models[c], ctx.test, in_idx);
        if (!out_idx.empty()) out[c] = accuracy(ctx.arch, models[c], ctx.test, out_idx);
    });
    return {EvalReport::from(std::move(in)), EvalReport::from(std::move(out))};
}

std::vector<std::optional<double>> interclient_cosine(const std::vector<ParamVector>& models) {
    if (models.size() < 2) throw std::invalid_argument("interclient_cosine: needs at least two models");
    const std::size_t segments = models[0].num_segments();
    for (const auto& m : models)
        if (!m.same_layout(models[0])) throw std::invalid_argument("interclient_cosine: segmentation mismatch");
    std::vector<double> sum(segments, 0.0);
    std::vector<bool> valid(segments, true);
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < models.size(); ++a)
        for (std::size_t b = a + 1; b < models.size(); ++b, ++pairs) {
            const auto cos = layer_cosine_similarity(models[a], models[b]);
            for (std::size_t s = 0; s < segments; ++s) {
                if (cos[s]) sum[s] += *cos[s];
                else valid[s] = false;
            }
        }
    std::vector<std::optional<double>> out(segments);
    for (std::size_t s = 0; s < segments; ++s)
        if (valid[s]) out[s] = sum[s] / double(pairs);
    return out;
}

CentralizedResult centralized_train(const Architecture& arch, const ParamVector& init, const LabeledDataset& train,
                                    const LabeledDataset& test, const CentralizedOptions& opts) {
    if (train.size() == 0 || test.size() == 0) throw std::invalid_argument("centralized_train: empty dataset");
    if (opts.batch_size == 0) throw std::invalid_argument("centralized_train: batch size must be at least 1");
    std::vector<std::size_t> train_idx(train.size()), test_idx(test.size());
    std::iota(train_idx.begin(), train_idx.end(), 0);
    std::iota(test_idx.begin(), test_idx.end(), 0);
    const std::size_t iters = (train.size() + opts.batch_size - 1) / opts.batch_size;
    const StepSchedule sched{LRSchedule{opts.base_lr, opts.epochs * iters, 0.1}, 0, iters, std::nullopt};

    CentralizedResult result{{}, init};
    OptState opt(init, opts.momentum);
    Rng rng(derive_seed(opts.seed, {kCentralStream}));
    const ParamMask mask = arch.mask(opts.part);
    const ClientData data{&train, train_idx};
    for (std::size_t e = 0; e < opts.epochs; ++e) {
        // The optimizer state carries across epochs: this is one continuous run.
        train_epochs(arch, result.params, opt, data, 1, opts.batch_size, mask, sched, rng, std::nullopt, e);
        if (!all_finite(result.params))
            throw NumericError(e + 1, std::nullopt, "non-finite parameters in centralized training");
        result.test_accuracy.push_back(accuracy(arch, result.params, test, test_idx));
    }
    return result;
}

}  // namespace fedsim
