// Acceptance checks: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>

#include "fedsim/config.hpp"
#include "fedsim/eval.hpp"
#include "fedsim/experiment.hpp"
#include "fedsim/fl.hpp"
#include "fedsim/log.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"

using namespace fedsim;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool same_state(const FederationState& a, const FederationState& b) {
    if (a.round != b.round || !bit_equal(a.global, b.global) || a.personal.size() != b.personal.size()) return false;
    for (std::size_t c = 0; c < a.personal.size(); ++c) {
        if (a.personal[c].has_value() != b.personal[c].has_value()) return false;
        if (a.personal[c] && !bit_equal(*a.personal[c], *b.personal[c])) return false;
    }
    return true;
}

bool same_report(const EvalReport& a, const EvalReport& b) {
    if (a.accuracy.size() != b.accuracy.size()) return false;
    for (std::size_t i = 0; i < a.accuracy.size(); ++i) {
        if (a.accuracy[i].has_value() != b.accuracy[i].has_value()) return false;
        if (a.accuracy[i] && std::memcmp(&*a.accuracy[i], &*b.accuracy[i], sizeof(double)) != 0) return false;
    }
    return std::memcmp(&a.mean, &b.mean, sizeof(double)) == 0 && std::memcmp(&a.std, &b.std, sizeof(double)) == 0;
}

std::map<std::string, std::string> read_tree(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        std::ifstream in(e.path(), std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        files[fs::relative(e.path(), root).string()] = ss.str();
    }
    return files;
}

Outcome gradient_oracle() {
    const auto t0 = std::chrono::steady_clock::now();
    const Architecture arch({8}, {LayerSpec::dense(8, 16), LayerSpec::relu(), LayerSpec::dense(16, 12), LayerSpec::relu(),
                                  LayerSpec::dense(12, 5)});
    const auto r = gradcheck::run(arch, 100, 1, 4);
    const double secs = seconds_since(t0);
    return {r.probes == 100 && r.max_rel_err < 1e-3 && secs < 30.0,
            fmt("max rel err %.3g over %zu probes (%zu coords, %zu near kinks redrawn), %.1fs", r.max_rel_err, r.probes,
                r.coords, r.rejected, secs)};
}

Outcome head_freeze() {
    bool ok = true;
    std::size_t observed = 0, rounds = 0;
    for (std::uint64_t seed : {1, 2}) {
        const auto s = fixtures::make(10, 2, seed);
        FLConfig cfg = fixtures::config(Algorithm::FedBABU, 10, seed);
        cfg.rounds = 24;
        Federation fed(*s.arch, cfg, s.train, s.splits);
        const std::size_t head = s.arch->head_segment();
        FederationState st = fed.initial_state();
        fed.set_local_observer([&](std::size_t, std::size_t, const LocalResult& r) {
            ok = ok && bit_equal(r.params.segment(head), st.initial_global.segment(head));
            ++observed;
        });
        fed.run(st);
        rounds += st.round;
        ok = ok && st.round == 24 && bit_equal(st.global.segment(head), st.initial_global.segment(head));
        ok = ok && !bit_equal(st.global.segment(0), st.initial_global.segment(0));
    }
    return {ok, fmt("%zu rounds, %zu local outputs checked", rounds, observed)};
}

Outcome fedprox_reduction() {
    bool ok = true;
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto s = fixtures::make(10, 2, seed);
        FLConfig prox = fixtures::config(Algorithm::FedProx, 10, seed);
        prox.mu = 0.0;
        prox.rounds = 20;
        FLConfig avg = prox;
        avg.algorithm = Algorithm::FedAvg;
        auto [a, la] = run_federation(*s.arch, prox, s.train, s.splits);
        auto [b, lb] = run_federation(*s.arch, avg, s.train, s.splits);
        ok = ok && same_state(a, b) && la.size() == lb.size();
        for (std::size_t k = 0; ok && k < la.size(); ++k)
            ok = std::memcmp(&la[k].mean_loss, &lb[k].mean_loss, sizeof(double)) == 0 && la[k].clients == lb[k].clients;
    }
    return {ok, "3 seeds x 20 rounds, states and round losses compared bitwise"};
}

Outcome aggregation_algebra() {
    Rng rng(17);
    double worst = 0;
    bool copies = true;
    std::size_t scalars = 0;
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::size_t> layout(1 + rng.below(5));
        for (auto& n : layout) n = 1 + rng.below(40);
        ParamVector prev(layout);
        for (std::size_t i = 0; i < prev.size(); ++i) prev[i] = float(rng.normal() * 3);
        const std::size_t k = 1 + rng.below(12);
        std::vector<ParamVector> clients(k, ParamVector(layout));
        std::vector<WeightedParams> ups;
        for (std::size_t c = 0; c < k; ++c) {
            for (std::size_t i = 0; i < prev.size(); ++i) clients[c][i] = float(rng.normal() * 3);
            ups.push_back({c * 3 + rng.below(3), std::cref(clients[c]), 1 + rng.below(500)});
        }
        ParamMask mask{std::vector<bool>(layout.size())};
        for (std::size_t s = 0; s < layout.size(); ++s) mask.include[s] = rng.below(2) == 1;
        const ParamVector out = aggregate(ups, prev, mask);
        double total = 0;
        for (const auto& u : ups) total += double(u.num_samples);
        for (std::size_t s = 0; s < layout.size(); ++s) {
            if (!mask[s]) {
                copies = copies && bit_equal(out.segment(s), prev.segment(s));
                continue;
            }
            for (std::size_t i = 0; i < layout[s]; ++i) {
                double expect = 0;
                for (const auto& u : ups) expect += double(u.num_samples) * u.params.get().segment(s)[i];
                expect /= total;
                worst = std::max(worst, std::abs(double(out.segment(s)[i]) - expect));
                ++scalars;
            }
        }
    }
    return {worst <= 1e-6 && copies, fmt("max abs err %.3g over %zu scalars, masked-out copies %s", worst, scalars,
                                         copies ? "bitwise equal" : "DIFFER")};
}

Outcome partition_invariants() {
    bool ok = true;
    std::size_t checked = 0;
    const LabeledDataset ds = synthetic_gaussian(10, 100, 4, 0.1, 1);
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        for (std::size_t s : {1, 2, 5}) {
            const PartitionSpec spec{PartitionMode::Shard, 20, s, 0.5, seed};
            const auto splits = shard_partition(ds, spec);
            const std::size_t shard = ds.size() / (20 * s);
            std::vector<int> owner(ds.size(), -1);
            for (const auto& c : splits) {
                ok = ok && c.train_indices.size() == s * shard;
                for (std::size_t i : c.train_indices) {
                    ok = ok && owner[i] < 0;
                    owner[i] = int(c.client_id);
                }
                const auto h = label_histogram(ds, c.train_indices);
                ok = ok && std::count_if(h.begin(), h.end(), [](std::size_t n) { return n > 0; }) <= long(s);
                for (std::size_t n : h) ok = ok && n % shard == 0;
            }
            ok = ok && splits_to_json(shard_partition(ds, spec)) == splits_to_json(splits);
            ++checked;
        }
        for (double beta : {0.1, 0.5, 10.0}) {
            const PartitionSpec spec{PartitionMode::Dirichlet, 20, 0, beta, seed};
            const auto splits = dirichlet_partition(ds, spec);
            std::vector<std::size_t> per_class(10, 0), seen(ds.size(), 0);
            for (const auto& c : splits) {
                const auto h = label_histogram(ds, c.train_indices);
                for (std::size_t k = 0; k < 10; ++k) per_class[k] += h[k];
                for (std::size_t i : c.train_indices) ++seen[i];
            }
            for (std::size_t n : per_class) ok = ok && n == 100;
            for (std::size_t n : seen) ok = ok && n == 1;
            ok = ok && splits_to_json(dirichlet_partition(ds, spec)) == splits_to_json(splits);
            ++checked;
        }
    }
    return {ok, fmt("%zu partitions checked", checked)};
}

double signed_head_cosine(const Architecture& arch, const ParamVector& p) {
    const std::size_t c = arch.num_classes(), d = arch.representation_dim();
    const auto w = p.segment(arch.head_segment());
    double sum = 0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < c; ++a)
        for (std::size_t b = a + 1; b < c; ++b) {
            double dot = 0, na = 0, nb = 0;
            for (std::size_t k = 0; k < d; ++k) {
                dot += double(w[a * d + k]) * w[b * d + k];
                na += double(w[a * d + k]) * w[a * d + k];
                nb += double(w[b * d + k]) * w[b * d + k];
            }
            sum += dot / std::sqrt(na * nb);
            ++pairs;
        }
    return sum / double(pairs);
}

Outcome head_orthogonality() {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<double> means;
    double similar = 0;
    for (std::size_t d : {64, 256, 1024, 4096}) {
        const Architecture arch({4}, {LayerSpec::dense(4, d), LayerSpec::relu(), LayerSpec::dense(d, 10)});
        double m = 0;
        for (std::uint64_t seed = 1; seed <= 30; ++seed)
            m += head_orthogonality_stats(arch, init_params(arch, {InitKind::HeUniform, seed})).mean_abs_cos;
        means.push_back(m / 30);
        if (d == 1024)
            for (std::uint64_t seed = 1; seed <= 30; ++seed)
                similar += signed_head_cosine(arch, init_params(arch, {InitKind::Similar, seed})) / 30;
    }
    const double secs = seconds_since(t0);
    const bool monotone = std::is_sorted(means.rbegin(), means.rend());
    return {means[2] < 0.05 && monotone && similar > 0.9 && secs < 10.0,
            fmt("mean |cos| d=64 %.4f, 256 %.4f, 1024 %.4f, 4096 %.4f; similar %.4f; %.1fs", means[0], means[1],
                means[2], means[3], similar, secs)};
}

Outcome frozen_head_comparability() {
    const auto t0 = std::chrono::steady_clock::now();
    double full = 0, body = 0, head = 0, body_similar = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto train = synthetic_gaussian(10, 200, 32, 0.4, seed, 0);
        const auto test = synthetic_gaussian(10, 200, 32, 0.4, seed, 1);
        const Architecture arch({32}, {LayerSpec::dense(32, 128), LayerSpec::relu(), LayerSpec::dense(128, 16),
                                       LayerSpec::relu(), LayerSpec::dense(16, 10)});
        const auto he = init_params(arch, {InitKind::HeUniform, seed});
        const auto sim = init_params(arch, {InitKind::Similar, seed});
        CentralizedOptions o;
        o.epochs = 20;
        o.seed = seed;
        o.part = Part::Full;
        full += centralized_train(arch, he, train, test, o).test_accuracy.back() / 5;
        o.part = Part::Head;
        head += centralized_train(arch, he, train, test, o).test_accuracy.back() / 5;
        o.part = Part::Body;
        body += centralized_train(arch, he, train, test, o).test_accuracy.back() / 5;
        body_similar += centralized_train(arch, sim, train, test, o).test_accuracy.back() / 5;
    }
    const double secs = seconds_since(t0);
    return {full - body <= 3.0 && full - head > 10.0 && body - body_similar > 3.0 && secs < 600.0,
            fmt("full %.2f, body %.2f, head %.2f, body with similar head %.2f; %.1fs", full, body, head, body_similar,
                secs)};
}

struct PersonalizationRun {
    double initial = 0, p1 = 0, p5 = 0;
    std::optional<double> head_cos_before, head_cos_after, body_cos_after;
};

struct PersonalizationResults {
    std::vector<PersonalizationRun> fedavg, fedbabu;
    double seconds = 0;
};

const PersonalizationResults& personalization_runs() {
    static const PersonalizationResults results = [] {
        PersonalizationResults r;
        const auto t0 = std::chrono::steady_clock::now();
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            const auto train = synthetic_gaussian(10, 1000, 32, 0.5, seed, 0);
            const auto test = synthetic_gaussian(10, 1000, 32, 0.5, seed, 1);
            const PartitionSpec ps{PartitionMode::Shard, 20, 2, 0.5, seed};
            const auto splits = split_client_test(train, test, partition(train, ps), TestMode::Matched, seed);
            const Architecture arch({32}, {LayerSpec::dense(32, 128), LayerSpec::relu(), LayerSpec::dense(128, 128),
                                           LayerSpec::relu(), LayerSpec::dense(128, 10)});
            for (Algorithm alg : {Algorithm::FedAvg, Algorithm::FedBABU}) {
                FLConfig cfg;
                cfg.num_clients = 20;
                cfg.fraction = 0.5;
                cfg.local_epochs = 2;
                cfg.rounds = 32;
                cfg.algorithm = alg;
                cfg.init = {InitKind::HeUniform, seed};
                cfg.seed = seed;
                Federation fed(arch, cfg, train, splits);
                FederationState st = fed.initial_state();
                fed.run(st);
                const auto models = fed.client_models(st);
                const EvalContext ctx{arch, train, test, splits};
                PersonalizationRun run;
                run.initial = initial_accuracy(ctx, models).mean;
                FinetuneOptions fo;
                fo.lr = 0.005;
                fo.seed = seed;
                fo.epochs = 1;
                run.p1 = personalized_accuracy(ctx, models, fo).mean;
                fo.epochs = 5;
                const auto tuned = fine_tune_all(ctx, models, fo);
                run.p5 = initial_accuracy(ctx, tuned).mean;
                const auto before = interclient_cosine(models);
                const auto after = interclient_cosine(tuned);
                run.head_cos_before = before.back();
                run.head_cos_after = after.back();
                double body = 0;
                bool defined = true;
                for (std::size_t s = 0; s + 1 < after.size(); ++s) {
                    defined = defined && after[s].has_value();
                    if (after[s]) body += *after[s];
                }
                if (defined) run.body_cos_after = body / double(after.size() - 1);
                (alg == Algorithm::FedAvg ? r.fedavg : r.fedbabu).push_back(run);
            }
        }
        r.seconds = seconds_since(t0);
        return r;
    }();
    return results;
}

double mean_of(const std::vector<PersonalizationRun>& runs, double PersonalizationRun::*field) {
    double s = 0;
    for (const auto& r : runs) s += r.*field;
    return s / double(runs.size());
}

Outcome personalization_claims() {
    const auto& r = personalization_runs();
    const double avg_init = mean_of(r.fedavg, &PersonalizationRun::initial);
    const double avg_p5 = mean_of(r.fedavg, &PersonalizationRun::p5);
    const double babu_init = mean_of(r.fedbabu, &PersonalizationRun::initial);
    const double babu_p1 = mean_of(r.fedbabu, &PersonalizationRun::p1);
    const double babu_p5 = mean_of(r.fedbabu, &PersonalizationRun::p5);
    int wins = 0;
    for (std::size_t i = 0; i < r.fedbabu.size(); ++i) wins += r.fedbabu[i].p5 > r.fedavg[i].p5;
    const bool a = avg_p5 > avg_init && babu_p5 > babu_init;
    const bool b = babu_p5 >= avg_p5 - 0.5 && wins >= 3;
    const bool c = std::abs(babu_p5 - babu_p1) <= 5.0;
    return {a && b && c && r.seconds < 1200.0,
            fmt("(a) FedAvg %.2f -> %.2f, FedBABU %.2f -> %.2f %s; (b) FedBABU wins %d/5 %s; (c) FedBABU tf1 %.2f vs "
                "tf5 %.2f %s; %.1fs",
                avg_init, avg_p5, babu_init, babu_p5, a ? "ok" : "FAIL", wins, b ? "ok" : "FAIL", babu_p1, babu_p5,
                c ? "ok" : "FAIL", r.seconds)};
}

Outcome template_constraint() {
    bool ok = true;
    std::size_t predictions = 0;
    for (std::uint64_t seed : {1, 2}) {
        const auto s = fixtures::make(10, 2, seed, 60, 8, 0.3, TestMode::Global);
        auto [st, logs] = run_federation(*s.arch, fixtures::config(Algorithm::FedBABU, 10, seed), s.train, s.splits);
        Federation fed(*s.arch, fixtures::config(Algorithm::FedBABU, 10, seed), s.train, s.splits);
        const auto models = fed.client_models(st);
        for (std::size_t c = 0; c < s.splits.size(); ++c) {
            const auto templates = build_templates(*s.arch, models[c], s.train, s.splits[c].train_indices);
            const auto hist = label_histogram(s.train, s.splits[c].train_indices);
            for (int p : template_predict(*s.arch, models[c], templates, s.test, s.splits[c].test_indices)) {
                ok = ok && hist[std::size_t(p)] > 0;
                ++predictions;
            }
        }
    }
    const auto s = fixtures::make(10, 1, 3);
    auto [st, logs] = run_federation(*s.arch, fixtures::config(Algorithm::FedAvg, 10, 3), s.train, s.splits);
    Federation fed(*s.arch, fixtures::config(Algorithm::FedAvg, 10, 3), s.train, s.splits);
    const EvalContext ctx{*s.arch, s.train, s.test, s.splits};
    const auto single = template_accuracy(ctx, fed.client_models(st));
    bool perfect = true;
    for (const auto& a : single.accuracy) perfect = perfect && a && *a == 100.0;
    return {ok && perfect, fmt("%zu predictions within class sets; single-class clients %s", predictions,
                               perfect ? "all 100%" : "NOT all 100%")};
}

Outcome zero_epoch_identity() {
    const auto s = fixtures::make();
    std::string bad;
    for (Algorithm alg : fixtures::all_algorithms()) {
        auto [st, logs] = run_federation(*s.arch, fixtures::config(alg), s.train, s.splits);
        Federation fed(*s.arch, fixtures::config(alg), s.train, s.splits);
        const auto models = fed.client_models(st);
        const EvalContext ctx{*s.arch, s.train, s.test, s.splits};
        const auto initial = initial_accuracy(ctx, models);
        for (Part part : {Part::Full, Part::Body, Part::Head}) {
            FinetuneOptions fo;
            fo.epochs = 0;
            fo.part = part;
            if (!same_report(personalized_accuracy(ctx, models, fo), initial)) bad += std::string(to_string(alg)) + " ";
        }
    }
    return {bad.empty(), bad.empty() ? "10 algorithms x 3 parts bit-identical" : "differs: " + bad};
}

Outcome determinism() {
    const fs::path root = fs::temp_directory_path() / "fedsim_acceptance";
    fs::remove_all(root);
    std::string bad;
    std::size_t files = 0;
    for (const char* alg : {"fedavg", "fedbabu", "fedprox", "fedrep", "lg_fedavg", "ditto", "perfedavg"}) {
        nlohmann::json j = nlohmann::json::parse(R"({
          "seed": 7,
          "dataset": {"train_per_class": 40, "test_per_class": 20, "dim": 8},
          "network": {"layers": [{"type": "dense", "out": 16}, {"type": "relu"}, {"type": "dense", "out": 10}]},
          "partition": {"shards_per_client": 2},
          "federation": {"num_clients": 10, "fraction": 0.5, "local_epochs": 2, "budget": 12, "batch_size": 10,
                         "mu": 0.1},
          "eval": {"tau_f": [0, 1, 2], "in_out": true}
        })");
        j["federation"]["algorithm"] = alg;
        const auto cfg = ExperimentConfig::from_json(j);
        std::vector<std::map<std::string, std::string>> trees;
        for (std::size_t jobs : {1, 1, 3}) {
            const fs::path out = root / (std::string(alg) + "_" + std::to_string(trees.size()));
            run_train(cfg, {out, jobs, false, std::nullopt, 1});
            run_eval(cfg, out / "checkpoint", out, jobs);
            trees.push_back(read_tree(out));
        }
        if (trees[0] != trees[1] || trees[0] != trees[2] || trees[0].empty()) bad += std::string(alg) + " ";
        files += trees[0].size();
    }
    fs::remove_all(root);
    return {bad.empty(), bad.empty() ? fmt("7 algorithms, %zu files identical across reruns and jobs 1/3", files)
                                     : "differs: " + bad};
}

Outcome head_cosine_trend() {
    const auto& r = personalization_runs();
    bool exact = true, defined = true;
    double head = 0, body = 0;
    int seeds_lower = 0;
    for (const auto& run : r.fedbabu) {
        exact = exact && run.head_cos_before && *run.head_cos_before == 1.0;
        defined = defined && run.head_cos_after && run.body_cos_after;
        if (!run.head_cos_after || !run.body_cos_after) continue;
        head += *run.head_cos_after / double(r.fedbabu.size());
        body += *run.body_cos_after / double(r.fedbabu.size());
        seeds_lower += *run.head_cos_after < *run.body_cos_after;
    }
    return {exact && defined && head < body,
            fmt("before fine-tuning head cosine %s; after 5 epochs head %.4f < body %.4f (%d/5 seeds)",
                exact ? "exactly 1" : "NOT exactly 1", head, body, seeds_lower)};
}

}  // namespace

int main() {
    set_log_level(LogLevel::Error);
    const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
        {1, gradient_oracle},        {2, head_freeze},          {3, fedprox_reduction},
        {4, aggregation_algebra},    {5, partition_invariants}, {6, head_orthogonality},
        {7, frozen_head_comparability}, {8, personalization_claims}, {9, template_constraint},
        {10, zero_epoch_identity},   {11, head_cosine_trend},   {12, determinism},
    };
    int failed = 0;
    for (const auto& [id, check] : criteria) {
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("criterion %2d: %s  %s\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d of %zu criteria failed\n", failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
