#include "fedsim/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "fedsim/log.hpp"

namespace fedsim {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json read_json(const fs::path& path) {
    try {
        return json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw std::runtime_error(path.string() + ": " + e.what());
    }
}

FLConfig fl_config(const ExperimentConfig& cfg, std::size_t jobs) {
    FLConfig fl = cfg.fl;
    fl.jobs = std::max<std::size_t>(1, jobs);
    return fl;
}

fs::path existing_checkpoint(const fs::path& dir) {
    if (fs::exists(dir / "state.json")) return dir;
    fs::path old = dir;
    old += ".old";
    if (fs::exists(old / "state.json")) return old;
    throw std::runtime_error("no checkpoint found at " + dir.string());
}

std::string rounds_header() { return "round,client_ids,mean_loss,lr,config_hash\n"; }

std::string round_row(const RoundLog& log, const std::string& hash) {
    std::string ids;
    for (std::size_t i = 0; i < log.clients.size(); ++i) ids += (i ? " " : "") + std::to_string(log.clients[i]);
    return std::to_string(log.round) + "," + ids + "," + num(log.mean_loss) + "," + num(log.lr) + "," + hash + "\n";
}

/// Header plus the first `rounds` rows of an existing rounds.csv.
std::string truncated_rounds(const fs::path& path, std::size_t rounds) {
    std::string out = rounds_header();
    if (!fs::exists(path)) return out;
    std::istringstream in(read_file(path));
    std::string line;
    std::getline(in, line);
    for (std::size_t r = 0; r < rounds && std::getline(in, line);) {
        if (line.empty()) continue;
        out += line + "\n";
        ++r;
    }
    return out;
}

json report_json(const std::string& name, const EvalReport& r, const std::string& hash) {
    return {{"report", name},     {"config_hash", hash}, {"mean", r.mean},          {"std", r.std},
            {"tau_f", r.tau_f},   {"part", to_string(r.part)}, {"clients_counted", r.counted()},
            {"clients", r.accuracy.size()}};
}

std::vector<std::size_t> segment_layers(const Architecture& arch) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < arch.layers().size(); ++i)
        if (arch.layers()[i].parameterized()) out.push_back(i);
    return out;
}

std::string cell_id(const ExperimentConfig& cfg) {
    json j = cfg.to_json();
    j.erase("out");
    return fnv1a_hex(j.dump());
}

}  // namespace

void write_file_atomic(const fs::path& path, const std::string& contents) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << contents;
        if (!out) throw std::runtime_error("write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

ExperimentData load_data(const ExperimentConfig& cfg) {
    ExperimentData d;
    const DatasetConfig& dc = cfg.dataset;
    if (dc.kind == "synthetic") {
        d.train = synthetic_gaussian(dc.classes, dc.train_per_class, dc.dim, dc.spread, cfg.seed, 0);
        d.test = synthetic_gaussian(dc.classes, dc.test_per_class, dc.dim, dc.spread, cfg.seed, 1);
    } else {
        d.train = load_idx(dc.train_images, dc.train_labels);
        d.test = load_idx(dc.test_images, dc.test_labels);
        auto limit = [](LabeledDataset& ds, std::size_t n) {
            if (n == 0 || n >= ds.size()) return;
            std::vector<std::size_t> idx(n);
            for (std::size_t i = 0; i < n; ++i) idx[i] = i;
            const int classes = ds.num_classes;
            ds = subset(ds, idx);
            ds.num_classes = classes;
        };
        limit(d.train, dc.train_limit);
        limit(d.test, dc.test_limit);
        if (d.train.sample_shape != d.test.sample_shape)
            throw ConfigError("dataset: train samples " + shape_to_string(d.train.sample_shape) +
                              " and test samples " + shape_to_string(d.test.sample_shape) + " differ");
        const int classes = std::max(d.train.num_classes, d.test.num_classes);
        d.train.num_classes = d.test.num_classes = classes;
    }
    d.train.validate();
    d.test.validate();
    return d;
}

std::vector<ClientSplit> make_splits(const ExperimentConfig& cfg, const ExperimentData& data, TestMode mode) {
    return split_client_test(data.train, data.test, partition(data.train, cfg.partition), mode, cfg.seed);
}

void write_partition(const ExperimentConfig& cfg, const ExperimentData& data, const std::vector<ClientSplit>& splits,
                     const fs::path& out) {
    json j = splits_to_json(splits);
    j["config_hash"] = cfg.hash();
    write_file_atomic(out / "splits.json", j.dump() + "\n");

    std::string csv = "client_id";
    for (int c = 0; c < data.train.num_classes; ++c) csv += ",class_" + std::to_string(c);
    csv += ",config_hash\n";
    for (const auto& s : splits) {
        csv += std::to_string(s.client_id);
        for (std::size_t n : label_histogram(data.train, s.train_indices)) csv += "," + std::to_string(n);
        csv += "," + cfg.hash() + "\n";
    }
    write_file_atomic(out / "label_histogram.csv", csv);
}

void save_checkpoint(const fs::path& dir, const std::string& config_hash, const FederationState& state) {
    fs::path fresh = dir, old = dir;
    fresh += ".new";
    old += ".old";
    fs::remove_all(fresh);
    fs::create_directories(fresh / "clients");
    save_params(state.global, fresh / "global.bin");
    save_params(state.initial_global, fresh / "initial.bin");
    json personal = json::array();
    for (std::size_t c = 0; c < state.personal.size(); ++c) {
        if (!state.personal[c]) continue;
        save_params(*state.personal[c], fresh / "clients" / (std::to_string(c) + ".bin"));
        personal.push_back(c);
    }
    const json sidecar{{"round", state.round},
                       {"config_hash", config_hash},
                       {"personal_clients", personal},
                       {"personal_slots", state.personal.size()},
                       // Every random stream is derived from (seed, round, client), so the
                       // completed round count is the whole generator state.
                       {"rng", {{"scheme", "derived-per-round"}, {"next_round", state.round}}}};
    write_file_atomic(fresh / "state.json", sidecar.dump(2) + "\n");
    fs::remove_all(old);
    if (fs::exists(dir)) fs::rename(dir, old);
    fs::rename(fresh, dir);
    fs::remove_all(old);
}

Checkpoint load_checkpoint(const fs::path& dir_in, const ExperimentConfig& cfg, const Architecture& arch) {
    const fs::path dir = existing_checkpoint(dir_in);
    const json sidecar = read_json(dir / "state.json");
    Checkpoint ck;
    ck.config_hash = sidecar.at("config_hash").get<std::string>();
    ck.state.round = sidecar.at("round").get<std::size_t>();
    ck.state.global = load_params(dir / "global.bin");
    const ParamVector layout = arch.zero_params();
    if (!ck.state.global.same_layout(layout))
        throw ConfigError("checkpoint " + dir.string() + " does not match the configured network topology");
    if (ck.config_hash != cfg.hash())
        throw ConfigError("checkpoint " + dir.string() + " was trained with config hash " + ck.config_hash +
                          " but the config hashes to " + cfg.hash());
    ck.state.initial_global = init_params(arch, cfg.fl.init);
    ck.state.personal.assign(sidecar.at("personal_slots").get<std::size_t>(), std::nullopt);
    for (std::size_t c : sidecar.at("personal_clients").get<std::vector<std::size_t>>()) {
        if (c >= ck.state.personal.size()) throw std::runtime_error("checkpoint: client id out of range");
        ParamVector p = load_params(dir / "clients" / (std::to_string(c) + ".bin"));
        if (!p.same_layout(layout)) throw ConfigError("checkpoint: client " + std::to_string(c) + " topology mismatch");
        ck.state.personal[c] = std::move(p);
    }
    return ck;
}

FederationState run_train(const ExperimentConfig& cfg, const TrainOptions& opts) {
    fs::create_directories(opts.out);
    const std::string hash = cfg.hash();
    const ExperimentData data = load_data(cfg);
    const auto splits = make_splits(cfg, data, cfg.test_mode);
    write_partition(cfg, data, splits, opts.out);
    json resolved = cfg.to_json();
    resolved["config_hash"] = hash;
    write_file_atomic(opts.out / "config.json", resolved.dump(2) + "\n");

    const Architecture arch = cfg.architecture(data.train.sample_shape, data.train.num_classes);
    const Federation fed(arch, fl_config(cfg, opts.jobs), data.train, splits);
    FederationState state;
    if (opts.resume) {
        state = load_checkpoint(opts.out / "checkpoint", cfg, arch).state;
        log_info("resuming after round " + std::to_string(state.round));
    } else {
        state = fed.initial_state();
    }
    const fs::path rounds_path = opts.out / "rounds.csv";
    std::string rounds = opts.resume ? truncated_rounds(rounds_path, state.round) : rounds_header();

    const std::size_t last = std::min(opts.stop_after_round.value_or(fed.total_rounds()), fed.total_rounds());
    const std::size_t every = std::max<std::size_t>(1, opts.checkpoint_every);
    try {
        while (state.round < last) {
            const RoundLog log = fed.run_round(state);
            rounds += round_row(log, hash);
            log_info("round " + std::to_string(log.round) + "/" + std::to_string(fed.total_rounds()) + " loss " +
                     num(log.mean_loss) + " lr " + num(log.lr));
            if (state.round % every == 0 || state.round == last) {
                save_checkpoint(opts.out / "checkpoint", hash, state);
                write_file_atomic(rounds_path, rounds);
            }
        }
    } catch (...) {
        write_file_atomic(rounds_path, rounds);
        throw;
    }
    if (state.round == last && !fs::exists(opts.out / "checkpoint" / "state.json"))
        save_checkpoint(opts.out / "checkpoint", hash, state);
    write_file_atomic(rounds_path, rounds);
    return state;
}

void write_report(const fs::path& dir, const std::string& name, const EvalReport& report, const std::string& hash) {
    std::string csv = "client_id,accuracy,config_hash\n";
    for (std::size_t c = 0; c < report.accuracy.size(); ++c)
        csv += std::to_string(c) + "," + (report.accuracy[c] ? num(*report.accuracy[c]) : "") + "," + hash + "\n";
    write_file_atomic(dir / (name + ".csv"), csv);
    write_file_atomic(dir / (name + ".json"), report_json(name, report, hash).dump(2) + "\n");
}

EvalSummary run_eval(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& out, std::size_t jobs) {
    const std::string hash = cfg.hash();
    const ExperimentData data = load_data(cfg);
    const auto splits = make_splits(cfg, data, cfg.test_mode);
    const Architecture arch = cfg.architecture(data.train.sample_shape, data.train.num_classes);
    const Federation fed(arch, fl_config(cfg, jobs), data.train, splits);
    const Checkpoint ck = load_checkpoint(checkpoint, cfg, arch);
    if (ck.state.round < fed.total_rounds())
        log_warn("evaluating a checkpoint after round " + std::to_string(ck.state.round) + " of " +
                 std::to_string(fed.total_rounds()));
    const auto models = fed.client_models(ck.state);
    const EvalContext ctx{arch, data.train, data.test, splits, cfg.fl.batch_size, std::max<std::size_t>(1, jobs)};
    const fs::path dir = out / "eval";
    fs::create_directories(dir);

    std::optional<std::vector<ClientSplit>> global_splits;
    if (cfg.eval.in_out) global_splits = make_splits(cfg, data, TestMode::Global);

    FinetuneOptions ft;
    ft.part = cfg.eval.part;
    ft.lr = cfg.finetune_lr();
    ft.momentum = cfg.fl.momentum;
    ft.batch_size = cfg.fl.batch_size;
    ft.sequential = fed.spec().rule == LocalRule::SequentialHeadThenBody;
    ft.seed = cfg.seed;

    EvalSummary summary;
    summary.initial = initial_accuracy(ctx, models);
    write_report(dir, "initial", summary.initial, hash);
    json sj{{"config_hash", hash}, {"initial", report_json("initial", summary.initial, hash)}};
    sj["personalized"] = json::array();

    const auto layer_of = segment_layers(arch);
    std::string cos_csv = "tau_f,segment,layer,cosine,config_hash\n";
    for (std::size_t tau : cfg.eval.tau_f) {
        ft.epochs = tau;
        const auto tuned = fine_tune_all(ctx, models, ft);
        EvalReport r = initial_accuracy(ctx, tuned);
        r.tau_f = tau;
        r.part = ft.part;
        const std::string name = "personalized_tf" + std::to_string(tau);
        write_report(dir, name, r, hash);
        sj["personalized"].push_back(report_json(name, r, hash));
        summary.personalized.push_back(r);
        if (cfg.eval.layer_cosine && tuned.size() >= 2) {
            const auto cos = interclient_cosine(tuned);
            for (std::size_t s = 0; s < cos.size(); ++s)
                cos_csv += std::to_string(tau) + "," + std::to_string(s) + "," + std::to_string(layer_of[s]) + "," +
                           (cos[s] ? num(*cos[s]) : "") + "," + hash + "\n";
        }
        if (global_splits) {
            const EvalContext gctx{arch, data.train, data.test, *global_splits, ctx.batch_size, ctx.jobs};
            auto [in, outc] = in_out_class_accuracy(gctx, tuned);
            in.tau_f = outc.tau_f = tau;
            in.part = outc.part = ft.part;
            write_report(dir, "in_class_tf" + std::to_string(tau), in, hash);
            write_report(dir, "out_class_tf" + std::to_string(tau), outc, hash);
        }
    }
    if (cfg.eval.layer_cosine) {
        if (models.size() >= 2) write_file_atomic(dir / "layer_cosine.csv", cos_csv);
        else log_warn("layer cosine needs at least two clients; skipped");
    }
    if (cfg.eval.templates) {
        summary.templates = template_accuracy(ctx, models);
        write_report(dir, "template", *summary.templates, hash);
        sj["template"] = report_json("template", *summary.templates, hash);
    }
    write_file_atomic(dir / "summary.json", sj.dump(2) + "\n");
    return summary;
}

std::vector<ExperimentConfig> expand_grid(const json& grid, std::optional<std::uint64_t> seed_override) {
    if (!grid.is_object()) throw ConfigError("sweep: expected an object with 'base' and 'grid'");
    for (const auto& [key, _] : grid.items())
        if (key != "base" && key != "grid") throw ConfigError("sweep: unknown key '" + key + "'");
    const json base = grid.value("base", json::object());
    const json axes = grid.value("grid", json::object());
    if (!axes.is_object()) throw ConfigError("sweep.grid: expected an object of value lists");

    std::vector<std::pair<json::json_pointer, json>> dims;
    for (const auto& [key, values] : axes.items()) {
        std::string ptr = key;
        if (ptr.empty() || ptr[0] != '/') {
            ptr = "/" + ptr;
            for (char& ch : ptr)
                if (ch == '.') ch = '/';
        }
        if (!values.is_array() || values.empty())
            throw ConfigError("sweep.grid." + key + ": expected a non-empty list");
        try {
            dims.emplace_back(json::json_pointer(ptr), values);
        } catch (const json::exception& e) {
            throw ConfigError("sweep.grid." + key + ": " + e.what());
        }
    }

    std::vector<ExperimentConfig> cells;
    std::vector<std::size_t> at(dims.size(), 0);
    while (true) {
        json j = base;
        for (std::size_t d = 0; d < dims.size(); ++d) j[dims[d].first] = dims[d].second[at[d]];
        if (seed_override) j["seed"] = *seed_override;
        cells.push_back(ExperimentConfig::from_json(j));
        // Odometer: the last axis varies fastest.
        bool done = true;
        for (std::size_t d = dims.size(); d-- > 0;) {
            if (++at[d] < dims[d].second.size()) {
                done = false;
                break;
            }
            at[d] = 0;
        }
        if (done) break;
    }
    const std::size_t budget = cells.front().fl.rounds * cells.front().fl.local_epochs;
    for (const auto& c : cells)
        if (c.fl.rounds * c.fl.local_epochs != budget)
            throw ConfigError("sweep: every cell needs the same K*tau budget (" + std::to_string(budget) +
                              "), found rounds=" + std::to_string(c.fl.rounds) +
                              " local_epochs=" + std::to_string(c.fl.local_epochs));
    return cells;
}

std::size_t run_sweep(const json& grid, const fs::path& out, std::size_t jobs,
                      std::optional<std::uint64_t> seed_override) {
    const auto cells = expand_grid(grid, seed_override);
    fs::create_directories(out / "cells");
    std::size_t ran = 0;
    std::vector<json> results;
    for (const auto& cfg : cells) {
        const std::string id = cell_id(cfg);
        const fs::path dir = out / "cells" / id;
        const fs::path result_path = dir / "result.json";
        if (fs::exists(result_path)) {
            try {
                json r = read_json(result_path);
                if (r.value("complete", false) && r.value("cell_id", "") == id) {
                    log_info("sweep: cell " + id + " already complete");
                    results.push_back(std::move(r));
                    continue;
                }
            } catch (const std::exception& e) {
                log_warn("sweep: rerunning cell " + id + " (" + e.what() + ")");
            }
        }
        fs::remove_all(dir);
        log_info("sweep: running cell " + id);
        TrainOptions topts{dir, jobs, false, std::nullopt, cfg.fl.rounds};
        run_train(cfg, topts);
        const EvalSummary s = run_eval(cfg, dir / "checkpoint", dir, jobs);
        json rows = json::array();
        for (const auto& p : s.personalized) {
            json row{{"tau_f", p.tau_f},
                     {"part", to_string(p.part)},
                     {"initial_mean", s.initial.mean},
                     {"initial_std", s.initial.std},
                     {"personalized_mean", p.mean},
                     {"personalized_std", p.std}};
            if (s.templates) row.update({{"template_mean", s.templates->mean}, {"template_std", s.templates->std}});
            rows.push_back(row);
        }
        json r{{"cell_id", id}, {"config_hash", cfg.hash()}, {"config", cfg.to_json()}, {"rows", rows},
               {"complete", true}};
        write_file_atomic(result_path, r.dump(2) + "\n");
        results.push_back(std::move(r));
        ++ran;
    }

    std::string csv =
        "cell_id,config_hash,algorithm,partition_mode,shards_per_client,beta,fraction,local_epochs,rounds,seed,tau_f,"
        "part,initial_mean,initial_std,personalized_mean,personalized_std,template_mean,template_std\n";
    for (const json& r : results) {
        const json& c = r.at("config");
        const json& f = c.at("federation");
        const json& p = c.at("partition");
        for (const json& row : r.at("rows")) {
            csv += r.at("cell_id").get<std::string>() + "," + r.at("config_hash").get<std::string>() + "," +
                   f.at("algorithm").get<std::string>() + "," + p.at("mode").get<std::string>() + "," +
                   std::to_string(p.at("shards_per_client").get<std::size_t>()) + "," +
                   num(p.at("beta").get<double>()) + "," + num(f.at("fraction").get<double>()) + "," +
                   std::to_string(f.at("local_epochs").get<std::size_t>()) + "," +
                   std::to_string(f.at("rounds").get<std::size_t>()) + "," +
                   std::to_string(c.at("seed").get<std::uint64_t>()) + "," +
                   std::to_string(row.at("tau_f").get<std::size_t>()) + "," + row.at("part").get<std::string>() +
                   "," + num(row.at("initial_mean").get<double>()) + "," + num(row.at("initial_std").get<double>()) +
                   "," + num(row.at("personalized_mean").get<double>()) + "," +
                   num(row.at("personalized_std").get<double>()) + "," +
                   (row.contains("template_mean") ? num(row.at("template_mean").get<double>()) : "") + "," +
                   (row.contains("template_std") ? num(row.at("template_std").get<double>()) : "") + "\n";
        }
    }
    write_file_atomic(out / "results.csv", csv);
    return ran;
}

}  // namespace fedsim
