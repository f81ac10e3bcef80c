#include "fedsim/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

namespace fedsim {

using nlohmann::json;

namespace {

/// Reads keys of one config object and rejects any it does not know.
class Section {
public:
    Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
        if (!j_.is_object()) throw ConfigError(name_ + ": expected an object");
    }
    ~Section() noexcept(false) {
        if (std::uncaught_exceptions()) return;
        for (const auto& [key, _] : j_.items())
            if (!seen_.count(key)) throw ConfigError(name_ + ": unknown key '" + key + "'");
    }

    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key);
    }
    template <typename T>
    void read(const std::string& key, T& out) {
        if (!has(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(name_ + "." + key + ": " + e.what());
        }
    }
    const json& at(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }

private:
    const json& j_;
    std::string name_;
    std::set<std::string> seen_;
};

template <typename F>
auto convert(const std::string& where, F&& f) {
    try {
        return f();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(where + ": " + e.what());
    }
}

json layer_to_json(const LayerSpec& l) {
    json j{{"type", std::string(to_string(l.kind))}};
    switch (l.kind) {
        case LayerKind::Dense:
            if (l.in) j["in"] = l.in;
            j["out"] = l.out;
            j["bias"] = l.has_bias;
            break;
        case LayerKind::Conv2d:
            if (l.in) j["in"] = l.in;
            j["out"] = l.out;
            j["kernel"] = l.kernel;
            j["padding"] = l.padding;
            j["bias"] = l.has_bias;
            break;
        case LayerKind::MaxPool2d: j["kernel"] = l.kernel; break;
        default: break;
    }
    return j;
}

LayerSpec layer_from_json(const json& j, std::size_t index) {
    Section s(j, "network.layers[" + std::to_string(index) + "]");
    std::string type;
    s.read("type", type);
    LayerSpec l;
    if (type == "dense") {
        l = LayerSpec::dense(0, 0);
    } else if (type == "conv2d") {
        l = LayerSpec::conv2d(0, 0, 0);
    } else if (type == "relu") {
        l = LayerSpec::relu();
    } else if (type == "maxpool2d") {
        l = LayerSpec::maxpool2d(2);
    } else if (type == "flatten") {
        l = LayerSpec::flatten();
    } else {
        throw ConfigError("network.layers[" + std::to_string(index) + "]: unknown layer type '" + type + "'");
    }
    if (l.parameterized()) {
        s.read("in", l.in);
        s.read("out", l.out);
        s.read("bias", l.has_bias);
        if (l.kind == LayerKind::Conv2d) {
            s.read("kernel", l.kernel);
            s.read("padding", l.padding);
        }
    } else if (l.kind == LayerKind::MaxPool2d) {
        s.read("kernel", l.kernel);
    }
    return l;
}

TestMode test_mode_from_string(const std::string& s) {
    if (s == "matched") return TestMode::Matched;
    if (s == "global") return TestMode::Global;
    throw ConfigError("partition.test_mode: expected 'matched' or 'global', got '" + s + "'");
}

}  // namespace

std::string fnv1a_hex(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    ExperimentConfig c;
    Section top(j, "config");
    top.read("seed", c.seed);
    top.read("out", c.out);

    if (top.has("dataset")) {
        Section s(top.at("dataset"), "dataset");
        DatasetConfig& d = c.dataset;
        s.read("kind", d.kind);
        s.read("classes", d.classes);
        s.read("train_per_class", d.train_per_class);
        s.read("test_per_class", d.test_per_class);
        s.read("dim", d.dim);
        s.read("spread", d.spread);
        s.read("train_images", d.train_images);
        s.read("train_labels", d.train_labels);
        s.read("test_images", d.test_images);
        s.read("test_labels", d.test_labels);
        s.read("train_limit", d.train_limit);
        s.read("test_limit", d.test_limit);
    }
    if (top.has("network")) {
        Section s(top.at("network"), "network");
        s.read("input_shape", c.input_shape);
        if (s.has("layers")) {
            const json& layers = s.at("layers");
            if (!layers.is_array()) throw ConfigError("network.layers: expected an array");
            for (std::size_t i = 0; i < layers.size(); ++i) c.layers.push_back(layer_from_json(layers[i], i));
        }
    }
    if (top.has("partition")) {
        Section s(top.at("partition"), "partition");
        std::string mode = to_string(c.partition.mode), test_mode = "matched";
        s.read("mode", mode);
        s.read("shards_per_client", c.partition.shards_per_client);
        s.read("beta", c.partition.beta);
        s.read("test_mode", test_mode);
        c.partition.mode = convert("partition.mode", [&] { return partition_mode_from_string(mode); });
        c.test_mode = test_mode_from_string(test_mode);
    }
    bool rounds_given = false;
    if (top.has("federation")) {
        Section s(top.at("federation"), "federation");
        FLConfig& f = c.fl;
        std::string alg = std::string(to_string(f.algorithm)), init = std::string(to_string(f.init.kind));
        std::string server_part = std::string(to_string(f.server_update_part));
        s.read("algorithm", alg);
        s.read("num_clients", f.num_clients);
        s.read("fraction", f.fraction);
        s.read("local_epochs", f.local_epochs);
        rounds_given = s.has("rounds");
        s.read("rounds", f.rounds);
        std::size_t budget = 0;
        if (s.has("budget")) {
            s.read("budget", budget);
            c.budget = budget;
        }
        s.read("batch_size", f.batch_size);
        s.read("base_lr", f.base_lr);
        s.read("momentum", f.momentum);
        s.read("mu", f.mu);
        s.read("ditto_lambda", f.ditto_lambda);
        s.read("perfedavg_alpha", f.perfedavg_alpha);
        s.read("lg_lr", f.lg_lr);
        s.read("server_share", f.server_share);
        s.read("server_update_part", server_part);
        s.read("init", init);
        f.algorithm = convert("federation.algorithm", [&] { return algorithm_from_string(alg); });
        f.init.kind = convert("federation.init", [&] { return init_kind_from_string(init); });
        f.server_update_part = convert("federation.server_update_part", [&] { return part_from_string(server_part); });
    }
    if (top.has("eval")) {
        Section s(top.at("eval"), "eval");
        std::string part = std::string(to_string(c.eval.part));
        s.read("tau_f", c.eval.tau_f);
        s.read("part", part);
        if (s.has("lr")) {
            double lr = 0;
            s.read("lr", lr);
            c.eval.lr = lr;
        }
        s.read("templates", c.eval.templates);
        s.read("in_out", c.eval.in_out);
        s.read("layer_cosine", c.eval.layer_cosine);
        c.eval.part = convert("eval.part", [&] { return part_from_string(part); });
        if (c.eval.part == Part::None) throw ConfigError("eval.part: must be body, head or full");
        if (c.eval.lr && *c.eval.lr < 0) throw ConfigError("eval.lr: must be non-negative");
    }

    if (c.budget) {
        if (c.fl.local_epochs == 0 || *c.budget % c.fl.local_epochs != 0)
            throw ConfigError("federation: budget K*tau = " + std::to_string(*c.budget) +
                              " is not a multiple of local_epochs = " + std::to_string(c.fl.local_epochs));
        const std::size_t k = *c.budget / c.fl.local_epochs;
        if (rounds_given && k != c.fl.rounds)
            throw ConfigError("federation: rounds * local_epochs = " + std::to_string(c.fl.rounds * c.fl.local_epochs) +
                              " does not match budget " + std::to_string(*c.budget));
        c.fl.rounds = k;
    }
    if (c.dataset.kind != "synthetic" && c.dataset.kind != "idx")
        throw ConfigError("dataset.kind: expected 'synthetic' or 'idx', got '" + c.dataset.kind + "'");
    if (c.dataset.kind == "synthetic" && (c.dataset.classes < 1 || c.dataset.dim == 0 || c.dataset.spread < 0))
        throw ConfigError("dataset: synthetic data needs classes >= 1, dim >= 1 and spread >= 0");
    c.set_seed(c.seed);
    convert("federation", [&] {
        c.fl.validate();
        return 0;
    });
    if (c.fl.local_epochs == 0) throw ConfigError("federation.local_epochs: must be at least 1");
    return c;
}

json ExperimentConfig::to_json() const {
    json layers = json::array();
    for (const auto& l : this->layers) layers.push_back(layer_to_json(l));
    json j;
    j["seed"] = seed;
    j["dataset"] = {{"kind", dataset.kind}};
    if (dataset.kind == "synthetic") {
        j["dataset"].update({{"classes", dataset.classes},
                             {"train_per_class", dataset.train_per_class},
                             {"test_per_class", dataset.test_per_class},
                             {"dim", dataset.dim},
                             {"spread", dataset.spread}});
    } else {
        j["dataset"].update({{"train_images", dataset.train_images},
                             {"train_labels", dataset.train_labels},
                             {"test_images", dataset.test_images},
                             {"test_labels", dataset.test_labels},
                             {"train_limit", dataset.train_limit},
                             {"test_limit", dataset.test_limit}});
    }
    j["network"] = {{"input_shape", input_shape}, {"layers", layers}};
    j["partition"] = {{"mode", to_string(partition.mode)},
                      {"shards_per_client", partition.shards_per_client},
                      {"beta", partition.beta},
                      {"test_mode", test_mode == TestMode::Matched ? "matched" : "global"}};
    j["federation"] = {{"algorithm", to_string(fl.algorithm)},
                       {"num_clients", fl.num_clients},
                       {"fraction", fl.fraction},
                       {"local_epochs", fl.local_epochs},
                       {"rounds", fl.rounds},
                       {"batch_size", fl.batch_size},
                       {"base_lr", fl.base_lr},
                       {"momentum", fl.momentum},
                       {"mu", fl.mu},
                       {"ditto_lambda", fl.ditto_lambda},
                       {"perfedavg_alpha", fl.perfedavg_alpha},
                       {"lg_lr", fl.lg_lr},
                       {"server_share", fl.server_share},
                       {"server_update_part", to_string(fl.server_update_part)},
                       {"init", to_string(fl.init.kind)}};
    if (budget) j["federation"]["budget"] = *budget;
    j["eval"] = {{"tau_f", eval.tau_f},
                 {"part", to_string(eval.part)},
                 {"templates", eval.templates},
                 {"in_out", eval.in_out},
                 {"layer_cosine", eval.layer_cosine}};
    if (eval.lr) j["eval"]["lr"] = *eval.lr;
    if (!out.empty()) j["out"] = out;
    return j;
}

std::string ExperimentConfig::hash() const {
    json j = to_json();
    j.erase("eval");
    j.erase("out");
    // Keys of nlohmann::json objects are sorted, so dump() is canonical.
    return fnv1a_hex(j.dump());
}

void ExperimentConfig::set_seed(std::uint64_t s) {
    seed = s;
    partition.seed = s;
    partition.num_clients = fl.num_clients;
    fl.seed = s;
    fl.init.seed = s;
}

Architecture ExperimentConfig::architecture(const Shape& sample_shape, int num_classes) const {
    Shape in = input_shape.empty() ? Shape{shape_size(sample_shape)} : input_shape;
    if (shape_size(in) != shape_size(sample_shape))
        throw ConfigError("network.input_shape " + shape_to_string(in) + " does not hold samples of shape " +
                          shape_to_string(sample_shape));
    std::vector<LayerSpec> specs = layers;
    if (specs.empty()) {
        specs = {LayerSpec::dense(0, 128), LayerSpec::relu(), LayerSpec::dense(128, 128), LayerSpec::relu(),
                 LayerSpec::dense(128, 0)};
    }
    // Fill in omitted input sizes by walking the shapes; the Architecture
    // constructor does the real validation.
    Shape cur = in;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        LayerSpec& l = specs[i];
        switch (l.kind) {
            case LayerKind::Dense:
                if (l.in == 0) l.in = cur.size() == 1 ? cur[0] : 0;
                if (l.out == 0 && i + 1 == specs.size()) l.out = static_cast<std::size_t>(num_classes);
                cur = {l.out};
                break;
            case LayerKind::Conv2d:
                if (l.in == 0 && cur.size() == 3) l.in = cur[0];
                if (cur.size() == 3 && cur[1] + 2 * l.padding >= l.kernel && cur[2] + 2 * l.padding >= l.kernel)
                    cur = {l.out, cur[1] + 2 * l.padding - l.kernel + 1, cur[2] + 2 * l.padding - l.kernel + 1};
                break;
            case LayerKind::MaxPool2d:
                if (cur.size() == 3 && l.kernel > 0) cur = {cur[0], cur[1] / l.kernel, cur[2] / l.kernel};
                break;
            case LayerKind::Flatten: cur = {shape_size(cur)}; break;
            case LayerKind::Relu: break;
        }
    }
    return convert("network", [&] { return Architecture(in, specs); });
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return ExperimentConfig::from_json(j);
}

}  // namespace fedsim
