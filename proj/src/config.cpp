#include "sparsyfed/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "toml.hpp"

#include "sparsyfed/error.hpp"

namespace sparsyfed {

std::vector<LayerSpec> ModelSpec::architecture(std::size_t input_dim, std::size_t classes) const {
    if (kind == ModelKind::mlp) return mlp_architecture(input_dim, hidden, classes);
    if (image.size() != 3 || image[0] * image[1] * image[2] != input_dim) {
        throw ConfigError("model.image must be [channels, height, width] with product equal to the input dim " +
                          std::to_string(input_dim));
    }
    return cnn_architecture(image[0], image[1], image[2], conv_channels, kernel, classes);
}

void ExperimentSpec::validate() const {
    for (double a : sweep.alpha) {
        if (!(a > 0.0)) throw ConfigError("alpha must be positive");
    }
    if (sweep.algorithms.empty() || sweep.alpha.empty() || sweep.activation_pruning.empty() ||
        sweep.seeds.empty()) {
        throw ConfigError("sweep axes must be nonempty");
    }
    if (!sweep.target_sparsity.empty() && base.groups.size() > 1) {
        throw ConfigError("sweep.target_sparsity cannot be combined with sparsity.groups");
    }
    for (double s : sweep.target_sparsity) {
        if (!(s >= 0.0 && s < 1.0)) throw ConfigError("sweep.target_sparsity values must lie in [0, 1)");
    }
    if (dataset.kind == DatasetKind::csv && dataset.csv_path.empty()) {
        throw ConfigError("dataset.path is required for csv datasets");
    }
    base.validate();
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

namespace {

// Reads keys out of one TOML table and rejects whatever was left unread.
class Section {
public:
    Section(const toml::table* table, std::string path) : table_(table), path_(std::move(path)) {}

    bool present() const { return table_ != nullptr; }

    std::string key_path(std::string_view key) const {
        return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
    }

    const toml::node* node(std::string_view key) {
        if (!table_) return nullptr;
        seen_.insert(std::string(key));
        return table_->get(key);
    }

    std::optional<std::int64_t> integer(std::string_view key) {
        const auto* n = node(key);
        if (!n) return std::nullopt;
        if (!n->is_integer()) throw ConfigError(key_path(key) + ": expected an integer");
        return n->as_integer()->get();
    }

    std::optional<std::size_t> count(std::string_view key) {
        auto v = integer(key);
        if (!v) return std::nullopt;
        if (*v < 0) throw ConfigError(key_path(key) + ": must be non-negative");
        return static_cast<std::size_t>(*v);
    }

    std::optional<double> number(std::string_view key) {
        const auto* n = node(key);
        if (!n) return std::nullopt;
        return as_number(*n, key_path(key));
    }

    std::optional<bool> boolean(std::string_view key) {
        const auto* n = node(key);
        if (!n) return std::nullopt;
        if (!n->is_boolean()) throw ConfigError(key_path(key) + ": expected a boolean");
        return n->as_boolean()->get();
    }

    std::optional<std::string> string(std::string_view key) {
        const auto* n = node(key);
        if (!n) return std::nullopt;
        if (!n->is_string()) throw ConfigError(key_path(key) + ": expected a string");
        return n->as_string()->get();
    }

    const toml::array* array(std::string_view key) {
        const auto* n = node(key);
        if (!n) return nullptr;
        if (!n->is_array()) throw ConfigError(key_path(key) + ": expected an array");
        const auto* arr = n->as_array();
        if (arr->empty()) throw ConfigError(key_path(key) + ": must not be empty");
        return arr;
    }

    template <class T, class Fn>
    std::optional<std::vector<T>> list(std::string_view key, Fn&& convert) {
        const auto* arr = array(key);
        if (!arr) return std::nullopt;
        std::vector<T> out;
        for (std::size_t i = 0; i < arr->size(); ++i) {
            out.push_back(convert(*arr->get(i), key_path(key) + "[" + std::to_string(i) + "]"));
        }
        return out;
    }

    const toml::table* subtable(std::string_view key) {
        const auto* n = node(key);
        if (!n) return nullptr;
        if (!n->is_table()) throw ConfigError(key_path(key) + ": expected a table");
        return n->as_table();
    }

    void finish() const {
        if (!table_) return;
        for (const auto& [k, v] : *table_) {
            if (!seen_.count(std::string(k.str()))) {
                throw ConfigError("unknown key '" + key_path(k.str()) + "'");
            }
        }
    }

    static double as_number(const toml::node& n, const std::string& where) {
        if (n.is_floating_point()) return n.as_floating_point()->get();
        if (n.is_integer()) return static_cast<double>(n.as_integer()->get());
        throw ConfigError(where + ": expected a number");
    }

private:
    const toml::table* table_;
    std::string path_;
    std::set<std::string> seen_;
};

std::size_t as_count(const toml::node& n, const std::string& where) {
    if (!n.is_integer() || n.as_integer()->get() < 0) throw ConfigError(where + ": expected a non-negative integer");
    return static_cast<std::size_t>(n.as_integer()->get());
}

std::string as_string(const toml::node& n, const std::string& where) {
    if (!n.is_string()) throw ConfigError(where + ": expected a string");
    return n.as_string()->get();
}

template <class T>
T require(std::optional<T> v, const std::string& key) {
    if (!v) throw ConfigError("missing required key '" + key + "'");
    return *v;
}

template <class Fn>
auto wrap(const std::string& key, Fn&& fn) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        throw ConfigError(key + ": " + e.what());
    }
}

}  // namespace

ExperimentSpec parse_config_string(std::string_view text, std::string_view source) {
    toml::table root;
    try {
        root = toml::parse(text, source);
    } catch (const toml::parse_error& e) {
        std::ostringstream msg;
        msg << "malformed config " << source << ": " << e.description() << " at line "
            << e.source().begin.line;
        throw ConfigError(msg.str());
    }

    ExperimentSpec spec;
    FedConfig& cfg = spec.base;
    Section top(&root, "");
    if (auto v = top.string("output_dir")) spec.output_dir = *v;

    Section ds(top.subtable("dataset"), "dataset");
    if (auto v = ds.string("kind")) {
        if (*v == "synthetic") spec.dataset.kind = DatasetKind::synthetic;
        else if (*v == "csv") spec.dataset.kind = DatasetKind::csv;
        else throw ConfigError("dataset.kind: expected \"synthetic\" or \"csv\"");
    }
    if (auto v = ds.integer("classes")) spec.dataset.synthetic.classes = static_cast<int>(*v);
    if (auto v = ds.count("dim")) spec.dataset.synthetic.dim = *v;
    if (auto v = ds.count("per_class")) spec.dataset.synthetic.per_class = *v;
    if (auto v = ds.number("margin")) spec.dataset.synthetic.margin = *v;
    if (auto v = ds.string("path")) spec.dataset.csv_path = *v;
    ds.finish();
    if (spec.dataset.kind == DatasetKind::synthetic) {
        const auto& s = spec.dataset.synthetic;
        if (s.classes < 2) throw ConfigError("dataset.classes: must be >= 2");
        if (s.per_class < 2) throw ConfigError("dataset.per_class: must be >= 2");
        if (s.dim == 0) throw ConfigError("dataset.dim: must be >= 1");
        if (!(s.margin > 0.0)) throw ConfigError("dataset.margin: must be positive");
    }

    Section md(top.subtable("model"), "model");
    if (auto v = md.string("kind")) {
        if (*v == "mlp") spec.model.kind = ModelKind::mlp;
        else if (*v == "cnn") spec.model.kind = ModelKind::cnn;
        else throw ConfigError("model.kind: expected \"mlp\" or \"cnn\"");
    }
    if (const auto* arr = md.node("hidden")) {
        if (!arr->is_array()) throw ConfigError("model.hidden: expected an array");
        spec.model.hidden.clear();
        for (std::size_t i = 0; i < arr->as_array()->size(); ++i) {
            spec.model.hidden.push_back(as_count(*arr->as_array()->get(i), "model.hidden[" + std::to_string(i) + "]"));
        }
    }
    if (auto v = md.list<std::size_t>("image", as_count)) spec.model.image = *v;
    if (auto v = md.list<std::size_t>("conv_channels", as_count)) spec.model.conv_channels = *v;
    if (auto v = md.count("kernel")) spec.model.kernel = *v;
    md.finish();

    Section fed(top.subtable("federation"), "federation");
    cfg.rounds = static_cast<int>(require(fed.integer("rounds"), "federation.rounds"));
    cfg.clients_total = require(fed.count("clients_total"), "federation.clients_total");
    cfg.clients_per_round = require(fed.count("clients_per_round"), "federation.clients_per_round");
    if (auto v = fed.integer("local_epochs")) cfg.local_epochs = static_cast<int>(*v);
    if (auto v = fed.count("batch_size")) cfg.batch_size = *v;
    if (auto v = fed.number("alpha")) spec.alpha = *v;
    if (auto v = fed.string("weighting")) cfg.weighting = wrap("federation.weighting", [&] { return weighting_from_string(*v); });
    if (auto v = fed.integer("mask_every")) cfg.mask_every = static_cast<int>(*v);
    if (auto v = fed.count("client_threads")) cfg.client_threads = *v;
    fed.finish();

    Section sp(top.subtable("sparsity"), "sparsity");
    auto target = sp.number("target");
    const auto* groups = sp.array("groups");
    if (target && groups) throw ConfigError("sparsity: give either 'target' or 'groups', not both");
    if (groups) {
        cfg.groups.clear();
        for (std::size_t i = 0; i < groups->size(); ++i) {
            const std::string where = "sparsity.groups[" + std::to_string(i) + "]";
            const auto* g = groups->get(i);
            if (!g->is_table()) throw ConfigError(where + ": expected a table");
            Section gs(g->as_table(), where);
            SparsityGroup grp;
            grp.clients = require(gs.count("clients"), where + ".clients");
            grp.target = require(gs.number("target"), where + ".target");
            gs.finish();
            cfg.groups.push_back(grp);
        }
    } else {
        const double t = require(target, "sparsity.target");
        if (!(t >= 0.0 && t < 1.0)) throw ConfigError("sparsity.target: must lie in [0, 1), got " + std::to_string(t));
        cfg.set_uniform_target(t);
    }
    sp.finish();

    Section alg(top.subtable("algorithm"), "algorithm");
    cfg.algorithm = wrap("algorithm.name", [&] { return algorithm_from_string(require(alg.string("name"), "algorithm.name")); });
    if (auto v = alg.string("reparam")) cfg.reparam.kind = wrap("algorithm.reparam", [&] { return reparam_kind_from_string(*v); });
    if (auto v = alg.number("beta")) cfg.reparam.beta = *v;
    if (auto v = alg.boolean("activation_pruning")) cfg.activation_pruning = *v;
    alg.finish();

    Section lr(top.subtable("lr"), "lr");
    if (auto v = lr.number("start")) cfg.lr_start = *v;
    if (auto v = lr.number("end")) cfg.lr_end = *v;
    lr.finish();

    Section seeds(top.subtable("seeds"), "seeds");
    if (auto v = seeds.count("global")) cfg.global_seed = *v;
    std::vector<std::uint64_t> sampling{5378, 9421, 2035};
    if (auto v = seeds.list<std::size_t>("sampling", as_count)) sampling.assign(v->begin(), v->end());
    seeds.finish();
    cfg.sampling_seed = sampling.front();

    Section sw(top.subtable("sweep"), "sweep");
    spec.sweep.algorithms = {cfg.algorithm};
    spec.sweep.alpha = {spec.alpha};
    spec.sweep.activation_pruning = {cfg.activation_pruning};
    spec.sweep.seeds = sampling;
    if (auto v = sw.list<Algorithm>("algorithm", [](const toml::node& n, const std::string& where) {
            return wrap(where, [&] { return algorithm_from_string(as_string(n, where)); });
        })) {
        spec.sweep.algorithms = *v;
    }
    if (auto v = sw.list<double>("target_sparsity", Section::as_number)) spec.sweep.target_sparsity = *v;
    if (auto v = sw.list<double>("alpha", Section::as_number)) spec.sweep.alpha = *v;
    if (auto v = sw.list<bool>("activation_pruning", [](const toml::node& n, const std::string& where) {
            if (!n.is_boolean()) throw ConfigError(where + ": expected a boolean");
            return n.as_boolean()->get();
        })) {
        spec.sweep.activation_pruning = *v;
    }
    sw.finish();
    if (spec.sweep.target_sparsity.empty() && cfg.groups.size() == 1) {
        spec.sweep.target_sparsity = {cfg.groups.front().target};
    }

    top.finish();
    spec.validate();
    return spec;
}

ExperimentSpec parse_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config_string(buf.str(), path.string());
}

nlohmann::json to_json(const FedConfig& cfg) {
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : cfg.groups) groups.push_back({{"clients", g.clients}, {"target", g.target}});
    return {
        {"rounds", cfg.rounds},
        {"clients_total", cfg.clients_total},
        {"clients_per_round", cfg.clients_per_round},
        {"local_epochs", cfg.local_epochs},
        {"batch_size", cfg.batch_size},
        {"groups", groups},
        {"algorithm", to_string(cfg.algorithm)},
        {"reparam", to_string(cfg.reparam.kind)},
        {"beta", cfg.reparam.beta},
        {"activation_pruning", cfg.activation_pruning},
        {"lr_start", cfg.lr_start},
        {"lr_end", cfg.lr_end},
        {"sampling_seed", cfg.sampling_seed},
        {"global_seed", cfg.global_seed},
        {"weighting", to_string(cfg.weighting)},
        {"mask_every", cfg.mask_every},
        {"client_threads", cfg.client_threads},
    };
}

namespace {

FedConfig fed_config_from_json(const nlohmann::json& j) {
    FedConfig cfg;
    cfg.rounds = j.at("rounds").get<int>();
    cfg.clients_total = j.at("clients_total").get<std::size_t>();
    cfg.clients_per_round = j.at("clients_per_round").get<std::size_t>();
    cfg.local_epochs = j.at("local_epochs").get<int>();
    cfg.batch_size = j.at("batch_size").get<std::size_t>();
    cfg.groups.clear();
    for (const auto& g : j.at("groups")) {
        cfg.groups.push_back({g.at("clients").get<std::size_t>(), g.at("target").get<double>()});
    }
    cfg.algorithm = algorithm_from_string(j.at("algorithm").get<std::string>());
    cfg.reparam.kind = reparam_kind_from_string(j.at("reparam").get<std::string>());
    cfg.reparam.beta = j.at("beta").get<double>();
    cfg.activation_pruning = j.at("activation_pruning").get<bool>();
    cfg.lr_start = j.at("lr_start").get<double>();
    cfg.lr_end = j.at("lr_end").get<double>();
    cfg.sampling_seed = j.at("sampling_seed").get<std::uint64_t>();
    cfg.global_seed = j.at("global_seed").get<std::uint64_t>();
    cfg.weighting = weighting_from_string(j.at("weighting").get<std::string>());
    cfg.mask_every = j.at("mask_every").get<int>();
    cfg.client_threads = j.at("client_threads").get<std::size_t>();
    return cfg;
}

}  // namespace

nlohmann::json to_json(const ExperimentSpec& spec) {
    nlohmann::json algs = nlohmann::json::array();
    for (auto a : spec.sweep.algorithms) algs.push_back(to_string(a));
    std::vector<bool> ap = spec.sweep.activation_pruning;
    return {
        {"base", to_json(spec.base)},
        {"alpha", spec.alpha},
        {"dataset",
         {{"kind", spec.dataset.kind == DatasetKind::synthetic ? "synthetic" : "csv"},
          {"classes", spec.dataset.synthetic.classes},
          {"dim", spec.dataset.synthetic.dim},
          {"per_class", spec.dataset.synthetic.per_class},
          {"margin", spec.dataset.synthetic.margin},
          {"path", spec.dataset.csv_path}}},
        {"model",
         {{"kind", spec.model.kind == ModelKind::mlp ? "mlp" : "cnn"},
          {"hidden", spec.model.hidden},
          {"image", spec.model.image},
          {"conv_channels", spec.model.conv_channels},
          {"kernel", spec.model.kernel}}},
        {"sweep",
         {{"algorithm", algs},
          {"target_sparsity", spec.sweep.target_sparsity},
          {"alpha", spec.sweep.alpha},
          {"activation_pruning", ap},
          {"seeds", spec.sweep.seeds}}},
        {"output_dir", spec.output_dir},
    };
}

ExperimentSpec experiment_from_json(const nlohmann::json& j) {
    try {
        ExperimentSpec spec;
        spec.base = fed_config_from_json(j.at("base"));
        spec.alpha = j.at("alpha").get<double>();
        const auto& d = j.at("dataset");
        spec.dataset.kind = d.at("kind").get<std::string>() == "csv" ? DatasetKind::csv : DatasetKind::synthetic;
        spec.dataset.synthetic.classes = d.at("classes").get<int>();
        spec.dataset.synthetic.dim = d.at("dim").get<std::size_t>();
        spec.dataset.synthetic.per_class = d.at("per_class").get<std::size_t>();
        spec.dataset.synthetic.margin = d.at("margin").get<double>();
        spec.dataset.csv_path = d.at("path").get<std::string>();
        const auto& m = j.at("model");
        spec.model.kind = m.at("kind").get<std::string>() == "cnn" ? ModelKind::cnn : ModelKind::mlp;
        spec.model.hidden = m.at("hidden").get<std::vector<std::size_t>>();
        spec.model.image = m.at("image").get<std::vector<std::size_t>>();
        spec.model.conv_channels = m.at("conv_channels").get<std::vector<std::size_t>>();
        spec.model.kernel = m.at("kernel").get<std::size_t>();
        const auto& s = j.at("sweep");
        spec.sweep.algorithms.clear();
        for (const auto& a : s.at("algorithm")) spec.sweep.algorithms.push_back(algorithm_from_string(a.get<std::string>()));
        spec.sweep.target_sparsity = s.at("target_sparsity").get<std::vector<double>>();
        spec.sweep.alpha = s.at("alpha").get<std::vector<double>>();
        spec.sweep.activation_pruning = s.at("activation_pruning").get<std::vector<bool>>();
        spec.sweep.seeds = s.at("seeds").get<std::vector<std::uint64_t>>();
        spec.output_dir = j.at("output_dir").get<std::string>();
        return spec;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed experiment json: ") + e.what());
    }
}

}  // namespace sparsyfed
