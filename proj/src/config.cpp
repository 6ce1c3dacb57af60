#include "monelab/config.hpp"

#include <fstream>
#include <set>

namespace monelab {

using nlohmann::json;

namespace {

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                         const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

template <typename V>
V require(const json& j, const std::string& key, const std::string& where) {
    if (!j.contains(key)) throw ConfigError("missing key '" + key + "' in " + where);
    try {
        return j.at(key).get<V>();
    } catch (const json::exception&) {
        throw ConfigError("bad value for '" + key + "' in " + where);
    }
}

template <typename V>
V optional(const json& j, const std::string& key, V fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<V>();
    } catch (const json::exception&) {
        throw ConfigError("bad value for '" + key + "' in " + where);
    }
}

}  // namespace

json model_config_to_json(const ModelConfig& cfg) {
    return json{{"vocab_size", cfg.vocab_size},
                {"d_model", cfg.d_model},
                {"n_layers", cfg.n_layers},
                {"n_heads", cfg.n_heads},
                {"d_expert", cfg.d_expert},
                {"n_experts", cfg.n_experts},
                {"k_experts", cfg.k_experts},
                {"k_neurons", cfg.k_neurons},
                {"seq_len", cfg.seq_len},
                {"layer_kind", layer_kind_name(cfg.layer_kind)},
                {"internal_act", act_name(cfg.internal_act)},
                {"alpha_aux", cfg.alpha_aux},
                {"alpha_ng", cfg.alpha_ng},
                {"ng_stat_norm", neuron_stat_norm_name(cfg.ng_stat_norm)},
                {"select_shared", cfg.select_shared},
                {"seed", cfg.seed},
                {"dtype", dtype_name(cfg.dtype)}};
}

ModelConfig model_config_from_json(const json& j) {
    const std::string where = "model config";
    reject_unknown_keys(j,
                        {"vocab_size", "d_model", "n_layers", "n_heads", "d_expert",
                         "n_experts", "k_experts", "k_neurons", "k_neuron_ratio", "seq_len",
                         "layer_kind", "internal_act", "alpha_aux", "alpha_ng",
                         "ng_stat_norm", "select_shared", "seed", "dtype"},
                        where);
    ModelConfig cfg;
    cfg.vocab_size = require<int64_t>(j, "vocab_size", where);
    cfg.d_model = require<int64_t>(j, "d_model", where);
    cfg.n_layers = require<int64_t>(j, "n_layers", where);
    cfg.n_heads = require<int64_t>(j, "n_heads", where);
    cfg.d_expert = require<int64_t>(j, "d_expert", where);
    cfg.seq_len = require<int64_t>(j, "seq_len", where);
    cfg.layer_kind = parse_layer_kind(require<std::string>(j, "layer_kind", where));
    if (!j.contains("seed"))
        throw ConfigError("missing key 'seed' in " + where +
                          " (seeds are mandatory, no clock defaults)");
    cfg.seed = require<uint64_t>(j, "seed", where);

    cfg.n_experts = optional<int64_t>(j, "n_experts", 0, where);
    cfg.k_experts = optional<int64_t>(j, "k_experts", 0, where);
    cfg.internal_act = parse_act(optional<std::string>(j, "internal_act", "silu", where));
    cfg.alpha_aux = optional<double>(j, "alpha_aux", 0.0, where);
    cfg.alpha_ng = optional<double>(j, "alpha_ng", 0.0, where);
    cfg.ng_stat_norm =
        parse_neuron_stat_norm(optional<std::string>(j, "ng_stat_norm", "softmax", where));
    cfg.select_shared = optional<bool>(j, "select_shared", false, where);
    cfg.dtype = parse_dtype(optional<std::string>(j, "dtype", "f64", where));

    if (j.contains("k_neurons") && j.contains("k_neuron_ratio"))
        throw ConfigError("give either k_neurons or k_neuron_ratio, not both");
    if (j.contains("k_neuron_ratio")) {
        std::string r = require<std::string>(j, "k_neuron_ratio", where);
        auto slash = r.find('/');
        if (slash == std::string::npos)
            throw ConfigError("k_neuron_ratio must look like '1/4'");
        int64_t num = 0, den = 0;
        try {
            num = std::stoll(r.substr(0, slash));
            den = std::stoll(r.substr(slash + 1));
        } catch (const std::exception&) {
            throw ConfigError("k_neuron_ratio must look like '1/4'");
        }
        cfg.k_neurons = neurons_for_ratio(cfg.d_expert, num, den);
    } else {
        cfg.k_neurons = optional<int64_t>(j, "k_neurons", 0, where);
    }

    cfg.validate();
    return cfg;
}

json train_config_to_json(const TrainConfig& t) {
    return json{{"lr", t.lr},
                {"weight_decay", t.weight_decay},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"adam_eps", t.adam_eps},
                {"steps", t.steps},
                {"batch_seqs", t.batch_seqs},
                {"warmup_steps", t.warmup_steps},
                {"log_every", t.log_every}};
}

TrainConfig train_config_from_json(const json& j) {
    const std::string where = "train config";
    reject_unknown_keys(j,
                        {"lr", "weight_decay", "beta1", "beta2", "adam_eps", "steps",
                         "batch_seqs", "warmup_steps", "log_every", "data"},
                        where);
    TrainConfig t;
    t.steps = require<int64_t>(j, "steps", where);
    t.batch_seqs = optional<int64_t>(j, "batch_seqs", 1, where);
    t.lr = optional<double>(j, "lr", 5e-4, where);
    t.weight_decay = optional<double>(j, "weight_decay", 0.1, where);
    t.beta1 = optional<double>(j, "beta1", 0.9, where);
    t.beta2 = optional<double>(j, "beta2", 0.999, where);
    t.adam_eps = optional<double>(j, "adam_eps", 1e-8, where);
    t.warmup_steps = optional<int64_t>(j, "warmup_steps", 0, where);
    t.log_every = optional<int64_t>(j, "log_every", 1, where);
    // steps == 0 is legal here: checkpoints embed the record of an untrained
    // state; the train subcommand enforces steps >= 1 itself
    if (t.steps < 0 || t.batch_seqs < 1)
        throw ConfigError("steps must be >= 0 and batch_seqs >= 1");
    return t;
}

RunFileConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config file '" + path + "' is not valid JSON: " +
                          std::string(e.what()));
    }
    reject_unknown_keys(j, {"model", "train"}, "config file");
    if (!j.contains("model")) throw ConfigError("config file lacks a 'model' section");

    RunFileConfig rc;
    rc.model = model_config_from_json(j.at("model"));
    if (j.contains("train")) {
        rc.train = train_config_from_json(j.at("train"));
        rc.has_train = true;
        if (j.at("train").contains("data"))
            rc.data_spec = j.at("train").at("data").get<std::string>();
    }
    return rc;
}

}  // namespace monelab
