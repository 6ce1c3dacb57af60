#pragma once

#include <map>
#include <string>
#include <vector>

#include "monelab/mone.hpp"
#include "monelab/ops.hpp"
#include "monelab/rng.hpp"

namespace monelab {

enum class LayerKind { dense_ffn, moe, mone };

inline const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::dense_ffn: return "dense_ffn";
        case LayerKind::moe: return "moe";
        case LayerKind::mone: return "mone";
    }
    return "?";
}

inline LayerKind parse_layer_kind(const std::string& s) {
    if (s == "dense_ffn") return LayerKind::dense_ffn;
    if (s == "moe") return LayerKind::moe;
    if (s == "mone") return LayerKind::mone;
    throw ConfigError("unknown layer_kind '" + s + "'");
}

// Every FFN slot in the transformer is one of: a dense GLU, a traditional
// MoE layer, or a MoNE layer. Routed layers always carry one shared expert.
struct ModelConfig {
    int64_t vocab_size = 0;
    int64_t d_model = 0;
    int64_t n_layers = 0;
    int64_t n_heads = 0;
    int64_t d_expert = 0;
    int64_t n_experts = 0;   // routed experts per layer (moe/mone)
    int64_t k_experts = 0;   // experts activated per token
    int64_t k_neurons = 0;   // neurons kept per activated expert (mone)
    int64_t seq_len = 0;
    LayerKind layer_kind = LayerKind::moe;
    ActKind internal_act = ActKind::silu;
    double alpha_aux = 0.0;
    double alpha_ng = 0.0;
    NeuronStatNorm ng_stat_norm = NeuronStatNorm::softmax;
    bool select_shared = false;  // apply neuron selection to the shared expert
    uint64_t seed = 0;
    Dtype dtype = Dtype::f64;

    bool routed() const { return layer_kind != LayerKind::dense_ffn; }

    MoNEConfig mone() const {
        return {k_experts, k_neurons, internal_act, alpha_ng, ng_stat_norm};
    }

    // effective neuron count per activated expert: full width except in mone
    int64_t effective_k_neurons() const {
        return layer_kind == LayerKind::mone ? k_neurons : d_expert;
    }

    void validate() const {
        if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
        if (d_model < 1 || n_layers < 1 || n_heads < 1 || seq_len < 2 || d_expert < 1)
            throw ConfigError("model dimensions must be >= 1 (seq_len >= 2)");
        if (d_model % n_heads != 0)
            throw ConfigError("d_model must be divisible by n_heads");
        if (routed()) {
            if (n_experts < 1) throw ConfigError("n_experts must be >= 1");
            if (k_experts < 1 || k_experts > n_experts)
                throw ConfigError("k_experts out of range");
        }
        if (layer_kind == LayerKind::mone && (k_neurons < 1 || k_neurons > d_expert))
            throw ConfigError("k_neurons out of range for d_expert");
        if (alpha_aux < 0 || alpha_ng < 0)
            throw ConfigError("loss coefficients must be non-negative");
    }
};

// Flat named-tensor registry. Creation order is fixed by the architecture,
// which keeps init draws, checkpoints, and optimizer state aligned.
template <typename T>
struct ParamSet {
    std::vector<std::string> names;
    std::vector<TensorT<T>> tensors;
    std::map<std::string, int64_t> by_name;

    int64_t add(std::string name, TensorT<T> t) {
        int64_t id = static_cast<int64_t>(tensors.size());
        by_name.emplace(name, id);
        names.push_back(std::move(name));
        tensors.push_back(std::move(t));
        return id;
    }

    int64_t index_of(const std::string& name) const {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw ConfigError("unknown parameter '" + name + "'");
        return it->second;
    }

    TensorT<T>& operator[](const std::string& name) {
        return tensors[static_cast<size_t>(index_of(name))];
    }
    const TensorT<T>& operator[](const std::string& name) const {
        return tensors[static_cast<size_t>(index_of(name))];
    }

    int64_t count() const { return static_cast<int64_t>(tensors.size()); }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& t : tensors) n += t.numel();
        return n;
    }
};

template <typename T>
struct Model {
    ModelConfig cfg;
    ParamSet<T> params;

    // Parameter layout is identical for moe and mone configs of the same
    // shape: neuron selection adds no parameters.
    static Model init(const ModelConfig& cfg) {
        cfg.validate();
        Model m;
        m.cfg = cfg;
        Rng rng = Rng(cfg.seed).split(0x1297);  // init stream

        auto w = [&](std::vector<int64_t> shape) {
            return ops::init_weights<T>(std::move(shape), rng);
        };
        auto gain = [&](int64_t n) { return TensorT<T>::full({n}, T(1)); };

        m.params.add("tok_embed", w({cfg.vocab_size, cfg.d_model}));
        m.params.add("pos_embed", w({cfg.seq_len, cfg.d_model}));
        for (int64_t l = 0; l < cfg.n_layers; ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            m.params.add(p + "attn_norm", gain(cfg.d_model));
            m.params.add(p + "attn.wq", w({cfg.d_model, cfg.d_model}));
            m.params.add(p + "attn.wk", w({cfg.d_model, cfg.d_model}));
            m.params.add(p + "attn.wv", w({cfg.d_model, cfg.d_model}));
            m.params.add(p + "attn.wo", w({cfg.d_model, cfg.d_model}));
            m.params.add(p + "ffn_norm", gain(cfg.d_model));
            if (cfg.routed()) {
                m.params.add(p + "router", w({cfg.n_experts, cfg.d_model}));
                for (int64_t e = 0; e < cfg.n_experts; ++e) {
                    const std::string ep = p + "experts." + std::to_string(e) + ".";
                    m.params.add(ep + "gate", w({cfg.d_expert, cfg.d_model}));
                    m.params.add(ep + "up", w({cfg.d_expert, cfg.d_model}));
                    m.params.add(ep + "down", w({cfg.d_model, cfg.d_expert}));
                }
                m.params.add(p + "shared.gate", w({cfg.d_expert, cfg.d_model}));
                m.params.add(p + "shared.up", w({cfg.d_expert, cfg.d_model}));
                m.params.add(p + "shared.down", w({cfg.d_model, cfg.d_expert}));
            } else {
                m.params.add(p + "ffn.gate", w({cfg.d_expert, cfg.d_model}));
                m.params.add(p + "ffn.up", w({cfg.d_expert, cfg.d_model}));
                m.params.add(p + "ffn.down", w({cfg.d_model, cfg.d_expert}));
            }
        }
        m.params.add("final_norm", gain(cfg.d_model));
        return m;
    }

    // Assembles expert weight views (copies; desk scale) for the plain
    // inference path.
    ExpertWeightsT<T> expert_weights(int64_t layer, int64_t expert) const {
        const std::string p =
            "layers." + std::to_string(layer) + ".experts." + std::to_string(expert) + ".";
        return {params[p + "gate"], params[p + "up"], params[p + "down"], {}};
    }

    ExpertWeightsT<T> shared_weights(int64_t layer) const {
        const std::string p = "layers." + std::to_string(layer) + ".shared.";
        return {params[p + "gate"], params[p + "up"], params[p + "down"], {}};
    }

    ExpertWeightsT<T> dense_ffn_weights(int64_t layer) const {
        const std::string p = "layers." + std::to_string(layer) + ".ffn.";
        return {params[p + "gate"], params[p + "up"], params[p + "down"], {}};
    }

    RouterWeightsT<T> router_weights(int64_t layer) const {
        return {params["layers." + std::to_string(layer) + ".router"]};
    }
};

}  // namespace monelab
