#pragma once

#include <optional>
#include <span>

#include "monelab/model.hpp"

namespace monelab {

// Per-layer key/value history for incremental decoding.
template <typename T>
struct KVCache {
    std::vector<TensorT<T>> k;  // per layer, [len x d_model]
    std::vector<TensorT<T>> v;
    int64_t len = 0;

    static KVCache make(const ModelConfig& cfg) {
        KVCache c;
        c.k.assign(static_cast<size_t>(cfg.n_layers), TensorT<T>({0, cfg.d_model}));
        c.v.assign(static_cast<size_t>(cfg.n_layers), TensorT<T>({0, cfg.d_model}));
        return c;
    }
};

// Hook invoked per (layer, token, expert) during the FFN pass of the plain
// forward; used by the analysis module to harvest gate vectors.
template <typename T>
using LayerFfnObserver =
    std::function<void(int64_t layer, int64_t token, int64_t expert, const TensorT<T>& gate,
                       std::span<const int64_t> selected_neurons)>;

// Materialized per-layer expert weights for an inference session: built once
// from a model, frozen for fast neuron gathers, and reused across forward
// calls. Stale if the model's parameters change afterwards.
template <typename T>
struct WeightsCache {
    std::vector<std::vector<ExpertWeightsT<T>>> experts;  // per layer
    std::vector<ExpertWeightsT<T>> shared;                // per layer
    std::vector<RouterWeightsT<T>> routers;               // per layer
    std::vector<ExpertWeightsT<T>> dense_ffn;             // per layer (dense kind)

    static WeightsCache build(const Model<T>& model) {
        const ModelConfig& cfg = model.cfg;
        WeightsCache c;
        for (int64_t l = 0; l < cfg.n_layers; ++l) {
            if (cfg.routed()) {
                std::vector<ExpertWeightsT<T>> row;
                row.reserve(static_cast<size_t>(cfg.n_experts));
                for (int64_t e = 0; e < cfg.n_experts; ++e) {
                    row.push_back(model.expert_weights(l, e));
                    row.back().freeze_for_inference();
                }
                c.experts.push_back(std::move(row));
                c.shared.push_back(model.shared_weights(l));
                c.shared.back().freeze_for_inference();
                c.routers.push_back(model.router_weights(l));
            } else {
                c.dense_ffn.push_back(model.dense_ffn_weights(l));
            }
        }
        return c;
    }
};

template <typename T>
struct ForwardOptions {
    // neuron budget override per activated expert (pruning sweeps); 0 = model default
    int64_t k_neurons_override = 0;
    const LayerFfnObserver<T>* observer = nullptr;
    // per-layer stats sinks (optional)
    std::vector<ExpertLoadStats>* expert_stats = nullptr;
    std::vector<NeuronLoadStats>* neuron_stats = nullptr;
    // reusable frozen weights; forward calls fall back to per-call copies
    const WeightsCache<T>* weights = nullptr;
};

namespace detail {

template <typename T>
TensorT<T> causal_attention(const Model<T>& model, int64_t layer, const TensorT<T>& x_new,
                            KVCache<T>* cache, int64_t pos0) {
    const ModelConfig& cfg = model.cfg;
    const std::string p = "layers." + std::to_string(layer) + ".attn.";
    const int64_t n = x_new.dim(0);
    const int64_t dh = cfg.d_model / cfg.n_heads;

    TensorT<T> q = ops::matmul_nt(x_new, model.params[p + "wq"]);
    TensorT<T> k_new = ops::matmul_nt(x_new, model.params[p + "wk"]);
    TensorT<T> v_new = ops::matmul_nt(x_new, model.params[p + "wv"]);

    // history = cached rows plus the new rows
    const TensorT<T>* k_all = &k_new;
    const TensorT<T>* v_all = &v_new;
    TensorT<T> k_cat, v_cat;
    if (cache && cache->len > 0) {
        k_cat = TensorT<T>({cache->len + n, cfg.d_model});
        v_cat = TensorT<T>({cache->len + n, cfg.d_model});
        std::copy_n(cache->k[static_cast<size_t>(layer)].data(), cache->len * cfg.d_model,
                    k_cat.data());
        std::copy_n(k_new.data(), n * cfg.d_model, k_cat.data() + cache->len * cfg.d_model);
        std::copy_n(cache->v[static_cast<size_t>(layer)].data(), cache->len * cfg.d_model,
                    v_cat.data());
        std::copy_n(v_new.data(), n * cfg.d_model, v_cat.data() + cache->len * cfg.d_model);
        k_all = &k_cat;
        v_all = &v_cat;
    }
    const int64_t hist = k_all->dim(0);

    TensorT<T> ctx({n, cfg.d_model});
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    for (int64_t h = 0; h < cfg.n_heads; ++h) {
        const int64_t c0 = h * dh;
        TensorT<T> scores({n, hist});
        for (int64_t i = 0; i < n; ++i) {
            const int64_t reach = pos0 + i;  // absolute position attended up to
            for (int64_t j = 0; j < hist; ++j) {
                if (j > reach) {
                    scores.at(i, j) = -std::numeric_limits<T>::infinity();
                    continue;
                }
                T acc = 0;
                for (int64_t d = 0; d < dh; ++d)
                    acc += q.at(i, c0 + d) * k_all->at(j, c0 + d);
                scores.at(i, j) = acc * inv_sqrt;
            }
        }
        ops::softmax_last_axis_inplace(scores);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < hist; ++j) {
                const T pij = scores.at(i, j);
                if (pij == T(0)) continue;
                for (int64_t d = 0; d < dh; ++d)
                    ctx.at(i, c0 + d) += pij * v_all->at(j, c0 + d);
            }
    }

    if (cache) {
        cache->k[static_cast<size_t>(layer)] = k_all == &k_new ? k_new : std::move(k_cat);
        cache->v[static_cast<size_t>(layer)] = v_all == &v_new ? v_new : std::move(v_cat);
    }
    return ops::matmul_nt(ctx, model.params[p + "wo"]);
}

template <typename T>
TensorT<T> ffn_block(const Model<T>& model, int64_t layer, const TensorT<T>& x,
                     const ForwardOptions<T>& opt) {
    const ModelConfig& cfg = model.cfg;
    if (cfg.layer_kind == LayerKind::dense_ffn) {
        ExpertWeightsT<T> w = opt.weights
                                  ? opt.weights->dense_ffn[static_cast<size_t>(layer)]
                                  : model.dense_ffn_weights(layer);
        const int64_t n = x.dim(0);
        TensorT<T> out({n, cfg.d_model});
        for (int64_t t = 0; t < n; ++t) {
            TensorT<T> xt({cfg.d_model});
            std::copy_n(x.data() + t * cfg.d_model, cfg.d_model, xt.data());
            TensorT<T> y = expert_forward(xt, w, cfg.internal_act).y;
            std::copy_n(y.data(), cfg.d_model, out.data() + t * cfg.d_model);
        }
        return out;
    }

    std::vector<ExpertWeightsT<T>> local_experts;
    ExpertWeightsT<T> local_shared;
    RouterWeightsT<T> local_router;
    std::span<const ExpertWeightsT<T>> experts;
    const ExpertWeightsT<T>* shared_ptr = nullptr;
    const RouterWeightsT<T>* router_ptr = nullptr;
    if (opt.weights) {
        experts = opt.weights->experts[static_cast<size_t>(layer)];
        shared_ptr = &opt.weights->shared[static_cast<size_t>(layer)];
        router_ptr = &opt.weights->routers[static_cast<size_t>(layer)];
    } else {
        local_experts.reserve(static_cast<size_t>(cfg.n_experts));
        for (int64_t e = 0; e < cfg.n_experts; ++e)
            local_experts.push_back(model.expert_weights(layer, e));
        local_shared = model.shared_weights(layer);
        local_router = model.router_weights(layer);
        experts = local_experts;
        shared_ptr = &local_shared;
        router_ptr = &local_router;
    }
    const ExpertWeightsT<T>& shared = *shared_ptr;
    const RouterWeightsT<T>& router = *router_ptr;

    FfnObserver<T> obs;
    const FfnObserver<T>* obs_ptr = nullptr;
    if (opt.observer && *opt.observer) {
        obs = [&, layer](int64_t token, int64_t expert, const TensorT<T>& gate,
                         std::span<const int64_t> sel) {
            (*opt.observer)(layer, token, expert, gate, sel);
        };
        obs_ptr = &obs;
    }

    int64_t k_n = cfg.effective_k_neurons();
    if (opt.k_neurons_override > 0) k_n = std::min(k_n, opt.k_neurons_override);

    if (cfg.layer_kind == LayerKind::moe && k_n == cfg.d_expert) {
        auto out = moe_layer_forward<T>(x, experts, &shared, router, cfg.k_experts,
                                        cfg.internal_act, ActKind::softmax, obs_ptr);
        if (opt.expert_stats)
            (*opt.expert_stats)[static_cast<size_t>(layer)].merge(out.stats);
        return std::move(out.y);
    }

    MoNEConfig mcfg = cfg.mone();
    mcfg.k_neurons = k_n;
    const bool want_neuron_stats = opt.neuron_stats != nullptr;
    auto out = mone_layer_forward<T>(x, experts, &shared, router, mcfg, ActKind::softmax,
                                     obs_ptr, cfg.select_shared, want_neuron_stats);
    if (opt.expert_stats) (*opt.expert_stats)[static_cast<size_t>(layer)].merge(out.expert_stats);
    if (opt.neuron_stats) (*opt.neuron_stats)[static_cast<size_t>(layer)].merge(out.neuron_stats);
    return std::move(out.y);
}

}  // namespace detail

// Hidden states for tokens at absolute positions [pos0, pos0 + n). With a
// cache this is the incremental decode step; without one, a full forward.
template <typename T>
TensorT<T> forward_hidden(const Model<T>& model, std::span<const int32_t> tokens,
                          std::type_identity_t<KVCache<T>>* cache,
                          const std::type_identity_t<ForwardOptions<T>>& opt = {}) {
    const ModelConfig& cfg = model.cfg;
    const int64_t n = static_cast<int64_t>(tokens.size());
    const int64_t pos0 = cache ? cache->len : 0;
    if (pos0 + n > cfg.seq_len)
        throw InputError("sequence length " + std::to_string(pos0 + n) +
                         " exceeds seq_len=" + std::to_string(cfg.seq_len));

    const TensorT<T>& emb = model.params["tok_embed"];
    const TensorT<T>& pos = model.params["pos_embed"];
    TensorT<T> x({n, cfg.d_model});
    for (int64_t t = 0; t < n; ++t) {
        const int32_t id = tokens[static_cast<size_t>(t)];
        if (id < 0 || id >= cfg.vocab_size)
            throw InputError("token id " + std::to_string(id) + " out of range");
        for (int64_t j = 0; j < cfg.d_model; ++j)
            x.at(t, j) = emb.at(id, j) + pos.at(pos0 + t, j);
    }

    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        TensorT<T> normed = ops::rmsnorm_rows(x, model.params[p + "attn_norm"]);
        TensorT<T> attn = detail::causal_attention(model, l, normed, cache, pos0);
        for (int64_t i = 0; i < x.numel(); ++i) x[i] += attn[i];

        TensorT<T> normed2 = ops::rmsnorm_rows(x, model.params[p + "ffn_norm"]);
        TensorT<T> ffn = detail::ffn_block(model, l, normed2, opt);
        for (int64_t i = 0; i < x.numel(); ++i) x[i] += ffn[i];
    }
    if (cache) cache->len = pos0 + n;
    return ops::rmsnorm_rows(x, model.params["final_norm"]);
}

// Logits via the tied embedding.
template <typename T>
TensorT<T> forward_logits(const Model<T>& model, std::span<const int32_t> tokens,
                          std::type_identity_t<KVCache<T>>* cache = nullptr,
                          const std::type_identity_t<ForwardOptions<T>>& opt = {}) {
    TensorT<T> h = forward_hidden(model, tokens, cache, opt);
    return ops::matmul_nt(h, model.params["tok_embed"]);
}

template <typename T>
struct LmForwardOut {
    TensorT<T> logits;  // [T x vocab]
    double ce_loss = 0; // mean next-token cross entropy over T-1 positions
    double aux_loss = 0;
};

// Full forward of one sequence: logits, next-token cross entropy within the
// sequence, and the summed auxiliary losses of every routed layer.
template <typename T>
LmForwardOut<T> lm_forward(const Model<T>& model, std::span<const int32_t> tokens,
                           const std::type_identity_t<ForwardOptions<T>>& opt_in = {}) {
    const ModelConfig& cfg = model.cfg;
    if (tokens.empty()) throw InputError("lm_forward on an empty sequence");

    ForwardOptions<T> opt = opt_in;
    std::vector<ExpertLoadStats> estats;
    std::vector<NeuronLoadStats> nstats;
    if (cfg.routed() && !opt.expert_stats) {
        estats.assign(static_cast<size_t>(cfg.n_layers),
                      ExpertLoadStats::zero(cfg.n_experts));
        nstats.assign(static_cast<size_t>(cfg.n_layers),
                      NeuronLoadStats::zero(cfg.n_experts, cfg.d_expert));
        opt.expert_stats = &estats;
        opt.neuron_stats = &nstats;
    }

    LmForwardOut<T> out;
    out.logits = forward_logits(model, tokens, nullptr, opt);

    const int64_t rows = static_cast<int64_t>(tokens.size()) - 1;
    if (rows > 0) {
        std::vector<int32_t> targets(tokens.begin() + 1, tokens.end());
        TensorT<T> pred({rows, cfg.vocab_size});
        std::copy_n(out.logits.data(), rows * cfg.vocab_size, pred.data());
        auto ce = ops::cross_entropy_rows(pred, targets);
        double s = 0;
        for (double c : ce) s += c;
        out.ce_loss = s / static_cast<double>(rows);
    }

    if (cfg.routed() && opt.expert_stats) {
        MoNEConfig mcfg = model.cfg.mone();
        for (int64_t l = 0; l < cfg.n_layers; ++l) {
            const auto& es = (*opt.expert_stats)[static_cast<size_t>(l)];
            if (es.tokens == 0) continue;
            const NeuronLoadStats* ns = nullptr;
            if (cfg.layer_kind == LayerKind::mone && opt.neuron_stats)
                ns = &(*opt.neuron_stats)[static_cast<size_t>(l)];
            out.aux_loss += total_aux_loss(es, ns, cfg.alpha_aux, mcfg);
        }
    }
    return out;
}

struct EvalMetrics {
    double mean_ce_loss = 0;
    double token_accuracy = 0;
    int64_t tokens = 0;  // number of scored target positions

    bool operator==(const EvalMetrics&) const = default;
};

// Streams the dataset in non-overlapping seq_len windows and scores
// next-token prediction. Deterministic; no stat or loss side effects.
template <typename T>
EvalMetrics evaluate(const Model<T>& model, std::span<const int32_t> dataset,
                     const std::type_identity_t<ForwardOptions<T>>& opt_in = {}) {
    const int64_t win = model.cfg.seq_len;
    if (static_cast<int64_t>(dataset.size()) < win + 1)
        throw InputError("evaluate: dataset shorter than one seq_len+1 window");

    ForwardOptions<T> opt = opt_in;
    WeightsCache<T> cache;
    if (!opt.weights) {
        cache = WeightsCache<T>::build(model);
        opt.weights = &cache;
    }

    double ce_sum = 0;
    int64_t correct = 0, total = 0;
    for (int64_t start = 0; start + win + 1 <= static_cast<int64_t>(dataset.size());
         start += win) {
        std::span<const int32_t> inputs = dataset.subspan(static_cast<size_t>(start),
                                                          static_cast<size_t>(win));
        std::span<const int32_t> targets = dataset.subspan(static_cast<size_t>(start + 1),
                                                           static_cast<size_t>(win));
        TensorT<T> logits = forward_logits(model, inputs, nullptr, opt);
        std::vector<int32_t> tv(targets.begin(), targets.end());
        auto ce = ops::cross_entropy_rows(logits, tv);
        for (double c : ce) ce_sum += c;
        for (int64_t r = 0; r < win; ++r) {
            int64_t best = 0;
            for (int64_t j = 1; j < model.cfg.vocab_size; ++j)
                if (logits.at(r, j) > logits.at(r, best)) best = j;
            correct += (best == tv[static_cast<size_t>(r)]) ? 1 : 0;
        }
        total += win;
    }
    return {ce_sum / static_cast<double>(total),
            static_cast<double>(correct) / static_cast<double>(total), total};
}

// Greedy autoregressive continuation; prompt must already fit in seq_len
// together with the new tokens.
template <typename T>
std::vector<int32_t> generate_greedy(const Model<T>& model, std::span<const int32_t> prompt,
                                     int64_t n_new) {
    if (prompt.empty()) throw InputError("generate: empty prompt");
    if (static_cast<int64_t>(prompt.size()) + n_new > model.cfg.seq_len)
        throw InputError("generate: prompt + new tokens exceed seq_len");

    WeightsCache<T> weights = WeightsCache<T>::build(model);
    ForwardOptions<T> opt;
    opt.weights = &weights;

    KVCache<T> cache = KVCache<T>::make(model.cfg);
    std::vector<int32_t> out(prompt.begin(), prompt.end());
    TensorT<T> logits = forward_logits(model, prompt, &cache, opt);

    for (int64_t g = 0; g < n_new; ++g) {
        const int64_t last = logits.dim(0) - 1;
        int64_t best = 0;
        for (int64_t j = 1; j < model.cfg.vocab_size; ++j)
            if (logits.at(last, j) > logits.at(last, best)) best = j;
        out.push_back(static_cast<int32_t>(best));
        if (g + 1 == n_new) break;
        int32_t tok = static_cast<int32_t>(best);
        logits = forward_logits(model, std::span<const int32_t>(&tok, 1), &cache, opt);
    }
    return out;
}

}  // namespace monelab
