#pragma once

#include <span>
#include <vector>

#include "monelab/routing.hpp"

namespace monelab {

// How per-neuron gate mass is accumulated for the neuron-granular
// load-balance stats: softmax over the selected gate values (default, makes
// the per-token mass a distribution) or their raw magnitudes.
enum class NeuronStatNorm { softmax, abs_gate };

inline const char* neuron_stat_norm_name(NeuronStatNorm n) {
    return n == NeuronStatNorm::softmax ? "softmax" : "abs_gate";
}

inline NeuronStatNorm parse_neuron_stat_norm(const std::string& s) {
    if (s == "softmax") return NeuronStatNorm::softmax;
    if (s == "abs_gate") return NeuronStatNorm::abs_gate;
    throw ConfigError("unknown ng_stat_norm '" + s + "'");
}

struct MoNEConfig {
    int64_t k_experts = 1;      // experts activated per token
    int64_t k_neurons = 1;      // neurons kept per activated expert (absolute count)
    ActKind internal_act = ActKind::silu;
    double alpha_ng = 0.0;      // neuron-granular load-balance coefficient
    NeuronStatNorm stat_norm = NeuronStatNorm::softmax;

    void validate(int64_t d_expert, int64_t n_experts) const {
        if (k_experts < 1 || k_experts > n_experts)
            throw ConfigError("k_experts=" + std::to_string(k_experts) +
                              " out of range for n_experts=" + std::to_string(n_experts));
        if (k_neurons < 1 || k_neurons > d_expert)
            throw ConfigError("k_neurons=" + std::to_string(k_neurons) +
                              " out of range for d_expert=" + std::to_string(d_expert));
    }
};

// Converts the ratio notation (e.g. 1/4 of the expert width) into an
// absolute neuron count; the ratio must divide exactly.
inline int64_t neurons_for_ratio(int64_t d_expert, int64_t num, int64_t den) {
    if (num < 1 || den < 1 || num > den)
        throw ConfigError("neuron ratio must satisfy 0 < num/den <= 1");
    if ((d_expert * num) % den != 0)
        throw ConfigError("neuron ratio " + std::to_string(num) + "/" + std::to_string(den) +
                          " does not divide d_expert=" + std::to_string(d_expert) + " exactly");
    return d_expert * num / den;
}

template <typename T>
struct NeuronSelectionT {
    std::vector<int64_t> neurons;  // ascending indices of the kept neurons
    TensorT<T> gates;              // gate values at those indices
};

// Per-(expert, neuron) accumulators for NG-LBL: f[i,k] is the fraction of
// all batch tokens whose selection at expert i included neuron k, p[i,k]
// the mean per-token gate mass, both normalized by the global token count.
struct NeuronLoadStats {
    int64_t n_experts = 0;
    int64_t d_expert = 0;
    std::vector<double> f;              // [n_experts * d_expert]
    std::vector<double> p;              // [n_experts * d_expert]
    std::vector<int64_t> expert_tokens; // tokens routed to each expert
    int64_t tokens = 0;

    static NeuronLoadStats zero(int64_t n_experts, int64_t d_expert) {
        NeuronLoadStats s;
        s.n_experts = n_experts;
        s.d_expert = d_expert;
        s.f.assign(static_cast<size_t>(n_experts * d_expert), 0.0);
        s.p.assign(static_cast<size_t>(n_experts * d_expert), 0.0);
        s.expert_tokens.assign(static_cast<size_t>(n_experts), 0);
        return s;
    }

    double& f_at(int64_t i, int64_t k) { return f[static_cast<size_t>(i * d_expert + k)]; }
    double f_at(int64_t i, int64_t k) const { return f[static_cast<size_t>(i * d_expert + k)]; }
    double& p_at(int64_t i, int64_t k) { return p[static_cast<size_t>(i * d_expert + k)]; }
    double p_at(int64_t i, int64_t k) const { return p[static_cast<size_t>(i * d_expert + k)]; }

    void merge(const NeuronLoadStats& o) {
        if (o.tokens == 0) return;
        if (tokens == 0) {
            *this = o;
            return;
        }
        const double wt = static_cast<double>(tokens), wo = static_cast<double>(o.tokens);
        for (size_t i = 0; i < f.size(); ++i) {
            f[i] = (f[i] * wt + o.f[i] * wo) / (wt + wo);
            p[i] = (p[i] * wt + o.p[i] * wo) / (wt + wo);
        }
        for (size_t i = 0; i < expert_tokens.size(); ++i) expert_tokens[i] += o.expert_tokens[i];
        tokens += o.tokens;
    }
};

template <typename T>
struct MoneExpertOut {
    TensorT<T> y;
    NeuronSelectionT<T> sel;
    TensorT<T> gate;  // full activated gate vector (always computed)
};

// Neuron-granular expert forward: the full gate projection is always
// computed, the top-K_N neurons by |G| select rows of W_up and columns of
// W_down, and only those participate in the up/down computation.
template <typename T>
MoneExpertOut<T> mone_expert_forward(const TensorT<T>& x, const ExpertWeightsT<T>& w,
                                     const MoNEConfig& cfg) {
    w.validate();
    const int64_t d_model = w.d_model(), d_expert = w.d_expert();
    if (cfg.k_neurons < 1 || cfg.k_neurons > d_expert)
        throw ConfigError("k_neurons=" + std::to_string(cfg.k_neurons) +
                          " out of range for d_expert=" + std::to_string(d_expert));
    TensorT<T> gate = ops::matvec(w.w_gate, x);
    ops::activation_inplace(gate, cfg.internal_act);

    if (cfg.k_neurons == d_expert) {
        // full budget: identical arithmetic to the dense expert
        TensorT<T> z = ops::matvec(w.w_up, x);
        for (int64_t k = 0; k < d_expert; ++k) z[k] *= gate[k];
        TensorT<T> y = ops::matvec(w.w_down, z);
        std::vector<int64_t> all(static_cast<size_t>(d_expert));
        for (int64_t k = 0; k < d_expert; ++k) all[static_cast<size_t>(k)] = k;
        TensorT<T> gate_sel = gate;
        return {std::move(y), {std::move(all), std::move(gate_sel)}, std::move(gate)};
    }

    std::vector<int64_t> sel = ops::topk_indices(gate, cfg.k_neurons, /*by_abs=*/true);

    // only the selected up rows and down columns participate; per output
    // entry the sum runs in ascending selection order, so every variant
    // below matches the gathered matvec formulation bit for bit
    const size_t kn = sel.size();
    TensorT<T> gate_sel({static_cast<int64_t>(kn)});
    std::vector<T> coeff(kn);
    const T* xp = x.data();
    for (size_t i = 0; i < kn; ++i) {
        const T g = gate[sel[i]];
        gate_sel[static_cast<int64_t>(i)] = g;
        const T* up_row = w.w_up.data() + sel[i] * d_model;
        T h = 0;
        for (int64_t j = 0; j < d_model; ++j) h += up_row[j] * xp[j];
        coeff[i] = g * h;
    }
    TensorT<T> y({d_model});
    T* yp = y.data();
    if (!w.w_down_t.empty()) {
        // frozen layout: a neuron's down column is a contiguous row, so the
        // traffic really is proportional to the selected neurons
        for (size_t i = 0; i < kn; ++i) {
            const T* down_row = w.w_down_t.data() + sel[i] * d_model;
            const T c = coeff[i];
            for (int64_t j = 0; j < d_model; ++j) yp[j] += c * down_row[j];
        }
    } else {
        for (int64_t j = 0; j < d_model; ++j) {
            const T* down_row = w.w_down.data() + j * d_expert;
            T acc = 0;
            for (size_t i = 0; i < kn; ++i) acc += coeff[i] * down_row[sel[i]];
            yp[j] = acc;
        }
    }
    ops::check_finite(y, "mone expert output");
    return {std::move(y), {std::move(sel), std::move(gate_sel)}, std::move(gate)};
}

template <typename T>
struct MoneLayerOut {
    TensorT<T> y;
    ExpertLoadStats expert_stats;
    NeuronLoadStats neuron_stats;
};

// Mixture of Neuron Experts layer: expert routing as in the traditional MoE
// layer, then neuron-granular selection inside each activated expert. The
// shared expert stays dense unless select_shared is set. Callers that
// discard the neuron accumulators (pure inference) can switch them off;
// the returned NeuronLoadStats then stays empty (tokens = 0).
template <typename T>
MoneLayerOut<T> mone_layer_forward(const TensorT<T>& x,
                                   std::span<const ExpertWeightsT<T>> experts,
                                   const ExpertWeightsT<T>* shared,
                                   const RouterWeightsT<T>& router, const MoNEConfig& cfg,
                                   ActKind router_act = ActKind::softmax,
                                   const FfnObserver<T>* observer = nullptr,
                                   bool select_shared = false,
                                   bool collect_neuron_stats = true) {
    if (x.rank() != 2) throw ShapeError("mone_layer_forward expects [tokens x d_model]");
    const int64_t tokens = x.dim(0), d_model = x.dim(1);
    const int64_t n_experts = router.n_experts();
    if (static_cast<int64_t>(experts.size()) != n_experts)
        throw ShapeError("expert list length does not match router width");
    const int64_t d_expert = experts.empty() ? 0 : experts[0].d_expert();
    cfg.validate(d_expert, n_experts);

    MoneLayerOut<T> out{TensorT<T>({tokens, d_model}), ExpertLoadStats::zero(n_experts),
                        collect_neuron_stats ? NeuronLoadStats::zero(n_experts, d_expert)
                                             : NeuronLoadStats{}};
    std::vector<double> dispatch(static_cast<size_t>(n_experts), 0.0);
    std::vector<double> gate_mass(static_cast<size_t>(n_experts), 0.0);

    for (int64_t t = 0; t < tokens; ++t) {
        TensorT<T> xt({d_model});
        std::copy_n(x.data() + t * d_model, d_model, xt.data());

        TensorT<T> yt({d_model});
        if (shared) {
            if (select_shared) {
                // the shared expert keeps its silu gate; selection only masks
                MoNEConfig shared_cfg = cfg;
                shared_cfg.internal_act = ActKind::silu;
                yt = mone_expert_forward(xt, *shared, shared_cfg).y;
            } else {
                yt = shared_expert_forward(xt, *shared);
            }
        }

        RoutingDecisionT<T> dec = route(xt, router, cfg.k_experts, router_act);
        for (size_t s = 0; s < dec.experts.size(); ++s) {
            const int64_t e = dec.experts[s];
            auto eo = mone_expert_forward(xt, experts[static_cast<size_t>(e)], cfg);
            ops::axpy(yt, dec.scores[static_cast<int64_t>(s)], eo.y);

            dispatch[static_cast<size_t>(e)] += 1.0;
            gate_mass[static_cast<size_t>(e)] +=
                static_cast<double>(dec.scores[static_cast<int64_t>(s)]);

            if (collect_neuron_stats) {
                out.neuron_stats.expert_tokens[static_cast<size_t>(e)] += 1;
                // per-token neuron mass: softmax over the selected gate values
                // scattered to d_expert slots, or raw |G| when configured
                TensorT<T> mass = cfg.stat_norm == NeuronStatNorm::softmax
                                      ? ops::activation(eo.sel.gates, ActKind::softmax)
                                      : eo.sel.gates;
                for (size_t k = 0; k < eo.sel.neurons.size(); ++k) {
                    const int64_t n = eo.sel.neurons[k];
                    out.neuron_stats.f_at(e, n) += 1.0;
                    out.neuron_stats.p_at(e, n) +=
                        cfg.stat_norm == NeuronStatNorm::softmax
                            ? static_cast<double>(mass[static_cast<int64_t>(k)])
                            : std::abs(static_cast<double>(mass[static_cast<int64_t>(k)]));
                }
            }

            if (observer && *observer) (*observer)(t, e, eo.gate, eo.sel.neurons);
        }
        std::copy_n(yt.data(), d_model, out.y.data() + t * d_model);
    }

    out.expert_stats.tokens = tokens;
    for (int64_t i = 0; i < n_experts; ++i) {
        out.expert_stats.f[static_cast<size_t>(i)] = dispatch[static_cast<size_t>(i)] / tokens;
        out.expert_stats.p[static_cast<size_t>(i)] = gate_mass[static_cast<size_t>(i)] / tokens;
    }
    if (collect_neuron_stats) {
        out.neuron_stats.tokens = tokens;
        for (auto& v : out.neuron_stats.f) v /= static_cast<double>(tokens);
        for (auto& v : out.neuron_stats.p) v /= static_cast<double>(tokens);
    }
    return out;
}

// sum_i alpha_NG * d_expert * sum_k f[i,k] * p[i,k]
inline double ng_lbl_loss(const NeuronLoadStats& stats, double alpha_ng, int64_t d_expert) {
    if (stats.tokens == 0) throw InputError("ng_lbl_loss over an empty batch");
    if (d_expert != stats.d_expert) throw ShapeError("ng_lbl_loss d_expert mismatch");
    double total = 0;
    for (int64_t i = 0; i < stats.n_experts; ++i) {
        double s = 0;
        for (int64_t k = 0; k < d_expert; ++k) s += stats.f_at(i, k) * stats.p_at(i, k);
        total += alpha_ng * static_cast<double>(d_expert) * s;
    }
    return total;
}

// Combined auxiliary objective: expert-level load-balance loss plus the
// neuron-granular term (zero when neuron stats are absent).
inline double total_aux_loss(const ExpertLoadStats& expert_stats,
                             const NeuronLoadStats* neuron_stats, double alpha_aux,
                             const MoNEConfig& cfg) {
    double loss = aux_load_balance_loss(expert_stats, alpha_aux, expert_stats.n_experts());
    if (neuron_stats && neuron_stats->tokens > 0)
        loss += ng_lbl_loss(*neuron_stats, cfg.alpha_ng, neuron_stats->d_expert);
    return loss;
}

}  // namespace monelab
