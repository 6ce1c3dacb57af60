#pragma once

#include <functional>
#include <span>
#include <vector>

#include "monelab/experts.hpp"
#include "monelab/ops.hpp"

namespace monelab {

template <typename T>
struct RouterWeightsT {
    TensorT<T> w;  // [n_experts x d_model]

    int64_t n_experts() const { return w.dim(0); }
    int64_t d_model() const { return w.dim(1); }

    static RouterWeightsT init(int64_t n_experts, int64_t d_model, Rng& rng) {
        return {ops::init_weights<T>({n_experts, d_model}, rng)};
    }
};

using RouterWeights = RouterWeightsT<double>;

// Per-token routing outcome: selected expert indices (ascending) and their
// activated scores, aligned index-for-index.
template <typename T>
struct RoutingDecisionT {
    std::vector<int64_t> experts;
    TensorT<T> scores;
};

// Batch accumulators for the expert-level load-balance loss: f_i is the
// fraction of tokens dispatched to expert i, p_i the mean gating weight.
// Stored as fractions plus the token count so partial batches merge by
// weighted average.
struct ExpertLoadStats {
    std::vector<double> f;
    std::vector<double> p;
    int64_t tokens = 0;

    int64_t n_experts() const { return static_cast<int64_t>(f.size()); }

    static ExpertLoadStats zero(int64_t n_experts) {
        return {std::vector<double>(static_cast<size_t>(n_experts), 0.0),
                std::vector<double>(static_cast<size_t>(n_experts), 0.0), 0};
    }

    void merge(const ExpertLoadStats& o) {
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
        tokens += o.tokens;
    }
};

// Router logits -> top-K_E selection -> activation over the selected logits
// (top-k first, then activation). Default activation is softmax.
template <typename T>
RoutingDecisionT<T> route(const TensorT<T>& x, const RouterWeightsT<T>& router,
                          int64_t k_experts, ActKind act = ActKind::softmax) {
    if (k_experts < 1 || k_experts > router.n_experts())
        throw ConfigError("route: k_experts=" + std::to_string(k_experts) +
                          " exceeds n_experts=" + std::to_string(router.n_experts()));
    TensorT<T> logits = ops::matvec(router.w, x);
    std::vector<int64_t> sel = ops::topk_indices(logits, k_experts, /*by_abs=*/false);
    TensorT<T> scores = ops::activation(ops::gather_elems(logits, sel), act);
    return {std::move(sel), std::move(scores)};
}

// Observation hook for analysis instrumentation. Called once per
// (token, activated expert) with the full gate vector and the selected
// neuron indices (all indices for a traditional MoE expert).
template <typename T>
using FfnObserver = std::function<void(int64_t token, int64_t expert,
                                       const TensorT<T>& gate,
                                       std::span<const int64_t> selected_neurons)>;

template <typename T>
struct MoeLayerOut {
    TensorT<T> y;  // [tokens x d_model]
    ExpertLoadStats stats;
};

// Traditional MoE layer over a batch of token states:
// y_t = shared(x_t) + sum_{i in topK} p_i * E_i(x_t).
// The shared expert is added with coefficient 1, outside routing.
template <typename T>
MoeLayerOut<T> moe_layer_forward(const TensorT<T>& x, std::span<const ExpertWeightsT<T>> experts,
                                 const ExpertWeightsT<T>* shared,
                                 const RouterWeightsT<T>& router, int64_t k_experts,
                                 ActKind internal_act = ActKind::silu,
                                 ActKind router_act = ActKind::softmax,
                                 const FfnObserver<T>* observer = nullptr) {
    if (x.rank() != 2) throw ShapeError("moe_layer_forward expects [tokens x d_model]");
    const int64_t tokens = x.dim(0), d_model = x.dim(1);
    const int64_t n_experts = router.n_experts();
    if (static_cast<int64_t>(experts.size()) != n_experts)
        throw ShapeError("expert list length does not match router width");

    MoeLayerOut<T> out{TensorT<T>({tokens, d_model}), ExpertLoadStats::zero(n_experts)};
    std::vector<double> dispatch(static_cast<size_t>(n_experts), 0.0);
    std::vector<double> gate_mass(static_cast<size_t>(n_experts), 0.0);

    for (int64_t t = 0; t < tokens; ++t) {
        TensorT<T> xt({d_model});
        std::copy_n(x.data() + t * d_model, d_model, xt.data());

        TensorT<T> yt({d_model});
        if (shared) yt = shared_expert_forward(xt, *shared);

        RoutingDecisionT<T> dec = route(xt, router, k_experts, router_act);
        for (size_t s = 0; s < dec.experts.size(); ++s) {
            const int64_t e = dec.experts[s];
            auto eo = expert_forward(xt, experts[static_cast<size_t>(e)], internal_act);
            ops::axpy(yt, dec.scores[static_cast<int64_t>(s)], eo.y);
            dispatch[static_cast<size_t>(e)] += 1.0;
            gate_mass[static_cast<size_t>(e)] +=
                static_cast<double>(dec.scores[static_cast<int64_t>(s)]);
            if (observer && *observer) {
                std::vector<int64_t> all(static_cast<size_t>(eo.gate.numel()));
                for (size_t k = 0; k < all.size(); ++k) all[k] = static_cast<int64_t>(k);
                (*observer)(t, e, eo.gate, all);
            }
        }
        std::copy_n(yt.data(), d_model, out.y.data() + t * d_model);
    }

    out.stats.tokens = tokens;
    for (int64_t i = 0; i < n_experts; ++i) {
        out.stats.f[static_cast<size_t>(i)] = dispatch[static_cast<size_t>(i)] / tokens;
        out.stats.p[static_cast<size_t>(i)] = gate_mass[static_cast<size_t>(i)] / tokens;
    }
    return out;
}

// alpha * N_E * sum_i f_i * p_i. Dispatch fractions are discrete counts;
// in training, gradient flows through p only.
inline double aux_load_balance_loss(const ExpertLoadStats& stats, double alpha_aux,
                                    int64_t n_experts) {
    if (stats.tokens == 0) throw InputError("aux_load_balance_loss over an empty batch");
    if (n_experts != stats.n_experts())
        throw ShapeError("aux_load_balance_loss n_experts mismatch");
    double s = 0;
    for (int64_t i = 0; i < n_experts; ++i)
        s += stats.f[static_cast<size_t>(i)] * stats.p[static_cast<size_t>(i)];
    return alpha_aux * static_cast<double>(n_experts) * s;
}

}  // namespace monelab
