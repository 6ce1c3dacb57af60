#pragma once

#include <vector>

#include "monelab/ops.hpp"
#include "monelab/tensor.hpp"

namespace monelab {

// One GLU expert: gate and up project d_model -> d_expert, down projects
// back. The same struct serves routed experts, the shared expert, and the
// dense FFN slot.
template <typename T>
struct ExpertWeightsT {
    TensorT<T> w_gate;  // [d_expert x d_model]
    TensorT<T> w_up;    // [d_expert x d_model]
    TensorT<T> w_down;  // [d_model x d_expert]

    // derived copy of w_down with neurons as rows, so selecting a neuron's
    // down column is a contiguous read; populated by freeze_for_inference()
    // and stale if w_down is mutated afterwards
    TensorT<T> w_down_t;  // [d_expert x d_model], optional

    int64_t d_model() const { return w_gate.dim(1); }
    int64_t d_expert() const { return w_gate.dim(0); }

    void freeze_for_inference() { w_down_t = ops::transpose(w_down); }

    void validate() const {
        if (w_gate.rank() != 2 || w_up.rank() != 2 || w_down.rank() != 2)
            throw ShapeError("expert weights must be rank-2");
        if (!w_gate.same_shape(w_up) || w_down.dim(0) != d_model() ||
            w_down.dim(1) != d_expert() || d_expert() < 1)
            throw ShapeError("expert weight dimensions inconsistent: gate " +
                             w_gate.shape_str() + " up " + w_up.shape_str() + " down " +
                             w_down.shape_str());
    }

    static ExpertWeightsT init(int64_t d_model, int64_t d_expert, Rng& rng) {
        ExpertWeightsT w;
        w.w_gate = ops::init_weights<T>({d_expert, d_model}, rng);
        w.w_up = ops::init_weights<T>({d_expert, d_model}, rng);
        w.w_down = ops::init_weights<T>({d_model, d_expert}, rng);
        return w;
    }

    int64_t param_count() const { return w_gate.numel() + w_up.numel() + w_down.numel(); }
};

using ExpertWeights = ExpertWeightsT<double>;

// Rank-1 map extracted from one neuron of an expert:
// a = outer(w_down column k, w_up row k).
template <typename T>
struct NeuronExpertT {
    TensorT<T> a;  // [d_model x d_model], rank <= 1 by construction
    int64_t neuron = 0;
};

template <typename T>
struct ExpertForwardOut {
    TensorT<T> y;     // [d_model]
    TensorT<T> gate;  // [d_expert], the activated gate values G
};

// y = W_down (act(W_gate x) * (W_up x)). Returns G alongside y so callers
// can reuse it for neuron selection and statistics without recomputation.
template <typename T>
ExpertForwardOut<T> expert_forward(const TensorT<T>& x, const ExpertWeightsT<T>& w,
                                   ActKind internal_act) {
    w.validate();
    if (x.rank() != 1 || x.dim(0) != w.d_model())
        throw ShapeError("expert_forward input shape mismatch");
    TensorT<T> gate = ops::matvec(w.w_gate, x);
    ops::activation_inplace(gate, internal_act);
    TensorT<T> z = ops::matvec(w.w_up, x);
    for (int64_t k = 0; k < z.numel(); ++k) z[k] *= gate[k];
    TensorT<T> y = ops::matvec(w.w_down, z);
    return {std::move(y), std::move(gate)};
}

// Decomposes an expert into its d_expert rank-1 neuron experts.
// Analysis/oracle path only: materializing A_k is O(d_model^2) per neuron.
template <typename T>
std::vector<NeuronExpertT<T>> neuron_decompose(const ExpertWeightsT<T>& w) {
    w.validate();
    std::vector<NeuronExpertT<T>> out;
    out.reserve(static_cast<size_t>(w.d_expert()));
    for (int64_t k = 0; k < w.d_expert(); ++k) {
        TensorT<T> down_col({w.d_model()});
        for (int64_t i = 0; i < w.d_model(); ++i) down_col[i] = w.w_down.at(i, k);
        TensorT<T> up_row({w.d_model()});
        for (int64_t j = 0; j < w.d_model(); ++j) up_row[j] = w.w_up.at(k, j);
        out.push_back({ops::outer(down_col, up_row), k});
    }
    return out;
}

// Brute-force expert output as the explicit sum over neuron experts,
// y = sum_k G[k] * (A_k x). Serves as the oracle for expert_forward and for
// masked selection.
template <typename T>
TensorT<T> decomposed_forward(const TensorT<T>& x, const ExpertWeightsT<T>& w) {
    TensorT<T> gate = ops::activation(ops::matvec(w.w_gate, x), ActKind::silu);
    auto neurons = neuron_decompose(w);
    TensorT<T> y({w.d_model()});
    for (int64_t k = 0; k < w.d_expert(); ++k)
        ops::axpy(y, gate[k], ops::matvec(neurons[static_cast<size_t>(k)].a, x));
    return y;
}

// Always-on expert: full dense GLU forward, no routing weight, no neuron
// selection.
template <typename T>
TensorT<T> shared_expert_forward(const TensorT<T>& x, const ExpertWeightsT<T>& w) {
    return expert_forward(x, w, ActKind::silu).y;
}

}  // namespace monelab
