#pragma once

#include <cmath>
#include <functional>

#include "monelab/model_graph.hpp"

namespace monelab {

struct TrainConfig {
    double lr = 5e-4;
    double weight_decay = 0.1;  // decoupled, scaled by lr
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int64_t steps = 0;
    int64_t batch_seqs = 1;
    int64_t warmup_steps = 0;
    int64_t log_every = 1;
};

template <typename T>
struct TrainState {
    Model<T> model;
    std::vector<TensorT<T>> adam_m;
    std::vector<TensorT<T>> adam_v;
    int64_t step = 0;
    TrainConfig tcfg;

    static TrainState init(const ModelConfig& cfg, const TrainConfig& tcfg) {
        TrainState st;
        st.model = Model<T>::init(cfg);
        st.tcfg = tcfg;
        for (const auto& t : st.model.params.tensors) {
            st.adam_m.emplace_back(t.shape());
            st.adam_v.emplace_back(t.shape());
        }
        return st;
    }
};

struct StepMetrics {
    int64_t step = 0;
    double ce_loss = 0;
    double aux_loss = 0;
    double grad_norm = 0;
    int64_t tokens = 0;
};

// One optimizer step: analytic reverse-mode gradients of ce + aux through the
// whole graph, then a decoupled-weight-decay Adam update. Non-finite loss or
// gradient aborts with diagnostics.
template <typename T>
StepMetrics backward_and_step(TrainState<T>& st, std::span<const int32_t> batch,
                              int64_t n_seqs) {
    Tape<T> tp;
    LmGraph<T> g = build_lm_graph(tp, st.model, batch, n_seqs);

    const double loss_val = static_cast<double>(tp.val(g.loss)[0]);
    if (!std::isfinite(loss_val))
        throw NumericError("training diverged: non-finite loss at step " +
                           std::to_string(st.step));

    tp.backward(g.loss);

    const int64_t n_params = st.model.params.count();
    std::vector<TensorT<T>> grads(static_cast<size_t>(n_params));
    double grad_sq = 0;
    for (int64_t i = 0; i < n_params; ++i) {
        Var pv = g.param_vars[static_cast<size_t>(i)];
        if (tp.has_grad(pv)) {
            grads[static_cast<size_t>(i)] = tp.grad(pv);
        } else {
            // parameters untouched this batch (e.g. never-routed experts)
            grads[static_cast<size_t>(i)] =
                TensorT<T>(st.model.params.tensors[static_cast<size_t>(i)].shape());
        }
        const auto& gr = grads[static_cast<size_t>(i)];
        for (int64_t k = 0; k < gr.numel(); ++k) {
            if (!std::isfinite(static_cast<double>(gr[k])))
                throw NumericError("training diverged: non-finite gradient in '" +
                                   st.model.params.names[static_cast<size_t>(i)] +
                                   "' at step " + std::to_string(st.step));
            grad_sq += static_cast<double>(gr[k]) * static_cast<double>(gr[k]);
        }
    }

    st.step += 1;
    const double warm = st.tcfg.warmup_steps > 0
                            ? std::min(1.0, static_cast<double>(st.step) /
                                                static_cast<double>(st.tcfg.warmup_steps))
                            : 1.0;
    const double lr_t = st.tcfg.lr * warm;
    const double bc1 = 1.0 - std::pow(st.tcfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.tcfg.beta2, static_cast<double>(st.step));

    for (int64_t i = 0; i < n_params; ++i) {
        TensorT<T>& theta = st.model.params.tensors[static_cast<size_t>(i)];
        TensorT<T>& m = st.adam_m[static_cast<size_t>(i)];
        TensorT<T>& v = st.adam_v[static_cast<size_t>(i)];
        const TensorT<T>& gr = grads[static_cast<size_t>(i)];
        for (int64_t k = 0; k < theta.numel(); ++k) {
            const double gk = static_cast<double>(gr[k]);
            double mk = st.tcfg.beta1 * static_cast<double>(m[k]) + (1 - st.tcfg.beta1) * gk;
            double vk =
                st.tcfg.beta2 * static_cast<double>(v[k]) + (1 - st.tcfg.beta2) * gk * gk;
            m[k] = static_cast<T>(mk);
            v[k] = static_cast<T>(vk);
            const double update = (mk / bc1) / (std::sqrt(vk / bc2) + st.tcfg.adam_eps);
            theta[k] = static_cast<T>(
                static_cast<double>(theta[k]) -
                lr_t * (update + st.tcfg.weight_decay * static_cast<double>(theta[k])));
        }
    }

    StepMetrics mt;
    mt.step = st.step;
    mt.ce_loss = static_cast<double>(tp.val(g.ce)[0]);
    mt.aux_loss = g.aux_value;
    mt.grad_norm = std::sqrt(grad_sq);
    mt.tokens = static_cast<int64_t>(batch.size()) - n_seqs;  // scored positions
    return mt;
}

// Deterministic batch sampler: windows of (seq_len + 1) tokens drawn from the
// stream with a seed-split generator.
inline std::vector<int32_t> sample_batch(std::span<const int32_t> data, int64_t window,
                                         int64_t n_seqs, Rng& rng) {
    if (static_cast<int64_t>(data.size()) < window)
        throw InputError("dataset shorter than one training window");
    std::vector<int32_t> out;
    out.reserve(static_cast<size_t>(window * n_seqs));
    const int64_t max_start = static_cast<int64_t>(data.size()) - window;
    for (int64_t b = 0; b < n_seqs; ++b) {
        const int64_t start = max_start == 0 ? 0 : rng.uniform_int(max_start + 1);
        for (int64_t i = 0; i < window; ++i)
            out.push_back(data[static_cast<size_t>(start + i)]);
    }
    return out;
}

// Runs a full training loop; invokes on_step after every optimizer step.
template <typename T>
std::vector<StepMetrics> train_run(
    TrainState<T>& st, std::span<const int32_t> data,
    const std::function<void(const StepMetrics&)>& on_step = nullptr) {
    Rng batch_rng = Rng(st.model.cfg.seed).split(0xB47C);
    const int64_t window = st.model.cfg.seq_len + 1;
    std::vector<StepMetrics> history;
    history.reserve(static_cast<size_t>(st.tcfg.steps));
    for (int64_t s = 0; s < st.tcfg.steps; ++s) {
        std::vector<int32_t> batch =
            sample_batch(data, window, st.tcfg.batch_seqs, batch_rng);
        StepMetrics mt = backward_and_step(st, batch, st.tcfg.batch_seqs);
        if (on_step) on_step(mt);
        history.push_back(mt);
    }
    return history;
}

struct GradCheckResult {
    double max_rel_err = 0;
    int64_t entries_checked = 0;
    std::string worst_param;
};

// Full-model gradient check (f64): analytic reverse-mode gradients of
// ce + aux vs central finite differences over every parameter entry.
inline GradCheckResult model_gradcheck(const ModelConfig& cfg_in,
                                       std::span<const int32_t> batch, int64_t n_seqs,
                                       double eps = 1e-5) {
    ModelConfig cfg = cfg_in;
    cfg.dtype = Dtype::f64;
    Model<double> model = Model<double>::init(cfg);

    Tape<double> tp;
    LmGraph<double> g = build_lm_graph(tp, model, batch, n_seqs);
    tp.backward(g.loss);

    auto loss_at = [&](const Model<double>& m) {
        Tape<double> t2;
        t2.grad_enabled = false;
        LmGraph<double> g2 = build_lm_graph(t2, m, batch, n_seqs);
        return static_cast<double>(t2.val(g2.loss)[0]);
    };

    GradCheckResult res;
    for (int64_t i = 0; i < model.params.count(); ++i) {
        Var pv = g.param_vars[static_cast<size_t>(i)];
        TensorT<double> analytic =
            tp.has_grad(pv) ? tp.grad(pv)
                            : TensorT<double>(model.params.tensors[static_cast<size_t>(i)].shape());
        TensorT<double>& theta = model.params.tensors[static_cast<size_t>(i)];
        for (int64_t k = 0; k < theta.numel(); ++k) {
            const double orig = theta[k];
            theta[k] = orig + eps;
            const double fp = loss_at(model);
            theta[k] = orig - eps;
            const double fm = loss_at(model);
            theta[k] = orig;
            const double fd = (fp - fm) / (2 * eps);
            const double an = analytic[k];
            const double err = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
            if (err > res.max_rel_err) {
                res.max_rel_err = err;
                res.worst_param = model.params.names[static_cast<size_t>(i)];
            }
            res.entries_checked += 1;
        }
    }
    return res;
}

}  // namespace monelab
