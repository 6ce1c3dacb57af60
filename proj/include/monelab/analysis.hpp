#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>

#include "monelab/infer.hpp"
#include "monelab/report.hpp"

namespace monelab {

// ---------------------------------------------------------------------------
// Activated-parameter accounting (exact integer arithmetic)

struct ParamCountReport {
    int64_t per_layer_total = 0;      // one transformer layer, all parameters
    int64_t per_layer_activated = 0;  // touched per token
    int64_t per_layer_ffn_total = 0;      // FFN slot: experts + shared + router
    int64_t per_layer_ffn_activated = 0;
    int64_t per_layer_routed_activated = 0;  // selected experts only
    int64_t model_total = 0;
    int64_t model_activated = 0;
};

inline ParamCountReport activated_param_count(const ModelConfig& cfg) {
    cfg.validate();
    const int64_t proj = cfg.d_expert * cfg.d_model;  // one expert projection
    const int64_t attn = 4 * cfg.d_model * cfg.d_model + 2 * cfg.d_model;

    ParamCountReport r;
    if (cfg.routed()) {
        const int64_t router = cfg.n_experts * cfg.d_model;
        const int64_t shared = 3 * proj;
        r.per_layer_ffn_total = cfg.n_experts * 3 * proj + shared + router;
        if (cfg.layer_kind == LayerKind::moe) {
            r.per_layer_routed_activated = cfg.k_experts * 3 * proj;
        } else {
            // gate projection fully activated; up rows and down columns only
            // for the selected neurons
            r.per_layer_routed_activated =
                cfg.k_experts * (proj + 2 * cfg.k_neurons * cfg.d_model);
        }
        r.per_layer_ffn_activated = r.per_layer_routed_activated + shared + router;
    } else {
        r.per_layer_ffn_total = 3 * proj;
        r.per_layer_routed_activated = 3 * proj;
        r.per_layer_ffn_activated = 3 * proj;
    }
    r.per_layer_total = attn + r.per_layer_ffn_total;
    r.per_layer_activated = attn + r.per_layer_ffn_activated;

    const int64_t embeddings =
        cfg.vocab_size * cfg.d_model + cfg.seq_len * cfg.d_model + cfg.d_model;
    r.model_total = embeddings + cfg.n_layers * r.per_layer_total;
    r.model_activated = embeddings + cfg.n_layers * r.per_layer_activated;
    return r;
}

// ---------------------------------------------------------------------------
// Pruning sweep: evaluate with every routed expert restricted per token to
// its top ceil(ratio * d_expert) neurons by gate magnitude; weights untouched.

struct PruneSweepRow {
    double keep_ratio = 0;
    int64_t k_neurons = 0;  // effective per-expert neuron budget
    EvalMetrics metrics;
};

struct PruneSweepResult {
    std::vector<PruneSweepRow> rows;
};

template <typename T>
PruneSweepResult prune_scan(const Model<T>& model, std::span<const int32_t> dataset,
                            std::span<const double> ratios) {
    if (!model.cfg.routed()) throw ConfigError("prune_scan requires a moe or mone model");
    PruneSweepResult out;
    for (double rho : ratios) {
        if (!(rho > 0.0) || rho > 1.0)
            throw ShapeError("keep ratio must lie in (0, 1], got " + fmt_num(rho));
        PruneSweepRow row;
        row.keep_ratio = rho;
        const int64_t k = static_cast<int64_t>(
            std::ceil(rho * static_cast<double>(model.cfg.d_expert)));
        row.k_neurons = std::min(model.cfg.effective_k_neurons(), k);
        ForwardOptions<T> opt;
        opt.k_neurons_override = k;
        row.metrics = evaluate(model, dataset, opt);
        out.rows.push_back(row);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gate-activation statistics over a dataset

struct ActivationReport {
    int64_t n_layers = 0;
    int64_t bins = 64;
    double threshold = 0.01;
    int64_t select_k = 0;  // neurons ranked per (token, expert) for the median
    std::vector<double> hist_lo, hist_hi;             // per layer, observed range
    std::vector<std::vector<int64_t>> hist;           // [layer][bin]
    std::vector<double> median_selected_abs_gate;     // per layer
    std::vector<double> frac_below_threshold;         // per layer
    std::vector<int64_t> gate_values_counted;         // per layer
    std::vector<int64_t> expert_activations;          // per layer (token,expert) pairs
    std::vector<std::vector<int64_t>> expert_hits;    // [layer][expert]
};

// select_k = 0 uses each model's own selection (all neurons for a
// traditional MoE expert); a positive value ranks the top |G| per activated
// expert instead, which makes moe/mone medians directly comparable.
template <typename T>
ActivationReport activation_stats(const Model<T>& model, std::span<const int32_t> dataset,
                                  int64_t select_k = 0, double threshold = 0.01) {
    if (!model.cfg.routed())
        throw ConfigError("activation_stats requires a moe or mone model");
    if (dataset.size() < static_cast<size_t>(model.cfg.seq_len) + 1)
        throw InputError("activation_stats: dataset shorter than one window");
    const ModelConfig& cfg = model.cfg;

    std::vector<std::vector<double>> gates(static_cast<size_t>(cfg.n_layers));
    std::vector<std::vector<double>> selected(static_cast<size_t>(cfg.n_layers));
    ActivationReport rep;
    rep.n_layers = cfg.n_layers;
    rep.threshold = threshold;
    rep.select_k = select_k;
    rep.expert_hits.assign(static_cast<size_t>(cfg.n_layers),
                           std::vector<int64_t>(static_cast<size_t>(cfg.n_experts), 0));
    rep.expert_activations.assign(static_cast<size_t>(cfg.n_layers), 0);

    LayerFfnObserver<T> obs = [&](int64_t layer, int64_t /*token*/, int64_t expert,
                                  const TensorT<T>& gate, std::span<const int64_t> sel) {
        auto& g = gates[static_cast<size_t>(layer)];
        for (int64_t i = 0; i < gate.numel(); ++i)
            g.push_back(static_cast<double>(gate[i]));
        auto& s = selected[static_cast<size_t>(layer)];
        if (select_k > 0) {
            auto top = ops::topk_indices(gate, std::min(select_k, gate.numel()), true);
            for (int64_t i : top) s.push_back(std::abs(static_cast<double>(gate[i])));
        } else {
            for (int64_t i : sel) s.push_back(std::abs(static_cast<double>(gate[i])));
        }
        rep.expert_hits[static_cast<size_t>(layer)][static_cast<size_t>(expert)] += 1;
        rep.expert_activations[static_cast<size_t>(layer)] += 1;
    };

    WeightsCache<T> weights = WeightsCache<T>::build(model);
    ForwardOptions<T> opt;
    opt.observer = &obs;
    opt.weights = &weights;
    const int64_t win = cfg.seq_len;
    for (int64_t start = 0; start + win + 1 <= static_cast<int64_t>(dataset.size());
         start += win)
        forward_hidden(model, dataset.subspan(static_cast<size_t>(start),
                                              static_cast<size_t>(win)),
                       nullptr, opt);

    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        auto& g = gates[static_cast<size_t>(l)];
        rep.gate_values_counted.push_back(static_cast<int64_t>(g.size()));
        double lo = 0, hi = 0;
        if (!g.empty()) {
            lo = *std::min_element(g.begin(), g.end());
            hi = *std::max_element(g.begin(), g.end());
        }
        rep.hist_lo.push_back(lo);
        rep.hist_hi.push_back(hi);
        std::vector<int64_t> h(static_cast<size_t>(rep.bins), 0);
        const double width = hi > lo ? (hi - lo) / static_cast<double>(rep.bins) : 1.0;
        int64_t below = 0;
        for (double v : g) {
            int64_t b = static_cast<int64_t>((v - lo) / width);
            b = std::clamp<int64_t>(b, 0, rep.bins - 1);
            h[static_cast<size_t>(b)] += 1;
            if (std::abs(v) < threshold) below += 1;
        }
        rep.hist.push_back(std::move(h));
        rep.frac_below_threshold.push_back(
            g.empty() ? 0.0 : static_cast<double>(below) / static_cast<double>(g.size()));

        auto& s = selected[static_cast<size_t>(l)];
        if (s.empty()) {
            rep.median_selected_abs_gate.push_back(0.0);
        } else {
            std::nth_element(s.begin(), s.begin() + static_cast<int64_t>(s.size()) / 2,
                             s.end());
            rep.median_selected_abs_gate.push_back(s[s.size() / 2]);
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Neuron load-balance variance: Var_k of the per-neuron dispatch fraction,
// reported per (layer, expert)

struct LoadBalanceVariance {
    std::vector<std::vector<double>> variance;   // [layer][expert]
    std::vector<std::vector<double>> mean;       // [layer][expert]
    std::vector<std::vector<int64_t>> tokens_routed;  // [layer][expert]
    int64_t tokens = 0;

    double mean_variance() const {
        double s = 0;
        int64_t n = 0;
        for (const auto& layer : variance)
            for (double v : layer) {
                s += v;
                n += 1;
            }
        return n ? s / static_cast<double>(n) : 0.0;
    }
};

// Population variance over k of the per-neuron dispatch fraction, one value
// per expert.
inline std::vector<double> neuron_dispatch_variance(const NeuronLoadStats& ns) {
    std::vector<double> out;
    out.reserve(static_cast<size_t>(ns.n_experts));
    for (int64_t e = 0; e < ns.n_experts; ++e) {
        double mean = 0;
        for (int64_t k = 0; k < ns.d_expert; ++k) mean += ns.f_at(e, k);
        mean /= static_cast<double>(ns.d_expert);
        double var = 0;
        for (int64_t k = 0; k < ns.d_expert; ++k) {
            const double d = ns.f_at(e, k) - mean;
            var += d * d;
        }
        out.push_back(var / static_cast<double>(ns.d_expert));
    }
    return out;
}

template <typename T>
LoadBalanceVariance load_balance_variance(const Model<T>& model,
                                          std::span<const int32_t> dataset) {
    if (model.cfg.layer_kind != LayerKind::mone)
        throw ConfigError("load_balance_variance requires a mone model");
    const ModelConfig& cfg = model.cfg;

    std::vector<NeuronLoadStats> stats(
        static_cast<size_t>(cfg.n_layers),
        NeuronLoadStats::zero(cfg.n_experts, cfg.d_expert));
    std::vector<ExpertLoadStats> estats(static_cast<size_t>(cfg.n_layers),
                                        ExpertLoadStats::zero(cfg.n_experts));
    WeightsCache<T> weights = WeightsCache<T>::build(model);
    ForwardOptions<T> opt;
    opt.neuron_stats = &stats;
    opt.expert_stats = &estats;
    opt.weights = &weights;

    const int64_t win = cfg.seq_len;
    if (dataset.size() < static_cast<size_t>(win) + 1)
        throw InputError("load_balance_variance: dataset shorter than one window");
    for (int64_t start = 0; start + win + 1 <= static_cast<int64_t>(dataset.size());
         start += win)
        forward_hidden(model, dataset.subspan(static_cast<size_t>(start),
                                              static_cast<size_t>(win)),
                       nullptr, opt);

    LoadBalanceVariance out;
    out.tokens = stats[0].tokens;
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const NeuronLoadStats& ns = stats[static_cast<size_t>(l)];
        out.variance.push_back(neuron_dispatch_variance(ns));
        std::vector<double> mrow;
        std::vector<int64_t> trow;
        for (int64_t e = 0; e < cfg.n_experts; ++e) {
            double mean = 0;
            for (int64_t k = 0; k < cfg.d_expert; ++k) mean += ns.f_at(e, k);
            mrow.push_back(mean / static_cast<double>(cfg.d_expert));
            trow.push_back(ns.expert_tokens[static_cast<size_t>(e)]);
        }
        out.mean.push_back(std::move(mrow));
        out.tokens_routed.push_back(std::move(trow));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Throughput bench: forward-only autoregressive generation, moe vs mone at
// equal activated parameters

struct BenchSide {
    std::string label;
    std::vector<double> trial_tokens_per_sec;
    double median_tokens_per_sec = 0;
    int64_t peak_bytes = 0;
    int64_t activated_params = 0;
};

struct BenchResult {
    BenchSide moe;
    BenchSide mone;
    int64_t batch = 0, prefill = 0, new_tokens = 0, trials = 0;
    int threads = 1;  // all compute is single-threaded

    double relative_gap() const {
        const double a = moe.median_tokens_per_sec, b = mone.median_tokens_per_sec;
        return std::abs(a - b) / std::max(a, b);
    }
};

namespace bench_detail {

// Process CPU time: throughput measured against it is insensitive to other
// tenants preempting the core, which matters on shared machines. Single
// threaded compute makes it equivalent to wall time on an idle box.
inline double cpu_seconds() {
#if defined(CLOCK_PROCESS_CPUTIME_ID)
    timespec ts{};
    clock_gettime(CLOCK_PROCESS_CPUTIME_ID, &ts);
    return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
#else
    return static_cast<double>(std::clock()) / CLOCKS_PER_SEC;
#endif
}

template <typename T>
struct BenchRig {
    Model<T> model;
    WeightsCache<T> weights;
    std::vector<std::vector<int32_t>> prompts;
    int64_t new_tokens = 0;

    BenchRig(const ModelConfig& cfg, int64_t batch, int64_t prefill, int64_t n_new)
        : model(Model<T>::init(cfg)), new_tokens(n_new) {
        weights = WeightsCache<T>::build(model);
        Rng rng = Rng(cfg.seed).split(0xBE7C);
        for (int64_t b = 0; b < batch; ++b) {
            std::vector<int32_t> p(static_cast<size_t>(prefill));
            for (auto& t : p) t = static_cast<int32_t>(rng.uniform_int(cfg.vocab_size));
            prompts.push_back(std::move(p));
        }
    }

    // one full decode pass over the prompt batch; returns decode cpu seconds
    double decode_pass() {
        const ModelConfig& cfg = model.cfg;
        ForwardOptions<T> opt;
        opt.weights = &weights;
        double elapsed = 0;
        for (auto& prompt : prompts) {
            KVCache<T> cache = KVCache<T>::make(cfg);
            TensorT<T> logits = forward_logits(model, prompt, &cache, opt);
            const double t0 = cpu_seconds();
            for (int64_t g = 0; g < new_tokens; ++g) {
                const int64_t last = logits.dim(0) - 1;
                int64_t best = 0;
                for (int64_t j = 1; j < cfg.vocab_size; ++j)
                    if (logits.at(last, j) > logits.at(last, best)) best = j;
                int32_t tok = static_cast<int32_t>(best);
                logits = forward_logits(model, std::span<const int32_t>(&tok, 1), &cache, opt);
            }
            elapsed += cpu_seconds() - t0;
        }
        return elapsed;
    }

    // one timed trial: enough decode passes to fill min_seconds of work, so
    // scheduler noise averages out; returns tokens/sec
    double timed_trial(int64_t reps) {
        double elapsed = 0;
        for (int64_t r = 0; r < reps; ++r) elapsed += decode_pass();
        return static_cast<double>(reps * static_cast<int64_t>(prompts.size()) * new_tokens) /
               elapsed;
    }

    int64_t reps_for(double pass_seconds, double min_seconds) const {
        if (pass_seconds <= 0) return 1;
        return std::clamp<int64_t>(
            static_cast<int64_t>(std::ceil(min_seconds / pass_seconds)), 1, 64);
    }
};

inline double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

}  // namespace bench_detail

// Trials of the two sides are interleaved so machine-load noise hits both
// symmetrically; each side reports the median tokens/sec of its trials.
template <typename T>
BenchResult throughput_bench(const ModelConfig& cfg_moe, const ModelConfig& cfg_mone,
                             int64_t batch, int64_t prefill, int64_t new_tokens,
                             int64_t trials = 5) {
    if (trials < 1) throw ConfigError("bench needs at least one trial");
    if (prefill + new_tokens > cfg_moe.seq_len || prefill + new_tokens > cfg_mone.seq_len)
        throw ConfigError("bench prefill + new_tokens exceed seq_len");
    const int64_t a = activated_param_count(cfg_moe).model_activated;
    const int64_t b = activated_param_count(cfg_mone).model_activated;
    if (a != b)
        throw ConfigError("bench requires equal activated parameters (" + std::to_string(a) +
                          " vs " + std::to_string(b) + ")");

    BenchResult res;
    res.batch = batch;
    res.prefill = prefill;
    res.new_tokens = new_tokens;
    res.trials = trials;
    res.moe.label = layer_kind_name(cfg_moe.layer_kind);
    res.mone.label = layer_kind_name(cfg_mone.layer_kind);
    res.moe.activated_params = a;
    res.mone.activated_params = b;

    bench_detail::BenchRig<T> rig_a(cfg_moe, batch, prefill, new_tokens);
    bench_detail::BenchRig<T> rig_b(cfg_mone, batch, prefill, new_tokens);

    // warmup doubles as the rep calibration: each timed trial then spans at
    // least min_trial_seconds regardless of how fast the machine is
    constexpr double min_trial_seconds = 2.0;
    const double warm_a = rig_a.decode_pass();
    const double warm_b = rig_b.decode_pass();
    const int64_t reps_a = rig_a.reps_for(warm_a, min_trial_seconds);
    const int64_t reps_b = rig_b.reps_for(warm_b, min_trial_seconds);

    MemTracker::reset_peak();
    rig_a.decode_pass();
    res.moe.peak_bytes = MemTracker::peak_bytes();
    MemTracker::reset_peak();
    rig_b.decode_pass();
    res.mone.peak_bytes = MemTracker::peak_bytes();

    for (int64_t t = 0; t < trials; ++t) {
        res.moe.trial_tokens_per_sec.push_back(rig_a.timed_trial(reps_a));
        res.mone.trial_tokens_per_sec.push_back(rig_b.timed_trial(reps_b));
    }
    res.moe.median_tokens_per_sec = bench_detail::median_of(res.moe.trial_tokens_per_sec);
    res.mone.median_tokens_per_sec = bench_detail::median_of(res.mone.trial_tokens_per_sec);
    return res;
}

}  // namespace monelab
