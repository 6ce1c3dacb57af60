// Acceptance suite: one checked criterion per test case, each reporting a
// single PASS/FAIL line. Criteria 6-8 train or time real toy models and take
// a few minutes; everything else is fast.

#include <chrono>
#include <cstdio>

#include "doctest.h"
#include "monelab/analysis.hpp"
#include "monelab/checkpoint.hpp"
#include "monelab/data.hpp"
#include "monelab/train.hpp"

using namespace monelab;

namespace {

struct Stopwatch {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

void report(int n, const char* name, bool pass) {
    std::printf("ACCEPTANCE %d %-34s %s\n", n, name, pass ? "PASS" : "FAIL");
    std::fflush(stdout);
    CHECK_MESSAGE(pass, "criterion ", n, " (", name, ")");
}

Tensor64 random_vec(int64_t n, Rng& rng, double scale = 1.0) {
    Tensor64 v({n});
    for (int64_t i = 0; i < n; ++i) v[i] = scale * (rng.uniform() * 2 - 1);
    return v;
}

Tensor64 random_mat(int64_t r, int64_t c, Rng& rng, double scale = 1.0) {
    Tensor64 m({r, c});
    for (int64_t i = 0; i < m.numel(); ++i) m[i] = scale * (rng.uniform() * 2 - 1);
    return m;
}

}  // namespace

TEST_CASE("criterion 1: decomposition oracle") {
    Stopwatch sw;
    Rng rng(20251001);
    double worst = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int64_t d_model = 2 + rng.uniform_int(31);   // <= 32
        const int64_t d_expert = 1 + rng.uniform_int(16);  // <= 16
        ExpertWeights w = ExpertWeights::init(d_model, d_expert, rng);
        Tensor64 x = random_vec(d_model, rng, 2.0);
        Tensor64 fast = expert_forward(x, w, ActKind::silu).y;
        Tensor64 slow = decomposed_forward(x, w);
        worst = std::max(worst, static_cast<double>(ops::max_abs_diff(fast, slow)));
    }
    const double elapsed = sw.seconds();
    std::printf("  decomposition: max |dense - neuron sum| = %.3e over 1000 pairs, %.1f s\n",
                worst, elapsed);
    report(1, "decomposition-oracle", worst < 1e-10 && elapsed < 10.0);
}

TEST_CASE("criterion 2: reduction invariant") {
    Rng rng(20251002);
    bool layers_equal = true;
    for (int trial = 0; trial < 100; ++trial) {
        const int64_t d_model = 2 + rng.uniform_int(23);
        const int64_t d_expert = 1 + rng.uniform_int(12);
        const int64_t n_experts = 1 + rng.uniform_int(6);
        const int64_t k_experts = 1 + rng.uniform_int(n_experts);
        const int64_t tokens = 1 + rng.uniform_int(8);
        const ActKind act = trial % 3 == 0   ? ActKind::silu
                            : trial % 3 == 1 ? ActKind::sigmoid
                                             : ActKind::softmax;

        std::vector<ExpertWeights> experts;
        for (int64_t e = 0; e < n_experts; ++e)
            experts.push_back(ExpertWeights::init(d_model, d_expert, rng));
        ExpertWeights shared = ExpertWeights::init(d_model, d_expert, rng);
        RouterWeights router{random_mat(n_experts, d_model, rng)};
        Tensor64 x = random_mat(tokens, d_model, rng);

        MoNEConfig cfg{k_experts, d_expert, act, 0.0};
        auto mone = mone_layer_forward<double>(x, experts, &shared, router, cfg);
        auto moe = moe_layer_forward<double>(x, experts, &shared, router, k_experts, act);
        for (int64_t i = 0; i < mone.y.numel(); ++i)
            layers_equal &= (mone.y[i] == moe.y[i]);
    }

    // end-to-end: a 2-layer LM in each mode, identical weights
    ModelConfig mc;
    mc.vocab_size = 32;
    mc.d_model = 16;
    mc.n_layers = 2;
    mc.n_heads = 2;
    mc.d_expert = 8;
    mc.n_experts = 4;
    mc.k_experts = 2;
    mc.k_neurons = 8;  // full budget
    mc.seq_len = 12;
    mc.layer_kind = LayerKind::mone;
    mc.alpha_aux = 0.001;
    mc.seed = 77;
    ModelConfig moe_cfg = mc;
    moe_cfg.layer_kind = LayerKind::moe;

    Model<double> mone_lm = Model<double>::init(mc);
    Model<double> moe_lm = Model<double>::init(moe_cfg);
    Rng trng(5);
    std::vector<int32_t> tokens(12);
    for (auto& t : tokens) t = static_cast<int32_t>(trng.uniform_int(32));
    auto a = lm_forward(mone_lm, tokens);
    auto b = lm_forward(moe_lm, tokens);
    bool lm_equal = ops::max_abs_diff(a.logits, b.logits) == 0.0 && a.ce_loss == b.ce_loss;

    std::printf("  reduction: 100 layer configs %s, 2-layer LM logits %s\n",
                layers_equal ? "identical" : "DIFFER", lm_equal ? "identical" : "DIFFER");
    report(2, "reduction-invariant", layers_equal && lm_equal);
}

TEST_CASE("criterion 3: gradient correctness") {
    Stopwatch sw;
    ModelConfig cfg;
    cfg.vocab_size = 11;
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_expert = 4;
    cfg.n_experts = 4;
    cfg.k_experts = 2;
    cfg.k_neurons = 2;
    cfg.seq_len = 6;
    cfg.layer_kind = LayerKind::mone;
    cfg.alpha_aux = 0.01;
    cfg.alpha_ng = 0.01;
    cfg.seed = 20251003;

    Rng rng(31);
    std::vector<int32_t> batch(2 * 7);
    for (auto& t : batch) t = static_cast<int32_t>(rng.uniform_int(cfg.vocab_size));

    auto res = model_gradcheck(cfg, batch, 2, 1e-5);
    const double elapsed = sw.seconds();
    std::printf("  gradcheck: max rel err %.3e over %lld entries (worst %s), %.1f s\n",
                res.max_rel_err, static_cast<long long>(res.entries_checked),
                res.worst_param.c_str(), elapsed);
    report(3, "gradient-correctness", res.max_rel_err < 1e-4 && elapsed < 120.0);
}

TEST_CASE("criterion 4: load-balance closed forms") {
    // uniform routing: alpha * N_E * sum f_i p_i collapses to alpha * K_E
    const int64_t n_experts = 8, k_experts = 4;
    ExpertLoadStats uniform = ExpertLoadStats::zero(n_experts);
    uniform.tokens = 64;
    for (int64_t i = 0; i < n_experts; ++i) {
        uniform.f[static_cast<size_t>(i)] =
            static_cast<double>(k_experts) / static_cast<double>(n_experts);
        uniform.p[static_cast<size_t>(i)] = 1.0 / static_cast<double>(n_experts);
    }
    const double laux = aux_load_balance_loss(uniform, 0.001, n_experts);
    const bool uniform_ok = laux == 0.004;

    // hand-computed two-neuron NG-LBL case: one expert, one token, equal
    // gates, full selection -> loss = alpha * d_expert
    ExpertWeights w;
    w.w_gate = Tensor64({2, 1}, {1.0, 1.0});
    w.w_up = Tensor64({2, 1}, {0.25, -0.5});
    w.w_down = Tensor64({1, 2}, {0.75, 0.125});
    std::vector<ExpertWeights> experts = {w};
    RouterWeights router{Tensor64({1, 1}, {1.0})};
    Tensor64 x({1, 1}, {1.0});
    MoNEConfig mcfg{1, 2, ActKind::silu, 0.25};
    auto out = mone_layer_forward<double>(x, experts, nullptr, router, mcfg);
    const double lng = ng_lbl_loss(out.neuron_stats, mcfg.alpha_ng, 2);
    const bool ng_ok = std::abs(lng - 0.25 * 2.0) < 1e-12;

    std::printf("  closed forms: uniform L_aux = %.6f (want 0.004), ng two-neuron = %.12f "
                "(want 0.5)\n", laux, lng);
    report(4, "load-balance-closed-forms", uniform_ok && ng_ok);
}

TEST_CASE("criterion 5: activated-parameter accounting") {
    bool ok = true;
    for (auto [d_model, d_expert] :
         std::vector<std::pair<int64_t, int64_t>>{{768, 368}, {1024, 512}}) {
        const int64_t n = d_expert * d_model;
        auto make = [&](LayerKind kind, int64_t ke, int64_t kn) {
            ModelConfig c;
            c.vocab_size = 1024;
            c.d_model = d_model;
            c.n_layers = 12;
            c.n_heads = 16;
            c.d_expert = d_expert;
            c.n_experts = 64;
            c.k_experts = ke;
            c.k_neurons = kn > 0 ? kn : 1;
            c.seq_len = 128;
            c.layer_kind = kind;
            c.seed = 1;
            return activated_param_count(c);
        };
        auto moe4 = make(LayerKind::moe, 4, 0);
        auto mone8 = make(LayerKind::mone, 8, neurons_for_ratio(d_expert, 1, 4));
        auto mone6 = make(LayerKind::mone, 6, neurons_for_ratio(d_expert, 1, 2));
        ok &= moe4.per_layer_routed_activated == 12 * n;
        ok &= mone8.per_layer_routed_activated == 12 * n;
        ok &= mone6.per_layer_routed_activated == 12 * n;
        ok &= moe4.per_layer_activated == mone8.per_layer_activated;
        ok &= moe4.per_layer_activated == mone6.per_layer_activated;
        ok &= moe4.model_activated == mone8.model_activated;
        std::printf("  accounting (d_model=%lld, d_expert=%lld): 12N = %lld, families %s\n",
                    static_cast<long long>(d_model), static_cast<long long>(d_expert),
                    static_cast<long long>(12 * n), ok ? "equal" : "UNEQUAL");
    }
    report(5, "activated-param-accounting", ok);
}

TEST_CASE("criterion 6: pruning-sweep desk analog") {
    Stopwatch sw;
    ModelConfig cfg;
    cfg.vocab_size = 64;
    cfg.d_model = 64;
    cfg.n_layers = 2;
    cfg.n_heads = 4;
    cfg.d_expert = 32;
    cfg.n_experts = 8;
    cfg.k_experts = 2;
    cfg.seq_len = 32;
    cfg.layer_kind = LayerKind::moe;
    cfg.alpha_aux = 0.001;
    cfg.seed = 1234;

    TrainConfig tcfg;
    tcfg.lr = 3e-3;
    tcfg.weight_decay = 0.01;
    tcfg.steps = 6000;
    tcfg.batch_seqs = 8;
    tcfg.warmup_steps = 50;

    auto data = load_dataset("markov2:40:100000:90", cfg.vocab_size, cfg.seed);
    auto st = TrainState<double>::init(cfg, tcfg);
    auto history = train_run(st, data);

    std::vector<double> ratios = {1.0, 0.4, 0.05};
    auto sweep = prune_scan(st.model, data, ratios);
    const double full = sweep.rows[0].metrics.mean_ce_loss;
    const double kept40 = sweep.rows[1].metrics.mean_ce_loss;
    const double kept05 = sweep.rows[2].metrics.mean_ce_loss;
    const double elapsed = sw.seconds();

    const bool gentle_at_40 = kept40 <= 1.10 * full;
    const bool cliff_at_05 = kept05 >= 1.50 * full;
    std::printf("  prune sweep: train ce %.3f; eval ce full=%.4f keep40=%.4f (%+.1f%%) "
                "keep05=%.4f (%+.1f%%), %.0f s\n",
                history.back().ce_loss, full, kept40, 100 * (kept40 / full - 1), kept05,
                100 * (kept05 / full - 1), elapsed);
    report(6, "prune-sweep-desk-analog", gentle_at_40 && cliff_at_05 && elapsed < 900.0);
}

TEST_CASE("criterion 7: activation and balance desk analog") {
    // paired runs at equal activated parameters: moe K_E=2 vs mone K_E=4 with
    // a quarter of the neurons, plus an NG-LBL-free twin of the mone run
    ModelConfig moe;
    moe.vocab_size = 48;
    moe.d_model = 48;
    moe.n_layers = 2;
    moe.n_heads = 4;
    moe.d_expert = 16;
    moe.n_experts = 8;
    moe.k_experts = 2;
    moe.seq_len = 32;
    moe.layer_kind = LayerKind::moe;
    moe.alpha_aux = 0.001;
    moe.seed = 20251007;

    ModelConfig mone_free = moe;
    mone_free.layer_kind = LayerKind::mone;
    mone_free.k_experts = 4;
    mone_free.k_neurons = 4;
    mone_free.alpha_ng = 0.0;
    ModelConfig mone_ng = mone_free;
    mone_ng.alpha_ng = 0.001;

    REQUIRE(activated_param_count(moe).model_activated ==
            activated_param_count(mone_ng).model_activated);

    TrainConfig tcfg;
    tcfg.lr = 3e-3;
    tcfg.weight_decay = 0.01;
    tcfg.steps = 900;
    tcfg.batch_seqs = 8;
    tcfg.warmup_steps = 50;

    auto data = load_dataset("markov2:24:80000:85", moe.vocab_size, moe.seed);
    auto train_one = [&](const ModelConfig& c) {
        auto st = TrainState<double>::init(c, tcfg);
        train_run(st, data);
        return st;
    };
    auto st_moe = train_one(moe);
    auto st_free = train_one(mone_free);
    auto st_ng = train_one(mone_ng);

    // medians of each model's own selected |G|: all activated neurons for the
    // traditional layer, the top-K_N for mone
    auto rep_moe = activation_stats(st_moe.model, data);
    auto rep_ng = activation_stats(st_ng.model, data);
    int64_t mone_wins = 0;
    for (int64_t l = 0; l < moe.n_layers; ++l)
        if (rep_ng.median_selected_abs_gate[static_cast<size_t>(l)] >
            rep_moe.median_selected_abs_gate[static_cast<size_t>(l)])
            mone_wins += 1;
    const bool median_majority = 2 * mone_wins > moe.n_layers;

    auto lb_free = load_balance_variance(st_free.model, data);
    auto lb_ng = load_balance_variance(st_ng.model, data);
    const bool balance_improved = lb_ng.mean_variance() < lb_free.mean_variance();

    std::printf("  medians |G| per layer (mone vs moe):");
    for (int64_t l = 0; l < moe.n_layers; ++l)
        std::printf(" [%.3f vs %.3f]", rep_ng.median_selected_abs_gate[static_cast<size_t>(l)],
                    rep_moe.median_selected_abs_gate[static_cast<size_t>(l)]);
    std::printf("\n  mean var f~: ng-lbl %.3g vs free %.3g\n", lb_ng.mean_variance(),
                lb_free.mean_variance());
    report(7, "activation-and-balance-analog", median_majority && balance_improved);
}

TEST_CASE("criterion 8: throughput parity") {
    ModelConfig moe;
    moe.vocab_size = 256;
    moe.d_model = 256;
    moe.n_layers = 2;
    moe.n_heads = 4;
    moe.d_expert = 128;
    moe.n_experts = 8;
    moe.k_experts = 2;
    moe.seq_len = 96;
    moe.layer_kind = LayerKind::moe;
    moe.seed = 4242;
    moe.dtype = Dtype::f32;
    ModelConfig mone = moe;
    mone.layer_kind = LayerKind::mone;
    mone.k_experts = 4;
    mone.k_neurons = 32;  // quarter of d_expert: 4*(N + 2*N/4) = 2*3N

    auto res = throughput_bench<float>(moe, mone, /*batch=*/4, /*prefill=*/32,
                                       /*new_tokens=*/48, /*trials=*/7);
    std::printf("  throughput: moe %.0f tok/s, mone %.0f tok/s, gap %.1f%%, "
                "activated %lld each, peak %lld vs %lld bytes\n",
                res.moe.median_tokens_per_sec, res.mone.median_tokens_per_sec,
                100 * res.relative_gap(), static_cast<long long>(res.moe.activated_params),
                static_cast<long long>(res.moe.peak_bytes),
                static_cast<long long>(res.mone.peak_bytes));

    // self-comparison: the same config measured twice stays within trial noise
    auto self = throughput_bench<float>(moe, moe, 4, 32, 48, 5);
    std::printf("  self-comparison spread: %.1f%%\n", 100 * self.relative_gap());

    report(8, "throughput-parity",
           res.relative_gap() < 0.10 && self.relative_gap() < 0.05 &&
               res.moe.activated_params == res.mone.activated_params);
}

TEST_CASE("criterion 9: determinism and persistence") {
    ModelConfig cfg;
    cfg.vocab_size = 32;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_expert = 8;
    cfg.n_experts = 4;
    cfg.k_experts = 2;
    cfg.k_neurons = 3;
    cfg.seq_len = 12;
    cfg.layer_kind = LayerKind::mone;
    cfg.alpha_aux = 0.001;
    cfg.alpha_ng = 0.001;
    cfg.seed = 20251009;

    TrainConfig tcfg;
    tcfg.lr = 3e-3;
    tcfg.steps = 8;
    tcfg.batch_seqs = 2;

    auto data = load_dataset("markov2:16:2048", cfg.vocab_size, cfg.seed);
    auto st1 = TrainState<double>::init(cfg, tcfg);
    auto st2 = TrainState<double>::init(cfg, tcfg);
    auto h1 = train_run(st1, data);
    auto h2 = train_run(st2, data);
    bool curves_equal = true;
    for (size_t i = 0; i < h1.size(); ++i) {
        curves_equal &= h1[i].ce_loss == h2[i].ce_loss;
        curves_equal &= h1[i].aux_loss == h2[i].aux_loss;
        curves_equal &= h1[i].grad_norm == h2[i].grad_norm;
    }

    const std::string path =
        (std::filesystem::temp_directory_path() / "monelab_acceptance.ckpt").string();
    save_checkpoint(st1, path);
    auto loaded = load_checkpoint<double>(path);
    Rng trng(3);
    std::vector<int32_t> tokens(cfg.seq_len);
    for (auto& t : tokens) t = static_cast<int32_t>(trng.uniform_int(cfg.vocab_size));
    auto a = lm_forward(st1.model, tokens);
    auto b = lm_forward(loaded.model, tokens);
    const bool roundtrip_equal = ops::max_abs_diff(a.logits, b.logits) == 0.0;
    std::filesystem::remove(path);

    std::printf("  determinism: loss curves %s, checkpoint forward %s\n",
                curves_equal ? "bit-identical" : "DIFFER",
                roundtrip_equal ? "bit-identical" : "DIFFER");
    report(9, "determinism-and-persistence", curves_equal && roundtrip_equal);
}
