#include <cmath>

#include "doctest.h"
#include "monelab/analysis.hpp"
#include "monelab/data.hpp"
#include "monelab/train.hpp"

using namespace monelab;

namespace {

ModelConfig base_cfg(LayerKind kind, uint64_t seed = 5) {
    ModelConfig cfg;
    cfg.vocab_size = 32;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_expert = 8;
    cfg.n_experts = 4;
    cfg.k_experts = 2;
    cfg.k_neurons = 2;
    cfg.seq_len = 16;
    cfg.layer_kind = kind;
    cfg.alpha_aux = 0.001;
    cfg.alpha_ng = kind == LayerKind::mone ? 0.001 : 0.0;
    cfg.seed = seed;
    return cfg;
}

// Table-style model shapes used for the parameter-accounting algebra
ModelConfig table_cfg(LayerKind kind, int64_t d_model, int64_t d_expert, int64_t k_experts,
                      int64_t k_neurons) {
    ModelConfig cfg;
    cfg.vocab_size = 1024;
    cfg.d_model = d_model;
    cfg.n_layers = 12;
    cfg.n_heads = 16;
    cfg.d_expert = d_expert;
    cfg.n_experts = 64;
    cfg.k_experts = k_experts;
    cfg.k_neurons = k_neurons > 0 ? k_neurons : 1;
    cfg.seq_len = 128;
    cfg.layer_kind = kind;
    cfg.seed = 1;
    return cfg;
}

}  // namespace

TEST_CASE("activated-parameter algebra: equal-activation families hit 12N") {
    for (auto [d_model, d_expert] : std::vector<std::pair<int64_t, int64_t>>{
             {768, 368}, {1024, 512}}) {
        const int64_t n = d_expert * d_model;

        auto moe4 = activated_param_count(table_cfg(LayerKind::moe, d_model, d_expert, 4, 0));
        CHECK(moe4.per_layer_routed_activated == 12 * n);

        auto mone8 = activated_param_count(table_cfg(
            LayerKind::mone, d_model, d_expert, 8, neurons_for_ratio(d_expert, 1, 4)));
        CHECK(mone8.per_layer_routed_activated == 8 * (n + 2 * (n / 4)));
        CHECK(mone8.per_layer_routed_activated == 12 * n);

        auto mone6 = activated_param_count(table_cfg(
            LayerKind::mone, d_model, d_expert, 6, neurons_for_ratio(d_expert, 1, 2)));
        CHECK(mone6.per_layer_routed_activated == 12 * n);

        // identical everything else, so whole-layer and whole-model activated
        // counts agree exactly as well
        CHECK(moe4.per_layer_activated == mone8.per_layer_activated);
        CHECK(moe4.model_activated == mone8.model_activated);
        CHECK(moe4.model_activated == mone6.model_activated);
    }
}

TEST_CASE("full neuron budget makes mone and moe accounting identical") {
    ModelConfig moe = base_cfg(LayerKind::moe);
    ModelConfig mone = base_cfg(LayerKind::mone);
    mone.k_neurons = mone.d_expert;
    auto a = activated_param_count(moe);
    auto b = activated_param_count(mone);
    CHECK(a.per_layer_activated == b.per_layer_activated);
    CHECK(a.model_activated == b.model_activated);
    CHECK(a.model_total == b.model_total);
}

TEST_CASE("param accounting is monotone in k_experts and k_neurons") {
    ModelConfig cfg = base_cfg(LayerKind::mone);
    int64_t prev = 0;
    for (int64_t ke = 1; ke <= cfg.n_experts; ++ke) {
        cfg.k_experts = ke;
        auto r = activated_param_count(cfg);
        CHECK(r.model_activated >= prev);
        prev = r.model_activated;
    }
    cfg.k_experts = 2;
    prev = 0;
    for (int64_t kn = 1; kn <= cfg.d_expert; ++kn) {
        cfg.k_neurons = kn;
        auto r = activated_param_count(cfg);
        CHECK(r.model_activated >= prev);
        prev = r.model_activated;
    }
}

TEST_CASE("total counts match the parameters a real model allocates") {
    for (LayerKind kind : {LayerKind::dense_ffn, LayerKind::moe, LayerKind::mone}) {
        ModelConfig cfg = base_cfg(kind);
        auto r = activated_param_count(cfg);
        Model<double> model = Model<double>::init(cfg);
        CHECK(r.model_total == model.params.total_params());
        CHECK(r.model_activated <= r.model_total);
    }
}

TEST_CASE("prune scan at ratio 1.0 equals plain evaluation exactly") {
    for (LayerKind kind : {LayerKind::moe, LayerKind::mone}) {
        ModelConfig cfg = base_cfg(kind, 31);
        Model<double> model = Model<double>::init(cfg);
        auto data = load_dataset("bigram:16:600", cfg.vocab_size, cfg.seed);

        auto base = evaluate(model, data);
        std::vector<double> ratios = {1.0, 0.5};
        auto sweep = prune_scan(model, data, ratios);
        REQUIRE(sweep.rows.size() == 2);
        CHECK(sweep.rows[0].metrics.mean_ce_loss == base.mean_ce_loss);
        CHECK(sweep.rows[0].metrics.token_accuracy == base.token_accuracy);
        CHECK(sweep.rows[0].k_neurons == cfg.effective_k_neurons());

        std::vector<double> bad = {0.0};
        CHECK_THROWS_AS(prune_scan(model, data, bad), ShapeError);
        std::vector<double> bad2 = {-0.3};
        CHECK_THROWS_AS(prune_scan(model, data, bad2), ShapeError);
    }
}

TEST_CASE("pruning a trained memorizer never helps") {
    ModelConfig cfg;
    cfg.vocab_size = 32;
    cfg.d_model = 24;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_expert = 8;
    cfg.n_experts = 4;
    cfg.k_experts = 2;
    cfg.seq_len = 12;
    cfg.layer_kind = LayerKind::moe;
    cfg.alpha_aux = 0.001;
    cfg.seed = 33;

    TrainConfig tcfg;
    tcfg.lr = 1e-2;
    tcfg.weight_decay = 0.0;
    tcfg.steps = 120;
    tcfg.batch_seqs = 4;

    auto data = load_dataset("repeat:12:2048", cfg.vocab_size, cfg.seed);
    auto st = TrainState<double>::init(cfg, tcfg);
    train_run(st, data);

    std::vector<double> ratios = {1.0, 0.4};
    auto sweep = prune_scan(st.model, data, ratios);
    CHECK(sweep.rows[1].metrics.mean_ce_loss >= sweep.rows[0].metrics.mean_ce_loss);
}

TEST_CASE("activation stats: zero gate weights give zero medians") {
    ModelConfig cfg = base_cfg(LayerKind::mone, 37);
    Model<double> model = Model<double>::init(cfg);
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        for (int64_t e = 0; e < cfg.n_experts; ++e) {
            auto& g = model.params["layers." + std::to_string(l) + ".experts." +
                                   std::to_string(e) + ".gate"];
            for (int64_t i = 0; i < g.numel(); ++i) g[i] = 0.0;
        }
    }
    auto data = load_dataset("bigram:16:400", cfg.vocab_size, cfg.seed);
    auto rep = activation_stats(model, data);
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        CHECK(rep.median_selected_abs_gate[static_cast<size_t>(l)] == 0.0);
        CHECK(rep.frac_below_threshold[static_cast<size_t>(l)] == 1.0);
    }
}

TEST_CASE("activation stats accounting and determinism") {
    ModelConfig cfg = base_cfg(LayerKind::mone, 41);
    Model<double> model = Model<double>::init(cfg);
    auto data = load_dataset("bigram:16:600", cfg.vocab_size, cfg.seed);

    auto rep = activation_stats(model, data, /*select_k=*/3);
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        int64_t total = 0;
        for (int64_t c : rep.hist[static_cast<size_t>(l)]) total += c;
        // every routed (token, expert) contributes d_expert gate values
        CHECK(total == rep.expert_activations[static_cast<size_t>(l)] * cfg.d_expert);
        CHECK(total == rep.gate_values_counted[static_cast<size_t>(l)]);

        int64_t hits = 0;
        for (int64_t h : rep.expert_hits[static_cast<size_t>(l)]) hits += h;
        CHECK(hits == rep.expert_activations[static_cast<size_t>(l)]);
    }

    auto rep2 = activation_stats(model, data, 3);
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        CHECK(rep.median_selected_abs_gate[static_cast<size_t>(l)] ==
              rep2.median_selected_abs_gate[static_cast<size_t>(l)]);
        CHECK(rep.hist[static_cast<size_t>(l)] == rep2.hist[static_cast<size_t>(l)]);
    }

    std::vector<int32_t> tiny(4, 1);
    CHECK_THROWS_AS(activation_stats(model, tiny), InputError);
}

TEST_CASE("neuron dispatch variance: hand-computed cases") {
    // fixed hot subset: f = rate on k_n of d_expert neurons, 0 elsewhere;
    // Var = rate^2 * p(1-p) with p = k_n/d_expert
    NeuronLoadStats ns = NeuronLoadStats::zero(1, 8);
    ns.tokens = 100;
    ns.expert_tokens = {60};
    const double rate = 0.6;
    for (int64_t k = 0; k < 2; ++k) ns.f_at(0, k) = rate;
    auto var = neuron_dispatch_variance(ns);
    const double p = 2.0 / 8.0;
    CHECK(var[0] == doctest::Approx(rate * rate * p * (1 - p)).epsilon(1e-12));

    // perfectly uniform selection has zero variance
    NeuronLoadStats uni = NeuronLoadStats::zero(1, 8);
    uni.tokens = 10;
    uni.expert_tokens = {10};
    for (int64_t k = 0; k < 8; ++k) uni.f_at(0, k) = 0.25;
    CHECK(neuron_dispatch_variance(uni)[0] == 0.0);
}

TEST_CASE("load balance variance on a model: full selection is exactly uniform") {
    ModelConfig cfg = base_cfg(LayerKind::mone, 43);
    cfg.k_neurons = cfg.d_expert;  // every neuron of an activated expert fires
    Model<double> model = Model<double>::init(cfg);
    auto data = load_dataset("bigram:16:600", cfg.vocab_size, cfg.seed);

    auto lb = load_balance_variance(model, data);
    // equal dispatch fractions up to one ulp of the mean-subtraction
    for (const auto& layer : lb.variance)
        for (double v : layer) CHECK(v < 1e-30);

    ModelConfig partial = base_cfg(LayerKind::mone, 43);
    Model<double> model2 = Model<double>::init(partial);
    auto lb2 = load_balance_variance(model2, data);
    CHECK(lb2.tokens > 0);
    bool any_positive = false;
    for (const auto& layer : lb2.variance)
        for (double v : layer) any_positive |= v > 0;
    CHECK(any_positive);

    ModelConfig moe = base_cfg(LayerKind::moe, 43);
    Model<double> moe_model = Model<double>::init(moe);
    CHECK_THROWS_AS(load_balance_variance(moe_model, data), ConfigError);
}

TEST_CASE("throughput bench validates activated-parameter parity") {
    ModelConfig moe = base_cfg(LayerKind::moe, 47);
    moe.seq_len = 32;
    ModelConfig mone = base_cfg(LayerKind::mone, 47);
    mone.seq_len = 32;
    mone.k_experts = 4;
    mone.k_neurons = 2;  // 4*(N + 2N/4) = 6N == moe 2*3N

    auto a = activated_param_count(moe);
    auto b = activated_param_count(mone);
    REQUIRE(a.model_activated == b.model_activated);

    auto res = throughput_bench<double>(moe, mone, /*batch=*/2, /*prefill=*/8,
                                        /*new_tokens=*/8, /*trials=*/3);
    CHECK(res.moe.activated_params == res.mone.activated_params);
    CHECK(res.moe.median_tokens_per_sec > 0);
    CHECK(res.mone.median_tokens_per_sec > 0);
    CHECK(res.moe.peak_bytes > 0);
    CHECK(res.threads == 1);

    // unequal activated parameters are a config error
    ModelConfig unequal = mone;
    unequal.k_experts = 3;
    CHECK_THROWS_AS(throughput_bench<double>(moe, unequal, 2, 8, 8, 3), ConfigError);
}
