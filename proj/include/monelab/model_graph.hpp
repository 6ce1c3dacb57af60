#pragma once

#include <optional>

#include "monelab/model.hpp"
#include "monelab/tape.hpp"

namespace monelab {

// Tape-graph construction for training and gradient checking. Forward values
// go through the same kernels as the plain inference path.
template <typename T>
struct LmGraph {
    Var loss;                    // ce + summed auxiliary losses
    Var ce;
    std::optional<Var> aux;      // absent when no auxiliary term contributes
    double aux_value = 0;        // numeric total (0 when disabled)
    std::vector<Var> param_vars; // aligned with ParamSet order
    std::vector<Var> seq_logits; // per sequence, [T x vocab]
    std::vector<ExpertLoadStats> expert_stats;   // per layer
    std::vector<NeuronLoadStats> neuron_stats;   // per layer (mone)
};

namespace graph_detail {

template <typename T>
Var act_var(Tape<T>& tp, Var v, ActKind kind) {
    switch (kind) {
        case ActKind::silu: return tg::silu(tp, v);
        case ActKind::sigmoid: return tg::sigmoid(tp, v);
        case ActKind::softmax: return tg::softmax_rows(tp, v);
    }
    throw ConfigError("unknown activation kind");
}

struct ExpertVarSet {
    Var gate, up, down;
};

// One expert applied to one token state, keeping only the top keep_n neurons
// by gate magnitude. Full selection skips the gather nodes entirely so the
// graph coincides with the traditional dense expert.
template <typename T>
struct ExpertApply {
    Var y;
    Var gate_sel;                // gate values at the kept neurons
    std::vector<int64_t> keep;   // ascending neuron indices
};

template <typename T>
ExpertApply<T> apply_expert(Tape<T>& tp, const ExpertVarSet& ev, Var xt, ActKind act,
                            int64_t keep_n) {
    Var g = act_var(tp, tg::matvec(tp, ev.gate, xt), act);
    const int64_t d_expert = tp.val(g).dim(0);
    if (keep_n >= d_expert) {
        Var h = tg::matvec(tp, ev.up, xt);
        Var z = tg::mul(tp, g, h);
        Var y = tg::matvec(tp, ev.down, z);
        std::vector<int64_t> all(static_cast<size_t>(d_expert));
        for (int64_t k = 0; k < d_expert; ++k) all[static_cast<size_t>(k)] = k;
        return {y, g, std::move(all)};
    }
    std::vector<int64_t> keep = ops::topk_indices(tp.val(g), keep_n, /*by_abs=*/true);
    Var g_sel = tg::gather_elems(tp, g, keep);
    Var up_sel = tg::gather_rows(tp, ev.up, keep);
    Var h = tg::matvec(tp, up_sel, xt);
    Var z = tg::mul(tp, g_sel, h);
    Var down_sel = tg::gather_cols(tp, ev.down, keep);
    Var y = tg::matvec(tp, down_sel, z);
    return {y, g_sel, std::move(keep)};
}

template <typename T>
struct FfnGraphOut {
    Var y;
    std::optional<Var> aux;
    ExpertLoadStats estats;
    NeuronLoadStats nstats;
};

// Routed FFN slot over a pooled token matrix. Selection indices and dispatch
// fractions are constants of the forward pass; gradients flow through the
// activated scores and gate values only.
template <typename T>
FfnGraphOut<T> build_routed_ffn(Tape<T>& tp, const ModelConfig& cfg, Var x, Var router,
                                const std::vector<ExpertVarSet>& experts,
                                const ExpertVarSet& shared) {
    const int64_t n_tokens = tp.val(x).dim(0);
    const int64_t n_experts = cfg.n_experts;
    const int64_t keep_n = cfg.effective_k_neurons();
    const bool is_mone = cfg.layer_kind == LayerKind::mone;

    FfnGraphOut<T> out;
    out.estats = ExpertLoadStats::zero(n_experts);
    out.nstats = NeuronLoadStats::zero(n_experts, cfg.d_expert);

    Var logits = tg::matmul_nt(tp, x, router);

    // shared expert, dense and batched (unless neuron selection is applied)
    std::optional<Var> shared_y;
    if (!cfg.select_shared) {
        Var gs = tg::silu(tp, tg::matmul_nt(tp, x, shared.gate));
        Var hs = tg::matmul_nt(tp, x, shared.up);
        shared_y = tg::matmul_nt(tp, tg::mul(tp, gs, hs), shared.down);
    }

    std::vector<Var> token_rows;
    std::vector<Var> p_scatters;
    std::vector<std::vector<Var>> ng_mass(static_cast<size_t>(n_experts));
    std::vector<double> dispatch(static_cast<size_t>(n_experts), 0.0);

    token_rows.reserve(static_cast<size_t>(n_tokens));
    p_scatters.reserve(static_cast<size_t>(n_tokens));

    for (int64_t t = 0; t < n_tokens; ++t) {
        Var xt = tg::row(tp, x, t);
        Var lrow = tg::row(tp, logits, t);
        std::vector<int64_t> sel =
            ops::topk_indices(tp.val(lrow), cfg.k_experts, /*by_abs=*/false);
        Var p_hat = tg::softmax_rows(tp, tg::gather_elems(tp, lrow, sel));

        std::vector<Var> contribs;
        if (cfg.select_shared)
            contribs.push_back(apply_expert(tp, shared, xt, ActKind::silu, keep_n).y);

        for (size_t s = 0; s < sel.size(); ++s) {
            const int64_t e = sel[s];
            auto ap = apply_expert(tp, experts[static_cast<size_t>(e)], xt,
                                   cfg.internal_act, keep_n);
            Var ps = tg::index(tp, p_hat, static_cast<int64_t>(s));
            contribs.push_back(tg::scale_by(tp, ap.y, ps));

            dispatch[static_cast<size_t>(e)] += 1.0;
            if (is_mone) {
                out.nstats.expert_tokens[static_cast<size_t>(e)] += 1;
                for (int64_t k : ap.keep) out.nstats.f_at(e, k) += 1.0;
                Var mass = cfg.ng_stat_norm == NeuronStatNorm::softmax
                               ? tg::softmax_rows(tp, ap.gate_sel)
                               : tg::abs(tp, ap.gate_sel);
                ng_mass[static_cast<size_t>(e)].push_back(
                    tg::scatter_elems(tp, mass, ap.keep, cfg.d_expert));
            }
        }
        token_rows.push_back(contribs.size() == 1 ? contribs[0] : tg::add_n(tp, contribs));
        p_scatters.push_back(tg::scatter_elems(tp, p_hat, sel, n_experts));
    }

    Var routed = tg::stack_rows(tp, token_rows);
    out.y = shared_y ? tg::add(tp, *shared_y, routed) : routed;

    const T inv_n = T(1) / static_cast<T>(n_tokens);
    Var p_mean = tg::scale(tp, tg::add_n(tp, p_scatters), inv_n);

    out.estats.tokens = n_tokens;
    for (int64_t i = 0; i < n_experts; ++i) {
        out.estats.f[static_cast<size_t>(i)] =
            dispatch[static_cast<size_t>(i)] / static_cast<double>(n_tokens);
        out.estats.p[static_cast<size_t>(i)] = static_cast<double>(tp.val(p_mean)[i]);
    }

    std::optional<Var> aux;
    if (cfg.alpha_aux > 0) {
        TensorT<T> f_const({n_experts});
        for (int64_t i = 0; i < n_experts; ++i)
            f_const[i] = static_cast<T>(out.estats.f[static_cast<size_t>(i)]);
        aux = tg::scale(tp, tg::dot_const(tp, p_mean, std::move(f_const)),
                        static_cast<T>(cfg.alpha_aux * static_cast<double>(n_experts)));
    }

    if (is_mone) {
        out.nstats.tokens = n_tokens;
        for (auto& v : out.nstats.f) v /= static_cast<double>(n_tokens);
        for (int64_t e = 0; e < n_experts; ++e) {
            auto& masses = ng_mass[static_cast<size_t>(e)];
            if (masses.empty()) continue;
            Var pn = tg::scale(tp, tg::add_n(tp, masses), inv_n);
            for (int64_t k = 0; k < cfg.d_expert; ++k)
                out.nstats.p_at(e, k) = static_cast<double>(tp.val(pn)[k]);
            if (cfg.alpha_ng > 0) {
                TensorT<T> fn_const({cfg.d_expert});
                for (int64_t k = 0; k < cfg.d_expert; ++k)
                    fn_const[k] = static_cast<T>(out.nstats.f_at(e, k));
                Var l = tg::scale(tp, tg::dot_const(tp, pn, std::move(fn_const)),
                                  static_cast<T>(cfg.alpha_ng *
                                                 static_cast<double>(cfg.d_expert)));
                aux = aux ? tg::add(tp, *aux, l) : l;
            }
        }
    }
    out.aux = aux;
    return out;
}

template <typename T>
Var build_attention(Tape<T>& tp, const ModelConfig& cfg, Var x, Var wq, Var wk, Var wv,
                    Var wo, const TensorT<T>& causal_mask) {
    const int64_t dh = cfg.d_model / cfg.n_heads;
    Var q = tg::matmul_nt(tp, x, wq);
    Var k = tg::matmul_nt(tp, x, wk);
    Var v = tg::matmul_nt(tp, x, wv);

    std::vector<Var> heads;
    heads.reserve(static_cast<size_t>(cfg.n_heads));
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    for (int64_t h = 0; h < cfg.n_heads; ++h) {
        Var qh = tg::col_slice(tp, q, h * dh, (h + 1) * dh);
        Var kh = tg::col_slice(tp, k, h * dh, (h + 1) * dh);
        Var vh = tg::col_slice(tp, v, h * dh, (h + 1) * dh);
        Var scores = tg::scale(tp, tg::matmul_nt(tp, qh, kh), inv_sqrt);
        Var probs = tg::softmax_rows(tp, scores, &causal_mask);
        heads.push_back(tg::matmul(tp, probs, vh));
    }
    Var ctx = cfg.n_heads == 1 ? heads[0] : tg::concat_cols(tp, heads);
    return tg::matmul_nt(tp, ctx, wo);
}

}  // namespace graph_detail

// Builds the full training graph for a batch of equally long windows.
// Each window contributes its first (window_len - 1) tokens as inputs and
// the shifted remainder as targets; load-balance statistics pool over all
// sequences in the batch.
template <typename T>
LmGraph<T> build_lm_graph(Tape<T>& tp, const Model<T>& model,
                          std::span<const int32_t> batch, int64_t n_seqs) {
    const ModelConfig& cfg = model.cfg;
    if (n_seqs < 1 || batch.size() % static_cast<size_t>(n_seqs) != 0)
        throw InputError("batch does not divide into n_seqs windows");
    const int64_t window = static_cast<int64_t>(batch.size()) / n_seqs;
    if (window < 2) throw InputError("window must hold at least two tokens");
    const int64_t t_in = window - 1;
    if (t_in > cfg.seq_len) throw InputError("window exceeds seq_len");

    LmGraph<T> g;
    g.param_vars.reserve(static_cast<size_t>(model.params.count()));
    for (const auto& t : model.params.tensors) g.param_vars.push_back(tp.leaf(t));

    auto pvar = [&](const std::string& name) {
        return g.param_vars[static_cast<size_t>(model.params.index_of(name))];
    };

    TensorT<T> causal_mask({t_in, t_in});
    for (int64_t i = 0; i < t_in; ++i)
        for (int64_t j = i + 1; j < t_in; ++j)
            causal_mask.at(i, j) = -std::numeric_limits<T>::infinity();

    Var tok_embed = pvar("tok_embed");
    Var pos_embed = pvar("pos_embed");

    std::vector<int64_t> positions(static_cast<size_t>(t_in));
    for (int64_t i = 0; i < t_in; ++i) positions[static_cast<size_t>(i)] = i;

    std::vector<Var> xs;
    std::vector<std::vector<int32_t>> targets(static_cast<size_t>(n_seqs));
    for (int64_t b = 0; b < n_seqs; ++b) {
        std::vector<int64_t> ids(static_cast<size_t>(t_in));
        for (int64_t i = 0; i < t_in; ++i) {
            int32_t id = batch[static_cast<size_t>(b * window + i)];
            if (id < 0 || id >= cfg.vocab_size)
                throw InputError("token id out of range in training batch");
            ids[static_cast<size_t>(i)] = id;
        }
        targets[static_cast<size_t>(b)].assign(batch.begin() + b * window + 1,
                                               batch.begin() + b * window + window);
        for (int32_t id : targets[static_cast<size_t>(b)])
            if (id < 0 || id >= cfg.vocab_size)
                throw InputError("target id out of range in training batch");
        Var emb = tg::embedding(tp, tok_embed, ids);
        Var pos = tg::gather_rows(tp, pos_embed, positions);
        xs.push_back(tg::add(tp, emb, pos));
    }

    std::vector<Var> aux_terms;
    g.expert_stats.assign(static_cast<size_t>(cfg.n_layers),
                          ExpertLoadStats::zero(std::max<int64_t>(cfg.n_experts, 1)));
    g.neuron_stats.assign(static_cast<size_t>(cfg.n_layers),
                          NeuronLoadStats::zero(std::max<int64_t>(cfg.n_experts, 1),
                                                cfg.d_expert));

    for (int64_t l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        for (int64_t b = 0; b < n_seqs; ++b) {
            Var normed = tg::rmsnorm(tp, xs[static_cast<size_t>(b)], pvar(p + "attn_norm"));
            Var attn = graph_detail::build_attention(tp, cfg, normed, pvar(p + "attn.wq"),
                                                     pvar(p + "attn.wk"), pvar(p + "attn.wv"),
                                                     pvar(p + "attn.wo"), causal_mask);
            xs[static_cast<size_t>(b)] = tg::add(tp, xs[static_cast<size_t>(b)], attn);
        }

        Var pooled = n_seqs == 1 ? xs[0] : tg::concat_rows(tp, xs);
        Var normed = tg::rmsnorm(tp, pooled, pvar(p + "ffn_norm"));

        Var ffn_y;
        if (cfg.layer_kind == LayerKind::dense_ffn) {
            Var gs = graph_detail::act_var(tp, tg::matmul_nt(tp, normed, pvar(p + "ffn.gate")),
                                           cfg.internal_act);
            Var hs = tg::matmul_nt(tp, normed, pvar(p + "ffn.up"));
            ffn_y = tg::matmul_nt(tp, tg::mul(tp, gs, hs), pvar(p + "ffn.down"));
        } else {
            std::vector<graph_detail::ExpertVarSet> experts;
            experts.reserve(static_cast<size_t>(cfg.n_experts));
            for (int64_t e = 0; e < cfg.n_experts; ++e) {
                const std::string ep = p + "experts." + std::to_string(e) + ".";
                experts.push_back({pvar(ep + "gate"), pvar(ep + "up"), pvar(ep + "down")});
            }
            graph_detail::ExpertVarSet shared{pvar(p + "shared.gate"), pvar(p + "shared.up"),
                                              pvar(p + "shared.down")};
            auto ffn = graph_detail::build_routed_ffn(tp, cfg, normed, pvar(p + "router"),
                                                      experts, shared);
            ffn_y = ffn.y;
            if (ffn.aux) aux_terms.push_back(*ffn.aux);
            g.expert_stats[static_cast<size_t>(l)] = std::move(ffn.estats);
            g.neuron_stats[static_cast<size_t>(l)] = std::move(ffn.nstats);
        }

        Var post = tg::add(tp, pooled, ffn_y);
        if (n_seqs == 1) {
            xs[0] = post;
        } else {
            for (int64_t b = 0; b < n_seqs; ++b)
                xs[static_cast<size_t>(b)] = tg::row_range(tp, post, b * t_in, (b + 1) * t_in);
        }
    }

    std::vector<Var> ce_terms;
    for (int64_t b = 0; b < n_seqs; ++b) {
        Var h = tg::rmsnorm(tp, xs[static_cast<size_t>(b)], pvar("final_norm"));
        Var logits = tg::matmul_nt(tp, h, tok_embed);
        g.seq_logits.push_back(logits);
        ce_terms.push_back(
            tg::cross_entropy_mean(tp, logits, targets[static_cast<size_t>(b)]));
    }
    g.ce = n_seqs == 1 ? ce_terms[0]
                       : tg::scale(tp, tg::add_n(tp, ce_terms), T(1) / static_cast<T>(n_seqs));

    if (!aux_terms.empty()) {
        g.aux = aux_terms.size() == 1 ? aux_terms[0] : tg::add_n(tp, aux_terms);
        g.aux_value = static_cast<double>(tp.val(*g.aux)[0]);
        g.loss = tg::add(tp, g.ce, *g.aux);
    } else {
        g.loss = g.ce;
    }
    return g;
}

}  // namespace monelab
