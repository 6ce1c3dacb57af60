#include "monelab/cli.hpp"

#include <chrono>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "monelab/analysis.hpp"
#include "monelab/checkpoint.hpp"
#include "monelab/config.hpp"
#include "monelab/data.hpp"

namespace monelab {

namespace {

namespace fs = std::filesystem;

struct CliArgs {
    std::vector<std::string> configs;
    std::string checkpoint;
    std::string data;
    std::string out;
    int64_t seed = -1;
    std::string ratios = "1.0,0.5,0.25,0.1,0.05";
    int64_t trials = 5;
    int64_t dims = 0;
};

std::vector<double> parse_ratio_list(const std::string& s) {
    std::vector<double> out;
    size_t pos = 0;
    while (pos < s.size()) {
        size_t comma = s.find(',', pos);
        std::string tok = s.substr(pos, comma == std::string::npos ? comma : comma - pos);
        try {
            out.push_back(std::stod(tok));
        } catch (const std::exception&) {
            throw ConfigError("bad ratio '" + tok + "' in --ratios");
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    if (out.empty()) throw ConfigError("--ratios is empty");
    return out;
}

void ensure_out_dir(const std::string& out) {
    if (out.empty()) throw ConfigError("--out is required");
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw ConfigError("cannot create output directory '" + out + "'");
}

std::string join(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

ModelConfig load_model_config(const CliArgs& a, size_t idx = 0) {
    if (a.configs.size() <= idx) throw ConfigError("--config is required");
    RunFileConfig rc = load_config_file(a.configs[idx]);
    if (a.seed >= 0) rc.model.seed = static_cast<uint64_t>(a.seed);
    return rc.model;
}

// ---------------------------------------------------------------------------

template <typename T>
int run_train(const RunFileConfig& rc_in, const CliArgs& a) {
    RunFileConfig rc = rc_in;
    if (a.seed >= 0) rc.model.seed = static_cast<uint64_t>(a.seed);
    if (!rc.has_train) throw ConfigError("train subcommand needs a 'train' config section");
    if (rc.train.steps < 1) throw ConfigError("train.steps must be >= 1");
    std::string data_spec = !a.data.empty() ? a.data : rc.data_spec;
    if (data_spec.empty()) throw ConfigError("no dataset: give --data or train.data");

    auto data = load_dataset(data_spec, rc.model.vocab_size, rc.model.seed);
    auto st = TrainState<T>::init(rc.model, rc.train);

    CsvFile loss_csv(join(a.out, "train_loss.csv"), {"step", "ce_loss", "aux_loss"});
    std::ofstream log(join(a.out, "train_log.jsonl"), std::ios::binary | std::ios::trunc);

    auto last = std::chrono::steady_clock::now();
    train_run<T>(st, data, [&](const StepMetrics& m) {
        const auto now = std::chrono::steady_clock::now();
        const double dt = std::chrono::duration<double>(now - last).count();
        last = now;
        const double tps = dt > 0 ? static_cast<double>(m.tokens) / dt : 0.0;
        if (m.step % std::max<int64_t>(st.tcfg.log_every, 1) == 0 ||
            m.step == st.tcfg.steps) {
            loss_csv.row({fmt_num(m.step), fmt_num(m.ce_loss), fmt_num(m.aux_loss)});
            log << nlohmann::json{{"schema_version", 1},
                                  {"step", m.step},
                                  {"ce_loss", m.ce_loss},
                                  {"aux_loss", m.aux_loss},
                                  {"tokens_per_sec", tps}}
                       .dump()
                << "\n";
        }
    });

    save_checkpoint(st, join(a.out, "checkpoint.ckpt"));
    std::cout << "trained " << st.step << " steps; checkpoint written to "
              << join(a.out, "checkpoint.ckpt") << "\n";
    return 0;
}

template <typename T>
int run_eval(const CliArgs& a) {
    auto st = load_checkpoint<T>(a.checkpoint);
    if (a.data.empty()) throw ConfigError("--data is required");
    auto data = load_dataset(a.data, st.model.cfg.vocab_size, st.model.cfg.seed);
    EvalMetrics m = evaluate(st.model, data);

    CsvFile csv(join(a.out, "eval.csv"), {"mean_ce_loss", "token_accuracy", "tokens"});
    csv.row({fmt_num(m.mean_ce_loss), fmt_num(m.token_accuracy), fmt_num(m.tokens)});
    write_json_file(join(a.out, "eval.json"),
                    {{"schema_version", 1},
                     {"mean_ce_loss", m.mean_ce_loss},
                     {"token_accuracy", m.token_accuracy},
                     {"tokens", m.tokens}});
    std::cout << "eval mean_ce_loss=" << fmt_num(m.mean_ce_loss)
              << " token_accuracy=" << fmt_num(m.token_accuracy) << "\n";
    return 0;
}

template <typename T>
int run_prune_scan(const CliArgs& a) {
    auto st = load_checkpoint<T>(a.checkpoint);
    if (a.data.empty()) throw ConfigError("--data is required");
    auto data = load_dataset(a.data, st.model.cfg.vocab_size, st.model.cfg.seed);
    auto ratios = parse_ratio_list(a.ratios);
    auto sweep = prune_scan(st.model, data, ratios);

    CsvFile csv(join(a.out, "prune_scan.csv"),
                {"keep_ratio", "k_neurons", "mean_ce_loss", "token_accuracy", "tokens"});
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : sweep.rows) {
        csv.row({fmt_num(r.keep_ratio), fmt_num(r.k_neurons), fmt_num(r.metrics.mean_ce_loss),
                 fmt_num(r.metrics.token_accuracy), fmt_num(r.metrics.tokens)});
        rows.push_back({{"keep_ratio", r.keep_ratio},
                        {"k_neurons", r.k_neurons},
                        {"mean_ce_loss", r.metrics.mean_ce_loss},
                        {"token_accuracy", r.metrics.token_accuracy}});
        std::cout << "keep_ratio=" << fmt_num(r.keep_ratio)
                  << " ce_loss=" << fmt_num(r.metrics.mean_ce_loss) << "\n";
    }
    write_json_file(join(a.out, "prune_scan.json"),
                    {{"schema_version", 1}, {"rows", rows}});
    return 0;
}

template <typename T>
int run_act_stats(const CliArgs& a) {
    auto st = load_checkpoint<T>(a.checkpoint);
    if (a.data.empty()) throw ConfigError("--data is required");
    auto data = load_dataset(a.data, st.model.cfg.vocab_size, st.model.cfg.seed);
    auto rep = activation_stats(st.model, data);

    CsvFile hist(join(a.out, "act_hist.csv"), {"layer", "bin", "bin_lo", "bin_hi", "count"});
    for (int64_t l = 0; l < rep.n_layers; ++l) {
        const double lo = rep.hist_lo[static_cast<size_t>(l)];
        const double hi = rep.hist_hi[static_cast<size_t>(l)];
        const double width = hi > lo ? (hi - lo) / static_cast<double>(rep.bins) : 1.0;
        for (int64_t b = 0; b < rep.bins; ++b)
            hist.row({fmt_num(l), fmt_num(b), fmt_num(lo + width * static_cast<double>(b)),
                      fmt_num(lo + width * static_cast<double>(b + 1)),
                      fmt_num(rep.hist[static_cast<size_t>(l)][static_cast<size_t>(b)])});
    }

    CsvFile summary(join(a.out, "act_summary.csv"),
                    {"layer", "median_selected_abs_gate", "frac_below_threshold", "threshold",
                     "gate_values", "expert_activations"});
    for (int64_t l = 0; l < rep.n_layers; ++l)
        summary.row({fmt_num(l), fmt_num(rep.median_selected_abs_gate[static_cast<size_t>(l)]),
                     fmt_num(rep.frac_below_threshold[static_cast<size_t>(l)]),
                     fmt_num(rep.threshold),
                     fmt_num(rep.gate_values_counted[static_cast<size_t>(l)]),
                     fmt_num(rep.expert_activations[static_cast<size_t>(l)])});

    CsvFile freq(join(a.out, "act_expert_freq.csv"), {"layer", "expert", "hits", "fraction"});
    for (int64_t l = 0; l < rep.n_layers; ++l)
        for (int64_t e = 0; e < static_cast<int64_t>(rep.expert_hits[0].size()); ++e) {
            const int64_t hits = rep.expert_hits[static_cast<size_t>(l)][static_cast<size_t>(e)];
            const int64_t total = rep.expert_activations[static_cast<size_t>(l)];
            freq.row({fmt_num(l), fmt_num(e), fmt_num(hits),
                      fmt_num(total ? static_cast<double>(hits) / static_cast<double>(total)
                                    : 0.0)});
        }

    nlohmann::json layers = nlohmann::json::array();
    for (int64_t l = 0; l < rep.n_layers; ++l)
        layers.push_back(
            {{"layer", l},
             {"median_selected_abs_gate", rep.median_selected_abs_gate[static_cast<size_t>(l)]},
             {"frac_below_threshold", rep.frac_below_threshold[static_cast<size_t>(l)]}});
    write_json_file(join(a.out, "act_stats.json"),
                    {{"schema_version", 1}, {"threshold", rep.threshold}, {"layers", layers}});
    std::cout << "activation stats over " << rep.n_layers << " layers written\n";
    return 0;
}

template <typename T>
int run_lb_variance(const CliArgs& a) {
    auto st = load_checkpoint<T>(a.checkpoint);
    if (a.data.empty()) throw ConfigError("--data is required");
    auto data = load_dataset(a.data, st.model.cfg.vocab_size, st.model.cfg.seed);
    auto lb = load_balance_variance(st.model, data);

    CsvFile csv(join(a.out, "lb_variance.csv"),
                {"layer", "expert", "variance", "mean_dispatch", "tokens_routed"});
    for (size_t l = 0; l < lb.variance.size(); ++l)
        for (size_t e = 0; e < lb.variance[l].size(); ++e)
            csv.row({fmt_num(static_cast<int64_t>(l)), fmt_num(static_cast<int64_t>(e)),
                     fmt_num(lb.variance[l][e]), fmt_num(lb.mean[l][e]),
                     fmt_num(lb.tokens_routed[l][e])});
    write_json_file(join(a.out, "lb_variance.json"),
                    {{"schema_version", 1},
                     {"mean_variance", lb.mean_variance()},
                     {"tokens", lb.tokens}});
    std::cout << "mean_variance=" << fmt_num(lb.mean_variance()) << "\n";
    return 0;
}

int run_param_count(const CliArgs& a) {
    ModelConfig cfg = load_model_config(a);
    auto r = activated_param_count(cfg);
    std::vector<std::pair<std::string, int64_t>> rows = {
        {"per_layer_total", r.per_layer_total},
        {"per_layer_activated", r.per_layer_activated},
        {"per_layer_ffn_total", r.per_layer_ffn_total},
        {"per_layer_ffn_activated", r.per_layer_ffn_activated},
        {"per_layer_routed_activated", r.per_layer_routed_activated},
        {"model_total", r.model_total},
        {"model_activated", r.model_activated},
    };
    for (const auto& [k, v] : rows) std::cout << k << "=" << v << "\n";
    if (!a.out.empty()) {
        ensure_out_dir(a.out);
        CsvFile csv(join(a.out, "param_count.csv"), {"metric", "value"});
        for (const auto& [k, v] : rows) csv.row({k, fmt_num(v)});
        write_json_file(join(a.out, "param_count.json"),
                        {{"schema_version", 1},
                         {"per_layer_total", r.per_layer_total},
                         {"per_layer_activated", r.per_layer_activated},
                         {"model_total", r.model_total},
                         {"model_activated", r.model_activated}});
    }
    return 0;
}

template <typename T>
int run_bench(const CliArgs& a) {
    if (a.configs.size() != 2)
        throw ConfigError("bench needs two --config files (moe first, mone second)");
    ModelConfig moe = load_model_config(a, 0);
    ModelConfig mone = load_model_config(a, 1);

    const int64_t batch = 4;
    const int64_t prefill = std::min<int64_t>(moe.seq_len / 2, 64);
    const int64_t new_tokens = std::min<int64_t>(moe.seq_len / 4, 32);
    auto res = throughput_bench<T>(moe, mone, batch, prefill, new_tokens, a.trials);

    ensure_out_dir(a.out);
    CsvFile csv(join(a.out, "bench.csv"), {"model", "trial", "tokens_per_sec"});
    for (size_t t = 0; t < res.moe.trial_tokens_per_sec.size(); ++t)
        csv.row({res.moe.label, fmt_num(static_cast<int64_t>(t)),
                 fmt_num(res.moe.trial_tokens_per_sec[t])});
    for (size_t t = 0; t < res.mone.trial_tokens_per_sec.size(); ++t)
        csv.row({res.mone.label, fmt_num(static_cast<int64_t>(t)),
                 fmt_num(res.mone.trial_tokens_per_sec[t])});

    auto side_json = [](const BenchSide& s) {
        return nlohmann::json{{"median_tokens_per_sec", s.median_tokens_per_sec},
                              {"peak_bytes", s.peak_bytes},
                              {"activated_params", s.activated_params}};
    };
    write_json_file(join(a.out, "bench.json"),
                    {{"schema_version", 1},
                     {"batch", res.batch},
                     {"prefill", res.prefill},
                     {"new_tokens", res.new_tokens},
                     {"trials", res.trials},
                     {"threads", res.threads},
                     {"moe", side_json(res.moe)},
                     {"mone", side_json(res.mone)},
                     {"relative_gap", res.relative_gap()}});

    std::cout << "moe tokens/sec=" << fmt_num(res.moe.median_tokens_per_sec)
              << " mone tokens/sec=" << fmt_num(res.mone.median_tokens_per_sec)
              << " gap=" << fmt_num(res.relative_gap())
              << " activated_params=" << res.moe.activated_params << "\n";
    return 0;
}

int run_gradcheck(const CliArgs& a) {
    ModelConfig cfg = load_model_config(a);
    cfg.dtype = Dtype::f64;
    if (a.dims > 0) {
        cfg.d_model = a.dims;
        if (cfg.d_model % cfg.n_heads != 0) cfg.n_heads = 1;
    }
    cfg.validate();

    // small deterministic batch for the check
    Rng rng = Rng(cfg.seed).split(0x6C);
    const int64_t window = std::min<int64_t>(cfg.seq_len, 6) + 1;
    std::vector<int32_t> batch(static_cast<size_t>(2 * window));
    for (auto& t : batch) t = static_cast<int32_t>(rng.uniform_int(cfg.vocab_size));

    auto res = model_gradcheck(cfg, batch, 2, 1e-5);
    std::cout << "gradcheck max_rel_err=" << fmt_num(res.max_rel_err) << " over "
              << res.entries_checked << " entries (worst: " << res.worst_param << ")\n";
    if (res.max_rel_err >= 1e-4) {
        std::cerr << "error: numeric: gradient check failed, max_rel_err="
                  << fmt_num(res.max_rel_err) << "\n";
        return 4;
    }
    return 0;
}

template <typename Fn32, typename Fn64>
int with_dtype(Dtype dtype, Fn32&& f32, Fn64&& f64) {
    return dtype == Dtype::f32 ? f32() : f64();
}

}  // namespace

int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"desk-scale laboratory for neuron-granular mixture-of-experts"};
    app.require_subcommand(1);

    CliArgs a;
    auto add_common = [&](CLI::App* sub, bool needs_config, bool needs_ckpt) {
        if (needs_config)
            sub->add_option("--config", a.configs, "JSON config file")->required();
        if (needs_ckpt)
            sub->add_option("--checkpoint", a.checkpoint, "checkpoint file")->required();
        sub->add_option("--data", a.data, "dataset spec or path");
        sub->add_option("--out", a.out, "output directory");
        sub->add_option("--seed", a.seed, "seed override");
        sub->add_option("--ratios", a.ratios, "comma-separated keep ratios");
        sub->add_option("--trials", a.trials, "bench trials");
        sub->add_option("--dims", a.dims, "d_model override for gradcheck");
    };

    CLI::App* train = app.add_subcommand("train", "train a model from a config");
    add_common(train, true, false);
    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    add_common(eval, false, true);
    CLI::App* prune = app.add_subcommand("prune-scan", "neuron-pruning sweep");
    add_common(prune, false, true);
    CLI::App* acts = app.add_subcommand("act-stats", "gate activation statistics");
    add_common(acts, false, true);
    CLI::App* lbv = app.add_subcommand("lb-variance", "neuron load-balance variance");
    add_common(lbv, false, true);
    CLI::App* pcount = app.add_subcommand("param-count", "activated-parameter accounting");
    add_common(pcount, true, false);
    CLI::App* bench = app.add_subcommand("bench", "moe vs mone generation throughput");
    add_common(bench, true, false);
    CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
    add_common(gradcheck, true, false);

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {  // --help
            std::cout << app.help();
            return 0;
        }
        std::cerr << "error: usage: " << e.what() << "\n";
        return 2;
    }

    try {
        if (train->parsed()) {
            ensure_out_dir(a.out);
            RunFileConfig rc = load_config_file(a.configs.at(0));
            return with_dtype(rc.model.dtype, [&] { return run_train<float>(rc, a); },
                              [&] { return run_train<double>(rc, a); });
        }
        if (eval->parsed() || prune->parsed() || acts->parsed() || lbv->parsed()) {
            ensure_out_dir(a.out);
            Dtype dt = peek_checkpoint(a.checkpoint).dtype;
            if (eval->parsed())
                return with_dtype(dt, [&] { return run_eval<float>(a); },
                                  [&] { return run_eval<double>(a); });
            if (prune->parsed())
                return with_dtype(dt, [&] { return run_prune_scan<float>(a); },
                                  [&] { return run_prune_scan<double>(a); });
            if (acts->parsed())
                return with_dtype(dt, [&] { return run_act_stats<float>(a); },
                                  [&] { return run_act_stats<double>(a); });
            return with_dtype(dt, [&] { return run_lb_variance<float>(a); },
                              [&] { return run_lb_variance<double>(a); });
        }
        if (pcount->parsed()) return run_param_count(a);
        if (bench->parsed()) {
            ModelConfig first = load_model_config(a, 0);
            return with_dtype(first.dtype, [&] { return run_bench<float>(a); },
                              [&] { return run_bench<double>(a); });
        }
        if (gradcheck->parsed()) return run_gradcheck(a);
        std::cerr << "error: usage: no subcommand\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "error: numeric: " << e.what() << "\n";
        return 4;
    } catch (const ConfigError& e) {
        std::cerr << "error: config: " << e.what() << "\n";
        return 3;
    } catch (const FormatError& e) {
        std::cerr << "error: format: " << e.what() << "\n";
        return 3;
    } catch (const InputError& e) {
        std::cerr << "error: input: " << e.what() << "\n";
        return 3;
    } catch (const ShapeError& e) {
        std::cerr << "error: shape: " << e.what() << "\n";
        return 3;
    }
}

}  // namespace monelab
