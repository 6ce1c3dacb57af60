#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "monelab/analysis.hpp"
#include "monelab/cli.hpp"
#include "monelab/config.hpp"

using namespace monelab;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct TempDir {
    fs::path dir;
    explicit TempDir(const std::string& name) : dir(fs::temp_directory_path() / name) {
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~TempDir() { fs::remove_all(dir); }
    std::string path(const std::string& name) const { return (dir / name).string(); }
};

void write_toy_config(const std::string& path, const std::string& layer_kind,
                      int64_t k_experts, int64_t k_neurons, int64_t steps) {
    nlohmann::json j = {
        {"model",
         {{"vocab_size", 32},
          {"d_model", 16},
          {"n_layers", 1},
          {"n_heads", 2},
          {"d_expert", 8},
          {"n_experts", 4},
          {"k_experts", k_experts},
          {"k_neurons", k_neurons},
          {"seq_len", 12},
          {"layer_kind", layer_kind},
          {"alpha_aux", 0.001},
          {"alpha_ng", layer_kind == "mone" ? 0.001 : 0.0},
          {"seed", 7},
          {"dtype", "f64"}}},
        {"train",
         {{"lr", 0.005},
          {"weight_decay", 0.0},
          {"steps", steps},
          {"batch_seqs", 2},
          {"data", "bigram:16:1200"}}}};
    std::ofstream out(path);
    out << j.dump(2);
}

}  // namespace

TEST_CASE("usage errors exit with status 2") {
    CHECK(dispatch({"frobnicate"}) == 2);
    CHECK(dispatch({"eval"}) == 2);              // missing required --checkpoint
    CHECK(dispatch({"train", "--bogus"}) == 2);  // unknown flag
}

TEST_CASE("config validation failures exit with status 3") {
    TempDir tmp("monelab_cli_badcfg");
    {
        std::ofstream out(tmp.path("bad.json"));
        out << "{\"model\": {\"vocab_size\": 32}}";
    }
    CHECK(dispatch({"param-count", "--config", tmp.path("bad.json")}) == 3);

    {
        std::ofstream out(tmp.path("unknown_key.json"));
        out << "{\"model\": {\"vocab_size\": 32, \"d_model\": 8, \"n_layers\": 1, "
               "\"n_heads\": 1, \"d_expert\": 4, \"seq_len\": 8, \"layer_kind\": "
               "\"dense_ffn\", \"seed\": 1, \"surprise\": true}}";
    }
    CHECK(dispatch({"param-count", "--config", tmp.path("unknown_key.json")}) == 3);

    CHECK(dispatch({"eval", "--checkpoint", tmp.path("missing.ckpt"), "--data", "x",
                    "--out", tmp.path("out")}) == 3);
}

TEST_CASE("param-count passes the accounting through to csv") {
    TempDir tmp("monelab_cli_pcount");
    write_toy_config(tmp.path("toy.json"), "mone", 2, 2, 1);
    REQUIRE(dispatch({"param-count", "--config", tmp.path("toy.json"), "--out",
                      tmp.path("out")}) == 0);

    RunFileConfig rc = load_config_file(tmp.path("toy.json"));
    auto expect = activated_param_count(rc.model);

    std::string csv = slurp(tmp.path("out") + "/param_count.csv");
    CHECK(csv.find("model_activated," + fmt_num(expect.model_activated)) != std::string::npos);
    CHECK(csv.find("per_layer_routed_activated," +
                   fmt_num(expect.per_layer_routed_activated)) != std::string::npos);
}

TEST_CASE("train, eval and prune-scan round trip through the cli") {
    TempDir tmp("monelab_cli_train");
    write_toy_config(tmp.path("toy.json"), "mone", 2, 3, 12);

    REQUIRE(dispatch({"train", "--config", tmp.path("toy.json"), "--out",
                      tmp.path("run")}) == 0);
    const std::string ckpt = tmp.path("run") + "/checkpoint.ckpt";
    CHECK(fs::exists(ckpt));
    CHECK(fs::exists(tmp.path("run") + "/train_loss.csv"));
    CHECK(fs::exists(tmp.path("run") + "/train_log.jsonl"));

    // train_loss.csv has a header plus one row per logged step
    {
        std::string csv = slurp(tmp.path("run") + "/train_loss.csv");
        CHECK(csv.rfind("step,ce_loss,aux_loss\n", 0) == 0);
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 13);
    }

    const std::string ckpt_bytes = slurp(ckpt);

    REQUIRE(dispatch({"eval", "--checkpoint", ckpt, "--data", "bigram:16:1200", "--out",
                      tmp.path("eval1")}) == 0);
    REQUIRE(dispatch({"prune-scan", "--checkpoint", ckpt, "--data", "bigram:16:1200",
                      "--ratios", "1.0,0.5,0.1", "--out", tmp.path("prune")}) == 0);

    // three ratios give a three-row csv; the ratio-1.0 row reproduces eval
    std::string eval_csv = slurp(tmp.path("eval1") + "/eval.csv");
    std::string eval_row = eval_csv.substr(eval_csv.find('\n') + 1);
    eval_row = eval_row.substr(0, eval_row.find('\n'));
    std::string prune_csv = slurp(tmp.path("prune") + "/prune_scan.csv");
    CHECK(std::count(prune_csv.begin(), prune_csv.end(), '\n') == 4);
    CHECK(prune_csv.find("1,3," + eval_row) != std::string::npos);

    // re-running with identical inputs produces byte-identical csv output
    REQUIRE(dispatch({"eval", "--checkpoint", ckpt, "--data", "bigram:16:1200", "--out",
                      tmp.path("eval2")}) == 0);
    CHECK(slurp(tmp.path("eval1") + "/eval.csv") == slurp(tmp.path("eval2") + "/eval.csv"));
    CHECK(slurp(tmp.path("eval1") + "/eval.json") == slurp(tmp.path("eval2") + "/eval.json"));

    // no subcommand mutates its input checkpoint
    CHECK(slurp(ckpt) == ckpt_bytes);

    // act-stats and lb-variance produce their reports
    REQUIRE(dispatch({"act-stats", "--checkpoint", ckpt, "--data", "bigram:16:1200",
                      "--out", tmp.path("acts")}) == 0);
    CHECK(fs::exists(tmp.path("acts") + "/act_hist.csv"));
    CHECK(fs::exists(tmp.path("acts") + "/act_summary.csv"));
    CHECK(fs::exists(tmp.path("acts") + "/act_expert_freq.csv"));
    CHECK(fs::exists(tmp.path("acts") + "/act_stats.json"));

    REQUIRE(dispatch({"lb-variance", "--checkpoint", ckpt, "--data", "bigram:16:1200",
                      "--out", tmp.path("lbv")}) == 0);
    CHECK(fs::exists(tmp.path("lbv") + "/lb_variance.csv"));

    // determinism of the full report set
    REQUIRE(dispatch({"act-stats", "--checkpoint", ckpt, "--data", "bigram:16:1200",
                      "--out", tmp.path("acts2")}) == 0);
    CHECK(slurp(tmp.path("acts") + "/act_hist.csv") ==
          slurp(tmp.path("acts2") + "/act_hist.csv"));
    CHECK(slurp(tmp.path("acts") + "/act_summary.csv") ==
          slurp(tmp.path("acts2") + "/act_summary.csv"));
}

TEST_CASE("seed override produces a different but reproducible run") {
    TempDir tmp("monelab_cli_seed");
    write_toy_config(tmp.path("toy.json"), "moe", 2, 8, 3);

    REQUIRE(dispatch({"train", "--config", tmp.path("toy.json"), "--out",
                      tmp.path("a")}) == 0);
    REQUIRE(dispatch({"train", "--config", tmp.path("toy.json"), "--seed", "99",
                      "--out", tmp.path("b")}) == 0);
    REQUIRE(dispatch({"train", "--config", tmp.path("toy.json"), "--seed", "99",
                      "--out", tmp.path("c")}) == 0);

    CHECK(slurp(tmp.path("a") + "/train_loss.csv") != slurp(tmp.path("b") + "/train_loss.csv"));
    CHECK(slurp(tmp.path("b") + "/train_loss.csv") == slurp(tmp.path("c") + "/train_loss.csv"));
}

TEST_CASE("gradcheck subcommand wraps the finite-difference oracle") {
    TempDir tmp("monelab_cli_gradcheck");
    write_toy_config(tmp.path("toy.json"), "mone", 2, 2, 1);
    CHECK(dispatch({"gradcheck", "--config", tmp.path("toy.json"), "--dims", "8"}) == 0);
}

TEST_CASE("k_neuron_ratio config form resolves against d_expert") {
    TempDir tmp("monelab_cli_ratio");
    {
        nlohmann::json j = {{"model",
                             {{"vocab_size", 32},
                              {"d_model", 16},
                              {"n_layers", 1},
                              {"n_heads", 2},
                              {"d_expert", 8},
                              {"n_experts", 4},
                              {"k_experts", 2},
                              {"k_neuron_ratio", "1/4"},
                              {"seq_len", 12},
                              {"layer_kind", "mone"},
                              {"seed", 7}}}};
        std::ofstream out(tmp.path("ratio.json"));
        out << j.dump(2);
    }
    RunFileConfig rc = load_config_file(tmp.path("ratio.json"));
    CHECK(rc.model.k_neurons == 2);

    // a ratio that does not divide d_expert exactly is rejected
    {
        std::string text = slurp(tmp.path("ratio.json"));
        auto pos = text.find("1/4");
        text.replace(pos, 3, "1/3");
        std::ofstream out(tmp.path("bad_ratio.json"));
        out << text;
    }
    CHECK_THROWS_AS(load_config_file(tmp.path("bad_ratio.json")), ConfigError);
    CHECK(dispatch({"param-count", "--config", tmp.path("bad_ratio.json")}) == 3);
}

TEST_CASE("bench subcommand wires the throughput comparison") {
    TempDir tmp("monelab_cli_bench");
    auto write_bench_cfg = [&](const std::string& name, const std::string& kind,
                               int64_t k_experts, int64_t k_neurons) {
        nlohmann::json j = {{"model",
                             {{"vocab_size", 32},
                              {"d_model", 16},
                              {"n_layers", 1},
                              {"n_heads", 2},
                              {"d_expert", 8},
                              {"n_experts", 4},
                              {"k_experts", k_experts},
                              {"k_neurons", k_neurons},
                              {"seq_len", 24},
                              {"layer_kind", kind},
                              {"seed", 7},
                              {"dtype", "f32"}}}};
        std::ofstream out(tmp.path(name));
        out << j.dump(2);
    };
    // 2 dense experts (6N) vs 4 quarter-budget experts (4 * 1.5N)
    write_bench_cfg("moe.json", "moe", 2, 8);
    write_bench_cfg("mone.json", "mone", 4, 2);

    REQUIRE(dispatch({"bench", "--config", tmp.path("moe.json"), "--config",
                      tmp.path("mone.json"), "--trials", "2", "--out",
                      tmp.path("out")}) == 0);
    CHECK(fs::exists(tmp.path("out") + "/bench.csv"));
    CHECK(fs::exists(tmp.path("out") + "/bench.json"));
    std::string csv = slurp(tmp.path("out") + "/bench.csv");
    CHECK(csv.rfind("model,trial,tokens_per_sec\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);  // header + 2 trials x 2 models

    // unequal activated parameters fail validation
    write_bench_cfg("unequal.json", "mone", 3, 2);
    CHECK(dispatch({"bench", "--config", tmp.path("moe.json"), "--config",
                    tmp.path("unequal.json"), "--trials", "1", "--out",
                    tmp.path("out2")}) == 3);
}

TEST_CASE("lb-variance on a moe checkpoint is a validation error") {
    TempDir tmp("monelab_cli_lbmoe");
    write_toy_config(tmp.path("moe.json"), "moe", 2, 8, 3);
    REQUIRE(dispatch({"train", "--config", tmp.path("moe.json"), "--out",
                      tmp.path("run")}) == 0);
    CHECK(dispatch({"lb-variance", "--checkpoint", tmp.path("run") + "/checkpoint.ckpt",
                    "--data", "bigram:16:1200", "--out", tmp.path("lbv")}) == 3);
}
