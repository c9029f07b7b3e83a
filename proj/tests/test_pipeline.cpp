#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "drasp/pipeline.hpp"
#include "drasp/render.hpp"
#include "test_util.hpp"

using namespace drasp;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::string(std::istreambuf_iterator<char>(f), {});
}

PipelineConfig tiny_config(const std::string& run_id) {
    PipelineConfig cfg;
    cfg.task = "binary_majority";
    cfg.layers = 1;
    cfg.heads = 1;
    cfg.dim = 16;
    cfg.train_max_len = 8;
    cfg.eval_max_len = 12;
    cfg.T = 24;
    cfg.train.max_steps = 1200;
    cfg.train.eval_every = 50;
    cfg.train.eval_n = 60;
    cfg.train.batch = 32;
    cfg.fit_ln.steps = 80;
    cfg.prune_dataset_size = 60;
    cfg.search.max_runs_stage1 = 2;
    cfg.search.carry_runs = 1;
    cfg.search.stage_mults = {1.0};
    cfg.search.stage_cfg.max_steps = 150;
    cfg.search.stage_cfg.patience = 60;
    cfg.simplify.steps_per_phase = 30;
    cfg.out_dir = "pipe_test_out";
    cfg.run_id = run_id;
    cfg.seed = 5;
    return cfg;
}

} // namespace

TEST_CASE("pipeline end to end on a tiny majority model") {
    fs::remove_all("pipe_test_out");
    auto cfg = tiny_config("a");
    auto res = run_pipeline(cfg);
    INFO(res.status);
    REQUIRE(res.exit_code == 0);
    CHECK(res.task_acc_train_range >= 0.99);
    CHECK(res.llna_holds);
    CHECK(res.match_post_prune >= 0.9);
    CHECK(res.line_count >= 3);

    // every artifact referenced by the pipeline exists on disk
    for (const char* f : {"config.json", "dataset.jsonl", "model.ckpt", "model_absorbed.ckpt",
                          "runs.jsonl", "frontier.csv", "summary.json", "program.drasp.txt",
                          "program.drasp.json", "match_ledger.json", "run_meta.json"})
        CHECK(fs::exists("pipe_test_out/a/" + std::string(f)));

    // summary fields present
    auto summary = nlohmann::json::parse(slurp("pipe_test_out/a/summary.json"));
    CHECK(summary["status"] == "ok");
    CHECK(summary.contains("task_acc_eval_range"));
    CHECK(summary.contains("match_acc_post_primitive"));
    CHECK(summary.contains("line_count"));
    CHECK(summary.contains("llna_holds"));

    // figure sidecars referenced by the pretty text exist
    auto pretty = pretty_print_full(res.program);
    for (auto& fig : pretty.figures) {
        CHECK(fs::exists("pipe_test_out/a/figures/" + fig.key + ".csv"));
        CHECK(fs::exists("pipe_test_out/a/figures/" + fig.key + ".pgm"));
    }

    SUBCASE("same config and seed reproduce the summary byte for byte") {
        auto cfg2 = tiny_config("b");
        auto res2 = run_pipeline(cfg2);
        REQUIRE(res2.exit_code == 0);
        CHECK(slurp("pipe_test_out/a/summary.json") == slurp("pipe_test_out/b/summary.json"));
        CHECK(slurp("pipe_test_out/a/program.drasp.txt") ==
              slurp("pipe_test_out/b/program.drasp.txt"));
    }

    SUBCASE("training disabled with a provided checkpoint starts at linearize") {
        auto cfg3 = tiny_config("c");
        cfg3.checkpoint = "pipe_test_out/a/model.ckpt";
        auto res3 = run_pipeline(cfg3);
        REQUIRE(res3.exit_code == 0);
        CHECK_FALSE(fs::exists("pipe_test_out/c/model.ckpt"));  // no training happened
        CHECK(res3.llna_holds);
    }
    fs::remove_all("pipe_test_out");
}

TEST_CASE("pipeline reports not-decompilable with exit code 2 when LLNA fails") {
    fs::remove_all("pipe_test_out2");
    // a model with two widely separated variance regimes: exact layer norm
    // equalizes them, no linear form can
    auto spec = make_binary_majority(8, 24);
    auto w = TransformerWeights::make(1, 1, 8, 24, spec.vocab_size(), Objective::language_model);
    w.E(0, spec.sym(0)) = 0.05;
    w.E(1, spec.sym(0)) = -0.05;
    w.E(0, spec.sym(1)) = 40.0;
    w.E(1, spec.sym(1)) = 40.0;
    w.E(2, TOK_BOS) = 1.0;
    w.E(3, TOK_SEP) = 1.0;
    w.U(spec.sym(0), 0) = 4.0;
    w.U(spec.sym(0), 1) = -4.0;
    w.U(spec.sym(1), 0) = 4.0;
    w.U(spec.sym(1), 1) = 4.0;
    fs::create_directories("pipe_test_out2");
    save_checkpoint(w, "pipe_test_out2/adversarial.ckpt", spec.alphabet, spec.name);

    auto cfg = tiny_config("x");
    cfg.out_dir = "pipe_test_out2";
    cfg.checkpoint = "pipe_test_out2/adversarial.ckpt";
    cfg.train_max_len = 8;
    cfg.eval_max_len = 8;
    cfg.T = 24;
    auto res = run_pipeline(cfg);
    CHECK(res.exit_code == 2);
    CHECK(res.status == "not decompilable");
    auto summary = nlohmann::json::parse(slurp("pipe_test_out2/x/summary.json"));
    CHECK(summary["status"] == "not decompilable");
    CHECK(summary["llna_holds"] == false);
    fs::remove_all("pipe_test_out2");
}

TEST_CASE("render outputs csv, pgm and axis legends") {
    fs::remove_all("render_test_out");
    Rng rng(2);
    Mat m = Mat::randn(5, 7, rng);
    write_heatmap(m, "render_test_out", "t", "rows", "cols");
    CHECK(fs::exists("render_test_out/t.csv"));
    CHECK(fs::exists("render_test_out/t.pgm"));
    CHECK(fs::exists("render_test_out/t.axes.txt"));
    // pgm header sanity
    std::string pgm = slurp("render_test_out/t.pgm");
    CHECK(pgm.substr(0, 2) == "P5");
    CHECK(pgm.find("7 5") != std::string::npos);

    std::vector<ParetoPoint> fr = {{10, 0.99, "a"}, {3, 0.7, "b"}};
    write_frontier_csv(fr, "render_test_out/frontier.csv");
    auto csv = slurp("render_test_out/frontier.csv");
    CHECK(csv.find("lines,match_accuracy,run_id") == 0);
    CHECK(csv.find("3,0.7,b\n10,0.99,a") != std::string::npos);
    fs::remove_all("render_test_out");
}
