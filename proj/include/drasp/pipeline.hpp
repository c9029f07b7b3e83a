#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include "drasp/checkpoint.hpp"
#include "drasp/matching.hpp"
#include "drasp/render.hpp"
#include "drasp/search.hpp"
#include "drasp/train.hpp"
#include "drasp/translate.hpp"

#include <json.hpp>

namespace drasp {

// End-to-end decompilation configuration; fully serializable so a run is
// reproducible from config + seed.
struct PipelineConfig {
    // task
    std::string task = "binary_majority";
    int num_symbols = 26;
    int train_max_len = 20;
    int eval_max_len = 28;
    int T = 64;

    // architecture
    int layers = 1, heads = 1, dim = 16;

    // training
    TrainConfig train;
    std::string checkpoint;  // when set, training is skipped

    // linearization
    FitLnConfig fit_ln;
    double llna_threshold = 0.9;

    // pruning
    SearchConfig search;
    std::string split_mlps = "auto";  // auto | on | off
    int prune_dataset_size = 200;

    // primitives
    double accept_no_op = 0.92;
    double accept_best = 0.90;
    SimplifyConfig simplify;

    // misc
    std::string out_dir = "out";
    std::string run_id = "run";
    uint64_t seed = 0;
    long long translate_cap = 100000;
    bool verbose = false;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["task"] = task;
        j["num_symbols"] = num_symbols;
        j["train_max_len"] = train_max_len;
        j["eval_max_len"] = eval_max_len;
        j["T"] = T;
        j["layers"] = layers;
        j["heads"] = heads;
        j["dim"] = dim;
        j["train"] = {{"lr", train.lr},
                      {"weight_decay", train.weight_decay},
                      {"batch", train.batch},
                      {"max_steps", train.max_steps},
                      {"eval_every", train.eval_every},
                      {"eval_n", train.eval_n},
                      {"init_std", train.init_std}};
        j["checkpoint"] = checkpoint;
        j["fit_ln"] = {{"steps", fit_ln.steps}, {"batch", fit_ln.batch}, {"lr", fit_ln.lr}};
        j["llna_threshold"] = llna_threshold;
        j["search"] = {{"max_runs_stage1", search.max_runs_stage1},
                       {"carry_runs", search.carry_runs},
                       {"stage_mults", search.stage_mults},
                       {"lambda_seed", search.lambda_seed},
                       {"stage1_abort_below", search.stage1_abort_below},
                       {"max_steps", search.stage_cfg.max_steps},
                       {"patience", search.stage_cfg.patience},
                       {"run_stage0", search.run_stage0}};
        j["split_mlps"] = split_mlps;
        j["prune_dataset_size"] = prune_dataset_size;
        j["accept_no_op"] = accept_no_op;
        j["accept_best"] = accept_best;
        j["simplify_steps"] = simplify.steps_per_phase;
        j["out_dir"] = out_dir;
        j["run_id"] = run_id;
        j["seed"] = seed;
        j["translate_cap"] = translate_cap;
        return j;
    }

    static PipelineConfig from_json(const nlohmann::json& j) {
        PipelineConfig c;
        c.task = j.value("task", c.task);
        c.num_symbols = j.value("num_symbols", c.num_symbols);
        c.train_max_len = j.value("train_max_len", c.train_max_len);
        c.eval_max_len = j.value("eval_max_len", c.eval_max_len);
        c.T = j.value("T", c.T);
        c.layers = j.value("layers", c.layers);
        c.heads = j.value("heads", c.heads);
        c.dim = j.value("dim", c.dim);
        if (j.contains("train")) {
            auto t = j["train"];
            c.train.lr = t.value("lr", c.train.lr);
            c.train.weight_decay = t.value("weight_decay", c.train.weight_decay);
            c.train.batch = t.value("batch", c.train.batch);
            c.train.max_steps = t.value("max_steps", c.train.max_steps);
            c.train.eval_every = t.value("eval_every", c.train.eval_every);
            c.train.eval_n = t.value("eval_n", c.train.eval_n);
            c.train.init_std = t.value("init_std", c.train.init_std);
        }
        c.checkpoint = j.value("checkpoint", c.checkpoint);
        if (j.contains("fit_ln")) {
            auto t = j["fit_ln"];
            c.fit_ln.steps = t.value("steps", c.fit_ln.steps);
            c.fit_ln.batch = t.value("batch", c.fit_ln.batch);
            c.fit_ln.lr = t.value("lr", c.fit_ln.lr);
        }
        c.llna_threshold = j.value("llna_threshold", c.llna_threshold);
        if (j.contains("search")) {
            auto s = j["search"];
            c.search.max_runs_stage1 = s.value("max_runs_stage1", c.search.max_runs_stage1);
            c.search.carry_runs = s.value("carry_runs", c.search.carry_runs);
            if (s.contains("stage_mults"))
                c.search.stage_mults = s["stage_mults"].get<std::vector<double>>();
            c.search.lambda_seed = s.value("lambda_seed", c.search.lambda_seed);
            c.search.stage1_abort_below =
                s.value("stage1_abort_below", c.search.stage1_abort_below);
            c.search.stage_cfg.max_steps = s.value("max_steps", c.search.stage_cfg.max_steps);
            c.search.stage_cfg.patience = s.value("patience", c.search.stage_cfg.patience);
            c.search.run_stage0 = s.value("run_stage0", c.search.run_stage0);
        }
        c.split_mlps = j.value("split_mlps", c.split_mlps);
        c.prune_dataset_size = j.value("prune_dataset_size", c.prune_dataset_size);
        c.accept_no_op = j.value("accept_no_op", c.accept_no_op);
        c.accept_best = j.value("accept_best", c.accept_best);
        c.simplify.steps_per_phase = j.value("simplify_steps", c.simplify.steps_per_phase);
        c.out_dir = j.value("out_dir", c.out_dir);
        c.run_id = j.value("run_id", c.run_id);
        c.seed = j.value("seed", (uint64_t)0);
        c.translate_cap = j.value("translate_cap", c.translate_cap);
        return c;
    }
};

struct PipelineResult {
    // 0 = success, 2 = LLNA failure (expected negative result), 1 = error
    int exit_code = 0;
    std::string status;          // "ok", "not decompilable", or an error
    std::string failed_stage;
    double task_acc_train_range = 0.0;
    double task_acc_eval_range = 0.0;
    double llna_match = 0.0;
    bool llna_holds = false;
    double match_post_prune = 0.0;
    double match_post_primitive = 0.0;
    long long line_count = -1;
    std::string program_text;
    DRaspProgram program;
    bool has_program = false;
    std::string dir;
};

inline TaskSpec pipeline_task(const PipelineConfig& cfg) {
    TaskSpec spec = make_task(cfg.task, cfg.eval_max_len, cfg.T, cfg.num_symbols);
    return spec;
}

// gen-data -> train -> fit-linear-ln/absorb -> prune stages -> extract ->
// match primitives -> simplify -> render; halts with "not decompilable" when
// the linearized model's match accuracy falls under the LLNA threshold.
inline PipelineResult run_pipeline(const PipelineConfig& cfg) {
    namespace fs = std::filesystem;
    PipelineResult res;
    std::string dir = cfg.out_dir + "/" + cfg.run_id;
    res.dir = dir;
    std::string stage = "setup";
    try {
        fs::create_directories(dir);
        write_text(cfg.to_json().dump(1) + "\n", dir + "/config.json");

        TaskSpec spec = pipeline_task(cfg);
        TaskSpec train_spec = spec;
        train_spec.max_len = cfg.train_max_len;

        // ---- data ----
        stage = "gen-data";
        auto prune_data = generate(spec, cfg.prune_dataset_size, spec.min_len, cfg.eval_max_len,
                                   cfg.seed ^ 0x70d0ULL);
        write_jsonl(prune_data, spec, dir + "/dataset.jsonl");
        auto train_range_eval =
            generate(spec, 200, spec.min_len, cfg.train_max_len, cfg.seed ^ 0x1111ULL);
        auto eval_range_eval =
            generate(spec, 200, spec.min_len, cfg.eval_max_len, cfg.seed ^ 0x2222ULL);

        // ---- model ----
        TransformerWeights w;
        if (!cfg.checkpoint.empty()) {
            stage = "load-checkpoint";
            w = load_checkpoint(cfg.checkpoint);
        } else {
            stage = "train";
            w = TransformerWeights::make(cfg.layers, cfg.heads, cfg.dim, cfg.T, spec.vocab_size(),
                                         spec.objective);
            TrainConfig tc = cfg.train;
            tc.seed = cfg.seed;
            if (cfg.verbose)
                train(w, train_spec, tc, [](int s, double l, double a) {
                    std::fprintf(stderr, "[train] step %d loss %.4f acc %.3f\n", s, l, a);
                });
            else
                train(w, train_spec, tc);
            save_checkpoint(w, dir + "/model.ckpt", spec.alphabet, spec.name);
        }
        res.task_acc_train_range = eval_task_accuracy(w, spec, train_range_eval, LnMode::exact);
        res.task_acc_eval_range = eval_task_accuracy(w, spec, eval_range_eval, LnMode::exact);

        // ---- linearize + absorb ----
        stage = "linearize";
        LinearLn lin;
        FitLnConfig fc = cfg.fit_ln;
        fc.seed = cfg.seed ^ 0x11aaULL;
        fc.llna_threshold = cfg.llna_threshold;
        auto lnrep = fit_linear_ln(w, spec, prune_data, lin, fc);
        res.llna_match = lnrep.match_acc;
        res.llna_holds = lnrep.llna_holds;
        if (!lnrep.llna_holds) {
            res.exit_code = 2;
            res.status = "not decompilable";
            res.failed_stage = "linearize";
            write_text(nlohmann::json{{"status", res.status},
                                      {"llna_match", res.llna_match},
                                      {"llna_holds", false}}
                               .dump(1) +
                           "\n",
                       dir + "/summary.json");
            return res;
        }
        stage = "absorb";
        TransformerWeights wa = absorb_ln(w, lin);
        save_checkpoint(wa, dir + "/model_absorbed.ckpt", spec.alphabet, spec.name);

        // reference outputs: the ORIGINAL model with exact layer norm
        std::vector<Mat> ref = forward_batch(w, prune_data, LnMode::exact);

        // full-translation size report; the program itself is only written
        // when it fits under the cap
        stage = "translate";
        nlohmann::json size_report = {
            {"lines_unsplit", predicted_size(cfg.layers, cfg.heads, false)},
            {"lines_split", predicted_size(cfg.layers, cfg.heads, true)}};
        if (predicted_size(cfg.layers, cfg.heads, false) <= cfg.translate_cap) {
            auto art = translate(wa, spec.alphabet, false, cfg.translate_cap);
            std::ofstream f(dir + "/translation.drasp.json");
            f << program_to_json(art.program).dump() << "\n";
        }

        // ---- prune ----
        stage = "prune";
        SearchConfig sc = cfg.search;
        sc.stage_cfg.seed = cfg.seed ^ 0xabcdULL;
        sc.ledger_path = dir + "/runs.jsonl";
        sc.verbose = cfg.verbose;
        CoefficientSearch search(wa, spec, prune_data, ref, sc);
        bool try_split = cfg.split_mlps != "off";
        SearchResult sres = search.run(try_split);
        if (cfg.split_mlps == "auto" && sres.best_run.empty()) {
            SearchResult unsplit = search.run(false);
            if (!unsplit.best_run.empty()) sres = std::move(unsplit);
        }
        write_frontier_csv(sres.frontier, dir + "/frontier.csv");
        if (sres.aborted_low_accuracy || sres.best_run.empty()) {
            res.exit_code = 2;
            res.status = "not decompilable";
            res.failed_stage = "prune";
            write_text(nlohmann::json{{"status", res.status},
                                      {"llna_match", res.llna_match},
                                      {"llna_holds", res.llna_holds},
                                      {"prune_aborted", sres.aborted_low_accuracy}}
                               .dump(1) +
                           "\n",
                       dir + "/summary.json");
            return res;
        }
        const RunRecord* best = CoefficientSearch::find_run(sres, sres.best_run);
        res.match_post_prune = best->match_acc;

        // ---- extract ----
        stage = "extract";
        ComputationGraph gbest = best->graph;
        DRaspProgram prog = graph_to_program(gbest, wa, spec.alphabet);

        // ---- primitives ----
        stage = "match";
        MatchContext mctx{spec, prune_data, ref, best->match_acc, 20000, cfg.seed,
                          cfg.accept_no_op, cfg.accept_best};
        drop_negligible_bias(prog, mctx, 0.95 * best->match_acc);
        SimplifyConfig scfg = cfg.simplify;
        scfg.seed = cfg.seed ^ 0x51abULL;
        auto mrep = match_program_primitives(prog, mctx, scfg);
        res.match_post_primitive = mrep.final_match;

        // ---- render ----
        stage = "render";
        auto pretty = export_program(prog, dir);
        res.program_text = pretty.text;
        res.line_count = prog.line_count();
        res.program = prog;
        res.has_program = true;
        if (!prune_data.empty())
            render_variable_traces(prog, prune_data[0].tokens, prune_data[0].offset,
                                   dir + "/example_traces");
        {
            std::ofstream f(dir + "/match_ledger.json");
            f << mrep.to_json().dump(1) << "\n";
        }
        for (size_t i = 0; i < mrep.inspections.size(); ++i)
            render_inspection(mrep.inspections[i], dir + "/inspections",
                              "inspect_" + std::to_string(i));

        stage = "report";
        res.status = "ok";
        nlohmann::json summary = {{"status", "ok"},
                                  {"task", spec.name},
                                  {"task_acc_train_range", res.task_acc_train_range},
                                  {"task_acc_eval_range", res.task_acc_eval_range},
                                  {"llna_holds", res.llna_holds},
                                  {"llna_match", res.llna_match},
                                  {"match_acc_post_prune", res.match_post_prune},
                                  {"match_acc_post_primitive", res.match_post_primitive},
                                  {"line_count", res.line_count},
                                  {"size_report", size_report},
                                  {"best_run", sres.best_run},
                                  {"baseline_match", sres.baseline_match}};
        write_text(summary.dump(1) + "\n", dir + "/summary.json");
        write_text(nlohmann::json{{"timestamp", (long long)time(nullptr)}}.dump(1) + "\n",
                   dir + "/run_meta.json");
    } catch (const std::exception& e) {
        res.exit_code = 1;
        res.status = std::string("error at stage ") + stage + ": " + e.what();
        res.failed_stage = stage;
    }
    return res;
}

} // namespace drasp
