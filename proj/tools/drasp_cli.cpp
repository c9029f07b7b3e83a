// Command-line surface for the decompilation toolkit. Every pipeline stage
// is independently invocable; `pipeline` chains them all.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "drasp/checkpoint.hpp"
#include "drasp/extract.hpp"
#include "drasp/matching.hpp"
#include "drasp/pipeline.hpp"
#include "drasp/pretty.hpp"
#include "drasp/render.hpp"
#include "drasp/search.hpp"
#include "drasp/train.hpp"
#include "drasp/translate.hpp"

using namespace drasp;

namespace {

std::string out_root() {
    const char* env = std::getenv("DRASP_OUT");
    return env ? env : "out";
}

PipelineConfig load_config(const std::string& path) {
    if (path.empty()) return PipelineConfig{};
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config " + path);
    return PipelineConfig::from_json(nlohmann::json::parse(f));
}

std::vector<Mat> model_outputs(const TransformerWeights& w, const std::vector<Instance>& data) {
    return forward_batch(w, data, w.absorbed ? LnMode::none : LnMode::exact);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"decompile small transformers into D-RASP programs"};
    app.require_subcommand(1);

    std::string config_path, task = "binary_majority", out = out_root();
    std::string ckpt, program_path, dataset_path, run_id = "run";
    int n = 200, len_lo = 1, len_hi = 20, T = 64, num_symbols = 26;
    int layers = 1, heads = 1, dim = 16;
    uint64_t seed = 0;
    bool verbose = false;

    app.add_option("--config", config_path, "pipeline config JSON; flags override");
    app.add_flag("--verbose", verbose, "progress to stderr");

    auto add_task_opts = [&](CLI::App* c) {
        c->add_option("--task", task);
        c->add_option("--num-symbols", num_symbols);
        c->add_option("--max-len", len_hi);
        c->add_option("--min-len", len_lo);
        c->add_option("-T,--context", T);
        c->add_option("--seed", seed);
        c->add_option("--out", out);
    };

    auto* gen = app.add_subcommand("gen-data", "generate a task dataset (jsonl)");
    add_task_opts(gen);
    gen->add_option("-n,--count", n);
    gen->add_option("--dataset", dataset_path);

    auto* tr = app.add_subcommand("train", "train a transformer on a task");
    add_task_opts(tr);
    tr->add_option("--layers", layers);
    tr->add_option("--heads", heads);
    tr->add_option("--dim", dim);
    tr->add_option("--ckpt", ckpt);

    auto* lin = app.add_subcommand("linearize", "fit gamma' and absorb layer norm");
    add_task_opts(lin);
    lin->add_option("--ckpt", ckpt)->required();

    auto* trans = app.add_subcommand("translate", "exact D-RASP translation of a checkpoint");
    add_task_opts(trans);
    trans->add_option("--ckpt", ckpt)->required();
    bool split_flag = false;
    trans->add_flag("--split-mlps", split_flag);

    auto* pr = app.add_subcommand("prune", "multi-stage causal pruning with coefficient search");
    add_task_opts(pr);
    pr->add_option("--ckpt", ckpt)->required();

    auto* ex = app.add_subcommand("extract", "pruned graph of a finished run to program");
    add_task_opts(ex);

    auto* ma = app.add_subcommand("match", "replace program pieces with library primitives");
    add_task_opts(ma);
    ma->add_option("--ckpt", ckpt)->required();
    ma->add_option("--program", program_path)->required();

    auto* sim = app.add_subcommand("simplify", "push unmatched tensors to sparse integers");
    add_task_opts(sim);
    sim->add_option("--ckpt", ckpt)->required();
    sim->add_option("--program", program_path)->required();

    auto* ren = app.add_subcommand("render", "heatmaps and traces for a program");
    add_task_opts(ren);
    ren->add_option("--program", program_path)->required();

    auto* rep = app.add_subcommand("report", "print the summary of a finished run");
    rep->add_option("--out", out);
    rep->add_option("--run-id", run_id);

    auto* pipe = app.add_subcommand("pipeline", "run the whole decompilation pipeline");
    add_task_opts(pipe);
    pipe->add_option("--layers", layers);
    pipe->add_option("--heads", heads);
    pipe->add_option("--dim", dim);
    pipe->add_option("--ckpt", ckpt);
    pipe->add_option("--run-id", run_id);
    pipe->add_option("--train-max-len", len_hi);
    int eval_max = -1;
    pipe->add_option("--eval-max-len", eval_max);

    for (auto* sub : app.get_subcommands({})) sub->fallthrough();
    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            auto spec = make_task(task, len_hi, T, num_symbols);
            auto data = generate(spec, n, len_lo, len_hi, seed);
            std::string path = dataset_path.empty() ? task + ".jsonl" : dataset_path;
            write_jsonl(data, spec, path);
            std::printf("wrote %d instances to %s\n", (int)data.size(), path.c_str());
            return 0;
        }
        if (tr->parsed()) {
            auto spec = make_task(task, len_hi, T, num_symbols);
            auto w = TransformerWeights::make(layers, heads, dim, T, spec.vocab_size(),
                                              spec.objective);
            TrainConfig tc;
            tc.seed = seed;
            auto trep = train(w, spec, tc, [&](int s, double l, double a) {
                if (verbose) std::fprintf(stderr, "[train] step %d loss %.4f acc %.3f\n", s, l, a);
            });
            std::string path = ckpt.empty() ? task + ".ckpt" : ckpt;
            save_checkpoint(w, path, spec.alphabet, spec.name);
            std::printf("trained %d steps, in-dist accuracy %.3f, saved %s\n", trep.steps,
                        trep.in_dist_accuracy, path.c_str());
            return 0;
        }
        if (lin->parsed()) {
            CheckpointMeta meta;
            auto w = load_checkpoint(ckpt, &meta);
            auto spec = make_task(meta.task.empty() ? task : meta.task, len_hi, w.T,
                                  (int)meta.alphabet.size());
            auto data = generate(spec, 200, spec.min_len, len_hi, seed ^ 1);
            LinearLn l;
            auto r = fit_linear_ln(w, spec, data, l);
            auto wa = absorb_ln(w, l);
            std::string path = ckpt + ".absorbed";
            save_checkpoint(wa, path, spec.alphabet, spec.name);
            std::printf("mean KL %.6g, match accuracy %.3f, LLNA %s, saved %s\n", r.mean_kl,
                        r.match_acc, r.llna_holds ? "holds" : "fails", path.c_str());
            return r.llna_holds ? 0 : 2;
        }
        if (trans->parsed()) {
            CheckpointMeta meta;
            auto w = load_checkpoint(ckpt, &meta);
            auto art = translate(w, meta.alphabet, split_flag);
            std::filesystem::create_directories(out);
            std::ofstream f(out + "/translation.drasp.json");
            f << program_to_json(art.program).dump() << "\n";
            std::printf("translated to %lld lines (formula: %lld)\n", art.line_count,
                        predicted_size(w.L, w.H, split_flag));
            return 0;
        }
        if (pr->parsed() || ex->parsed() || ma->parsed() || sim->parsed()) {
            // these stages share the checkpoint + dataset + reference setup
            CheckpointMeta meta;
            auto w = load_checkpoint(ckpt, &meta);
            auto spec = make_task(meta.task.empty() ? task : meta.task, len_hi, w.T,
                                  (int)meta.alphabet.size());
            auto data = generate(spec, n, spec.min_len, len_hi, seed ^ 0x70d0ULL);
            auto ref = model_outputs(w, data);
            if (pr->parsed()) {
                SearchConfig sc;
                sc.ledger_path = out + "/runs.jsonl";
                sc.verbose = verbose;
                std::filesystem::create_directories(out);
                CoefficientSearch search(w, spec, data, ref, sc);
                auto res = search.run(true);
                write_frontier_csv(res.frontier, out + "/frontier.csv");
                if (res.best_run.empty()) {
                    std::printf("no run reached match accuracy 0.9\n");
                    return 2;
                }
                const RunRecord* best = CoefficientSearch::find_run(res, res.best_run);
                ComputationGraph g = best->graph;
                auto prog = graph_to_program(g, w, spec.alphabet);
                export_program(prog, out);
                std::printf("best run %s: %lld lines at match %.3f\n", best->run_id.c_str(),
                            best->lines, best->match_acc);
                return 0;
            }
            std::ifstream pf(program_path);
            if (!pf) throw std::runtime_error("cannot open " + program_path);
            DRaspProgram prog = program_from_json(nlohmann::json::parse(pf));
            MatchContext mctx{spec, data, ref, 1.0, 20000, seed};
            if (ma->parsed()) {
                auto mrep = match_program_primitives(prog, mctx);
                export_program(prog, out);
                std::printf("match accuracy after primitives: %.3f (%d matches)\n",
                            mrep.final_match, (int)mrep.matches.size());
                return 0;
            }
            if (sim->parsed()) {
                std::vector<int> targets;
                for (size_t si = 0; si < prog.statements.size(); ++si) {
                    if (auto* s = std::get_if<SelectStmt>(&prog.statements[si]))
                        if (s->op_name.empty()) targets.push_back((int)si);
                    if (auto* s = std::get_if<ProjectStmt>(&prog.statements[si]))
                        if (s->op_name.empty()) targets.push_back((int)si);
                }
                auto srep = simplify_tensors(prog, mctx, targets);
                export_program(prog, out);
                std::printf("simplified=%d rounded=%d match %.3f\n", srep.changed, srep.rounded,
                            srep.final_match);
                return 0;
            }
        }
        if (ren->parsed()) {
            std::ifstream pf(program_path);
            if (!pf) throw std::runtime_error("cannot open " + program_path);
            DRaspProgram prog = program_from_json(nlohmann::json::parse(pf));
            export_program(prog, out);
            auto spec = make_task(task, len_hi, prog.T, (int)prog.alphabet.size());
            auto data = generate(spec, 1, spec.min_len, std::min(len_hi, spec.max_len), seed);
            render_variable_traces(prog, data[0].tokens, data[0].offset, out + "/example_traces");
            std::printf("rendered into %s\n", out.c_str());
            return 0;
        }
        if (rep->parsed()) {
            std::ifstream f(out + "/" + run_id + "/summary.json");
            if (!f) throw std::runtime_error("no summary for run " + run_id);
            std::cout << f.rdbuf();
            return 0;
        }
        if (pipe->parsed()) {
            PipelineConfig cfg = load_config(config_path);
            if (pipe->count("--task") || config_path.empty()) cfg.task = task;
            if (pipe->count("--layers")) cfg.layers = layers;
            if (pipe->count("--heads")) cfg.heads = heads;
            if (pipe->count("--dim")) cfg.dim = dim;
            if (pipe->count("--train-max-len")) cfg.train_max_len = len_hi;
            if (eval_max > 0) cfg.eval_max_len = eval_max;
            if (pipe->count("-T") || pipe->count("--context")) cfg.T = T;
            if (pipe->count("--num-symbols")) cfg.num_symbols = num_symbols;
            if (pipe->count("--seed")) cfg.seed = seed;
            if (pipe->count("--ckpt")) cfg.checkpoint = ckpt;
            if (pipe->count("--run-id")) cfg.run_id = run_id;
            if (pipe->count("--out")) cfg.out_dir = out;
            cfg.verbose = verbose;
            auto res = run_pipeline(cfg);
            if (res.exit_code == 0) {
                std::printf("status: %s\nlines: %lld\nmatch (post-prune -> post-primitive): "
                            "%.3f -> %.3f\n%s",
                            res.status.c_str(), res.line_count, res.match_post_prune,
                            res.match_post_primitive, res.program_text.c_str());
            } else {
                std::printf("status: %s\n", res.status.c_str());
            }
            return res.exit_code;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
