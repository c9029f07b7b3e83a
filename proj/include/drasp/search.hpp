#pragma once

#include <algorithm>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "drasp/extract.hpp"
#include "drasp/prune.hpp"

#include <json.hpp>

namespace drasp {

struct RunRecord {
    std::string run_id;
    std::string parent_run;
    int stage = 1;
    double lambda = 0.0;
    int edges = 0;
    long long lines = -1;  // program lines; computed for stage-3 runs
    double match_acc = 0.0;
    double mean_kl = 0.0;
    uint64_t seed = 0;
    ComputationGraph graph;

    nlohmann::json to_json() const {
        return {{"run_id", run_id}, {"parent_run", parent_run}, {"stage", stage},
                {"lambda", lambda}, {"edges", edges},           {"lines", lines},
                {"match_acc", match_acc}, {"kl", mean_kl},      {"seed", seed}};
    }
};

struct ParetoPoint {
    long long size = 0;  // edges or lines
    double match_acc = 0.0;
    std::string run_id;
};

// weak dominance: another point with no more size and no less accuracy,
// strictly better in one, knocks a point out
inline std::vector<ParetoPoint> pareto_frontier(std::vector<ParetoPoint> pts) {
    std::vector<ParetoPoint> keep;
    for (auto& p : pts) {
        bool dominated = false;
        for (auto& q : pts) {
            if (q.size <= p.size && q.match_acc >= p.match_acc &&
                (q.size < p.size || q.match_acc > p.match_acc)) {
                dominated = true;
                break;
            }
        }
        if (!dominated) keep.push_back(p);
    }
    // dedupe identical coordinates, keep first
    std::sort(keep.begin(), keep.end(), [](auto& a, auto& b) {
        return a.size != b.size ? a.size < b.size : a.match_acc < b.match_acc;
    });
    std::vector<ParetoPoint> out;
    for (auto& p : keep)
        if (out.empty() || out.back().size != p.size || out.back().match_acc != p.match_acc)
            out.push_back(p);
    return out;
}

// next sparsity coefficient for a target accuracy: geometric mean of the
// bracketing runs' coefficients when both sides exist, otherwise scale the
// nearest known coefficient by 5
inline double next_lambda(const std::vector<std::pair<double, double>>& acc_lambda,
                          double target_acc) {
    std::optional<std::pair<double, double>> above, below;
    for (auto& [acc, lam] : acc_lambda) {
        if (acc >= target_acc && (!above || acc < above->first)) above = {acc, lam};
        if (acc < target_acc && (!below || acc > below->first)) below = {acc, lam};
    }
    if (above && below) return std::sqrt(above->second * below->second);
    if (above) return above->second * 5.0;   // need lower accuracy: prune harder
    if (below) return below->second / 5.0;   // need higher accuracy: prune softer
    return 1e-3;
}

struct SearchConfig {
    int max_runs_stage1 = 8;
    int carry_runs = 3;                      // representative runs resumed per stage
    std::vector<double> stage_mults = {0.2, 1.0, 5.0};  // lambda2/3 around the parent
    double stage1_abort_below = 0.7;
    double lambda_seed = 1e-3;
    PruneStageConfig stage_cfg;              // budgets; patience shrinks after stage 1
    bool run_stage0 = false;                 // diagnostic only, never seeds stage 1
    std::string ledger_path;                 // jsonl, optional
    bool verbose = false;
};

struct SearchResult {
    std::vector<RunRecord> runs;             // all stages
    std::vector<ParetoPoint> frontier;       // over final-stage program lines
    double baseline_match = 0.0;
    bool aborted_low_accuracy = false;
    bool budget_exhausted = false;
    std::string best_run;                    // shortest with match >= 0.9, if any
};

class CoefficientSearch {
public:
    CoefficientSearch(const TransformerWeights& w, const TaskSpec& spec,
                      const std::vector<Instance>& dataset, const std::vector<Mat>& ref,
                      const SearchConfig& cfg)
        : w_(w), spec_(spec), data_(dataset), ref_(ref), cfg_(cfg) {
        if (!cfg.ledger_path.empty()) ledger_.open(cfg.ledger_path, std::ios::app);
    }

    SearchResult run(bool split_mlps) {
        SearchResult res;
        res.baseline_match = bigram_baseline_match(w_, spec_, data_, ref_);

        // ---- stage 1: cover the accuracy range between baseline and 1 ----
        std::vector<RunRecord> s1;
        std::vector<std::pair<double, double>> acc_lambda;
        auto run_stage1 = [&](double lambda) {
            ComputationGraph g = build_component_graph(w_, false);
            PruneStageConfig pc = cfg_.stage_cfg;
            pc.lambda = lambda;
            pc.seed = cfg_.stage_cfg.seed + s1.size() + 1;
            auto m = prune_stage(g, w_, spec_, data_, ref_, pc);
            RunRecord r;
            r.run_id = "s1-" + std::to_string(s1.size());
            r.stage = 1;
            r.lambda = lambda;
            r.edges = m.open_edges;
            r.match_acc = m.match_acc;
            r.mean_kl = m.mean_kl;
            r.seed = pc.seed;
            r.graph = std::move(g);
            log(r);
            // the lambda = 0 reference run carries no coefficient information
            // for the geometric bracketing
            if (lambda > 0) acc_lambda.push_back({r.match_acc, lambda});
            s1.push_back(std::move(r));
        };

        run_stage1(0.0);
        run_stage1(cfg_.lambda_seed);
        double lo = res.baseline_match, hi = 1.0;
        while ((int)s1.size() < cfg_.max_runs_stage1) {
            // find an uncovered accuracy interval
            int target_bin = -1;
            for (int b = 9; b >= 0; --b) {
                double a0 = lo + (hi - lo) * b / 10.0, a1 = lo + (hi - lo) * (b + 1) / 10.0;
                bool covered = false;
                for (auto& [acc, lam] : acc_lambda) covered = covered || (acc >= a0 && acc < a1);
                if (!covered) {
                    target_bin = b;
                    break;
                }
            }
            if (target_bin < 0) break;
            double target = lo + (hi - lo) * (target_bin + 0.5) / 10.0;
            double lam = next_lambda(acc_lambda, target);
            auto is_dup = [&](double l) {
                for (auto& [acc, l2] : acc_lambda)
                    if (std::fabs(l2 - l) < 1e-15) return true;
                return false;
            };
            while (is_dup(lam)) lam *= 1.7;
            run_stage1(lam);
        }
        res.budget_exhausted = (int)s1.size() >= cfg_.max_runs_stage1;

        double best1 = 0;
        for (auto& r : s1) best1 = std::max(best1, r.match_acc);
        for (auto& r : s1) res.runs.push_back(r);
        if (best1 < cfg_.stage1_abort_below) {
            res.aborted_low_accuracy = true;
            return res;
        }

        // ---- carry Pareto-efficient representative runs forward ----
        auto carry = [&](std::vector<RunRecord>& runs) {
            std::vector<ParetoPoint> pts;
            for (auto& r : runs) pts.push_back({r.edges, r.match_acc, r.run_id});
            auto front = pareto_frontier(pts);
            std::vector<std::string> chosen;
            int n = (int)front.size();
            int k = std::min(cfg_.carry_runs, n);
            for (int i = 0; i < k; ++i) {
                int idx = k == 1 ? n - 1 : (int)std::llround(double(i) * (n - 1) / (k - 1));
                chosen.push_back(front[idx].run_id);
            }
            std::vector<RunRecord*> out;
            for (auto& id : chosen)
                for (auto& r : runs)
                    if (r.run_id == id) out.push_back(&r);
            return out;
        };

        // ---- stage 2 ----
        std::vector<RunRecord> s2;
        for (RunRecord* parent : carry(s1)) {
            for (double mult : cfg_.stage_mults) {
                ComputationGraph g = build_path_graph(parent->graph, w_, split_mlps);
                PruneStageConfig pc = cfg_.stage_cfg;
                pc.lambda = std::max(parent->lambda, cfg_.lambda_seed * 0.1) * mult;
                pc.patience = std::max(1, cfg_.stage_cfg.patience / 2);
                pc.seed = cfg_.stage_cfg.seed + 100 + s2.size();
                auto m = prune_stage(g, w_, spec_, data_, ref_, pc);
                RunRecord r;
                r.run_id = "s2-" + std::to_string(s2.size());
                r.parent_run = parent->run_id;
                r.stage = 2;
                r.lambda = pc.lambda;
                r.edges = m.open_edges;
                r.match_acc = m.match_acc;
                r.mean_kl = m.mean_kl;
                r.seed = pc.seed;
                r.graph = std::move(g);
                log(r);
                s2.push_back(std::move(r));
            }
        }
        for (auto& r : s2) res.runs.push_back(r);

        // ---- stage 3 ----
        std::vector<RunRecord> s3;
        for (RunRecord* parent : carry(s2)) {
            for (double mult : cfg_.stage_mults) {
                ComputationGraph g = build_qk_graph(parent->graph, w_);
                PruneStageConfig pc = cfg_.stage_cfg;
                pc.lambda = std::max(parent->lambda, cfg_.lambda_seed * 0.1) * mult;
                pc.patience = std::max(1, cfg_.stage_cfg.patience / 2);
                pc.seed = cfg_.stage_cfg.seed + 200 + s3.size();
                auto m = prune_stage(g, w_, spec_, data_, ref_, pc);
                finalize_stage(g);
                RunRecord r;
                r.run_id = "s3-" + std::to_string(s3.size());
                r.parent_run = parent->run_id;
                r.stage = 3;
                r.lambda = pc.lambda;
                r.edges = m.open_edges;
                r.match_acc = m.match_acc;
                r.mean_kl = m.mean_kl;
                r.seed = pc.seed;
                r.graph = std::move(g);
                try {
                    DRaspProgram p = graph_to_program(r.graph, w_, spec_.alphabet);
                    r.lines = p.line_count();
                } catch (const std::exception&) {
                    r.lines = -1;
                }
                log(r);
                s3.push_back(std::move(r));
            }
        }
        for (auto& r : s3) res.runs.push_back(r);

        std::vector<ParetoPoint> pts;
        for (auto& r : s3)
            if (r.lines >= 0) pts.push_back({r.lines, r.match_acc, r.run_id});
        res.frontier = pareto_frontier(pts);

        long long best_lines = -1;
        for (auto& r : s3) {
            if (r.match_acc < 0.9 || r.lines < 0) continue;
            if (best_lines < 0 || r.lines < best_lines) {
                best_lines = r.lines;
                res.best_run = r.run_id;
            }
        }
        return res;
    }

    static const RunRecord* find_run(const SearchResult& res, const std::string& id) {
        for (auto& r : res.runs)
            if (r.run_id == id) return &r;
        return nullptr;
    }

private:
    void log(const RunRecord& r) {
        if (ledger_.is_open()) ledger_ << r.to_json().dump() << "\n" << std::flush;
        if (cfg_.verbose)
            std::fprintf(stderr, "[prune %s] stage=%d lambda=%g edges=%d match=%.3f kl=%.4g\n",
                         r.run_id.c_str(), r.stage, r.lambda, r.edges, r.match_acc, r.mean_kl);
    }

    const TransformerWeights& w_;
    const TaskSpec& spec_;
    const std::vector<Instance>& data_;
    const std::vector<Mat>& ref_;
    SearchConfig cfg_;
    std::ofstream ledger_;
};

} // namespace drasp
