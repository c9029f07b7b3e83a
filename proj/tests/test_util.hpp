#pragma once

// Shared test helpers. The reference evaluator here is deliberately written
// with naive per-position loops and no shared code with the interpreter; it
// is the oracle the interpreter is checked against.

#include <cmath>
#include <vector>

#include "drasp/program.hpp"
#include "drasp/rng.hpp"
#include "drasp/transformer.hpp"

namespace testutil {

using drasp::DRaspProgram;
using drasp::Mat;
using drasp::Rng;

using Grid = std::vector<std::vector<double>>;  // [dim][position]

inline Grid zeros(int d, int n) { return Grid(d, std::vector<double>(n, 0.0)); }

struct RefResult {
    Grid logits;
    Grid prediction;
};

inline RefResult reference_eval(const DRaspProgram& p, const std::vector<int>& tokens,
                                int offset) {
    const int N = (int)tokens.size();
    const int V = p.vocab();
    std::vector<Grid> vars(p.vars.size());
    std::vector<Grid> sels(p.sel_names.size());
    std::vector<Grid> logits(p.logit_names.size());

    vars[0] = zeros(V, N);
    for (int j = 0; j < N; ++j) vars[0][tokens[j]][j] = 1.0;
    vars[1] = zeros(N, N);
    for (int j = 0; j < N; ++j) vars[1][j][j] = 1.0;

    auto a_entry = [&](const Mat& A, bool rowpos, bool colpos, int i, int j) {
        return A(rowpos ? offset + i : i, colpos ? offset + j : j);
    };
    auto is_pos = [&](int v) { return p.vars[v].basis == drasp::Basis::position; };

    RefResult out;
    for (const auto& st : p.statements) {
        if (auto* sel = std::get_if<drasp::SelectStmt>(&st)) {
            Grid val = zeros(N, N);
            for (int i = 0; i < N; ++i) {
                for (int s = 0; s <= i; ++s) {
                    double acc = 0;
                    if (sel->binary) {
                        for (int a = 0; a < p.vars[sel->q].dim && a < (int)vars[sel->q].size(); ++a)
                            for (int b = 0; b < (int)vars[sel->k].size(); ++b)
                                acc += vars[sel->q][a][i] *
                                       a_entry(sel->A, is_pos(sel->q), is_pos(sel->k), a, b) *
                                       vars[sel->k][b][s];
                    } else {
                        for (int b = 0; b < (int)vars[sel->k].size(); ++b)
                            acc += a_entry(sel->A, false, is_pos(sel->k), 0, b) * vars[sel->k][b][s];
                    }
                    val[i][s] = acc;
                }
            }
            sels[sel->out] = std::move(val);
        } else if (auto* agg = std::get_if<drasp::AggregateStmt>(&st)) {
            int dv = (int)vars[agg->value].size();
            Grid outv = zeros(dv, N);
            for (int i = 0; i < N; ++i) {
                std::vector<double> lg(i + 1, 0.0);
                for (int s = 0; s <= i; ++s)
                    for (int sid : agg->selectors) lg[s] += sels[sid][i][s];
                double mx = lg[0];
                for (int s = 1; s <= i; ++s) mx = std::max(mx, lg[s]);
                double z = 0;
                for (int s = 0; s <= i; ++s) {
                    lg[s] = std::exp(lg[s] - mx);
                    z += lg[s];
                }
                for (int s = 0; s <= i; ++s)
                    for (int a = 0; a < dv; ++a) outv[a][i] += lg[s] / z * vars[agg->value][a][s];
            }
            vars[agg->out] = std::move(outv);
        } else if (auto* ew = std::get_if<drasp::ElementWiseStmt>(&st)) {
            if (ew->func.kind == drasp::ElementFunc::Kind::blackbox_mlp) {
                int din = ew->func.input_const.rows();
                int hidden = ew->func.mlp.W1.rows();
                int dout = ew->func.mlp.W2.rows();
                Grid outv = zeros(dout, N);
                for (int i = 0; i < N; ++i) {
                    std::vector<double> x(din, 0.0);
                    for (int a = 0; a < din; ++a) x[a] = ew->func.input_const(a, 0);
                    for (size_t k = 0; k < ew->inputs.size(); ++k) {
                        const Mat& M = ew->func.input_maps[k];
                        for (int a = 0; a < din; ++a)
                            for (int b = 0; b < (int)vars[ew->inputs[k]].size(); ++b)
                                x[a] += M(a, is_pos(ew->inputs[k]) ? offset + b : b) *
                                        vars[ew->inputs[k]][b][i];
                    }
                    std::vector<double> hid(hidden, 0.0);
                    for (int a = 0; a < hidden; ++a) {
                        double v = ew->func.mlp.b1(a, 0);
                        for (int b = 0; b < din; ++b) v += ew->func.mlp.W1(a, b) * x[b];
                        hid[a] = v * 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
                    }
                    for (int a = 0; a < dout; ++a) {
                        double v = ew->func.mlp.b2(a, 0);
                        for (int b = 0; b < hidden; ++b) v += ew->func.mlp.W2(a, b) * hid[b];
                        outv[a][i] = v;
                    }
                }
                vars[ew->out] = std::move(outv);
            } else {
                // primitives: recompute per position from first principles
                Grid outv;
                for (int i = 0; i < N; ++i) {
                    std::vector<std::vector<double>> cols;
                    for (int v : ew->inputs) {
                        std::vector<double> c;
                        for (auto& row : vars[v]) c.push_back(row[i]);
                        cols.push_back(c);
                    }
                    auto o = drasp::elementwise_apply(ew->func.prim_id, ew->func.prim_param, cols);
                    if (outv.empty()) outv = zeros((int)o.size(), N);
                    for (size_t a = 0; a < o.size(); ++a) outv[a][i] = o[a];
                }
                vars[ew->out] = std::move(outv);
            }
        } else if (auto* pr = std::get_if<drasp::ProjectStmt>(&st)) {
            Grid contrib = zeros(V, N);
            for (int i = 0; i < N; ++i) {
                for (int a = 0; a < V; ++a) {
                    if (pr->input < 0) {
                        contrib[a][i] = pr->A(a, 0);
                    } else {
                        double acc = 0;
                        for (int b = 0; b < (int)vars[pr->input].size(); ++b)
                            acc += pr->A(a, is_pos(pr->input) ? offset + b : b) *
                                   vars[pr->input][b][i];
                        contrib[a][i] = acc;
                    }
                }
            }
            logits[pr->out] = std::move(contrib);
        } else if (auto* pred = std::get_if<drasp::PredictionStmt>(&st)) {
            Grid total = zeros(V, N);
            for (int s : pred->logit_slots)
                for (int a = 0; a < V; ++a)
                    for (int i = 0; i < N; ++i) total[a][i] += logits[s][a][i];
            out.logits = total;
            out.prediction = total;
            for (int i = 0; i < N; ++i) {
                if (pred->phi == drasp::PredictionStmt::Phi::sigmoid) {
                    for (int a = 0; a < V; ++a)
                        out.prediction[a][i] = 1.0 / (1.0 + std::exp(-total[a][i]));
                } else {
                    double mx = total[0][i];
                    for (int a = 1; a < V; ++a) mx = std::max(mx, total[a][i]);
                    double z = 0;
                    for (int a = 0; a < V; ++a) z += std::exp(total[a][i] - mx);
                    for (int a = 0; a < V; ++a)
                        out.prediction[a][i] = std::exp(total[a][i] - mx) / z;
                }
            }
        }
    }
    return out;
}

// Random well-formed programs for interpreter fuzzing: a few selects over
// existing vars, aggregates (possibly with empty selector lists), an
// occasional element-wise op, projections, one prediction.
inline DRaspProgram random_program(Rng& rng, int sigma_size, int T, int max_statements = 6) {
    std::vector<std::string> alphabet;
    for (int i = 0; i < sigma_size; ++i) alphabet.push_back(std::string(1, char('a' + i)));
    DRaspProgram p = DRaspProgram::make(alphabet, T, drasp::Objective::language_model);

    auto rand_mat = [&](int r, int c, double scale) {
        Mat m(r, c);
        for (auto& v : m.raw()) v = rng.uniform(-scale, scale);
        return m;
    };
    auto var_dim = [&](int v) { return p.vars[v].dim; };

    int budget = 2 + (int)rng.below(std::max(1, max_statements - 3));  // pre-projection statements
    std::vector<int> sel_ids;
    for (int i = 0; i < budget; ++i) {
        double what = rng.uniform();
        if (what < 0.45) {
            bool binary = rng.uniform() < 0.7;
            drasp::SelectStmt st;
            st.binary = binary;
            st.k = (int)rng.below(p.vars.size());
            if (binary) {
                st.q = (int)rng.below(p.vars.size());
                st.A = rand_mat(var_dim(st.q), var_dim(st.k), 2.0);
            } else {
                st.A = rand_mat(1, var_dim(st.k), 2.0);
            }
            st.out = p.add_selector("s" + std::to_string(i));
            sel_ids.push_back(st.out);
            p.statements.push_back(st);
        } else if (what < 0.85 || p.vars.size() < 3) {
            drasp::AggregateStmt st;
            st.value = (int)rng.below(p.vars.size());
            int nsel = (int)rng.below(std::min<size_t>(sel_ids.size() + 1, 3));
            for (int k = 0; k < nsel; ++k) st.selectors.push_back(sel_ids[rng.below(sel_ids.size())]);
            drasp::VarInfo vi;
            vi.name = "agg" + std::to_string(i);
            vi.dim = var_dim(st.value);
            vi.basis = p.vars[st.value].basis;
            st.out = p.add_var(vi);
            p.statements.push_back(st);
        } else {
            drasp::ElementWiseStmt st;
            st.inputs = {(int)rng.below(p.vars.size())};
            st.func.kind = drasp::ElementFunc::Kind::blackbox_mlp;
            int din = 3, hidden = 5, dout = 4;
            st.func.mlp.W1 = rand_mat(hidden, din, 1.0);
            st.func.mlp.b1 = rand_mat(hidden, 1, 0.5);
            st.func.mlp.W2 = rand_mat(dout, hidden, 1.0);
            st.func.mlp.b2 = rand_mat(dout, 1, 0.5);
            st.func.input_maps = {rand_mat(din, var_dim(st.inputs[0]), 1.0)};
            st.func.input_const = rand_mat(din, 1, 0.5);
            drasp::VarInfo vi;
            vi.name = "ew" + std::to_string(i);
            vi.dim = dout;
            vi.basis = drasp::Basis::residual;
            st.out = p.add_var(vi);
            p.statements.push_back(st);
        }
    }
    // project 1-2 variables and predict
    int nproj = 1 + (int)rng.below(2);
    std::vector<int> slots;
    for (int k = 0; k < nproj; ++k) {
        drasp::ProjectStmt st;
        if (rng.uniform() < 0.15) {
            st.input = -1;
            st.A = rand_mat(p.vocab(), 1, 1.0);
        } else {
            st.input = (int)rng.below(p.vars.size());
            st.A = rand_mat(p.vocab(), var_dim(st.input), 1.0);
        }
        st.out = p.add_logit_slot("L" + std::to_string(k));
        slots.push_back(st.out);
        p.statements.push_back(st);
    }
    drasp::PredictionStmt pred;
    pred.phi = rng.uniform() < 0.5 ? drasp::PredictionStmt::Phi::softmax
                                   : drasp::PredictionStmt::Phi::sigmoid;
    pred.logit_slots = slots;
    p.statements.push_back(pred);
    p.validate();
    return p;
}

inline drasp::TransformerWeights random_absorbed_model(Rng& rng, int L, int H, int d, int T,
                                                       int vocab, double std = 0.3,
                                                       bool with_biases = true) {
    auto w = drasp::TransformerWeights::make(L, H, d, T, vocab, drasp::Objective::language_model);
    w.randomize(rng, std);
    if (with_biases) {
        for (auto& lay : w.layers) {
            for (auto& h : lay.heads) {
                for (auto& v : h.qb.raw()) v = rng.gauss() * std;
                for (auto& v : h.kb.raw()) v = rng.gauss() * std;
                for (auto& v : h.vb.raw()) v = rng.gauss() * std;
            }
            for (auto& v : lay.mlp.b1.raw()) v = rng.gauss() * std;
            for (auto& v : lay.mlp.b2.raw()) v = rng.gauss() * std;
        }
        for (auto& v : w.lm_bias.raw()) v = rng.gauss() * std;
    }
    w.absorbed = true;  // no layer norm anywhere
    return w;
}

inline double grid_vs_mat_max_err(const Grid& g, const Mat& m) {
    double e = 0;
    for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j) e = std::max(e, std::fabs(g[i][j] - m(i, j)));
    return e;
}

// a blackbox MLP that computes exactly W2 W1 x on |x| bounded inputs: the
// hidden pre-activations are pushed deep into gelu's identity regime
inline drasp::MlpWeights exact_linear_mlp(const Mat& m, double shift = 50.0) {
    drasp::MlpWeights w;
    int dout = m.rows(), din = m.cols();
    w.W1 = Mat(din, din);
    for (int i = 0; i < din; ++i) w.W1(i, i) = 1.0;
    w.b1 = Mat(din, 1, shift);
    w.W2 = m;
    w.b2 = Mat(dout, 1);
    // cancel the constant: W2 (x + shift) - W2 shift
    for (int i = 0; i < dout; ++i) {
        double s = 0;
        for (int j = 0; j < din; ++j) s += m(i, j) * shift;
        w.b2(i, 0) = -s;
    }
    return w;
}

} // namespace testutil
