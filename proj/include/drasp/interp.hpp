#pragma once

#include <map>
#include <vector>

#include "drasp/primitives.hpp"
#include "drasp/program.hpp"
#include "drasp/tensor.hpp"

namespace drasp {

// Shared slicing rule: matrices with a position-based axis are stored at
// full T and sliced to the active window [offset, offset+N) at eval.
inline Mat slice_axes(const Mat& a, bool row_pos, bool col_pos, int offset, int n) {
    const Mat* cur = &a;
    Mat tmp;
    if (row_pos) {
        tmp = cur->slice_rows(offset, offset + n);
        cur = &tmp;
    }
    if (col_pos) {
        Mat t2 = cur->slice_cols(offset, offset + n);
        return t2;
    }
    return *cur;
}

struct EvalResult {
    Mat logits;      // vocab x N
    Mat prediction;  // vocab x N after phi
    std::vector<Mat> var_values;
    std::vector<Mat> sel_values;
    std::vector<Mat> logit_values;
};

namespace detail {

inline void round_down_bits(Mat& m, int p_bits) {
    const double scale = std::ldexp(1.0, p_bits);
    for (auto& v : m.raw()) v = std::floor(v * scale) / scale;
}

inline Mat phi_apply(const Mat& logits, PredictionStmt::Phi phi) {
    Mat out = logits;
    if (phi == PredictionStmt::Phi::sigmoid) {
        for (auto& v : out.raw()) v = 1.0 / (1.0 + std::exp(-v));
        return out;
    }
    for (int j = 0; j < out.cols(); ++j) {
        double mx = out(0, j);
        for (int i = 1; i < out.rows(); ++i) mx = std::max(mx, out(i, j));
        double z = 0;
        for (int i = 0; i < out.rows(); ++i) {
            out(i, j) = std::exp(out(i, j) - mx);
            z += out(i, j);
        }
        for (int i = 0; i < out.rows(); ++i) out(i, j) /= z;
    }
    return out;
}

} // namespace detail

// Implements the D-RASP semantics: token/pos one-hots, selector evaluation
// with causal support, aggregation as causal softmax over summed selectors
// (empty sum = uniform prefix weights), per-position element-wise functions,
// projections summed into logits, phi last. p_bits > 0 switches on rounded
// semantics: every aggregate and element-wise output is rounded downward to
// p-bit fixed precision.
inline EvalResult eval(const DRaspProgram& p, const std::vector<int>& tokens, int offset = 0,
                       int p_bits = 0) {
    const int N = (int)tokens.size();
    const int V = p.vocab();
    if (N == 0) throw program_error("eval: empty input");
    if (offset < 0 || offset + N > p.T) throw program_error("eval: offset+len exceeds T");
    for (int tk : tokens)
        if (tk < 0 || tk >= V) throw program_error("eval: token id out of range");

    EvalResult r;
    r.var_values.assign(p.vars.size(), Mat());
    r.sel_values.assign(p.sel_names.size(), Mat());
    r.logit_values.assign(p.logit_names.size(), Mat());

    Mat tok(V, N);
    for (int j = 0; j < N; ++j) tok(tokens[j], j) = 1.0;
    r.var_values[0] = std::move(tok);
    r.var_values[1] = Mat::identity(N);  // pos one-hots in the active window

    auto var_val = [&](int idx) -> const Mat& {
        if (r.var_values[idx].empty()) throw program_error("eval: dangling variable");
        return r.var_values[idx];
    };
    auto is_pos = [&](int idx) { return p.vars[idx].basis == Basis::position; };

    for (const auto& st : p.statements) {
        if (auto* sel = std::get_if<SelectStmt>(&st)) {
            Mat A = slice_axes(sel->A, sel->binary && is_pos(sel->q), is_pos(sel->k), offset, N);
            // -inf entries act as a hard mask: softmax weight exactly zero
            for (auto& v : A.raw())
                if (std::isinf(v) && v < 0) v = -1e30;
            Mat val;
            if (sel->binary) {
                // alpha(i,s) = v_q(i)^T A v_k(s)
                val = matmul_tn(var_val(sel->q), matmul(A, var_val(sel->k)));
            } else {
                Mat row = matmul(A, var_val(sel->k));  // 1 x N
                val = Mat(N, N);
                for (int i = 0; i < N; ++i)
                    for (int s = 0; s < N; ++s) val(i, s) = row(0, s);
            }
            for (int i = 0; i < N; ++i)  // causal support
                for (int s = i + 1; s < N; ++s) val(i, s) = 0.0;
            r.sel_values[sel->out] = std::move(val);
        } else if (auto* agg = std::get_if<AggregateStmt>(&st)) {
            Mat logits(N, N);
            for (int s : agg->selectors) {
                if (r.sel_values[s].empty()) throw program_error("eval: dangling selector");
                logits += r.sel_values[s];
            }
            Mat w(N, N);
            for (int i = 0; i < N; ++i) {
                double mx = logits(i, 0);
                for (int s = 1; s <= i; ++s) mx = std::max(mx, logits(i, s));
                double z = 0;
                for (int s = 0; s <= i; ++s) {
                    w(i, s) = std::exp(logits(i, s) - mx);
                    z += w(i, s);
                }
                for (int s = 0; s <= i; ++s) w(i, s) /= z;
            }
            Mat out = matmul_nt(var_val(agg->value), w);
            if (p_bits > 0) detail::round_down_bits(out, p_bits);
            r.var_values[agg->out] = std::move(out);
        } else if (auto* ew = std::get_if<ElementWiseStmt>(&st)) {
            Mat out;
            if (ew->func.kind == ElementFunc::Kind::blackbox_mlp) {
                Mat x = ew->func.input_const.empty()
                            ? Mat(ew->func.mlp.W1.cols(), N)
                            : Mat(ew->func.input_const.rows(), N);
                for (int j = 0; j < N; ++j)
                    for (int i = 0; i < x.rows(); ++i)
                        x(i, j) = ew->func.input_const.empty() ? 0.0 : ew->func.input_const(i, 0);
                for (size_t k = 0; k < ew->inputs.size(); ++k) {
                    Mat M = slice_axes(ew->func.input_maps[k], false, is_pos(ew->inputs[k]), offset, N);
                    x += matmul(M, var_val(ew->inputs[k]));
                }
                out = mlp_apply_plain(ew->func.mlp, x);
            } else {
                std::vector<Mat> ins;
                for (int v : ew->inputs) ins.push_back(var_val(v));
                out = elementwise_apply_cols(ew->func.prim_id, ew->func.prim_param, ins);
            }
            if (p_bits > 0) detail::round_down_bits(out, p_bits);
            if (out.rows() != p.vars[ew->out].dim)
                throw program_error("eval: element_wise output dim mismatch");
            r.var_values[ew->out] = std::move(out);
        } else if (auto* pr = std::get_if<ProjectStmt>(&st)) {
            Mat contrib;
            if (pr->input >= 0) {
                Mat A = slice_axes(pr->A, false, is_pos(pr->input), offset, N);
                contrib = matmul(A, var_val(pr->input));
            } else {
                contrib = Mat(V, N);
                for (int j = 0; j < N; ++j)
                    for (int i = 0; i < V; ++i) contrib(i, j) = pr->A(i, 0);
            }
            r.logit_values[pr->out] = std::move(contrib);
        } else if (auto* pred = std::get_if<PredictionStmt>(&st)) {
            Mat logits(V, N);
            for (int s : pred->logit_slots) {
                if (r.logit_values[s].empty()) throw program_error("eval: dangling logit slot");
                logits += r.logit_values[s];
            }
            r.logits = logits;
            r.prediction = detail::phi_apply(logits, pred->phi);
        }
    }
    if (r.logits.empty()) throw program_error("eval: program has no prediction");
    if (!r.logits.all_finite()) throw numeric_error("eval: non-finite output");
    return r;
}

inline EvalResult eval_rounded(const DRaspProgram& p, const std::vector<int>& tokens, int offset,
                               int p_bits) {
    if (p_bits < 2) throw program_error("eval_rounded: p_bits must be >= 2");
    return eval(p, tokens, offset, p_bits);
}

inline std::vector<Mat> eval_logits_batch(const DRaspProgram& p,
                                          const std::vector<Instance>& instances) {
    std::vector<Mat> out;
    out.reserve(instances.size());
    for (auto& inst : instances) out.push_back(eval(p, inst.tokens, inst.offset).logits);
    return out;
}

// ---- tape-backed evaluation ----
//
// Used when program tensors are optimized (sparsity / integer phases). The
// overrides map statement index -> leaf tensor standing in for that
// statement's A. Element-wise library primitives get hand-written vjps;
// the discrete ones (harden, is_pure) are piecewise constant and propagate
// zero gradient.

namespace detail {

inline Tensor elementwise_prim_ad(Tape& t, const std::string& id, double param,
                                  std::vector<Tensor> inputs) {
    std::vector<Mat> vals;
    for (auto& x : inputs) vals.push_back(x.val());
    Mat out = elementwise_apply_cols(id, param, vals);
    bool rg = false;
    std::vector<int> parents;
    for (auto& x : inputs) {
        rg = rg || x.requires_grad();
        parents.push_back(x.id);
    }
    if (id == "harden" || id == "is_pure") rg = false;  // zero derivative a.e.

    return t.emplace(std::move(out), rg, parents, [id, param, parents, vals](Tape& t, int self) {
        const Mat& g = t.nodes[self].grad;
        const int n = g.cols();
        if (id == "no_op" || id == "keep_i") {
            int which = id == "no_op" ? 0 : (int)param;
            ops::accum(t, parents[which], g);
            return;
        }
        if (id == "sharpen") {
            const Mat& x = vals[0];
            Mat gx(x.rows(), x.cols());
            for (int j = 0; j < n; ++j) {
                double z = 0;
                std::vector<double> u(x.rows());
                for (int i = 0; i < x.rows(); ++i) {
                    u[i] = std::pow(std::max(x(i, j), 0.0), param);
                    z += u[i];
                }
                if (z <= 0) continue;
                double dot = 0;
                for (int i = 0; i < x.rows(); ++i) dot += g(i, j) * u[i];
                for (int i = 0; i < x.rows(); ++i) {
                    if (x(i, j) <= 0) continue;
                    double du = param * std::pow(x(i, j), param - 1.0);
                    gx(i, j) = (g(i, j) / z - dot / (z * z)) * du;
                }
            }
            ops::accum(t, parents[0], gx);
            return;
        }
        if (id == "balance01") {
            const Mat& x = vals[0];
            Mat gx(x.rows(), x.cols());
            for (int j = 0; j < n; ++j) {
                double x0 = x(NUM_SPECIAL + 0, j), x1 = x(NUM_SPECIAL + 1, j);
                double d10 = x1 - x0, d01 = x0 - x1;
                double da = d10 > 0 ? param * std::pow(d10, param - 1.0) : 0.0;
                double db = d01 > 0 ? param * std::pow(d01, param - 1.0) : 0.0;
                double ga = g(0, j) - g(2, j), gb = g(1, j) - g(2, j);
                gx(NUM_SPECIAL + 1, j) += ga * da - gb * db;
                gx(NUM_SPECIAL + 0, j) += -ga * da + gb * db;
            }
            ops::accum(t, parents[0], gx);
            return;
        }
        if (id == "cartesian") {
            std::vector<int> dims;
            for (auto& v : vals) dims.push_back(v.rows());
            int total = 1;
            for (int d : dims) total *= d;
            std::vector<Mat> gxs;
            for (auto& v : vals) gxs.emplace_back(v.rows(), v.cols());
            for (int j = 0; j < n; ++j) {
                // recompute mins and z
                std::vector<double> m(total);
                std::vector<int> amin_k(total), amin_i(total);
                double z = 0;
                for (int flat = 0; flat < total; ++flat) {
                    int rem = flat;
                    double mn = 1e300;
                    int bk = 0, bi = 0;
                    for (int k = (int)dims.size() - 1; k >= 0; --k) {
                        int idx = rem % dims[k];
                        rem /= dims[k];
                        if (vals[k](idx, j) < mn) {
                            mn = vals[k](idx, j);
                            bk = k;
                            bi = idx;
                        }
                    }
                    m[flat] = mn;
                    amin_k[flat] = bk;
                    amin_i[flat] = bi;
                    z += mn;
                }
                if (z <= 0) continue;
                double dot = 0;
                for (int flat = 0; flat < total; ++flat) dot += g(flat, j) * m[flat];
                for (int flat = 0; flat < total; ++flat) {
                    double dm = g(flat, j) / z - dot / (z * z);
                    gxs[amin_k[flat]](amin_i[flat], j) += dm;
                }
            }
            for (size_t k = 0; k < parents.size(); ++k) ops::accum(t, parents[k], gxs[k]);
            return;
        }
    });
}

} // namespace detail

inline Tensor eval_ad(Tape& t, const DRaspProgram& p, const std::vector<int>& tokens, int offset,
                      const std::map<int, Tensor>& tensor_overrides = {}) {
    using namespace ops;
    const int N = (int)tokens.size();
    const int V = p.vocab();
    if (offset < 0 || offset + N > p.T) throw program_error("eval_ad: offset+len exceeds T");

    std::vector<Tensor> var_vals(p.vars.size());
    std::vector<Tensor> sel_vals(p.sel_names.size());
    std::vector<Tensor> logit_vals(p.logit_names.size());
    std::vector<char> have_var(p.vars.size(), 0), have_sel(p.sel_names.size(), 0),
        have_logit(p.logit_names.size(), 0);

    Mat tok(V, N);
    for (int j = 0; j < N; ++j) tok(tokens[j], j) = 1.0;
    var_vals[0] = t.constant(tok);
    var_vals[1] = t.constant(Mat::identity(N));
    have_var[0] = have_var[1] = 1;

    auto is_pos = [&](int idx) { return p.vars[idx].basis == Basis::position; };
    // slicing an override leaf is implemented as constant 0/1 selection mats
    auto sliced = [&](Tensor A, bool row_pos, bool col_pos) -> Tensor {
        if (row_pos) {
            Mat R(N, A.val().rows());
            for (int i = 0; i < N; ++i) R(i, offset + i) = 1.0;
            A = matmul(t.constant(R), A);
        }
        if (col_pos) {
            Mat C(A.val().cols(), N);
            for (int i = 0; i < N; ++i) C(offset + i, i) = 1.0;
            A = matmul(A, t.constant(C));
        }
        return A;
    };

    Tensor prediction_logits;
    bool have_pred = false;
    for (size_t si = 0; si < p.statements.size(); ++si) {
        const Statement& st = p.statements[si];
        auto ov = tensor_overrides.find((int)si);
        if (auto* sel = std::get_if<SelectStmt>(&st)) {
            Tensor A = ov != tensor_overrides.end() ? ov->second : t.constant(sel->A);
            A = sliced(A, sel->binary && is_pos(sel->q), is_pos(sel->k));
            Tensor val;
            if (sel->binary) {
                val = matmul(transpose(var_vals[sel->q]), matmul(A, var_vals[sel->k]));
            } else {
                Mat ones(N, 1, 1.0);
                val = matmul(t.constant(ones), matmul(A, var_vals[sel->k]));
            }
            // zero the upper triangle with a constant mask
            Mat mask(N, N);
            for (int i = 0; i < N; ++i)
                for (int s = 0; s <= i; ++s) mask(i, s) = 1.0;
            sel_vals[sel->out] = hadamard(val, t.constant(mask));
            have_sel[sel->out] = 1;
        } else if (auto* agg = std::get_if<AggregateStmt>(&st)) {
            Tensor logits = t.constant(Mat(N, N));
            for (int s : agg->selectors) logits = add(logits, sel_vals[s]);
            Tensor w = softmax_causal(logits);
            var_vals[agg->out] = matmul(var_vals[agg->value], transpose(w));
            have_var[agg->out] = 1;
        } else if (auto* ew = std::get_if<ElementWiseStmt>(&st)) {
            if (ew->func.kind == ElementFunc::Kind::blackbox_mlp) {
                Tensor x = t.constant([&] {
                    Mat c(ew->func.input_const.rows(), N);
                    for (int j = 0; j < N; ++j)
                        for (int i = 0; i < c.rows(); ++i) c(i, j) = ew->func.input_const(i, 0);
                    return c;
                }());
                for (size_t k = 0; k < ew->inputs.size(); ++k) {
                    Mat M = slice_axes(ew->func.input_maps[k], false, is_pos(ew->inputs[k]),
                                       offset, N);
                    x = add(x, matmul(t.constant(M), var_vals[ew->inputs[k]]));
                }
                TensorMlp tm{t.constant(ew->func.mlp.W1), t.constant(ew->func.mlp.b1),
                             t.constant(ew->func.mlp.W2), t.constant(ew->func.mlp.b2)};
                var_vals[ew->out] = mlp_apply_ad(tm, x);
            } else {
                std::vector<Tensor> ins;
                for (int v : ew->inputs) ins.push_back(var_vals[v]);
                var_vals[ew->out] =
                    detail::elementwise_prim_ad(t, ew->func.prim_id, ew->func.prim_param, ins);
            }
            have_var[ew->out] = 1;
        } else if (auto* pr = std::get_if<ProjectStmt>(&st)) {
            Tensor A = ov != tensor_overrides.end() ? ov->second : t.constant(pr->A);
            if (pr->input >= 0) {
                A = sliced(A, false, is_pos(pr->input));
                logit_vals[pr->out] = matmul(A, var_vals[pr->input]);
            } else {
                Mat ones(1, N, 1.0);
                logit_vals[pr->out] = matmul(A, t.constant(ones));
            }
            have_logit[pr->out] = 1;
        } else if (auto* pred = std::get_if<PredictionStmt>(&st)) {
            Tensor logits = t.constant(Mat(V, N));
            for (int s : pred->logit_slots) logits = add(logits, logit_vals[s]);
            prediction_logits = logits;
            have_pred = true;
        }
    }
    if (!have_pred) throw program_error("eval_ad: no prediction statement");
    return prediction_logits;
}

} // namespace drasp
