#pragma once

#include <string>
#include <vector>

#include "drasp/interp.hpp"
#include "drasp/program.hpp"
#include "drasp/transformer.hpp"

namespace drasp {

struct translation_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Exact transcription of the line-count recurrence (selects + aggregates per
// head, element-wise lines, projections, one bias line, one prediction).
inline long long predicted_size(int L, int H, bool split_mlps) {
    if (L < 1 || H < 1) throw translation_error("predicted_size: L,H >= 1");
    long long num_v = 2, num_line = 0;
    for (int i = 0; i < L; ++i) {
        num_line += (num_v * num_v + num_v) * H;
        num_v += num_v * H;
        if (split_mlps) {
            num_line += num_v;
            num_v += num_v;
        } else {
            num_line += 1;
            num_v += 1;
        }
    }
    num_line += num_v;  // one projection per top-level variable
    num_line += 1;      // bias term
    num_line += 1;      // prediction
    return num_line;
}

struct TranslationArtifacts {
    DRaspProgram program;

    // residual recovery: y^(l) = sum_i C_i * value(v_i) + constant * 1^T
    struct LayerRecovery {
        std::vector<int> var_indices;
        std::vector<Mat> coeffs;   // d x d(v); position axes at full T
        Mat constant;              // d x 1
    };
    std::vector<LayerRecovery> recovery;  // layers 0..L

    // selector bookkeeping per (layer, head) for the selector-sum identity
    std::vector<std::vector<std::vector<int>>> head_selectors;  // [l][h] -> selector ids

    long long line_count = 0;
    bool split_mlps = false;
};

// Translates an LN-absorbed transformer into an exactly equivalent D-RASP
// program over path variables. Each head contributes one select per ordered
// pair of existing variables and one aggregate per existing variable; each
// layer one element-wise op (or one per variable when splitting); each
// top-level variable one projection, plus the bias line and the prediction.
//
// Attention biases enter as key-only terms (q b + Q c)^T K v_k(s). Because
// the token variable is one-hot (its columns sum to one), those rows are
// folded into the q=token selector of the same head: adding 1 * brow to that
// A reproduces the unary term exactly while keeping the statement count of
// the bias-free construction. Query-side constants shift whole softmax rows
// and are dropped.
inline TranslationArtifacts translate(const TransformerWeights& w,
                                      const std::vector<std::string>& alphabet,
                                      bool split_mlps = false, long long line_cap = 100000) {
    if (!w.absorbed) throw translation_error("translate: absorb_ln must run first");
    if (NUM_SPECIAL + (int)alphabet.size() != w.vocab)
        throw translation_error("translate: alphabet size mismatch");

    long long predicted = predicted_size(w.L, w.H, split_mlps);
    if (predicted > line_cap)
        throw translation_error("translate: program would have " + std::to_string(predicted) +
                                " lines, above the cap of " + std::to_string(line_cap));

    TranslationArtifacts art;
    art.split_mlps = split_mlps;
    art.program = DRaspProgram::make(alphabet, w.T, w.objective);
    DRaspProgram& p = art.program;

    struct Entry {
        int var = -1;     // program var index
        Mat C;            // d x d(v)
        int layer = 0;
    };
    std::vector<Entry> active;
    active.push_back({0, w.E, 0});
    active.push_back({1, w.P, 0});
    Mat c(w.d, 1);  // residual constant

    art.head_selectors.assign(w.L, {});
    art.recovery.resize(w.L + 1);
    auto snapshot_recovery = [&](int l) {
        auto& rec = art.recovery[l];
        for (auto& e : active) {
            rec.var_indices.push_back(e.var);
            rec.coeffs.push_back(e.C);
        }
        rec.constant = c;
    };
    snapshot_recovery(0);

    for (int l = 0; l < w.L; ++l) {
        const auto& lay = w.layers[l];
        std::vector<Entry> born;
        art.head_selectors[l].resize(w.H);
        for (int h = 0; h < w.H; ++h) {
            const auto& hw = lay.heads[h];
            // per-variable key/query images
            std::vector<Mat> qimg, kimg;
            for (auto& e : active) {
                qimg.push_back(matmul(hw.Q, e.C));
                kimg.push_back(matmul(hw.K, e.C));
            }
            Mat qconst = matmul(hw.Q, c) + hw.qb;  // d_h x 1

            std::vector<int>& sels = art.head_selectors[l][h];
            for (size_t r = 0; r < active.size(); ++r) {
                for (size_t s = 0; s < active.size(); ++s) {
                    Mat A = matmul_tn(qimg[r], kimg[s]);
                    if (active[r].var == 0) {
                        Mat brow = matmul_tn(qconst, kimg[s]);  // 1 x d(s)
                        for (int i = 0; i < A.rows(); ++i)
                            for (int j = 0; j < A.cols(); ++j) A(i, j) += brow(0, j);
                    }
                    std::string nm = "sel_" + std::to_string(l) + "_" + std::to_string(h) + "_" +
                                     p.vars[active[r].var].name + "_" + p.vars[active[s].var].name;
                    int sid = p.add_selector(nm);
                    SelectStmt st;
                    st.out = sid;
                    st.binary = true;
                    st.q = active[r].var;
                    st.k = active[s].var;
                    st.A = std::move(A);
                    p.statements.push_back(std::move(st));
                    sels.push_back(sid);
                }
            }
            for (auto& e : active) {
                VarInfo vi;
                vi.name = "head_" + std::to_string(l) + std::to_string(h) + "-" + p.vars[e.var].name;
                vi.dim = p.vars[e.var].dim;
                vi.basis = p.vars[e.var].basis;
                vi.layer = l;
                vi.head = h;
                int nv = p.add_var(vi);
                AggregateStmt st;
                st.out = nv;
                st.selectors = sels;
                st.value = e.var;
                p.statements.push_back(std::move(st));
                born.push_back({nv, matmul(hw.V, e.C), l + 1});
            }
        }
        for (auto& b : born) active.push_back(std::move(b));

        Mat cy = c;
        for (int h = 0; h < w.H; ++h)
            cy += matmul(lay.heads[h].V, c) + lay.heads[h].vb;

        if (!split_mlps) {
            ElementWiseStmt st;
            for (auto& e : active) {
                st.inputs.push_back(e.var);
                st.func.input_maps.push_back(e.C);
            }
            st.func.kind = ElementFunc::Kind::blackbox_mlp;
            st.func.mlp = lay.mlp;
            st.func.input_const = cy;
            VarInfo vi;
            vi.name = "mlp_" + std::to_string(l);
            vi.dim = w.d;
            vi.basis = Basis::residual;
            vi.layer = l;
            int nv = p.add_var(vi);
            st.out = nv;
            p.statements.push_back(std::move(st));
            active.push_back({nv, Mat::identity(w.d), l + 1});
        } else {
            // structural split: one single-input copy of the MLP per variable
            std::vector<Entry> split_born;
            for (auto& e : active) {
                ElementWiseStmt st;
                st.inputs = {e.var};
                st.func.kind = ElementFunc::Kind::blackbox_mlp;
                st.func.mlp = lay.mlp;
                st.func.input_maps = {e.C};
                st.func.input_const = cy;
                VarInfo vi;
                vi.name = "mlp_" + std::to_string(l) + "-" + p.vars[e.var].name;
                vi.dim = w.d;
                vi.basis = Basis::residual;
                vi.layer = l;
                int nv = p.add_var(vi);
                st.out = nv;
                p.statements.push_back(std::move(st));
                split_born.push_back({nv, Mat::identity(w.d), l + 1});
            }
            for (auto& b : split_born) active.push_back(std::move(b));
        }
        c = cy;
        snapshot_recovery(l + 1);
    }

    for (auto& e : active) {
        ProjectStmt st;
        st.input = e.var;
        st.A = matmul(w.U, e.C);
        st.out = p.add_logit_slot("proj_" + p.vars[e.var].name);
        p.statements.push_back(std::move(st));
    }
    {
        ProjectStmt st;
        st.input = -1;
        st.A = matmul(w.U, c) + w.lm_bias;
        st.out = p.add_logit_slot("proj_bias");
        p.statements.push_back(std::move(st));
    }
    {
        PredictionStmt st;
        st.phi = w.objective == Objective::language_model ? PredictionStmt::Phi::softmax
                                                          : PredictionStmt::Phi::sigmoid;
        for (int s = 0; s < (int)p.logit_names.size(); ++s) st.logit_slots.push_back(s);
        p.statements.push_back(std::move(st));
    }

    art.line_count = p.line_count();
    if (art.line_count != predicted)
        throw translation_error("translate: emitted " + std::to_string(art.line_count) +
                                " statements but formula predicts " + std::to_string(predicted));
    p.metadata["kind"] = "translation";
    p.metadata["split_mlps"] = split_mlps;
    p.validate();
    return art;
}

// Per-layer max abs error of the linear residual recovery against the
// absorbed model's actual residual stream.
inline std::vector<double> verify_recovery(const TranslationArtifacts& art,
                                           const TransformerWeights& w,
                                           const std::vector<Instance>& instances) {
    std::vector<double> max_err(w.L + 1, 0.0);
    for (const auto& inst : instances) {
        ForwardTrace tr = forward_trace(w, inst.tokens, inst.offset, LnMode::none);
        EvalResult ev = eval(art.program, inst.tokens, inst.offset);
        const int N = inst.length();
        for (int l = 0; l <= w.L; ++l) {
            const auto& rec = art.recovery[l];
            Mat yhat(w.d, N);
            for (int j = 0; j < N; ++j)
                for (int i = 0; i < w.d; ++i) yhat(i, j) = rec.constant(i, 0);
            for (size_t k = 0; k < rec.var_indices.size(); ++k) {
                int v = rec.var_indices[k];
                bool pos = art.program.vars[v].basis == Basis::position;
                Mat C = slice_axes(rec.coeffs[k], false, pos, inst.offset, N);
                yhat += matmul(C, ev.var_values[v]);
            }
            Mat diff = yhat - tr.residuals[l];
            max_err[l] = std::max(max_err[l], diff.max_abs());
        }
    }
    return max_err;
}

} // namespace drasp
