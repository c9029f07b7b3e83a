#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "drasp/prune_graph.hpp"
#include "drasp/tasks.hpp"
#include "drasp/tensor.hpp"
#include "drasp/transformer.hpp"

namespace drasp {

// Gated forward passes for the pruning stages, built on the tape so that the
// objective is differentiable through gates, ablations, receiver biases,
// split-MLP weights and LN constants.
//
// Gate modes:
//   hard    - alpha = round(sigmoid(theta~)), constants; the finalized model
//   relaxed - alpha = sigmoid(theta~), fully differentiable (used by the
//             gradient checker)
//   sampled - uniform gradient sampling: with probability
//             max(0.1, 1 - |tanh(theta~)|) draw alpha ~ Unif(0,1) and give
//             theta~ the gradient of alpha; otherwise alpha is the rounded
//             gate. Ablations only learn on alpha = 0 examples.
enum class GateMode { hard, relaxed, sampled };

struct PruneLeaves {
    std::vector<Tensor> theta_edge;    // aligned with g.edges (invalid if frozen)
    std::vector<Tensor> theta_qk;      // aligned with g.qk_terms
    std::vector<Tensor> theta_key;     // aligned with g.key_terms
    std::vector<Tensor> ablation;      // aligned with g.senders
    std::vector<Tensor> rbias;         // aligned with g.receivers
    std::vector<Tensor> key_bq;        // aligned with g.key_terms
    std::map<std::string, TensorMlp> split;
};

struct GatedTrace {
    Tensor logits;
    std::map<std::string, Tensor> att_logits;  // per "l,h"
};

class GatedForward {
public:
    GatedForward(Tape& tape, ComputationGraph& g, const TransformerWeights& w, GateMode mode,
                 bool trainable, Rng* rng = nullptr)
        : t_(tape), g_(g), w_(w), mode_(mode), rng_(rng) {
        bool train = trainable;
        auto mk1 = [&](double v) { return train ? t_.leaf(Mat(1, 1, {v})) : t_.constant(Mat(1, 1, {v})); };
        for (auto& e : g.edges)
            leaves_.theta_edge.push_back(e.trainable ? mk1(e.theta_tilde)
                                                     : t_.constant(Mat(1, 1, {e.theta_tilde})));
        for (auto& q : g.qk_terms) leaves_.theta_qk.push_back(mk1(q.theta_tilde));
        for (auto& k : g.key_terms) leaves_.theta_key.push_back(mk1(k.theta_tilde));
        bool train_ablation = train && g.stage <= 2;
        for (auto& a : g.ablation)
            leaves_.ablation.push_back(train_ablation ? t_.leaf(a) : t_.constant(a));
        bool train_bias = train && g.stage == 2;
        for (auto& b : g.receiver_bias)
            leaves_.rbias.push_back(train_bias ? t_.leaf(b) : t_.constant(b));
        bool train_bq = train && g.stage == 3;
        for (auto& k : g.key_terms)
            leaves_.key_bq.push_back(train_bq ? t_.leaf(k.bq) : t_.constant(k.bq));
        bool train_split = train && g.stage == 2;
        for (auto& [key, mw] : g.split_weights) {
            auto mk = [&](const Mat& m) { return train_split ? t_.leaf(m) : t_.constant(m); };
            leaves_.split.emplace(key, TensorMlp{mk(mw.W1), mk(mw.b1), mk(mw.W2), mk(mw.b2)});
        }
    }

    // adopt externally created leaves (same order as flat_params)
    GatedForward(Tape& tape, ComputationGraph& g, const TransformerWeights& w, GateMode mode,
                 const std::vector<Tensor>& flat)
        : t_(tape), g_(g), w_(w), mode_(mode), rng_(nullptr) {
        size_t i = 0;
        for (auto& e : g.edges)
            leaves_.theta_edge.push_back(e.trainable ? flat[i++]
                                                     : t_.constant(Mat(1, 1, {e.theta_tilde})));
        for (size_t k = 0; k < g.qk_terms.size(); ++k) leaves_.theta_qk.push_back(flat[i++]);
        for (size_t k = 0; k < g.key_terms.size(); ++k) leaves_.theta_key.push_back(flat[i++]);
        if (g.stage <= 2)
            for (size_t k = 0; k < g.ablation.size(); ++k) leaves_.ablation.push_back(flat[i++]);
        else
            for (auto& a : g.ablation) leaves_.ablation.push_back(t_.constant(a));
        if (g.stage == 2)
            for (size_t k = 0; k < g.receiver_bias.size(); ++k) leaves_.rbias.push_back(flat[i++]);
        else
            for (auto& b : g.receiver_bias) leaves_.rbias.push_back(t_.constant(b));
        if (g.stage == 3)
            for (size_t k = 0; k < g.key_terms.size(); ++k) leaves_.key_bq.push_back(flat[i++]);
        else
            for (auto& k : g.key_terms) leaves_.key_bq.push_back(t_.constant(k.bq));
        for (auto& [key, mw] : g.split_weights) {
            if (g.stage == 2) {
                leaves_.split.emplace(key, TensorMlp{flat[i], flat[i + 1], flat[i + 2], flat[i + 3]});
                i += 4;
            } else {
                leaves_.split.emplace(key, TensorMlp{t_.constant(mw.W1), t_.constant(mw.b1),
                                                     t_.constant(mw.W2), t_.constant(mw.b2)});
            }
        }
        if (i != flat.size()) throw prune_error("flat leaf count mismatch");
    }

    // the trainable parameters in adoption order
    static std::vector<std::pair<std::string, Mat>> flat_params(const ComputationGraph& g) {
        std::vector<std::pair<std::string, Mat>> out;
        int idx = 0;
        for (auto& e : g.edges)
            if (e.trainable)
                out.push_back({"theta_edge" + std::to_string(idx++), Mat(1, 1, {e.theta_tilde})});
        idx = 0;
        for (auto& q : g.qk_terms)
            out.push_back({"theta_qk" + std::to_string(idx++), Mat(1, 1, {q.theta_tilde})});
        idx = 0;
        for (auto& k : g.key_terms)
            out.push_back({"theta_key" + std::to_string(idx++), Mat(1, 1, {k.theta_tilde})});
        if (g.stage <= 2) {
            idx = 0;
            for (auto& a : g.ablation) out.push_back({"ablation" + std::to_string(idx++), a});
        }
        if (g.stage == 2) {
            idx = 0;
            for (auto& b : g.receiver_bias) out.push_back({"rbias" + std::to_string(idx++), b});
        }
        if (g.stage == 3) {
            idx = 0;
            for (auto& k : g.key_terms) out.push_back({"key_bq" + std::to_string(idx++), k.bq});
        }
        if (g.stage == 2)
            for (auto& [key, mw] : g.split_weights) {
                out.push_back({key + ".W1", mw.W1});
                out.push_back({key + ".b1", mw.b1});
                out.push_back({key + ".W2", mw.W2});
                out.push_back({key + ".b2", mw.b2});
            }
        return out;
    }

    PruneLeaves& leaves() { return leaves_; }

    GatedTrace run(const std::vector<int>& tokens, int offset) {
        tokens_ = &tokens;
        offset_ = offset;
        n_ = (int)tokens.size();
        chain_memo_.clear();
        att_memo_.clear();
        atom_out_.clear();
        GatedTrace tr;
        if (g_.stage <= 1)
            tr = run_component();
        else
            tr = run_path();
        return tr;
    }

    // value of a chain sender's output; valid after run()
    Mat chain_value(const Sender& s) { return chain_out(s).val(); }

private:
    using T = Tensor;

    Tensor theta_gate(Tensor theta_leaf, double theta_val, bool trainable) {
        using namespace ops;
        switch (mode_) {
            case GateMode::hard: {
                double a = 1.0 / (1.0 + std::exp(-theta_val)) >= 0.5 ? 1.0 : 0.0;
                return t_.constant(Mat(1, 1, {a}));
            }
            case GateMode::relaxed: return sigmoid(theta_leaf);
            case GateMode::sampled: {
                if (!trainable || !rng_) return theta_gate(theta_leaf, theta_val, false);
                double p_sample = std::max(0.1, 1.0 - std::fabs(std::tanh(theta_val)));
                if (rng_->coin(p_sample)) {
                    double u = rng_->uniform();
                    // value u, gradient of sigmoid(theta~)
                    Tensor s = sigmoid(theta_leaf);
                    return add(t_.constant(Mat(1, 1, {u - s.val()(0, 0)})), s);
                }
                double a = 1.0 / (1.0 + std::exp(-theta_val)) >= 0.5 ? 1.0 : 0.0;
                return t_.constant(Mat(1, 1, {a}));
            }
        }
        return t_.constant(Mat(1, 1, {1.0}));
    }

    Tensor tile_col(Tensor col) {
        Mat ones(1, n_, 1.0);
        return ops::matmul(col, t_.constant(ones));
    }

    // alpha * out + (1 - alpha) * a*; ablation learns only when alpha is the
    // hard zero
    Tensor mix_edge(int edge_idx, Tensor sender_out) {
        using namespace ops;
        const Edge& e = g_.edges[edge_idx];
        Tensor theta = leaves_.theta_edge[edge_idx];
        Tensor alpha = theta_gate(theta, e.theta_tilde, e.trainable);
        double aval = alpha.val()(0, 0);
        if (mode_ == GateMode::hard || mode_ == GateMode::sampled) {
            if (aval == 1.0 && !alpha.requires_grad()) return sender_out;
            if (aval == 0.0 && !alpha.requires_grad()) return tile_col(leaves_.ablation[e.sender]);
        }
        Tensor abl = leaves_.ablation[e.sender];
        if (mode_ == GateMode::sampled && alpha.requires_grad()) abl = detach(abl);
        Tensor one = t_.constant(Mat(1, 1, {1.0}));
        return add(scale_by(sender_out, alpha), scale_by(tile_col(abl), sub(one, alpha)));
    }

    Tensor site(Tensor x, int receiver_idx) {
        using namespace ops;
        if (g_.ln_mode == LnMode::none) return x;
        const Receiver& rc = g_.receivers[receiver_idx];
        const LnSite* s = nullptr;
        if (rc.kind == Receiver::Kind::unembed) s = &w_.ln_f;
        else if (rc.kind == Receiver::Kind::mlp) s = &w_.layers[rc.layer].ln2;
        else s = &w_.layers[rc.layer].ln1;
        return layer_norm_cols(x, t_.constant(s->gamma), t_.constant(s->beta), w_.ln_eps);
    }

    Tensor receiver_input(int r) {
        using namespace ops;
        Tensor x = g_.stage >= 2 ? tile_col(leaves_.rbias[r]) : t_.constant(Mat(w_.d, n_));
        for (int ei : g_.edges_into(r)) x = add(x, mix_edge(ei, sender_out(g_.edges[ei].sender)));
        return x;
    }

    // ---- stage 0/1 ----

    Tensor sender_out(int si) {
        auto it = atom_out_.find(si);
        if (it != atom_out_.end()) return it->second;
        const Sender& s = g_.senders[si];
        Tensor out;
        switch (s.kind) {
            case Sender::Kind::tok: out = tok_embed(); break;
            case Sender::Kind::pos: out = pos_embed(); break;
            case Sender::Kind::chain: out = chain_out(s); break;
            default: throw prune_error("sender not computed yet: " + s.str());
        }
        atom_out_.emplace(si, out);
        return out;
    }

    Tensor tok_embed() {
        Mat e(w_.d, n_);
        for (int j = 0; j < n_; ++j)
            for (int i = 0; i < w_.d; ++i) e(i, j) = w_.E(i, (*tokens_)[j]);
        return t_.constant(e);
    }
    Tensor pos_embed() {
        Mat p(w_.d, n_);
        for (int j = 0; j < n_; ++j)
            for (int i = 0; i < w_.d; ++i) p(i, j) = w_.P(i, offset_ + j);
        return t_.constant(p);
    }

    GatedTrace run_component() {
        using namespace ops;
        GatedTrace tr;
        for (int l = 0; l < w_.L; ++l) {
            for (int h = 0; h < w_.H; ++h) {
                const auto& hw = w_.layers[l].heads[h];
                int rq = g_.find_receiver("q_" + std::to_string(l) + std::to_string(h));
                int rk = g_.find_receiver("k_" + std::to_string(l) + std::to_string(h));
                int rv = g_.find_receiver("v_" + std::to_string(l) + std::to_string(h));
                Tensor q = add_colvec(matmul(t_.constant(hw.Q), site(receiver_input(rq), rq)),
                                      t_.constant(hw.qb));
                Tensor k = add_colvec(matmul(t_.constant(hw.K), site(receiver_input(rk), rk)),
                                      t_.constant(hw.kb));
                Tensor v = add_colvec(matmul(t_.constant(hw.V), site(receiver_input(rv), rv)),
                                      t_.constant(hw.vb));
                Tensor att_logits = matmul(transpose(q), k);
                tr.att_logits.emplace(std::to_string(l) + "," + std::to_string(h), att_logits);
                Tensor att = softmax_causal(att_logits);
                int si = g_.find_sender("head_" + std::to_string(l) + std::to_string(h));
                atom_out_.emplace(si, matmul(v, transpose(att)));
            }
            int rm = g_.find_receiver("mlp_" + std::to_string(l));
            TensorMlp tm{t_.constant(w_.layers[l].mlp.W1), t_.constant(w_.layers[l].mlp.b1),
                         t_.constant(w_.layers[l].mlp.W2), t_.constant(w_.layers[l].mlp.b2)};
            int si = g_.find_sender("mlp_" + std::to_string(l));
            atom_out_.emplace(si, mlp_apply_ad(tm, site(receiver_input(rm), rm)));
        }
        int ru = g_.find_receiver("unembed");
        tr.logits = add_colvec(matmul(t_.constant(w_.U), site(receiver_input(ru), ru)),
                               t_.constant(w_.lm_bias));
        return tr;
    }

    // ---- stages 2/3: chains ----

    Tensor attention(int l, int h) {
        using namespace ops;
        std::string key = std::to_string(l) + "," + std::to_string(h);
        auto it = att_memo_.find(key);
        if (it != att_memo_.end()) return it->second;
        const auto& hw = w_.layers[l].heads[h];
        Tensor logits;
        if (g_.stage == 2) {
            int rq = g_.find_receiver("q_" + std::to_string(l) + std::to_string(h));
            int rk = g_.find_receiver("k_" + std::to_string(l) + std::to_string(h));
            Tensor q = add_colvec(matmul(t_.constant(hw.Q), receiver_input(rq)), t_.constant(hw.qb));
            Tensor k = add_colvec(matmul(t_.constant(hw.K), receiver_input(rk)), t_.constant(hw.kb));
            logits = matmul(transpose(q), k);
        } else {
            logits = t_.constant(Mat(n_, n_));
            for (size_t qi = 0; qi < g_.qk_terms.size(); ++qi) {
                const QkTerm& term = g_.qk_terms[qi];
                if (term.layer != l || term.head != h) continue;
                Tensor q = matmul(t_.constant(hw.Q), chain_out(g_.senders[term.q_sender]));
                Tensor k = matmul(t_.constant(hw.K), chain_out(g_.senders[term.k_sender]));
                Tensor prod = matmul(transpose(q), k);
                Tensor alpha = theta_gate(leaves_.theta_qk[qi], term.theta_tilde, true);
                logits = add(logits, scale_by(prod, alpha));
            }
            for (size_t ki = 0; ki < g_.key_terms.size(); ++ki) {
                const KeyOnlyTerm& term = g_.key_terms[ki];
                if (term.layer != l || term.head != h) continue;
                Tensor k = matmul(t_.constant(hw.K), chain_out(g_.senders[term.k_sender]));
                Tensor row = matmul(transpose(leaves_.key_bq[ki]), k);  // 1 x N
                Tensor full = matmul(t_.constant(Mat(n_, 1, 1.0)), row);
                Tensor alpha = theta_gate(leaves_.theta_key[ki], term.theta_tilde, true);
                logits = add(logits, scale_by(full, alpha));
            }
        }
        tr_att_[key] = logits;
        Tensor att = softmax_causal(logits);
        att_memo_.emplace(key, att);
        return att;
    }

    // the edge that gates this hop: (prefix -> v_lh) for a head hop,
    // (prefix -> mlp_l) for a split-MLP hop
    int hop_edge(const Sender& prefix, const PathUnit& hop) {
        std::string rkey = hop.is_mlp
                               ? "mlp_" + std::to_string(hop.layer)
                               : "v_" + std::to_string(hop.layer) + std::to_string(hop.head);
        int r = g_.find_receiver(rkey);
        if (r < 0) return -1;
        int si = g_.find_sender(prefix.str());
        if (si < 0) return -1;
        for (int ei : g_.edges_into(r))
            if (g_.edges[ei].sender == si) return ei;
        return -1;
    }

    Tensor chain_out(const Sender& s) {
        using namespace ops;
        std::string key = s.str();
        auto it = chain_memo_.find(key);
        if (it != chain_memo_.end()) return it->second;
        Tensor out;
        if (s.units.empty()) {
            switch (s.kind == Sender::Kind::chain ? (s.src == Sender::ChainSrc::tok   ? 0
                                                     : s.src == Sender::ChainSrc::pos ? 1
                                                                                      : 2)
                                                  : 3) {
                case 0: out = tok_embed(); break;
                case 1: out = pos_embed(); break;
                case 2: {
                    int rm = g_.find_receiver("mlp_" + std::to_string(s.src_layer));
                    TensorMlp tm{t_.constant(w_.layers[s.src_layer].mlp.W1),
                                 t_.constant(w_.layers[s.src_layer].mlp.b1),
                                 t_.constant(w_.layers[s.src_layer].mlp.W2),
                                 t_.constant(w_.layers[s.src_layer].mlp.b2)};
                    out = mlp_apply_ad(tm, receiver_input(rm));
                    break;
                }
                default: throw prune_error("chain_out on non-chain sender");
            }
        } else {
            Sender prefix = s;
            PathUnit last = prefix.units.back();
            prefix.units.pop_back();
            Tensor base = chain_out(prefix);
            // extending a path is itself a gated edge of the graph
            int ei = hop_edge(prefix, last);
            if (ei >= 0) base = mix_edge(ei, base);
            if (last.is_mlp) {
                auto lit = leaves_.split.find(s.str());
                if (lit == leaves_.split.end())
                    throw prune_error("missing split weights for " + s.str());
                out = mlp_apply_ad(lit->second, base);
            } else {
                const auto& hw = w_.layers[last.layer].heads[last.head];
                Tensor att = attention(last.layer, last.head);
                out = matmul(matmul(t_.constant(hw.V), base), transpose(att));
            }
        }
        chain_memo_.emplace(key, out);
        return out;
    }

    GatedTrace run_path() {
        using namespace ops;
        GatedTrace tr;
        int ru = g_.find_receiver("unembed");
        tr.logits =
            add_colvec(matmul(t_.constant(w_.U), receiver_input(ru)), t_.constant(w_.lm_bias));
        tr.att_logits = tr_att_;
        return tr;
    }

    Tape& t_;
    ComputationGraph& g_;
    const TransformerWeights& w_;
    GateMode mode_;
    Rng* rng_;
    PruneLeaves leaves_;

    const std::vector<int>* tokens_ = nullptr;
    int offset_ = 0, n_ = 0;
    std::map<int, Tensor> atom_out_;
    std::map<std::string, Tensor> chain_memo_, att_memo_, tr_att_;
};

// Plain-arithmetic hard-mode forward: the finalized pruned model without
// tape machinery. Mirrors GatedForward's semantics at alpha = round(sigmoid)
// and is checked against it in the tests.
class HardForward {
public:
    HardForward(const ComputationGraph& g, const TransformerWeights& w) : g_(g), w_(w) {}

    Mat run(const std::vector<int>& tokens, int offset) {
        tokens_ = &tokens;
        offset_ = offset;
        n_ = (int)tokens.size();
        chain_memo_.clear();
        att_memo_.clear();
        atom_out_.clear();
        int ru = g_.find_receiver("unembed");
        if (g_.stage <= 1) {
            for (int l = 0; l < w_.L; ++l) {
                for (int h = 0; h < w_.H; ++h) compute_head_atom(l, h);
                compute_mlp_atom(l);
            }
        }
        return detail::add_colvec_plain(matmul(w_.U, site(receiver_input(ru), ru)), w_.lm_bias);
    }

private:
    static bool open(double tt) { return 1.0 / (1.0 + std::exp(-tt)) >= 0.5; }

    Mat tile(const Mat& col) const {
        Mat out(col.rows(), n_);
        for (int j = 0; j < n_; ++j)
            for (int i = 0; i < col.rows(); ++i) out(i, j) = col(i, 0);
        return out;
    }

    Mat site(Mat x, int r) const {
        if (g_.ln_mode == LnMode::none) return x;
        const Receiver& rc = g_.receivers[r];
        const LnSite* s = rc.kind == Receiver::Kind::unembed ? &w_.ln_f
                          : rc.kind == Receiver::Kind::mlp   ? &w_.layers[rc.layer].ln2
                                                             : &w_.layers[rc.layer].ln1;
        return detail::ln_exact_plain(x, *s, w_.ln_eps);
    }

    Mat receiver_input(int r) {
        Mat x = g_.stage >= 2 && !g_.receiver_bias.empty() ? tile(g_.receiver_bias[r])
                                                           : Mat(w_.d, n_);
        for (int ei : g_.edges_into(r)) {
            const Edge& e = g_.edges[ei];
            if (open(e.theta_tilde)) x += sender_out(e.sender);
            else x += tile(g_.ablation[e.sender]);
        }
        return x;
    }

    Mat sender_out(int si) {
        auto it = atom_out_.find(si);
        if (it != atom_out_.end()) return it->second;
        const Sender& s = g_.senders[si];
        Mat out;
        switch (s.kind) {
            case Sender::Kind::tok: out = tok_embed(); break;
            case Sender::Kind::pos: out = pos_embed(); break;
            case Sender::Kind::chain: out = chain_out(s); break;
            default: throw prune_error("sender not computed yet: " + s.str());
        }
        atom_out_.emplace(si, out);
        return out;
    }

    Mat tok_embed() const {
        Mat e(w_.d, n_);
        for (int j = 0; j < n_; ++j)
            for (int i = 0; i < w_.d; ++i) e(i, j) = w_.E(i, (*tokens_)[j]);
        return e;
    }
    Mat pos_embed() const {
        Mat p(w_.d, n_);
        for (int j = 0; j < n_; ++j)
            for (int i = 0; i < w_.d; ++i) p(i, j) = w_.P(i, offset_ + j);
        return p;
    }

    void compute_head_atom(int l, int h) {
        const auto& hw = w_.layers[l].heads[h];
        int rq = g_.find_receiver("q_" + std::to_string(l) + std::to_string(h));
        int rk = g_.find_receiver("k_" + std::to_string(l) + std::to_string(h));
        int rv = g_.find_receiver("v_" + std::to_string(l) + std::to_string(h));
        Mat q = detail::add_colvec_plain(matmul(hw.Q, site(receiver_input(rq), rq)), hw.qb);
        Mat k = detail::add_colvec_plain(matmul(hw.K, site(receiver_input(rk), rk)), hw.kb);
        Mat v = detail::add_colvec_plain(matmul(hw.V, site(receiver_input(rv), rv)), hw.vb);
        Mat att = detail::causal_softmax_plain(matmul_tn(q, k));
        int si = g_.find_sender("head_" + std::to_string(l) + std::to_string(h));
        atom_out_.emplace(si, matmul_nt(v, att));
    }

    void compute_mlp_atom(int l) {
        int rm = g_.find_receiver("mlp_" + std::to_string(l));
        int si = g_.find_sender("mlp_" + std::to_string(l));
        atom_out_.emplace(si, mlp_apply_plain(w_.layers[l].mlp, site(receiver_input(rm), rm)));
    }

    Mat attention(int l, int h) {
        std::string key = std::to_string(l) + "," + std::to_string(h);
        auto it = att_memo_.find(key);
        if (it != att_memo_.end()) return it->second;
        const auto& hw = w_.layers[l].heads[h];
        Mat logits(n_, n_);
        if (g_.stage == 2) {
            int rq = g_.find_receiver("q_" + std::to_string(l) + std::to_string(h));
            int rk = g_.find_receiver("k_" + std::to_string(l) + std::to_string(h));
            Mat q = detail::add_colvec_plain(matmul(hw.Q, receiver_input(rq)), hw.qb);
            Mat k = detail::add_colvec_plain(matmul(hw.K, receiver_input(rk)), hw.kb);
            logits = matmul_tn(q, k);
        } else {
            for (size_t qi = 0; qi < g_.qk_terms.size(); ++qi) {
                const QkTerm& term = g_.qk_terms[qi];
                if (term.layer != l || term.head != h || !open(term.theta_tilde)) continue;
                Mat q = matmul(hw.Q, chain_out(g_.senders[term.q_sender]));
                Mat k = matmul(hw.K, chain_out(g_.senders[term.k_sender]));
                logits += matmul_tn(q, k);
            }
            for (size_t ki = 0; ki < g_.key_terms.size(); ++ki) {
                const KeyOnlyTerm& term = g_.key_terms[ki];
                if (term.layer != l || term.head != h || !open(term.theta_tilde)) continue;
                Mat row = matmul_tn(term.bq, matmul(hw.K, chain_out(g_.senders[term.k_sender])));
                for (int i = 0; i < n_; ++i)
                    for (int j = 0; j < n_; ++j) logits(i, j) += row(0, j);
            }
        }
        Mat att = detail::causal_softmax_plain(logits);
        att_memo_.emplace(key, att);
        return att;
    }

    Mat chain_out(const Sender& s) {
        std::string key = s.str();
        auto it = chain_memo_.find(key);
        if (it != chain_memo_.end()) return it->second;
        Mat out;
        if (s.units.empty()) {
            if (s.kind != Sender::Kind::chain) throw prune_error("chain_out on non-chain");
            if (s.src == Sender::ChainSrc::tok) out = tok_embed();
            else if (s.src == Sender::ChainSrc::pos) out = pos_embed();
            else {
                int rm = g_.find_receiver("mlp_" + std::to_string(s.src_layer));
                out = mlp_apply_plain(w_.layers[s.src_layer].mlp, receiver_input(rm));
            }
        } else {
            Sender prefix = s;
            PathUnit last = prefix.units.back();
            prefix.units.pop_back();
            Mat base = chain_out(prefix);
            int ei = hop_edge(prefix, last);
            if (ei >= 0 && !open(g_.edges[ei].theta_tilde)) base = tile(g_.ablation[g_.edges[ei].sender]);
            if (last.is_mlp) {
                auto wit = g_.split_weights.find(s.str());
                out = mlp_apply_plain(wit != g_.split_weights.end() ? wit->second
                                                                    : w_.layers[last.layer].mlp,
                                      base);
            } else {
                const auto& hw = w_.layers[last.layer].heads[last.head];
                out = matmul_nt(matmul(hw.V, base), attention(last.layer, last.head));
            }
        }
        chain_memo_.emplace(key, out);
        return out;
    }

    int hop_edge(const Sender& prefix, const PathUnit& hop) const {
        std::string rkey = hop.is_mlp
                               ? "mlp_" + std::to_string(hop.layer)
                               : "v_" + std::to_string(hop.layer) + std::to_string(hop.head);
        int r = g_.find_receiver(rkey);
        if (r < 0) return -1;
        int si = g_.find_sender(prefix.str());
        if (si < 0) return -1;
        for (int ei : g_.edges_into(r))
            if (g_.edges[ei].sender == si) return ei;
        return -1;
    }

    const ComputationGraph& g_;
    const TransformerWeights& w_;
    const std::vector<int>* tokens_ = nullptr;
    int offset_ = 0, n_ = 0;
    std::map<int, Mat> atom_out_;
    std::map<std::string, Mat> chain_memo_, att_memo_;
};

// hard-gated logits, the finalized pruned model
inline Mat gated_logits(ComputationGraph& g, const TransformerWeights& w,
                        const std::vector<int>& tokens, int offset) {
    return HardForward(g, w).run(tokens, offset);
}

inline std::vector<Mat> gated_logits_batch(ComputationGraph& g, const TransformerWeights& w,
                                           const std::vector<Instance>& data) {
    std::vector<Mat> out;
    out.reserve(data.size());
    for (auto& inst : data) out.push_back(gated_logits(g, w, inst.tokens, inst.offset));
    return out;
}

// attention logits of one head under hard gates; for stage 3 the query-row
// constant (K kbias + kb) term, dropped in training because softmax ignores
// it, is added back so the reconstruction can be compared to stage 2 exactly
inline Mat gated_attention_logits(ComputationGraph& g, const TransformerWeights& w,
                                  const std::vector<int>& tokens, int offset, int l, int h,
                                  bool add_row_constant = false) {
    Tape tape;
    GatedForward fw(tape, g, w, GateMode::hard, false);
    auto tr = fw.run(tokens, offset);
    std::string key = std::to_string(l) + "," + std::to_string(h);
    auto it = tr.att_logits.find(key);
    if (it == tr.att_logits.end()) throw prune_error("no attention logits for head " + key);
    Mat logits = it->second.val();
    if (g.stage == 3 && add_row_constant) {
        const auto& hw = w.layers[l].heads[h];
        const int n = (int)tokens.size();
        Mat kconst = matmul(hw.K, g.head_kbias.at(key)) + hw.kb;  // d_h x 1
        std::vector<int> qsenders;
        for (auto& term : g.qk_terms)
            if (term.layer == l && term.head == h) {
                bool seen = false;
                for (int s : qsenders) seen = seen || s == term.q_sender;
                if (!seen) qsenders.push_back(term.q_sender);
            }
        Mat qconst = matmul(hw.Q, g.head_qbias.at(key)) + hw.qb;  // d_h x 1
        Mat qact(w.d_h, n);
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < w.d_h; ++i) qact(i, j) = qconst(i, 0);
        for (int s : qsenders) qact += matmul(hw.Q, fw.chain_value(g.senders[s]));
        for (int i = 0; i < n; ++i) {
            double rc = 0;
            for (int a = 0; a < w.d_h; ++a) rc += qact(a, i) * kconst(a, 0);
            for (int j = 0; j <= i; ++j) logits(i, j) += rc;
        }
    }
    return logits;
}

// The continuous relaxation of the pruning objective, expressed over
// externally supplied leaves so that tape gradients can be checked against
// central finite differences.
inline Tensor relaxed_objective(Tape& t, ComputationGraph& g, const TransformerWeights& w,
                                const TaskSpec& spec, const std::vector<Instance>& data,
                                const std::vector<Mat>& ref, double lambda,
                                const std::vector<Tensor>& flat) {
    GatedForward fw(t, g, w, GateMode::relaxed, flat);
    std::vector<Tensor> kls;
    for (size_t i = 0; i < data.size(); ++i) {
        auto tr = fw.run(data[i].tokens, data[i].offset);
        kls.push_back(instance_kl(spec, ref[i], tr.logits, data[i]));
    }
    Tensor loss = ops::scale(ops::sum(kls), 1.0 / kls.size());
    auto& lv = fw.leaves();
    std::vector<Tensor> gates;
    for (size_t i = 0; i < g.edges.size(); ++i)
        if (g.edges[i].trainable) gates.push_back(ops::sigmoid(lv.theta_edge[i]));
    for (auto& th : lv.theta_qk) gates.push_back(ops::sigmoid(th));
    for (auto& th : lv.theta_key) gates.push_back(ops::sigmoid(th));
    if (!gates.empty()) loss = ops::add(loss, ops::scale(ops::sum(gates), lambda));
    return loss;
}

// ---- stage optimization ----

struct PruneStageConfig {
    double lambda = 1e-3;
    int max_steps = 5000;
    int patience = 1000;  // stage 1; 500 for stages 2+
    int batch_unique = 10;
    int repeats = 12;
    double lr_theta = 0.1;
    double lr_ablation = 0.002;
    double lr_bias = 0.002;
    double lr_split_mlp = 0.002;
    double clip_theta = 5.0;
    uint64_t seed = 0;
    bool verbose = false;
};

struct PruneMetrics {
    double mean_kl = 0.0;
    double match_acc = 0.0;
    int open_edges = 0;
    int steps = 0;
};

inline double mean_kl_vs_ref(ComputationGraph& g, const TransformerWeights& w,
                             const TaskSpec& spec, const std::vector<Instance>& data,
                             const std::vector<Mat>& ref) {
    double s = 0;
    for (size_t i = 0; i < data.size(); ++i)
        s += kl_value(spec, ref[i], gated_logits(g, w, data[i].tokens, data[i].offset), data[i]);
    return s / data.size();
}

inline PruneMetrics evaluate_graph(ComputationGraph& g, const TransformerWeights& w,
                                   const TaskSpec& spec, const std::vector<Instance>& data,
                                   const std::vector<Mat>& ref) {
    PruneMetrics m;
    auto outs = gated_logits_batch(g, w, data);
    m.match_acc = match_accuracy(spec, ref, outs, data);
    double s = 0;
    for (size_t i = 0; i < data.size(); ++i) s += kl_value(spec, ref[i], outs[i], data[i]);
    m.mean_kl = s / data.size();
    m.open_edges = g.open_edge_count();
    return m;
}

// Optimizes the objective E[KL(original || gated)] + lambda * sum(theta) over
// gates, ablations, receiver biases, key-only query biases and split-MLP
// weights (whichever the stage trains). Stops when no theta~ has been inside
// (-1, 1) for `patience` steps, or at max_steps. Edges with sigmoid(theta~)
// below 0.5 are removed at the end.
inline PruneMetrics prune_stage(ComputationGraph& g, const TransformerWeights& w,
                                const TaskSpec& spec, const std::vector<Instance>& dataset,
                                const std::vector<Mat>& ref_logits, const PruneStageConfig& cfg) {
    if (dataset.empty()) throw prune_error("prune_stage: empty dataset");
    Rng rng(cfg.seed ^ 0x9e3779b9ULL);

    AdamState opt_theta, opt_abl, opt_bias, opt_split, opt_bq;
    AdamConfig ct, ca, cb, cs, cq;
    ct.lr = cfg.lr_theta;
    ca.lr = cfg.lr_ablation;
    cb.lr = cfg.lr_bias;
    cs.lr = cfg.lr_split_mlp;
    cq.lr = cfg.lr_ablation;

    int calm_steps = 0;
    int step = 0;
    for (step = 1; step <= cfg.max_steps; ++step) {
        // 10 unique inputs, each repeated; repeats draw independent alphas
        std::vector<int> picks(cfg.batch_unique);
        for (auto& p : picks) p = (int)rng.below(dataset.size());

        Tape tape;
        GatedForward fw(tape, g, w, GateMode::sampled, true, &rng);
        std::vector<Tensor> kls;
        for (int u = 0; u < cfg.batch_unique; ++u) {
            const Instance& inst = dataset[picks[u]];
            for (int rep = 0; rep < cfg.repeats; ++rep) {
                auto tr = fw.run(inst.tokens, inst.offset);
                kls.push_back(instance_kl(spec, ref_logits[picks[u]], tr.logits, inst));
            }
        }
        Tensor loss = ops::scale(ops::sum(kls), 1.0 / kls.size());
        // sparsity: lambda * sum over trainable gates of sigmoid(theta~)
        auto& lv = fw.leaves();
        std::vector<Tensor> gates;
        for (size_t i = 0; i < g.edges.size(); ++i)
            if (g.edges[i].trainable) gates.push_back(ops::sigmoid(lv.theta_edge[i]));
        for (auto& th : lv.theta_qk) gates.push_back(ops::sigmoid(th));
        for (auto& th : lv.theta_key) gates.push_back(ops::sigmoid(th));
        if (!gates.empty() && cfg.lambda != 0.0)
            loss = ops::add(loss, ops::scale(ops::sum(gates), cfg.lambda));
        double loss_v = loss.val()(0, 0);
        if (!std::isfinite(loss_v)) throw prune_error("prune_stage: non-finite objective");
        tape.backward(loss);

        // gather and apply per-group updates
        std::vector<Mat*> tparams;
        std::vector<Mat> tgrads;
        std::vector<Mat> theta_store;
        auto add_theta = [&](double& val, Tensor leaf) {
            theta_store.emplace_back(1, 1, std::vector<double>{val});
            tgrads.push_back(tape.grad_of(leaf.id));
        };
        for (size_t i = 0; i < g.edges.size(); ++i)
            if (g.edges[i].trainable) add_theta(g.edges[i].theta_tilde, lv.theta_edge[i]);
        for (size_t i = 0; i < g.qk_terms.size(); ++i)
            add_theta(g.qk_terms[i].theta_tilde, lv.theta_qk[i]);
        for (size_t i = 0; i < g.key_terms.size(); ++i)
            add_theta(g.key_terms[i].theta_tilde, lv.theta_key[i]);
        for (auto& m : theta_store) tparams.push_back(&m);
        // clip theta gradients to global norm 5
        double nrm = 0;
        for (auto& gm : tgrads) nrm += gm(0, 0) * gm(0, 0);
        nrm = std::sqrt(nrm);
        if (nrm > cfg.clip_theta)
            for (auto& gm : tgrads) gm *= cfg.clip_theta / nrm;
        adam_step(tparams, tgrads, opt_theta, ct);
        {
            size_t idx = 0;
            for (size_t i = 0; i < g.edges.size(); ++i)
                if (g.edges[i].trainable) g.edges[i].theta_tilde = theta_store[idx++](0, 0);
            for (auto& q : g.qk_terms) q.theta_tilde = theta_store[idx++](0, 0);
            for (auto& k : g.key_terms) k.theta_tilde = theta_store[idx++](0, 0);
        }

        if (g.stage <= 2) {
            std::vector<Mat*> ap;
            std::vector<Mat> ag;
            for (size_t i = 0; i < g.ablation.size(); ++i) {
                ap.push_back(&g.ablation[i]);
                ag.push_back(tape.grad_of(lv.ablation[i].id));
            }
            adam_step(ap, ag, opt_abl, ca);
        }
        if (g.stage == 2) {
            std::vector<Mat*> bp;
            std::vector<Mat> bg;
            for (size_t i = 0; i < g.receiver_bias.size(); ++i) {
                bp.push_back(&g.receiver_bias[i]);
                bg.push_back(tape.grad_of(lv.rbias[i].id));
            }
            adam_step(bp, bg, opt_bias, cb);
            if (!g.split_weights.empty()) {
                std::vector<Mat*> sp;
                std::vector<Mat> sg;
                for (auto& [key, mw] : g.split_weights) {
                    auto& tm = lv.split.at(key);
                    sp.push_back(&mw.W1);
                    sg.push_back(tape.grad_of(tm.W1.id));
                    sp.push_back(&mw.b1);
                    sg.push_back(tape.grad_of(tm.b1.id));
                    sp.push_back(&mw.W2);
                    sg.push_back(tape.grad_of(tm.W2.id));
                    sp.push_back(&mw.b2);
                    sg.push_back(tape.grad_of(tm.b2.id));
                }
                adam_step(sp, sg, opt_split, cs);
            }
        }
        if (g.stage == 3) {
            std::vector<Mat*> qp;
            std::vector<Mat> qg;
            for (size_t i = 0; i < g.key_terms.size(); ++i) {
                qp.push_back(&g.key_terms[i].bq);
                qg.push_back(tape.grad_of(lv.key_bq[i].id));
            }
            adam_step(qp, qg, opt_bq, cq);
        }

        bool ambivalent = false;
        for (auto& e : g.edges)
            if (e.trainable && e.theta_tilde > -1 && e.theta_tilde < 1) ambivalent = true;
        for (auto& q : g.qk_terms)
            if (q.theta_tilde > -1 && q.theta_tilde < 1) ambivalent = true;
        for (auto& k : g.key_terms)
            if (k.theta_tilde > -1 && k.theta_tilde < 1) ambivalent = true;
        calm_steps = ambivalent ? 0 : calm_steps + 1;
        if (calm_steps >= cfg.patience) break;
    }

    PruneMetrics m = evaluate_graph(g, w, spec, dataset, ref_logits);
    m.steps = std::min(step, cfg.max_steps);
    return m;
}

// drops hard-closed edges/terms from the graph (sigmoid(theta~) < 0.5); the
// ablation constants of dropped edges are folded in when the next stage's
// graph is built
inline void finalize_stage(ComputationGraph& g) {
    auto open = [](double tt) { return 1.0 / (1.0 + std::exp(-tt)) >= 0.5; };
    if (g.stage == 3) {
        std::vector<QkTerm> qk;
        for (auto& t : g.qk_terms)
            if (open(t.theta_tilde)) qk.push_back(t);
        g.qk_terms = std::move(qk);
        std::vector<KeyOnlyTerm> ks;
        for (auto& t : g.key_terms)
            if (open(t.theta_tilde)) ks.push_back(t);
        g.key_terms = std::move(ks);
    }
}

// match accuracy of the attention- and MLP-free bigram model, the baseline
// for the coefficient search
inline double bigram_baseline_match(const TransformerWeights& w, const TaskSpec& spec,
                                    const std::vector<Instance>& data,
                                    const std::vector<Mat>& ref) {
    std::vector<Mat> outs;
    for (auto& inst : data) {
        const int n = inst.length();
        Mat y(w.d, n);
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < w.d; ++i) y(i, j) = w.E(i, inst.tokens[j]) + w.P(i, inst.offset + j);
        Mat x = w.absorbed ? y : detail::ln_exact_plain(y, w.ln_f, w.ln_eps);
        outs.push_back(detail::add_colvec_plain(matmul(w.U, x), w.lm_bias));
    }
    return match_accuracy(spec, ref, outs, data);
}

} // namespace drasp
