#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "drasp/program.hpp"
#include "drasp/prune_graph.hpp"

namespace drasp {

struct conversion_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Maps the surviving stage-3 structure onto D-RASP: each surviving QK pair
// becomes a binary select, each key-only term a unary select (dropped when
// its row is exactly zero), each surviving value path an aggregate, each
// (split) MLP an element-wise op, each unembedding edge a projection, and
// the unembedding receiver bias a constant projection line.
//
// Edges that were hard-closed during pruning left their senders replaced by
// optimal-ablation constants; such chains resolve to constant vectors here
// and flow into the bias line, MLP input constants, or key-only selector
// rows (a constant query side) instead of program variables. Constant key
// sides only shift whole softmax rows and are dropped.
class GraphExtractor {
public:
    GraphExtractor(const ComputationGraph& g, const TransformerWeights& w,
                   const std::vector<std::string>& alphabet)
        : g_(g), w_(w) {
        if (g.stage != 3) throw conversion_error("graph_to_program expects a stage-3 graph");
        prog_ = DRaspProgram::make(alphabet, w.T, w.objective);
    }

    DRaspProgram run() {
        int ru = g_.find_receiver("unembed");
        if (ru < 0) throw conversion_error("malformed survivor graph: no unembed receiver");
        std::vector<int> slots;
        Mat bias_res = g_.receiver_bias.empty() ? Mat(w_.d, 1) : g_.receiver_bias[ru];
        for (int ei : g_.edges_into(ru)) {
            const Edge& e = g_.edges[ei];
            const Sender& s = g_.senders[e.sender];
            if (!edge_open(e)) {
                bias_res += g_.ablation[e.sender];
                continue;
            }
            if (auto cc = chain_const(s)) {
                bias_res += *cc;
                continue;
            }
            int v = var_of(s);
            ProjectStmt st;
            st.input = v;
            st.A = matmul(w_.U, real_map(s));
            int slot = prog_.add_logit_slot("proj_" + s.str());
            st.out = slot;
            prog_.statements.push_back(std::move(st));
            slots.push_back(slot);
        }
        {
            Mat bias = matmul(w_.U, bias_res) + w_.lm_bias;
            if (bias.max_abs() > 1e-12) {  // an exactly-zero constant line is dropped
                ProjectStmt st;
                st.input = -1;
                st.A = std::move(bias);
                int slot = prog_.add_logit_slot("proj_bias");
                st.out = slot;
                prog_.statements.push_back(std::move(st));
                slots.push_back(slot);
            }
        }
        if (slots.empty()) throw conversion_error("nothing reaches the prediction");
        PredictionStmt pred;
        pred.phi = w_.objective == Objective::language_model ? PredictionStmt::Phi::softmax
                                                             : PredictionStmt::Phi::sigmoid;
        pred.logit_slots = slots;
        prog_.statements.push_back(std::move(pred));

        prog_.remove_unreachable();
        prog_.metadata["kind"] = "extracted";
        prog_.validate();
        return prog_;
    }

private:
    static bool edge_open(const Edge& e) {
        return 1.0 / (1.0 + std::exp(-e.theta_tilde)) >= 0.5;
    }

    int find_edge(const Sender& prefix, const PathUnit& hop) const {
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

    // a chain whose spine passes a closed edge (or a fully-ablated source)
    // carries a constant; aggregation maps constants to themselves
    std::optional<Mat> chain_const(const Sender& s) {
        if (s.kind != Sender::Kind::chain)
            throw conversion_error("stage-3 senders must be chains: " + s.str());
        if (s.units.empty()) {
            if (s.src != Sender::ChainSrc::mlp) return std::nullopt;
            int rm = g_.find_receiver("mlp_" + std::to_string(s.src_layer));
            for (int ei : g_.edges_into(rm)) {
                if (edge_open(g_.edges[ei]) && !chain_const(g_.senders[g_.edges[ei].sender]))
                    return std::nullopt;  // at least one live input
            }
            Mat c = g_.receiver_bias[rm];
            for (int ei : g_.edges_into(rm)) {
                const Edge& e = g_.edges[ei];
                if (!edge_open(e)) c += g_.ablation[e.sender];
                else c += *chain_const(g_.senders[e.sender]);
            }
            return mlp_apply_plain(w_.layers[s.src_layer].mlp, c);
        }
        Sender prefix = s;
        PathUnit last = prefix.units.back();
        prefix.units.pop_back();
        std::optional<Mat> base;
        int ei = find_edge(prefix, last);
        if (ei >= 0 && !edge_open(g_.edges[ei])) {
            base = g_.ablation[g_.edges[ei].sender];
        } else {
            base = chain_const(prefix);
        }
        if (!base) return std::nullopt;
        if (last.is_mlp) {
            auto wit = g_.split_weights.find(s.str());
            const MlpWeights& mw =
                wit != g_.split_weights.end() ? wit->second : w_.layers[last.layer].mlp;
            return mlp_apply_plain(mw, *base);
        }
        return matmul(w_.layers[last.layer].heads[last.head].V, *base);
    }

    // real activation = real_map(chain) * value(var(chain))
    Mat real_map(const Sender& s) {
        if (s.units.empty()) {
            if (s.src == Sender::ChainSrc::tok) return w_.E;
            if (s.src == Sender::ChainSrc::pos) return w_.P;
            return Mat::identity(w_.d);  // unsplit mlp atom output
        }
        const PathUnit& last = s.units.back();
        if (last.is_mlp) return Mat::identity(w_.d);
        Sender prefix = s;
        prefix.units.pop_back();
        return matmul(w_.layers[last.layer].heads[last.head].V, real_map(prefix));
    }

    Basis basis_of(const Sender& s) {
        if (!s.units.empty() && s.units.back().is_mlp) return Basis::residual;
        if (s.units.empty() && s.src == Sender::ChainSrc::mlp) return Basis::residual;
        return s.src == Sender::ChainSrc::pos ? Basis::position : Basis::token;
    }

    // selectors of head (l, h); created once, lazily
    const std::vector<int>& head_selectors(int l, int h) {
        std::string key = std::to_string(l) + "," + std::to_string(h);
        auto it = head_sels_.find(key);
        if (it != head_sels_.end()) return it->second;
        std::vector<int> sels;
        const auto& hw = w_.layers[l].heads[h];
        for (auto& term : g_.qk_terms) {
            if (term.layer != l || term.head != h) continue;
            const Sender& sq = g_.senders[term.q_sender];
            const Sender& sk = g_.senders[term.k_sender];
            if (chain_const(sk)) continue;  // constant keys shift rows only
            if (auto cq = chain_const(sq)) {
                // constant query side: the product degenerates to a key-only
                // selector with bias Q * const
                Mat bq = matmul(hw.Q, *cq);
                add_unary(sels, key, sk, bq, hw);
                continue;
            }
            int vq = var_of(sq), vk = var_of(sk);
            SelectStmt st;
            st.binary = true;
            st.q = vq;
            st.k = vk;
            st.A = matmul_tn(matmul(hw.Q, real_map(sq)), matmul(hw.K, real_map(sk)));
            st.out = prog_.add_selector("sel_" + key + "_" + sq.str() + "_" + sk.str());
            sels.push_back(st.out);
            prog_.statements.push_back(std::move(st));
        }
        for (auto& term : g_.key_terms) {
            if (term.layer != l || term.head != h) continue;
            const Sender& sk = g_.senders[term.k_sender];
            if (chain_const(sk)) continue;
            add_unary(sels, key, sk, term.bq, hw);
        }
        return head_sels_.emplace(key, std::move(sels)).first->second;
    }

    void add_unary(std::vector<int>& sels, const std::string& key, const Sender& sk,
                   const Mat& bq, const HeadWeights& hw) {
        Mat b = matmul_tn(bq, matmul(hw.K, real_map(sk)));  // 1 x d(k)
        if (b.max_abs() < 1e-12) return;  // vanishing bias term
        int vk = var_of(sk);
        SelectStmt st;
        st.binary = false;
        st.k = vk;
        st.A = std::move(b);
        st.out = prog_.add_selector("selb_" + key + "_" + sk.str());
        sels.push_back(st.out);
        prog_.statements.push_back(std::move(st));
    }

    int var_of(const Sender& s) {
        std::string key = s.str();
        auto it = var_memo_.find(key);
        if (it != var_memo_.end()) return it->second;
        if (chain_const(s))
            throw conversion_error("constant chain has no program variable: " + key);
        int v = -1;
        if (s.units.empty()) {
            if (s.src == Sender::ChainSrc::tok) v = 0;
            else if (s.src == Sender::ChainSrc::pos) v = 1;
            else v = materialize_mlp_atom(s.src_layer);
        } else {
            Sender prefix = s;
            PathUnit last = prefix.units.back();
            prefix.units.pop_back();
            if (last.is_mlp) {
                // split element-wise op applied to the single retained path
                int pv = var_of(prefix);
                ElementWiseStmt st;
                st.inputs = {pv};
                st.func.kind = ElementFunc::Kind::blackbox_mlp;
                auto wit = g_.split_weights.find(s.str());
                st.func.mlp = wit != g_.split_weights.end() ? wit->second
                                                            : w_.layers[last.layer].mlp;
                st.func.input_maps = {real_map(prefix)};
                st.func.input_const = Mat(st.func.mlp.W1.cols(), 1);
                VarInfo vi;
                vi.name = key;
                vi.dim = w_.d;
                vi.basis = Basis::residual;
                vi.layer = last.layer;
                v = prog_.add_var(vi);
                st.out = v;
                prog_.statements.push_back(std::move(st));
            } else {
                int pv = var_of(prefix);
                const auto& sels = head_selectors(last.layer, last.head);
                VarInfo vi;
                vi.name = key;
                vi.dim = prog_.vars[pv].dim;
                vi.basis = prog_.vars[pv].basis;
                vi.layer = last.layer;
                vi.head = last.head;
                v = prog_.add_var(vi);
                AggregateStmt st;
                st.out = v;
                st.selectors = sels;
                st.value = pv;
                prog_.statements.push_back(std::move(st));
            }
        }
        var_memo_.emplace(key, v);
        return v;
    }

    int materialize_mlp_atom(int layer) {
        std::string key = "mlp_" + std::to_string(layer);
        auto it = var_memo_.find(key);
        if (it != var_memo_.end()) return it->second;
        int rm = g_.find_receiver(key);
        if (rm < 0) throw conversion_error("missing mlp receiver " + key);
        ElementWiseStmt st;
        st.func.kind = ElementFunc::Kind::blackbox_mlp;
        st.func.mlp = w_.layers[layer].mlp;
        Mat cst = g_.receiver_bias[rm];
        for (int ei : g_.edges_into(rm)) {
            const Edge& e = g_.edges[ei];
            const Sender& in = g_.senders[e.sender];
            if (!edge_open(e)) {
                cst += g_.ablation[e.sender];
                continue;
            }
            if (auto cc = chain_const(in)) {
                cst += *cc;
                continue;
            }
            st.inputs.push_back(var_of(in));
            st.func.input_maps.push_back(real_map(in));
        }
        st.func.input_const = cst;
        VarInfo vi;
        vi.name = key;
        vi.dim = w_.d;
        vi.basis = Basis::residual;
        vi.layer = layer;
        int v = prog_.add_var(vi);
        st.out = v;
        prog_.statements.push_back(std::move(st));
        var_memo_.emplace(key, v);
        return v;
    }

    const ComputationGraph& g_;
    const TransformerWeights& w_;
    DRaspProgram prog_;
    std::map<std::string, int> var_memo_;
    std::map<std::string, std::vector<int>> head_sels_;
};

inline DRaspProgram graph_to_program(const ComputationGraph& g, const TransformerWeights& w,
                                     const std::vector<std::string>& alphabet) {
    return GraphExtractor(g, w, alphabet).run();
}

} // namespace drasp
