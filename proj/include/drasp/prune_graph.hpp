#pragma once

#include <map>
#include <string>
#include <vector>

#include "drasp/mat.hpp"
#include "drasp/transformer.hpp"

namespace drasp {

struct prune_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Senders and receivers of the stage-dependent computation graph.
//
// Stage 0/1 senders are components: token/position embeddings, whole heads,
// whole MLPs. Stage 2 unrolls heads (and optionally MLPs) into paths: a
// chain starts at token, pos, or an unsplit MLP atom and climbs through
// value hops (and split-MLP hops). Stage 3 adds per-head QK product terms
// and key-only terms over the chain senders.

struct PathUnit {
    bool is_mlp = false;
    int layer = 0, head = 0;  // head ignored for mlp units

    bool operator==(const PathUnit&) const = default;
};

struct Sender {
    enum class Kind { tok, pos, head_atom, mlp_atom, chain };
    Kind kind = Kind::tok;
    int layer = -1, head = -1;  // head_atom / mlp_atom

    enum class ChainSrc { tok, pos, mlp };
    ChainSrc src = ChainSrc::tok;
    int src_layer = -1;               // for mlp chain source
    std::vector<PathUnit> units;      // bottom-up hops

    // layer after which this sender's output exists
    int avail_layer() const {
        switch (kind) {
            case Kind::tok:
            case Kind::pos: return 0;
            case Kind::head_atom: return layer + 1;
            case Kind::mlp_atom: return layer + 1;
            case Kind::chain: {
                int l = src == ChainSrc::mlp ? src_layer + 1 : 0;
                for (auto& u : units) l = std::max(l, u.layer + 1);
                return l;
            }
        }
        return 0;
    }

    std::string str() const {
        auto base = [&]() -> std::string {
            switch (kind) {
                case Kind::tok: return "token";
                case Kind::pos: return "pos";
                case Kind::head_atom:
                    return "head_" + std::to_string(layer) + std::to_string(head);
                case Kind::mlp_atom: return "mlp_" + std::to_string(layer);
                case Kind::chain: {
                    std::string s = src == ChainSrc::tok ? "token"
                                    : src == ChainSrc::pos ? "pos"
                                                           : "mlp_" + std::to_string(src_layer);
                    for (auto& u : units) {
                        std::string unit = u.is_mlp ? "mlp_" + std::to_string(u.layer)
                                                    : "head_" + std::to_string(u.layer) +
                                              std::to_string(u.head);
                        s = unit + "-" + s;  // printed top-down like head_10-head_00-token
                    }
                    return s;
                }
            }
            return "?";
        };
        return base();
    }

    bool operator==(const Sender& o) const { return str() == o.str(); }
};

struct Receiver {
    enum class Kind { q, k, v, mlp, unembed };
    Kind kind = Kind::unembed;
    int layer = -1, head = -1;

    // position in the layer sweep at which this receiver consumes inputs
    int consume_layer() const {
        switch (kind) {
            case Kind::q:
            case Kind::k:
            case Kind::v: return layer;
            case Kind::mlp: return layer;  // after attention of the same layer
            case Kind::unembed: return 1 << 20;
        }
        return 0;
    }

    std::string str() const {
        switch (kind) {
            case Kind::q: return "q_" + std::to_string(layer) + std::to_string(head);
            case Kind::k: return "k_" + std::to_string(layer) + std::to_string(head);
            case Kind::v: return "v_" + std::to_string(layer) + std::to_string(head);
            case Kind::mlp: return "mlp_" + std::to_string(layer);
            case Kind::unembed: return "unembed";
        }
        return "?";
    }
};

struct Edge {
    int sender = -1, receiver = -1;
    double theta_tilde = 3.0;  // open
    bool trainable = true;
};

struct QkTerm {
    int layer = 0, head = 0;
    int q_sender = -1, k_sender = -1;  // sender indices
    double theta_tilde = 3.0;
};

struct KeyOnlyTerm {
    int layer = 0, head = 0;
    int k_sender = -1;
    double theta_tilde = 3.0;
    Mat bq;  // d_h x 1 learned query-side bias
};

struct ComputationGraph {
    int stage = 1;
    bool split_mlps = false;
    LnMode ln_mode = LnMode::none;  // exact (stage 0) or none (absorbed)

    std::vector<Sender> senders;
    std::vector<Receiver> receivers;
    std::vector<Edge> edges;

    std::vector<Mat> ablation;       // per sender, d x 1 (stages <= 2)
    std::vector<Mat> receiver_bias;  // per receiver, d x 1 (stages >= 2)

    // stage 3 only
    std::vector<QkTerm> qk_terms;
    std::vector<KeyOnlyTerm> key_terms;
    std::map<std::string, Mat> head_qbias, head_kbias;  // stage-2 q/k constants per "l,h"

    // split-MLP instances keyed by the chain string of (mlp layer, prefix)
    std::map<std::string, MlpWeights> split_weights;

    int find_sender(const std::string& key) const {
        for (size_t i = 0; i < senders.size(); ++i)
            if (senders[i].str() == key) return (int)i;
        return -1;
    }
    int find_receiver(const std::string& key) const {
        for (size_t i = 0; i < receivers.size(); ++i)
            if (receivers[i].str() == key) return (int)i;
        return -1;
    }
    std::vector<int> edges_into(int receiver) const {
        std::vector<int> out;
        for (size_t i = 0; i < edges.size(); ++i)
            if (edges[i].receiver == receiver) out.push_back((int)i);
        return out;
    }

    int open_edge_count() const {
        auto open = [](double tt) { return 1.0 / (1.0 + std::exp(-tt)) >= 0.5; };
        int n = 0;
        for (auto& e : edges)
            if (open(e.theta_tilde)) ++n;
        for (auto& t : qk_terms)
            if (open(t.theta_tilde)) ++n;
        for (auto& t : key_terms)
            if (open(t.theta_tilde)) ++n;
        return n;
    }
};

// ---- stage 0/1 component graph ----

inline ComputationGraph build_component_graph(const TransformerWeights& w, bool exact_ln) {
    ComputationGraph g;
    g.stage = exact_ln ? 0 : 1;
    g.ln_mode = exact_ln ? LnMode::exact : LnMode::none;
    if (!exact_ln && !w.absorbed)
        throw prune_error("stage 1 component graph expects absorbed weights");
    if (exact_ln && w.absorbed) throw prune_error("stage 0 expects unabsorbed weights");

    g.senders.push_back({Sender::Kind::tok});
    g.senders.push_back({Sender::Kind::pos});
    for (int l = 0; l < w.L; ++l) {
        for (int h = 0; h < w.H; ++h) {
            Sender s;
            s.kind = Sender::Kind::head_atom;
            s.layer = l;
            s.head = h;
            g.senders.push_back(s);
        }
        Sender m;
        m.kind = Sender::Kind::mlp_atom;
        m.layer = l;
        g.senders.push_back(m);
    }
    for (int l = 0; l < w.L; ++l) {
        for (int h = 0; h < w.H; ++h)
            for (auto kind : {Receiver::Kind::q, Receiver::Kind::k, Receiver::Kind::v})
                g.receivers.push_back({kind, l, h});
        g.receivers.push_back({Receiver::Kind::mlp, l, -1});
    }
    g.receivers.push_back({Receiver::Kind::unembed});

    for (int r = 0; r < (int)g.receivers.size(); ++r) {
        const Receiver& rc = g.receivers[r];
        for (int s = 0; s < (int)g.senders.size(); ++s) {
            const Sender& sd = g.senders[s];
            bool ok;
            if (rc.kind == Receiver::Kind::mlp)
                ok = sd.avail_layer() <= rc.layer + (sd.kind == Sender::Kind::head_atom &&
                                                             sd.layer == rc.layer
                                                         ? 1
                                                         : 0);
            else if (rc.kind == Receiver::Kind::unembed)
                ok = true;
            else
                ok = sd.avail_layer() <= rc.layer;
            if (ok) g.edges.push_back({s, r, 3.0, true});
        }
    }
    for (size_t s = 0; s < g.senders.size(); ++s) g.ablation.push_back(Mat(w.d, 1));
    return g;
}

// ---- stage 2 path graph ----

namespace detail {

// expands a stage-1 sender into chain senders using the stage-1 survivors
inline void expand_sender(const ComputationGraph& g1, const TransformerWeights& w, int sender_idx,
                          bool split_mlps, std::vector<Sender>& out) {
    const Sender& s = g1.senders[sender_idx];
    auto open = [](double tt) { return 1.0 / (1.0 + std::exp(-tt)) >= 0.5; };
    if (s.kind == Sender::Kind::tok) {
        Sender c;
        c.kind = Sender::Kind::chain;
        c.src = Sender::ChainSrc::tok;
        out.push_back(c);
        return;
    }
    if (s.kind == Sender::Kind::pos) {
        Sender c;
        c.kind = Sender::Kind::chain;
        c.src = Sender::ChainSrc::pos;
        out.push_back(c);
        return;
    }
    if (s.kind == Sender::Kind::mlp_atom) {
        if (!split_mlps) {
            Sender c;
            c.kind = Sender::Kind::chain;
            c.src = Sender::ChainSrc::mlp;
            c.src_layer = s.layer;
            out.push_back(c);
            return;
        }
        // split: one chain per surviving input of the mlp receiver
        int r = g1.find_receiver("mlp_" + std::to_string(s.layer));
        for (int ei : g1.edges_into(r)) {
            if (!open(g1.edges[ei].theta_tilde)) continue;
            std::vector<Sender> sub;
            expand_sender(g1, w, g1.edges[ei].sender, split_mlps, sub);
            for (auto& base : sub) {
                Sender c = base;
                c.units.push_back({true, s.layer, 0});
                out.push_back(c);
            }
        }
        return;
    }
    if (s.kind == Sender::Kind::head_atom) {
        int r = g1.find_receiver("v_" + std::to_string(s.layer) + std::to_string(s.head));
        for (int ei : g1.edges_into(r)) {
            if (!open(g1.edges[ei].theta_tilde)) continue;
            std::vector<Sender> sub;
            expand_sender(g1, w, g1.edges[ei].sender, split_mlps, sub);
            for (auto& base : sub) {
                Sender c = base;
                c.units.push_back({false, s.layer, s.head});
                out.push_back(c);
            }
        }
        return;
    }
}

} // namespace detail

// Converts the pruned stage-1 graph into the stage-2 path graph, earlier
// layers first. Receiver biases are initialized so that the open-gate
// forward reproduces the stage-1 survivors exactly: they absorb the value
// biases of the heads a path passes through and the optimal ablations of
// edges pruned in stage 1.
inline ComputationGraph build_path_graph(const ComputationGraph& g1, const TransformerWeights& w,
                                         bool split_mlps) {
    if (g1.stage != 1) throw prune_error("build_path_graph expects a stage-1 graph");
    ComputationGraph g;
    g.stage = 2;
    g.split_mlps = split_mlps;
    g.ln_mode = g1.ln_mode;
    g.receivers = g1.receivers;

    auto open = [](double tt) { return 1.0 / (1.0 + std::exp(-tt)) >= 0.5; };

    // constant carried by a stage-1 sender's output once its paths are
    // separated out: value biases of the heads plus ablations of edges
    // pruned below it
    std::function<Mat(int)> expansion_const = [&](int si) -> Mat {
        const Sender& s = g1.senders[si];
        if (s.kind != Sender::Kind::head_atom) return Mat(w.d, 1);
        int r = g1.find_receiver("v_" + std::to_string(s.layer) + std::to_string(s.head));
        Mat inner(w.d, 1);
        for (int ei : g1.edges_into(r)) {
            if (open(g1.edges[ei].theta_tilde))
                inner += expansion_const(g1.edges[ei].sender);
            else
                inner += g1.ablation[g1.edges[ei].sender];
        }
        return matmul(w.layers[s.layer].heads[s.head].V, inner) +
               w.layers[s.layer].heads[s.head].vb;
    };

    auto add_sender = [&](const Sender& s) {
        int idx = g.find_sender(s.str());
        if (idx >= 0) return idx;
        g.senders.push_back(s);
        g.ablation.push_back(Mat(w.d, 1));
        return (int)g.senders.size() - 1;
    };

    g.receiver_bias.assign(g.receivers.size(), Mat(w.d, 1));
    for (int r = 0; r < (int)g.receivers.size(); ++r) {
        Mat bias(w.d, 1);
        for (int ei : g1.edges_into(r)) {
            const Edge& e = g1.edges[ei];
            if (!open(e.theta_tilde)) {
                bias += g1.ablation[e.sender];
                continue;
            }
            bias += expansion_const(e.sender);
            std::vector<Sender> chains;
            detail::expand_sender(g1, w, e.sender, split_mlps, chains);
            for (auto& c : chains) {
                int si = add_sender(c);
                g.edges.push_back({si, r, 3.0, true});
            }
        }
        g.receiver_bias[r] = bias;
    }

    // split-MLP instances: one trainable copy per chain ending in an mlp unit
    if (split_mlps) {
        for (auto& s : g.senders) {
            if (s.kind != Sender::Kind::chain) continue;
            for (size_t u = 0; u < s.units.size(); ++u) {
                if (!s.units[u].is_mlp) continue;
                Sender inst = s;
                inst.units.resize(u + 1);
                if (!g.split_weights.count(inst.str()))
                    g.split_weights[inst.str()] = w.layers[s.units[u].layer].mlp;
            }
        }
    }
    return g;
}

// Converts the pruned stage-2 graph into the stage-3 product graph: for each
// head, the Cartesian product of its surviving query and key senders plus
// one key-only term per key sender (the learned bias acts as the query).
// The query and key receivers disappear; value/mlp/unembed edges are kept
// as-is and frozen -- closed ones keep serving their ablation constants.
inline ComputationGraph build_qk_graph(const ComputationGraph& g2, const TransformerWeights& w) {
    if (g2.stage != 2) throw prune_error("build_qk_graph expects a stage-2 graph");
    ComputationGraph g;
    g.stage = 3;
    g.split_mlps = g2.split_mlps;
    g.ln_mode = g2.ln_mode;
    g.split_weights = g2.split_weights;
    auto open = [](double tt) { return 1.0 / (1.0 + std::exp(-tt)) >= 0.5; };

    // keep all senders (indices must survive for edges) and their ablations
    g.senders = g2.senders;
    g.ablation = g2.ablation;

    for (int r = 0; r < (int)g2.receivers.size(); ++r) {
        const Receiver& rc = g2.receivers[r];
        if (rc.kind == Receiver::Kind::q || rc.kind == Receiver::Kind::k) continue;
        int nr = (int)g.receivers.size();
        g.receivers.push_back(rc);
        g.receiver_bias.push_back(g2.receiver_bias[r]);
        for (int ei : g2.edges_into(r)) {
            const Edge& e = g2.edges[ei];
            g.edges.push_back({e.sender, nr, e.theta_tilde, false});
        }
    }

    for (int l = 0; l < w.L; ++l)
        for (int h = 0; h < w.H; ++h) {
            int rq = g2.find_receiver("q_" + std::to_string(l) + std::to_string(h));
            int rk = g2.find_receiver("k_" + std::to_string(l) + std::to_string(h));
            std::vector<int> qs, ks;
            for (int ei : g2.edges_into(rq))
                if (open(g2.edges[ei].theta_tilde)) qs.push_back(g2.edges[ei].sender);
            for (int ei : g2.edges_into(rk))
                if (open(g2.edges[ei].theta_tilde)) ks.push_back(g2.edges[ei].sender);
            Mat bq = matmul(w.layers[l].heads[h].Q, g2.receiver_bias[rq]) + w.layers[l].heads[h].qb;
            std::string key = std::to_string(l) + "," + std::to_string(h);
            g.head_qbias[key] = g2.receiver_bias[rq];
            g.head_kbias[key] = g2.receiver_bias[rk];
            for (int q : qs)
                for (int k : ks) g.qk_terms.push_back({l, h, q, k, 3.0});
            for (int k : ks) {
                KeyOnlyTerm t;
                t.layer = l;
                t.head = h;
                t.k_sender = k;
                t.theta_tilde = 3.0;
                t.bq = bq;
                g.key_terms.push_back(std::move(t));
            }
        }
    return g;
}

} // namespace drasp
