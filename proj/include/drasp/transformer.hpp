#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "drasp/mat.hpp"
#include "drasp/tasks.hpp"
#include "drasp/tensor.hpp"

namespace drasp {

struct input_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// GPT-2-style decoder with absolute positional encodings. Value and output
// projections are merged into a single d x d matrix per head; attention
// biases are kept and carried through translation.
struct HeadWeights {
    Mat Q, K;    // d_h x d
    Mat qb, kb;  // d_h x 1
    Mat V;       // d x d, value*output merged
    Mat vb;      // d x 1, merged value/output bias
};

struct MlpWeights {
    Mat W1, b1;  // hidden x d, hidden x 1
    Mat W2, b2;  // d x hidden, d x 1
};

struct LnSite {
    Mat gamma, beta;  // d x 1
};

struct LayerWeights {
    LnSite ln1, ln2;
    std::vector<HeadWeights> heads;
    MlpWeights mlp;
};

struct TransformerWeights {
    int L = 0, H = 0, d = 0, d_h = 0, T = 0, vocab = 0;
    Objective objective = Objective::language_model;
    bool absorbed = false;  // layer norm folded into weights

    Mat E;        // d x vocab
    Mat P;        // d x T
    std::vector<LayerWeights> layers;
    LnSite ln_f;
    Mat U;        // vocab x d
    Mat lm_bias;  // vocab x 1

    double ln_eps = 1e-5;

    static TransformerWeights make(int L, int H, int d, int T, int vocab, Objective obj,
                                   int hidden = -1) {
        if (d % H != 0) throw dimension_error("d must be divisible by H");
        TransformerWeights w;
        w.L = L;
        w.H = H;
        w.d = d;
        w.d_h = d / H;
        w.T = T;
        w.vocab = vocab;
        w.objective = obj;
        if (hidden < 0) hidden = 4 * d;
        w.E = Mat(d, vocab);
        w.P = Mat(d, T);
        w.U = Mat(vocab, d);
        w.lm_bias = Mat(vocab, 1);
        w.ln_f = {Mat(d, 1, 1.0), Mat(d, 1, 0.0)};
        w.layers.resize(L);
        for (auto& lay : w.layers) {
            lay.ln1 = {Mat(d, 1, 1.0), Mat(d, 1, 0.0)};
            lay.ln2 = {Mat(d, 1, 1.0), Mat(d, 1, 0.0)};
            lay.heads.resize(H);
            for (auto& h : lay.heads) {
                h.Q = Mat(w.d_h, d);
                h.K = Mat(w.d_h, d);
                h.qb = Mat(w.d_h, 1);
                h.kb = Mat(w.d_h, 1);
                h.V = Mat(d, d);
                h.vb = Mat(d, 1);
            }
            lay.mlp = {Mat(hidden, d), Mat(hidden, 1), Mat(d, hidden), Mat(d, 1)};
        }
        return w;
    }

    void randomize(Rng& rng, double std = 0.05) {
        auto fill = [&](Mat& m, double s) {
            for (auto& v : m.raw()) v = rng.gauss() * s;
        };
        fill(E, std);
        fill(P, std);
        fill(U, std);
        double qk_std = 1.0 / std::sqrt((double)d);
        for (auto& lay : layers) {
            for (auto& h : lay.heads) {
                fill(h.Q, qk_std);
                fill(h.K, qk_std);
                fill(h.V, std);
            }
            fill(lay.mlp.W1, std);
            fill(lay.mlp.W2, std);
        }
    }

    int hidden() const { return layers.empty() ? 0 : layers[0].mlp.W1.rows(); }

    // fixed parameter enumeration shared by the optimizer, the checkpoint
    // manifest, and the gradient checker
    std::vector<std::pair<std::string, Mat*>> param_list() {
        std::vector<std::pair<std::string, Mat*>> p;
        p.push_back({"E", &E});
        p.push_back({"P", &P});
        for (int l = 0; l < L; ++l) {
            auto& lay = layers[l];
            std::string pre = "layer" + std::to_string(l) + ".";
            for (int h = 0; h < H; ++h) {
                auto& hw = lay.heads[h];
                std::string hp = pre + "head" + std::to_string(h) + ".";
                p.push_back({hp + "Q", &hw.Q});
                p.push_back({hp + "qb", &hw.qb});
                p.push_back({hp + "K", &hw.K});
                p.push_back({hp + "kb", &hw.kb});
                p.push_back({hp + "V", &hw.V});
                p.push_back({hp + "vb", &hw.vb});
            }
            p.push_back({pre + "mlp.W1", &lay.mlp.W1});
            p.push_back({pre + "mlp.b1", &lay.mlp.b1});
            p.push_back({pre + "mlp.W2", &lay.mlp.W2});
            p.push_back({pre + "mlp.b2", &lay.mlp.b2});
            p.push_back({pre + "ln1.gamma", &lay.ln1.gamma});
            p.push_back({pre + "ln1.beta", &lay.ln1.beta});
            p.push_back({pre + "ln2.gamma", &lay.ln2.gamma});
            p.push_back({pre + "ln2.beta", &lay.ln2.beta});
        }
        p.push_back({"ln_f.gamma", &ln_f.gamma});
        p.push_back({"ln_f.beta", &ln_f.beta});
        p.push_back({"U", &U});
        p.push_back({"lm_bias", &lm_bias});
        return p;
    }
};

enum class LnMode { exact, linear, none };

// Per-receiver gamma' for the linearized layer norm: the shared pre-attention
// norm gets an independent diagonal per consumer (query, key, value), the
// pre-MLP norm one, plus the final site. Site order per layer: q, k, v, mlp.
struct LinearLn {
    std::vector<Mat> gamma_prime;  // (4L + 1) vectors of size d x 1

    static int site_q(int l) { return 4 * l; }
    static int site_k(int l) { return 4 * l + 1; }
    static int site_v(int l) { return 4 * l + 2; }
    static int site_mlp(int l) { return 4 * l + 3; }
    static int site_final(int L) { return 4 * L; }
    static int num_sites(int L) { return 4 * L + 1; }
};

namespace detail {

inline Mat ln_exact_plain(const Mat& x, const LnSite& site, double eps) {
    const int d = x.rows(), n = x.cols();
    Mat out(d, n);
    for (int j = 0; j < n; ++j) {
        double mu = 0;
        for (int i = 0; i < d; ++i) mu += x(i, j);
        mu /= d;
        double var = 0;
        for (int i = 0; i < d; ++i) {
            double c = x(i, j) - mu;
            var += c * c;
        }
        var /= d;
        double is = 1.0 / std::sqrt(var + eps);
        for (int i = 0; i < d; ++i)
            out(i, j) = (x(i, j) - mu) * is * site.gamma(i, 0) + site.beta(i, 0);
    }
    return out;
}

inline Mat ln_linear_plain(const Mat& x, const Mat& gamma_prime, const Mat& beta) {
    const int d = x.rows(), n = x.cols();
    Mat out(d, n);
    for (int j = 0; j < n; ++j) {
        double mu = 0;
        for (int i = 0; i < d; ++i) mu += x(i, j);
        mu /= d;
        for (int i = 0; i < d; ++i)
            out(i, j) = (x(i, j) - mu) * gamma_prime(i, 0) + beta(i, 0);
    }
    return out;
}

inline Mat gelu_plain(Mat x) {
    for (auto& v : x.raw()) v = v * 0.5 * (1.0 + std::erf(v * 0.7071067811865475244));
    return x;
}

inline Mat causal_softmax_plain(const Mat& logits) {
    const int n = logits.rows();
    Mat w(n, n);
    for (int i = 0; i < n; ++i) {
        double mx = logits(i, 0);
        for (int s = 1; s <= i; ++s) mx = std::max(mx, logits(i, s));
        double z = 0;
        for (int s = 0; s <= i; ++s) {
            w(i, s) = std::exp(logits(i, s) - mx);
            z += w(i, s);
        }
        for (int s = 0; s <= i; ++s) w(i, s) /= z;
    }
    return w;
}

inline Mat add_colvec_plain(Mat x, const Mat& b) {
    for (int i = 0; i < x.rows(); ++i)
        for (int j = 0; j < x.cols(); ++j) x(i, j) += b(i, 0);
    return x;
}

} // namespace detail

struct ForwardTrace {
    Mat logits;                  // vocab x N
    std::vector<Mat> residuals;  // y^(0) .. y^(L), each d x N
    std::vector<Mat> attn;       // attention weights per (layer, head), row-major l*H+h
};

inline Mat mlp_apply_plain(const MlpWeights& m, const Mat& x) {
    Mat h = detail::add_colvec_plain(matmul(m.W1, x), m.b1);
    h = detail::gelu_plain(std::move(h));
    return detail::add_colvec_plain(matmul(m.W2, h), m.b2);
}

inline ForwardTrace forward_trace(const TransformerWeights& w, const std::vector<int>& tokens,
                                  int offset, LnMode mode, const LinearLn* lin = nullptr) {
    const int N = (int)tokens.size();
    if (N == 0) throw input_error("empty input");
    if (offset < 0 || offset + N > w.T) throw input_error("context overflow: offset+len > T");
    if (mode == LnMode::linear && !lin) throw input_error("linear ln mode needs gamma'");
    if (mode == LnMode::exact && w.absorbed)
        throw input_error("exact ln mode invalid on absorbed weights");

    auto site_in = [&](const Mat& x, const LnSite& site, int site_idx) -> Mat {
        switch (mode) {
            case LnMode::exact: return detail::ln_exact_plain(x, site, w.ln_eps);
            case LnMode::linear:
                return detail::ln_linear_plain(x, lin->gamma_prime[site_idx], site.beta);
            case LnMode::none: return x;
        }
        return x;
    };

    ForwardTrace tr;
    Mat y(w.d, N);
    for (int j = 0; j < N; ++j)
        for (int i = 0; i < w.d; ++i) y(i, j) = w.E(i, tokens[j]) + w.P(i, offset + j);
    tr.residuals.push_back(y);

    for (int l = 0; l < w.L; ++l) {
        const auto& lay = w.layers[l];
        Mat xq = site_in(y, lay.ln1, LinearLn::site_q(l));
        // the exact norm is receiver-independent; the linearized form can
        // differ per consumer
        Mat xk = mode == LnMode::linear ? site_in(y, lay.ln1, LinearLn::site_k(l)) : xq;
        Mat xv = mode == LnMode::linear ? site_in(y, lay.ln1, LinearLn::site_v(l)) : xq;
        Mat ysum = y;
        for (int h = 0; h < w.H; ++h) {
            const auto& hw = lay.heads[h];
            Mat q = detail::add_colvec_plain(matmul(hw.Q, xq), hw.qb);
            Mat k = detail::add_colvec_plain(matmul(hw.K, xk), hw.kb);
            Mat v = detail::add_colvec_plain(matmul(hw.V, xv), hw.vb);
            Mat att = detail::causal_softmax_plain(matmul_tn(q, k));
            tr.attn.push_back(att);
            ysum += matmul_nt(v, att);
        }
        Mat xm = site_in(ysum, lay.ln2, LinearLn::site_mlp(l));
        ysum += mlp_apply_plain(lay.mlp, xm);
        y = std::move(ysum);
        tr.residuals.push_back(y);
    }

    Mat xf = site_in(y, w.ln_f, LinearLn::site_final(w.L));
    tr.logits = detail::add_colvec_plain(matmul(w.U, xf), w.lm_bias);
    if (!tr.logits.all_finite()) throw numeric_error("non-finite logits");
    return tr;
}

inline Mat forward_plain(const TransformerWeights& w, const std::vector<int>& tokens, int offset,
                         LnMode mode, const LinearLn* lin = nullptr) {
    return forward_trace(w, tokens, offset, mode, lin).logits;
}

inline std::vector<Mat> forward_batch(const TransformerWeights& w,
                                      const std::vector<Instance>& instances, LnMode mode,
                                      const LinearLn* lin = nullptr) {
    std::vector<Mat> out;
    out.reserve(instances.size());
    for (const auto& inst : instances)
        out.push_back(forward_plain(w, inst.tokens, inst.offset, mode, lin));
    return out;
}

// ---- tape-backed forward for training and gamma' fitting ----

struct TensorHead {
    Tensor Q, qb, K, kb, V, vb;
};
struct TensorMlp {
    Tensor W1, b1, W2, b2;
};
struct TensorLayer {
    std::vector<TensorHead> heads;
    TensorMlp mlp;
    Tensor ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
};
struct TensorWeights {
    const TransformerWeights* w = nullptr;
    Tensor E, P, U, lm_bias, lnf_gamma, lnf_beta;
    std::vector<TensorLayer> layers;
    std::vector<Tensor> gamma_prime;  // only in linear mode fitting
};

// Leaves are created in param_list order so gradients line up with it.
inline TensorWeights lift_weights(Tape& t, TransformerWeights& w, bool trainable) {
    TensorWeights tw;
    tw.w = &w;
    auto mk = [&](Mat& m) { return trainable ? t.leaf(m, true) : t.constant(m); };
    tw.E = mk(w.E);
    tw.P = mk(w.P);
    tw.layers.resize(w.L);
    for (int l = 0; l < w.L; ++l) {
        auto& lay = w.layers[l];
        auto& tl = tw.layers[l];
        for (int h = 0; h < w.H; ++h) {
            auto& hw = lay.heads[h];
            tl.heads.push_back(TensorHead{mk(hw.Q), mk(hw.qb), mk(hw.K), mk(hw.kb), mk(hw.V),
                                          mk(hw.vb)});
        }
        tl.mlp = TensorMlp{mk(lay.mlp.W1), mk(lay.mlp.b1), mk(lay.mlp.W2), mk(lay.mlp.b2)};
        tl.ln1_gamma = mk(lay.ln1.gamma);
        tl.ln1_beta = mk(lay.ln1.beta);
        tl.ln2_gamma = mk(lay.ln2.gamma);
        tl.ln2_beta = mk(lay.ln2.beta);
    }
    tw.lnf_gamma = mk(w.ln_f.gamma);
    tw.lnf_beta = mk(w.ln_f.beta);
    tw.U = mk(w.U);
    tw.lm_bias = mk(w.lm_bias);
    return tw;
}

inline Tensor mlp_apply_ad(const TensorMlp& m, Tensor x) {
    using namespace ops;
    Tensor h = gelu(add_colvec(matmul(m.W1, x), m.b1));
    return add_colvec(matmul(m.W2, h), m.b2);
}

inline Tensor forward_ad(Tape& t, const TensorWeights& tw, const std::vector<int>& tokens,
                         int offset, LnMode mode) {
    using namespace ops;
    const TransformerWeights& w = *tw.w;
    const int N = (int)tokens.size();
    if (offset < 0 || offset + N > w.T) throw input_error("context overflow: offset+len > T");
    if (mode == LnMode::linear && tw.gamma_prime.empty())
        throw input_error("linear mode needs lifted gamma'");

    auto site_in = [&](Tensor x, Tensor gamma, Tensor beta, int site_idx) -> Tensor {
        switch (mode) {
            case LnMode::exact: return layer_norm_cols(x, gamma, beta, w.ln_eps);
            case LnMode::linear:
                return add_colvec(rowscale(center_cols(x), tw.gamma_prime[site_idx]), beta);
            case LnMode::none: return x;
        }
        return x;
    };

    std::vector<int> pos_ids(N);
    for (int j = 0; j < N; ++j) pos_ids[j] = offset + j;
    Tensor y = add(gather_cols(tw.E, tokens), gather_cols(tw.P, pos_ids));

    for (int l = 0; l < w.L; ++l) {
        const auto& tl = tw.layers[l];
        Tensor xq = site_in(y, tl.ln1_gamma, tl.ln1_beta, LinearLn::site_q(l));
        Tensor xk = mode == LnMode::linear ? site_in(y, tl.ln1_gamma, tl.ln1_beta,
                                                     LinearLn::site_k(l))
                                           : xq;
        Tensor xv = mode == LnMode::linear ? site_in(y, tl.ln1_gamma, tl.ln1_beta,
                                                     LinearLn::site_v(l))
                                           : xq;
        Tensor ysum = y;
        for (int h = 0; h < w.H; ++h) {
            const auto& hw = tl.heads[h];
            Tensor q = add_colvec(matmul(hw.Q, xq), hw.qb);
            Tensor k = add_colvec(matmul(hw.K, xk), hw.kb);
            Tensor v = add_colvec(matmul(hw.V, xv), hw.vb);
            Tensor att = softmax_causal(matmul(transpose(q), k));
            ysum = add(ysum, matmul(v, transpose(att)));
        }
        Tensor xm = site_in(ysum, tl.ln2_gamma, tl.ln2_beta, LinearLn::site_mlp(l));
        y = add(ysum, mlp_apply_ad(tl.mlp, xm));
    }
    Tensor xf = site_in(y, tw.lnf_gamma, tw.lnf_beta, LinearLn::site_final(w.L));
    return add_colvec(matmul(tw.U, xf), tw.lm_bias);
}

// training loss for one instance given its logits
inline Tensor instance_loss(const TaskSpec& spec, Tensor logits, const Instance& inst) {
    if (spec.objective == Objective::language_model) {
        return ops::cross_entropy_cols(logits, inst.lm_targets, inst.supervised);
    }
    Mat targets(spec.vocab_size(), inst.length());
    for (int j = 0; j < inst.length(); ++j)
        if (inst.supervised[j])
            for (int i = 0; i < spec.vocab_size(); ++i) targets(i, j) = inst.valid_next[j][i];
    return ops::bce_cols(logits, targets, inst.supervised);
}

// KL(original || model) for one instance, supervised positions only
inline Tensor instance_kl(const TaskSpec& spec, const Mat& ref_logits, Tensor logits,
                          const Instance& inst) {
    if (spec.objective == Objective::language_model)
        return ops::kl_softmax_cols(ref_logits, logits, inst.supervised);
    return ops::kl_bernoulli_cols(ref_logits, logits, inst.supervised);
}

// plain-number KL for reporting
inline double kl_value(const TaskSpec& spec, const Mat& ref_logits, const Mat& logits,
                       const Instance& inst) {
    Tape t;
    Tensor q = t.constant(logits);
    if (spec.objective == Objective::language_model)
        return ops::kl_softmax_cols(ref_logits, q, inst.supervised).val()(0, 0);
    return ops::kl_bernoulli_cols(ref_logits, q, inst.supervised).val()(0, 0);
}

} // namespace drasp
