#pragma once

#include <functional>
#include <string>
#include <vector>

#include "drasp/tasks.hpp"
#include "drasp/tensor.hpp"
#include "drasp/transformer.hpp"

namespace drasp {

struct training_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    double lr = 1e-3;
    double weight_decay = 0.01;
    int batch = 64;
    int max_steps = 5000;
    int eval_every = 50;
    int eval_n = 200;
    double early_stop_acc = 1.0;
    double init_std = 0.05;
    uint64_t seed = 0;
    bool verbose = false;
};

struct TrainReport {
    int steps = 0;
    double final_loss = 0.0;
    double in_dist_accuracy = 0.0;
    bool early_stopped = false;
};

inline double eval_task_accuracy(const TransformerWeights& w, const TaskSpec& spec,
                                 const std::vector<Instance>& instances, LnMode mode,
                                 const LinearLn* lin = nullptr) {
    return task_accuracy(spec, forward_batch(w, instances, mode, lin), instances);
}

// AdamW on all parameters, batches sampled on the fly, early stop when
// in-distribution task accuracy reaches the configured threshold.
inline TrainReport train(TransformerWeights& w, const TaskSpec& spec, const TrainConfig& cfg,
                         const std::function<void(int, double, double)>& progress = nullptr) {
    Rng rng(cfg.seed);
    w.randomize(rng, cfg.init_std);

    auto eval_set = generate(spec, cfg.eval_n, spec.min_len, spec.max_len, cfg.seed ^ 0xe7a1ULL);

    auto params = w.param_list();
    AdamState opt;
    AdamConfig oc;
    oc.lr = cfg.lr;
    oc.weight_decay = cfg.weight_decay;

    TrainReport rep;
    for (int step = 1; step <= cfg.max_steps; ++step) {
        auto batch = generate(spec, cfg.batch, spec.min_len, spec.max_len, rng.next_u64());

        Tape tape;
        TensorWeights tw = lift_weights(tape, w, true);
        std::vector<Tensor> losses;
        losses.reserve(batch.size());
        for (const auto& inst : batch) {
            Tensor logits = forward_ad(tape, tw, inst.tokens, inst.offset, LnMode::exact);
            losses.push_back(instance_loss(spec, logits, inst));
        }
        Tensor loss = ops::scale(ops::sum(losses), 1.0 / batch.size());
        double loss_v = loss.val()(0, 0);
        if (!std::isfinite(loss_v))
            throw training_error("training diverged at step " + std::to_string(step));
        tape.backward(loss);

        // gradients in param_list order: E, P, layers..., ln_f, U, lm_bias
        std::vector<Mat> grads;
        std::vector<Mat*> pptr;
        grads.reserve(params.size());
        auto grab = [&](Tensor t, Mat* p) {
            grads.push_back(tape.grad_of(t.id));
            pptr.push_back(p);
        };
        {
            size_t pi = 0;
            grab(tw.E, params[pi++].second);
            grab(tw.P, params[pi++].second);
            for (int l = 0; l < w.L; ++l) {
                auto& tl = tw.layers[l];
                for (int h = 0; h < w.H; ++h) {
                    grab(tl.heads[h].Q, params[pi++].second);
                    grab(tl.heads[h].qb, params[pi++].second);
                    grab(tl.heads[h].K, params[pi++].second);
                    grab(tl.heads[h].kb, params[pi++].second);
                    grab(tl.heads[h].V, params[pi++].second);
                    grab(tl.heads[h].vb, params[pi++].second);
                }
                grab(tl.mlp.W1, params[pi++].second);
                grab(tl.mlp.b1, params[pi++].second);
                grab(tl.mlp.W2, params[pi++].second);
                grab(tl.mlp.b2, params[pi++].second);
                grab(tl.ln1_gamma, params[pi++].second);
                grab(tl.ln1_beta, params[pi++].second);
                grab(tl.ln2_gamma, params[pi++].second);
                grab(tl.ln2_beta, params[pi++].second);
            }
            grab(tw.lnf_gamma, params[pi++].second);
            grab(tw.lnf_beta, params[pi++].second);
            grab(tw.U, params[pi++].second);
            grab(tw.lm_bias, params[pi++].second);
        }
        adam_step(pptr, grads, opt, oc);

        rep.steps = step;
        rep.final_loss = loss_v;

        if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
            double acc = eval_task_accuracy(w, spec, eval_set, LnMode::exact);
            rep.in_dist_accuracy = acc;
            if (progress) progress(step, loss_v, acc);
            if (acc >= cfg.early_stop_acc) {
                rep.early_stopped = true;
                break;
            }
        }
    }
    return rep;
}

// ---- layer norm linearization (gamma') ----

struct LinearLnReport {
    double mean_kl = 0.0;
    double match_acc = 0.0;
    bool llna_holds = false;
};

// Mean variance of the pre-LN activations at each site over a dataset,
// used to initialize gamma' = gamma / sqrt(var + eps).
inline std::vector<double> mean_site_variance(const TransformerWeights& w,
                                              const std::vector<Instance>& data) {
    const int sites = LinearLn::num_sites(w.L);
    std::vector<double> sum(sites, 0.0);
    std::vector<long> cnt(sites, 0);
    for (const auto& inst : data) {
        const int N = inst.length();
        Mat y(w.d, N);
        for (int j = 0; j < N; ++j)
            for (int i = 0; i < w.d; ++i)
                y(i, j) = w.E(i, inst.tokens[j]) + w.P(i, inst.offset + j);
        auto accum_var = [&](const Mat& x, int site) {
            for (int j = 0; j < x.cols(); ++j) {
                double mu = 0;
                for (int i = 0; i < x.rows(); ++i) mu += x(i, j);
                mu /= x.rows();
                double var = 0;
                for (int i = 0; i < x.rows(); ++i) {
                    double c = x(i, j) - mu;
                    var += c * c;
                }
                sum[site] += var / x.rows();
                cnt[site] += 1;
            }
        };
        for (int l = 0; l < w.L; ++l) {
            const auto& lay = w.layers[l];
            // q/k/v read the same pre-attention stream
            accum_var(y, LinearLn::site_q(l));
            accum_var(y, LinearLn::site_k(l));
            accum_var(y, LinearLn::site_v(l));
            Mat xa = detail::ln_exact_plain(y, lay.ln1, w.ln_eps);
            for (int h = 0; h < w.H; ++h) {
                const auto& hw = lay.heads[h];
                Mat q = detail::add_colvec_plain(matmul(hw.Q, xa), hw.qb);
                Mat k = detail::add_colvec_plain(matmul(hw.K, xa), hw.kb);
                Mat v = detail::add_colvec_plain(matmul(hw.V, xa), hw.vb);
                Mat att = detail::causal_softmax_plain(matmul_tn(q, k));
                y += matmul_nt(v, att);
            }
            accum_var(y, LinearLn::site_mlp(l));
            Mat xm = detail::ln_exact_plain(y, lay.ln2, w.ln_eps);
            y += mlp_apply_plain(lay.mlp, xm);
        }
        accum_var(y, LinearLn::site_final(w.L));
    }
    std::vector<double> out(sum.size());
    for (size_t i = 0; i < sum.size(); ++i) out[i] = cnt[i] ? sum[i] / cnt[i] : 1.0;
    return out;
}

struct FitLnConfig {
    int steps = 300;
    int batch = 16;
    double lr = 1e-2;
    uint64_t seed = 1;
    double llna_threshold = 0.9;
};

// Trains per-site diagonal gamma' to minimize the mean KL between the exact
// model and its linearized form, then reports KL and match accuracy.
inline LinearLnReport fit_linear_ln(const TransformerWeights& w, const TaskSpec& spec,
                                    const std::vector<Instance>& dataset, LinearLn& out,
                                    const FitLnConfig& cfg = {}) {
    if (w.absorbed) throw input_error("fit_linear_ln: weights already absorbed");
    const int sites = LinearLn::num_sites(w.L);
    std::vector<Instance> calib(dataset.begin(),
                                dataset.begin() + std::min<size_t>(dataset.size(), 32));
    auto vars = mean_site_variance(w, calib);

    out.gamma_prime.assign(sites, Mat(w.d, 1));
    auto site_gamma = [&](int s) -> const Mat& {
        if (s < 4 * w.L) return (s % 4 == 3) ? w.layers[s / 4].ln2.gamma : w.layers[s / 4].ln1.gamma;
        return w.ln_f.gamma;
    };
    for (int s = 0; s < sites; ++s)
        for (int i = 0; i < w.d; ++i)
            out.gamma_prime[s](i, 0) = site_gamma(s)(i, 0) / std::sqrt(vars[s] + w.ln_eps);

    std::vector<Mat> ref;
    ref.reserve(dataset.size());
    for (const auto& inst : dataset)
        ref.push_back(forward_plain(w, inst.tokens, inst.offset, LnMode::exact));

    AdamState opt;
    AdamConfig oc;
    oc.lr = cfg.lr;
    Rng rng(cfg.seed);
    TransformerWeights& wmut = const_cast<TransformerWeights&>(w);  // weights stay constant

    for (int step = 0; step < cfg.steps; ++step) {
        Tape tape;
        TensorWeights tw = lift_weights(tape, wmut, false);
        for (int s = 0; s < sites; ++s) tw.gamma_prime.push_back(tape.leaf(out.gamma_prime[s]));
        std::vector<Tensor> kls;
        for (int b = 0; b < cfg.batch; ++b) {
            int k = (int)rng.below(dataset.size());
            const Instance& inst = dataset[k];
            Tensor logits = forward_ad(tape, tw, inst.tokens, inst.offset, LnMode::linear);
            kls.push_back(instance_kl(spec, ref[k], logits, inst));
        }
        Tensor loss = ops::scale(ops::sum(kls), 1.0 / cfg.batch);
        tape.backward(loss);
        std::vector<Mat> grads;
        std::vector<Mat*> ps;
        for (int s = 0; s < sites; ++s) {
            grads.push_back(tape.grad_of(tw.gamma_prime[s].id));
            ps.push_back(&out.gamma_prime[s]);
        }
        adam_step(ps, grads, opt, oc);
    }

    LinearLnReport rep;
    std::vector<Mat> lin_out;
    lin_out.reserve(dataset.size());
    double kl_sum = 0;
    for (size_t k = 0; k < dataset.size(); ++k) {
        Mat lg = forward_plain(w, dataset[k].tokens, dataset[k].offset, LnMode::linear, &out);
        kl_sum += kl_value(spec, ref[k], lg, dataset[k]);
        lin_out.push_back(std::move(lg));
    }
    rep.mean_kl = kl_sum / dataset.size();
    rep.match_acc = match_accuracy(spec, ref, lin_out, dataset);
    rep.llna_holds = rep.match_acc >= cfg.llna_threshold;
    return rep;
}

// The linearized site as a matrix: gamma' scales after centering, so
// L = diag(gamma') (I - 11^T/d).
inline Mat centering_map(const Mat& gamma_prime) {
    const int d = gamma_prime.rows();
    Mat L(d, d);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) L(i, j) = gamma_prime(i, 0) * ((i == j ? 1.0 : 0.0) - 1.0 / d);
    return L;
}

// Folds linearized layer norm into the adjacent linear maps: every Q, K, V
// and MLP input map is right-multiplied by its site's L, the site's beta
// moves into the bias. forward(absorbed, none) equals forward(w, linear).
inline TransformerWeights absorb_ln(const TransformerWeights& w, const LinearLn& lin) {
    if (w.absorbed) throw input_error("absorb_ln: weights already absorbed");
    if ((int)lin.gamma_prime.size() != LinearLn::num_sites(w.L))
        throw dimension_error("absorb_ln: wrong number of sites");
    TransformerWeights out = w;
    for (int l = 0; l < w.L; ++l) {
        auto& lay = out.layers[l];
        Mat Lq = centering_map(lin.gamma_prime[LinearLn::site_q(l)]);
        Mat Lk = centering_map(lin.gamma_prime[LinearLn::site_k(l)]);
        Mat Lv = centering_map(lin.gamma_prime[LinearLn::site_v(l)]);
        const Mat& b1 = lay.ln1.beta;
        for (auto& h : lay.heads) {
            h.qb += matmul(h.Q, b1);
            h.kb += matmul(h.K, b1);
            h.vb += matmul(h.V, b1);
            h.Q = matmul(h.Q, Lq);
            h.K = matmul(h.K, Lk);
            h.V = matmul(h.V, Lv);
        }
        Mat Lm = centering_map(lin.gamma_prime[LinearLn::site_mlp(l)]);
        const Mat& b2 = lay.ln2.beta;
        lay.mlp.b1 += matmul(lay.mlp.W1, b2);
        lay.mlp.W1 = matmul(lay.mlp.W1, Lm);
        lay.ln1 = {Mat(w.d, 1, 1.0), Mat(w.d, 1, 0.0)};
        lay.ln2 = {Mat(w.d, 1, 1.0), Mat(w.d, 1, 0.0)};
    }
    Mat Lf = centering_map(lin.gamma_prime[LinearLn::site_final(w.L)]);
    out.lm_bias += matmul(out.U, w.ln_f.beta);
    out.U = matmul(out.U, Lf);
    out.ln_f = {Mat(w.d, 1, 1.0), Mat(w.d, 1, 0.0)};
    out.absorbed = true;
    return out;
}

} // namespace drasp
