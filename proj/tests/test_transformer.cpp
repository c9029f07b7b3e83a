#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "drasp/checkpoint.hpp"
#include "drasp/train.hpp"
#include "drasp/transformer.hpp"

using namespace drasp;

namespace {
std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
}
} // namespace

TEST_CASE("all-zero weights give all-zero logits") {
    auto w = TransformerWeights::make(1, 1, 8, 16, 6, Objective::language_model);
    w.absorbed = true;
    Mat lg = forward_plain(w, {0, 4, 5}, 0, LnMode::none);
    CHECK(lg.max_abs() == 0.0);
}

TEST_CASE("zero QK means uniform attention over the prefix") {
    Rng rng(3);
    auto w = TransformerWeights::make(1, 1, 8, 16, 6, Objective::language_model);
    w.absorbed = true;
    w.E = Mat::randn(8, 6, rng);
    w.layers[0].heads[0].V = Mat::randn(8, 8, rng);
    ForwardTrace tr = forward_trace(w, {0, 4, 5, 4}, 0, LnMode::none);
    const Mat& att = tr.attn[0];
    for (int i = 0; i < 4; ++i)
        for (int s = 0; s <= i; ++s) CHECK(att(i, s) == doctest::Approx(1.0 / (i + 1)));
    // head output at position i equals V * (prefix mean of embeddings)
    const int i = 3;
    Mat mean(8, 1);
    for (int s = 0; s <= i; ++s) mean += tr.residuals[0].col(s);
    mean *= 1.0 / (i + 1);
    Mat head_out = tr.residuals[1].col(i) - tr.residuals[0].col(i);  // mlp is zero
    Mat expect = matmul(w.layers[0].heads[0].V, mean);
    CHECK((head_out - expect).max_abs() < 1e-12);
}

TEST_CASE("context overflow raises input error") {
    auto w = TransformerWeights::make(1, 1, 8, 4, 6, Objective::language_model);
    w.absorbed = true;
    CHECK_THROWS_AS(forward_plain(w, {0, 4, 5, 4, 5}, 0, LnMode::none), input_error);
    CHECK_THROWS_AS(forward_plain(w, {0, 4}, 3, LnMode::none), input_error);
}

TEST_CASE("plain forward matches tape forward in all ln modes") {
    Rng rng(17);
    auto w = TransformerWeights::make(2, 2, 8, 16, 6, Objective::language_model);
    w.randomize(rng, 0.4);
    std::vector<int> toks = {0, 4, 5, 4, 3};
    for (LnMode mode : {LnMode::exact, LnMode::linear}) {
        LinearLn lin;
        for (int s = 0; s < LinearLn::num_sites(w.L); ++s) lin.gamma_prime.push_back(Mat::randn(8, 1, rng, 0.3));
        Mat a = forward_plain(w, toks, 2, mode, &lin);
        Tape t;
        TensorWeights tw = lift_weights(t, w, false);
        for (auto& g : lin.gamma_prime) tw.gamma_prime.push_back(t.constant(g));
        Mat b = forward_ad(t, tw, toks, 2, mode).val();
        CHECK((a - b).max_abs() < 1e-12);
    }
}

TEST_CASE("prefix property: logits at i do not depend on tokens after i") {
    Rng rng(23);
    auto w = TransformerWeights::make(2, 1, 8, 16, 6, Objective::language_model);
    w.randomize(rng, 0.4);
    std::vector<int> a = {0, 4, 5, 4, 5}, b = {0, 4, 5, 3, 4};
    Mat la = forward_plain(w, a, 1, LnMode::exact);
    Mat lb = forward_plain(w, b, 1, LnMode::exact);
    for (int i = 0; i < 3; ++i)
        for (int v = 0; v < 6; ++v) CHECK(la(v, i) == doctest::Approx(lb(v, i)).epsilon(1e-12));
}

TEST_CASE("offset equivariance reads different P columns only") {
    Rng rng(29);
    auto w = TransformerWeights::make(1, 1, 8, 16, 6, Objective::language_model);
    w.randomize(rng, 0.4);
    // make P constant across positions: then offsets must not matter at all
    for (int i = 0; i < 8; ++i)
        for (int j = 1; j < 16; ++j) w.P(i, j) = w.P(i, 0);
    Mat l0 = forward_plain(w, {0, 4, 5}, 0, LnMode::exact);
    Mat l7 = forward_plain(w, {0, 4, 5}, 7, LnMode::exact);
    CHECK((l0 - l7).max_abs() < 1e-12);
}

TEST_CASE("training gradient matches finite differences on a tiny model") {
    auto spec = make_binary_majority(4, 16);
    auto data = generate(spec, 2, 2, 4, 5);
    auto w = TransformerWeights::make(1, 1, 8, 16, spec.vocab_size(), Objective::language_model);
    Rng rng(1);
    w.randomize(rng, 0.3);

    auto params = w.param_list();
    std::vector<std::pair<std::string, Mat>> ps;
    for (auto& [n, m] : params) ps.push_back({n, *m});
    auto f = [&](Tape& t, const std::vector<Tensor>& leaves) {
        TransformerWeights tmp = w;
        auto plist = tmp.param_list();
        TensorWeights tw;
        tw.w = &tmp;
        size_t i = 0;
        tw.E = leaves[i++];
        tw.P = leaves[i++];
        tw.layers.resize(tmp.L);
        for (int l = 0; l < tmp.L; ++l) {
            for (int h = 0; h < tmp.H; ++h)
                tw.layers[l].heads.push_back(TensorHead{leaves[i], leaves[i + 1], leaves[i + 2],
                                                        leaves[i + 3], leaves[i + 4],
                                                        leaves[i + 5]}),
                    i += 6;
            tw.layers[l].mlp = TensorMlp{leaves[i], leaves[i + 1], leaves[i + 2], leaves[i + 3]};
            i += 4;
            tw.layers[l].ln1_gamma = leaves[i++];
            tw.layers[l].ln1_beta = leaves[i++];
            tw.layers[l].ln2_gamma = leaves[i++];
            tw.layers[l].ln2_beta = leaves[i++];
        }
        tw.lnf_gamma = leaves[i++];
        tw.lnf_beta = leaves[i++];
        tw.U = leaves[i++];
        tw.lm_bias = leaves[i++];
        std::vector<Tensor> losses;
        for (auto& inst : data) {
            Tensor lg = forward_ad(t, tw, inst.tokens, inst.offset, LnMode::exact);
            losses.push_back(instance_loss(spec, lg, inst));
        }
        return ops::scale(ops::sum(losses), 1.0 / losses.size());
    };
    auto rep = check_gradients(f, ps);
    CHECK(rep.worst < 1e-4);
}

TEST_CASE("zero learning rate leaves weights unchanged") {
    auto spec = make_binary_majority(4, 16);
    auto w = TransformerWeights::make(1, 1, 8, 16, spec.vocab_size(), Objective::language_model);
    TrainConfig cfg;
    cfg.lr = 0.0;
    cfg.max_steps = 3;
    cfg.eval_every = 10;
    cfg.eval_n = 4;
    cfg.seed = 7;
    train(w, spec, cfg);
    TransformerWeights w2 = TransformerWeights::make(1, 1, 8, 16, spec.vocab_size(),
                                                     Objective::language_model);
    Rng r2(7);
    w2.randomize(r2, cfg.init_std);
    auto pa = w.param_list(), pb = w2.param_list();
    for (size_t i = 0; i < pa.size(); ++i) CHECK((*pa[i].second - *pb[i].second).max_abs() == 0.0);
}

TEST_CASE("fixed seed twice gives bitwise-identical checkpoints") {
    auto spec = make_binary_majority(4, 16);
    auto run = [&](const std::string& path) {
        auto w = TransformerWeights::make(1, 1, 8, 16, spec.vocab_size(),
                                          Objective::language_model);
        TrainConfig cfg;
        cfg.max_steps = 25;
        cfg.eval_every = 25;
        cfg.eval_n = 8;
        cfg.seed = 11;
        train(w, spec, cfg);
        save_checkpoint(w, path, spec.alphabet, spec.name);
    };
    run("ck_a.bin");
    run("ck_b.bin");
    CHECK(slurp("ck_a.bin") == slurp("ck_b.bin"));
    auto loaded = load_checkpoint("ck_a.bin");
    save_checkpoint(loaded, "ck_c.bin", spec.alphabet, spec.name);
    CHECK(slurp("ck_a.bin") == slurp("ck_c.bin"));
    std::remove("ck_a.bin");
    std::remove("ck_b.bin");
    std::remove("ck_c.bin");
}

TEST_CASE("absorb_ln reproduces the linear-ln forward exactly") {
    Rng rng(31);
    auto w = TransformerWeights::make(2, 2, 8, 16, 6, Objective::language_model);
    w.randomize(rng, 0.4);
    for (auto& lay : w.layers) {
        lay.ln1.beta = Mat::randn(8, 1, rng, 0.2);
        lay.ln2.beta = Mat::randn(8, 1, rng, 0.2);
    }
    w.ln_f.beta = Mat::randn(8, 1, rng, 0.2);
    LinearLn lin;
    for (int s = 0; s < LinearLn::num_sites(w.L); ++s) lin.gamma_prime.push_back(Mat::randn(8, 1, rng, 0.5));

    TransformerWeights absorbed = absorb_ln(w, lin);
    CHECK(absorbed.absorbed);
    CHECK_THROWS_AS(absorb_ln(absorbed, lin), input_error);

    std::vector<int> toks = {0, 4, 5, 3, 4, 5};
    Mat a = forward_plain(w, toks, 3, LnMode::linear, &lin);
    Mat b = forward_plain(absorbed, toks, 3, LnMode::none);
    CHECK((a - b).max_abs() < 1e-10);
}

TEST_CASE("gamma'=1, beta=0 absorption equals manual centering") {
    Rng rng(37);
    auto w = TransformerWeights::make(1, 1, 4, 8, 6, Objective::language_model);
    w.randomize(rng, 0.5);
    LinearLn lin;
    for (int s = 0; s < LinearLn::num_sites(w.L); ++s) lin.gamma_prime.push_back(Mat(4, 1, 1.0));
    auto absorbed = absorb_ln(w, lin);
    // Q of the absorbed model equals Q (I - 11^T/d)
    Mat cen = centering_map(Mat(4, 1, 1.0));
    Mat expect = matmul(w.layers[0].heads[0].Q, cen);
    CHECK((absorbed.layers[0].heads[0].Q - expect).max_abs() < 1e-14);
}

TEST_CASE("fit_linear_ln: constant-variance model gives near-zero KL and LLNA holds") {
    // orthogonal equal-norm embedding columns, no position signal, so every
    // token column has the same pre-LN variance
    auto spec = make_binary_majority(6, 16);
    auto w = TransformerWeights::make(1, 1, 8, 16, spec.vocab_size(), Objective::language_model);
    for (int j = 0; j < w.vocab; ++j) w.E(j, j) = 3.0;  // d=8 >= vocab=6
    Rng rng(41);
    w.U = Mat::randn(w.vocab, 8, rng, 0.5);
    auto data = generate(spec, 40, 1, 6, 2);
    LinearLn lin;
    auto rep = fit_linear_ln(w, spec, data, lin, {});
    CHECK(rep.mean_kl < 1e-6);
    CHECK(rep.llna_holds);
}

TEST_CASE("fit_linear_ln: two widely separated variance regimes break LLNA") {
    auto spec = make_binary_majority(6, 16);
    auto w = TransformerWeights::make(1, 1, 8, 16, spec.vocab_size(), Objective::language_model);
    // token '0' tiny embedding, token '1' huge: exact LN rescales both to the
    // same ball, the linear form cannot
    w.E(0, spec.sym(0)) = 0.05;
    w.E(1, spec.sym(0)) = -0.05;
    w.E(0, spec.sym(1)) = 40.0;
    w.E(1, spec.sym(1)) = 40.0;
    w.E(2, TOK_BOS) = 1.0;
    w.E(3, TOK_SEP) = 1.0;
    // unembedding reads normalized directions
    w.U(spec.sym(0), 0) = 4.0;
    w.U(spec.sym(0), 1) = -4.0;
    w.U(spec.sym(1), 0) = 4.0;
    w.U(spec.sym(1), 1) = 4.0;
    auto data = generate(spec, 60, 1, 6, 2);
    LinearLn lin;
    auto rep = fit_linear_ln(w, spec, data, lin, {});
    CHECK(rep.match_acc < 0.9);
    CHECK_FALSE(rep.llna_holds);
}

TEST_CASE("training reaches perfect accuracy on tiny majority") {
    auto spec = make_binary_majority(6, 24);
    auto w = TransformerWeights::make(1, 1, 16, 24, spec.vocab_size(), Objective::language_model);
    TrainConfig cfg;
    cfg.max_steps = 1500;
    cfg.eval_every = 50;
    cfg.eval_n = 60;
    cfg.seed = 3;
    cfg.batch = 32;
    auto rep = train(w, spec, cfg);
    CHECK(rep.in_dist_accuracy == doctest::Approx(1.0));
    CHECK(rep.early_stopped);
}
