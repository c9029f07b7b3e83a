#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "drasp/interp.hpp"
#include "drasp/pretty.hpp"
#include "drasp/translate.hpp"
#include "test_util.hpp"

using namespace drasp;

namespace {
std::vector<std::string> small_alphabet(int vocab) {
    std::vector<std::string> a;
    for (int i = 0; i < vocab - NUM_SPECIAL; ++i) a.push_back(std::string(1, char('a' + i)));
    return a;
}
} // namespace

TEST_CASE("predicted_size reproduces the published counts") {
    CHECK(predicted_size(1, 4, true) == 56);
    CHECK(predicted_size(4, 4, true) == 16201616);
    CHECK(predicted_size(1, 1, false) == 14);
}

TEST_CASE("enumerated statement counts equal predicted_size") {
    Rng rng(1);
    for (int L : {1, 2})
        for (int H : {1, 2})
            for (bool split : {false, true}) {
                auto w = testutil::random_absorbed_model(rng, L, H, 8, 16, 7);
                auto art = translate(w, small_alphabet(7), split);
                CHECK(art.line_count == predicted_size(L, H, split));
                CHECK(art.program.line_count() == art.line_count);
            }
}

TEST_CASE("translation cap is enforced with the cap named") {
    Rng rng(2);
    auto w = testutil::random_absorbed_model(rng, 2, 2, 8, 16, 7);
    try {
        translate(w, small_alphabet(7), true, 100);
        FAIL("expected translation_error");
    } catch (const translation_error& e) {
        CHECK(std::string(e.what()).find("100") != std::string::npos);
    }
}

TEST_CASE("translate requires absorbed weights") {
    Rng rng(3);
    auto w = testutil::random_absorbed_model(rng, 1, 1, 8, 16, 7);
    w.absorbed = false;
    CHECK_THROWS_AS(translate(w, small_alphabet(7)), translation_error);
}

TEST_CASE("translated program logits equal model logits exactly") {
    Rng rng(10);
    for (int L : {1, 2})
        for (int H : {1, 2}) {
            auto w = testutil::random_absorbed_model(rng, L, H, 8, 20, 7, 0.3);
            auto art = translate(w, small_alphabet(7));
            double worst = 0;
            for (int trial = 0; trial < 6; ++trial) {
                int n = 2 + (int)rng.below(8);
                std::vector<int> toks(n);
                for (auto& t : toks) t = (int)rng.below(7);
                int off = (int)rng.below(20 - n + 1);
                Mat model = forward_plain(w, toks, off, LnMode::none);
                Mat prog = eval(art.program, toks, off).logits;
                worst = std::max(worst, (model - prog).max_abs());
            }
            CHECK(worst < 1e-6);
        }
}

TEST_CASE("per-layer residual recovery is exact") {
    Rng rng(20);
    auto w = testutil::random_absorbed_model(rng, 2, 2, 8, 16, 7, 0.3);
    auto art = translate(w, small_alphabet(7));
    std::vector<Instance> inputs;
    for (int k = 0; k < 5; ++k) {
        Instance inst;
        int n = 3 + (int)rng.below(6);
        for (int i = 0; i < n; ++i) inst.tokens.push_back((int)rng.below(7));
        inst.offset = (int)rng.below(16 - n + 1);
        inst.supervised.assign(n, 1);
        inputs.push_back(inst);
    }
    auto errs = verify_recovery(art, w, inputs);
    for (double e : errs) CHECK(e < 1e-8);
    // layer 0 is definitional: exactly zero
    CHECK(errs[0] < 1e-12);
}

TEST_CASE("recovery stays exact with one head's V zeroed") {
    Rng rng(30);
    auto w = testutil::random_absorbed_model(rng, 1, 2, 8, 16, 7, 0.3);
    w.layers[0].heads[1].V = Mat(8, 8);
    w.layers[0].heads[1].vb = Mat(8, 1);
    auto art = translate(w, small_alphabet(7));
    std::vector<Instance> inputs;
    Instance inst;
    inst.tokens = {0, 4, 5, 6, 4};
    inst.offset = 3;
    inst.supervised.assign(5, 1);
    inputs.push_back(inst);
    auto errs = verify_recovery(art, w, inputs);
    for (double e : errs) CHECK(e < 1e-8);
    Mat model = forward_plain(w, inst.tokens, inst.offset, LnMode::none);
    Mat prog = eval(art.program, inst.tokens, inst.offset).logits;
    CHECK((model - prog).max_abs() < 1e-8);
}

TEST_CASE("selector sums recover head attention logits") {
    Rng rng(40);
    SUBCASE("bias-free model: exact equality") {
        auto w = testutil::random_absorbed_model(rng, 2, 2, 8, 16, 7, 0.3, false);
        auto art = translate(w, small_alphabet(7));
        std::vector<int> toks = {0, 4, 5, 6, 4, 5};
        int off = 2;
        auto ev = eval(art.program, toks, off);
        ForwardTrace tr = forward_trace(w, toks, off, LnMode::none);
        for (int l = 0; l < w.L; ++l)
            for (int h = 0; h < w.H; ++h) {
                // model attention logits for this head
                Mat q(w.d_h, 6), k(w.d_h, 6);
                const auto& hw = w.layers[l].heads[h];
                q = detail::add_colvec_plain(matmul(hw.Q, tr.residuals[l]), hw.qb);
                k = detail::add_colvec_plain(matmul(hw.K, tr.residuals[l]), hw.kb);
                Mat logits = matmul_tn(q, k);
                Mat sum(6, 6);
                for (int sid : art.head_selectors[l][h]) sum += ev.sel_values[sid];
                for (int i = 0; i < 6; ++i)
                    for (int s = 0; s <= i; ++s)
                        CHECK(std::fabs(sum(i, s) - logits(i, s)) < 1e-8);
            }
    }
    SUBCASE("biased model: equality after per-row centering") {
        auto w = testutil::random_absorbed_model(rng, 1, 1, 8, 16, 7, 0.3, true);
        auto art = translate(w, small_alphabet(7));
        std::vector<int> toks = {0, 4, 5, 6};
        auto ev = eval(art.program, toks, 0);
        ForwardTrace tr = forward_trace(w, toks, 0, LnMode::none);
        const auto& hw = w.layers[0].heads[0];
        Mat q = detail::add_colvec_plain(matmul(hw.Q, tr.residuals[0]), hw.qb);
        Mat k = detail::add_colvec_plain(matmul(hw.K, tr.residuals[0]), hw.kb);
        Mat logits = matmul_tn(q, k);
        Mat sum(4, 4);
        for (int sid : art.head_selectors[0][0]) sum += ev.sel_values[sid];
        for (int i = 0; i < 4; ++i) {
            double m1 = 0, m2 = 0;
            for (int s = 0; s <= i; ++s) {
                m1 += logits(i, s) / (i + 1);
                m2 += sum(i, s) / (i + 1);
            }
            for (int s = 0; s <= i; ++s)
                CHECK(std::fabs((logits(i, s) - m1) - (sum(i, s) - m2)) < 1e-8);
        }
        // attention weights are therefore identical
        Mat wts = detail::causal_softmax_plain(sum);
        CHECK((wts - tr.attn[0]).max_abs() < 1e-10);
    }
}

TEST_CASE("translation is deterministic") {
    Rng rng(50);
    auto w = testutil::random_absorbed_model(rng, 1, 2, 8, 16, 7);
    auto a1 = translate(w, small_alphabet(7));
    auto a2 = translate(w, small_alphabet(7));
    CHECK(program_to_json(a1.program).dump() == program_to_json(a2.program).dump());
}

TEST_CASE("unsplit 1-layer 1-head pretty output has the expected shape") {
    Rng rng(60);
    auto w = testutil::random_absorbed_model(rng, 1, 1, 8, 16, 7, 0.3, false);
    auto art = translate(w, small_alphabet(7));
    auto out = pretty_print_full(art.program);
    CHECK(out.lines == 14);
    CHECK(out.text.find("1. s1 = select(q=token, k=token") != std::string::npos);
    CHECK(out.text.find("5. a1 = aggregate(s=s1+s2+s3+s4, v=token)") != std::string::npos);
    CHECK(out.text.find("7. m1 = element_wise_op(token+pos+a1+a2)") != std::string::npos);
    CHECK(out.text.find("prediction = softmax(") != std::string::npos);
}
