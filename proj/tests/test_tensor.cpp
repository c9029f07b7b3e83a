#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "drasp/tensor.hpp"
#include "drasp/rng.hpp"

using namespace drasp;

TEST_CASE("matmul identity and hand arithmetic") {
    Tape t;
    Tensor I = t.constant(Mat::identity(2));
    Tensor v = t.constant(Mat(2, 1, {3, 4}));
    Mat out = ops::matmul(I, v).val();
    CHECK(out(0, 0) == 3);
    CHECK(out(1, 0) == 4);

    Tensor a = t.constant(Mat(2, 2, {1, 2, 3, 4}));
    Tensor b = t.constant(Mat(2, 1, {0, 1}));
    Mat out2 = ops::matmul(a, b).val();
    CHECK(out2(0, 0) == 2);
    CHECK(out2(1, 0) == 4);

    CHECK_THROWS_AS(ops::matmul(a, t.constant(Mat(3, 1))), dimension_error);
}

TEST_CASE("matmul gradient matches finite differences and ones*b^T identity") {
    Rng rng(7);
    Mat a = Mat::randn(5, 7, rng), b = Mat::randn(7, 3, rng);
    auto f = [&](Tape& t, const std::vector<Tensor>& ps) {
        return ops::sum_all(ops::matmul(ps[0], ps[1]));
    };
    auto rep = check_gradients(f, {{"a", a}, {"b", b}});
    CHECK(rep.worst < 1e-6);

    // d sum(ab)/da = ones(5,3) * b^T
    Tape t;
    Tensor ta = t.leaf(a), tb = t.constant(b);
    Tensor s = ops::sum_all(ops::matmul(ta, tb));
    t.backward(s);
    Mat expect = matmul_nt(Mat(5, 3, 1.0), b);
    Mat diff = t.grad_of(ta.id) - expect;
    CHECK(diff.max_abs() < 1e-12);
}

TEST_CASE("softmax_causal rows") {
    Tape t;
    SUBCASE("uniform over prefix of length 3") {
        Mat x(3, 3);  // all-zero logits
        Mat w = ops::softmax_causal(t.constant(x)).val();
        for (int s = 0; s < 3; ++s) CHECK(w(2, s) == doctest::Approx(1.0 / 3).epsilon(1e-12));
        CHECK(w(0, 1) == 0.0);  // masked entries exactly zero
        CHECK(w(1, 2) == 0.0);
    }
    SUBCASE("saturation at 1e4 scale") {
        Mat x(2, 2);
        x(1, 0) = 1e4;
        x(1, 1) = 0.0;
        Mat w = ops::softmax_causal(t.constant(x)).val();
        CHECK(w(1, 0) == doctest::Approx(1.0));
        CHECK(w(1, 1) <= 1e-30);
    }
    SUBCASE("random rows sum to one") {
        Rng rng(3);
        Mat x = Mat::randn(6, 6, rng, 3.0);
        Mat w = ops::softmax_causal(t.constant(x)).val();
        for (int i = 0; i < 6; ++i) {
            double s = 0;
            for (int j = 0; j <= i; ++j) s += w(i, j);
            CHECK(std::fabs(s - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("core op gradients vs central differences") {
    Rng rng(11);
    auto check = [&](const char* name, auto builder, std::vector<std::pair<std::string, Mat>> ps) {
        auto rep = check_gradients(builder, ps);
        INFO(name);
        CHECK(rep.worst < 1e-4);
    };

    check("gelu", [](Tape& t, const std::vector<Tensor>& p) {
        return ops::sum_all(ops::gelu(p[0]));
    }, {{"x", Mat::randn(4, 5, rng)}});

    check("sigmoid+hadamard", [](Tape& t, const std::vector<Tensor>& p) {
        return ops::sum_all(ops::hadamard(ops::sigmoid(p[0]), p[1]));
    }, {{"x", Mat::randn(3, 4, rng)}, {"y", Mat::randn(3, 4, rng)}});

    check("layer_norm", [](Tape& t, const std::vector<Tensor>& p) {
        return ops::sum_all(ops::hadamard(ops::layer_norm_cols(p[0], p[1], p[2]), p[0]));
    }, {{"x", Mat::randn(6, 3, rng)}, {"g", Mat::randn(6, 1, rng)}, {"b", Mat::randn(6, 1, rng)}});

    check("softmax_causal", [](Tape& t, const std::vector<Tensor>& p) {
        return ops::sum_all(ops::hadamard(ops::softmax_causal(p[0]), p[1]));
    }, {{"x", Mat::randn(5, 5, rng)}, {"w", Mat::randn(5, 5, rng)}});

    check("rowscale+center", [](Tape& t, const std::vector<Tensor>& p) {
        return ops::sum_all(ops::rowscale(ops::center_cols(p[0]), p[1]));
    }, {{"x", Mat::randn(4, 6, rng)}, {"g", Mat::randn(4, 1, rng)}});

    check("cross_entropy", [](Tape& t, const std::vector<Tensor>& p) {
        return ops::cross_entropy_cols(p[0], {1, 2, 0}, {1, 1, 1});
    }, {{"z", Mat::randn(4, 3, rng)}});

    Mat targ(4, 3);
    targ(0, 0) = 1;
    targ(2, 1) = 1;
    check("bce", [targ](Tape& t, const std::vector<Tensor>& p) {
        return ops::bce_cols(p[0], targ, {1, 1, 0});
    }, {{"z", Mat::randn(4, 3, rng)}});

    Mat ref = Mat::randn(4, 3, rng);
    check("kl_softmax", [ref](Tape& t, const std::vector<Tensor>& p) {
        return ops::kl_softmax_cols(ref, p[0], {1, 0, 1});
    }, {{"z", Mat::randn(4, 3, rng)}});
    check("kl_bernoulli", [ref](Tape& t, const std::vector<Tensor>& p) {
        return ops::kl_bernoulli_cols(ref, p[0], {1, 1, 1});
    }, {{"z", Mat::randn(4, 3, rng)}});

    check("scale_by+l1", [](Tape& t, const std::vector<Tensor>& p) {
        return ops::add(ops::sum_all(ops::scale_by(p[0], ops::sigmoid(p[1]))), ops::l1_norm(p[0]));
    }, {{"x", Mat::randn(3, 3, rng)}, {"s", Mat::randn(1, 1, rng)}});
}

TEST_CASE("gradient checker on f(x)=x^2 at x=3") {
    auto f = [](Tape& t, const std::vector<Tensor>& p) { return ops::hadamard(p[0], p[0]); };
    auto rep = check_gradients(f, {{"x", Mat(1, 1, {3.0})}});
    CHECK(rep.worst < 1e-6);

    Tape t;
    Tensor x = t.leaf(Mat(1, 1, {3.0}));
    Tensor y = ops::hadamard(x, x);
    t.backward(y);
    CHECK(t.grad_of(x.id)(0, 0) == doctest::Approx(6.0));
}

TEST_CASE("non-finite detection") {
    Tape t;
    Tensor x = t.constant(Mat(1, 1, {700.0}));
    CHECK_THROWS_AS([&] {
        Tensor e = x;
        for (int i = 0; i < 3; ++i) {
            Mat big = e.val();
            for (auto& v : big.raw()) v = std::exp(v);
            e = t.emplace(std::move(big), false, {}, nullptr);
        }
    }(), numeric_error);
}

TEST_CASE("gradient accumulates over fan-out") {
    Tape t;
    Tensor x = t.leaf(Mat(1, 1, {2.0}));
    Tensor y = ops::add(ops::scale(x, 3.0), ops::scale(x, 4.0));
    t.backward(y);
    CHECK(t.grad_of(x.id)(0, 0) == doctest::Approx(7.0));
}

TEST_CASE("determinism: same seed, same results") {
    auto run = [] {
        Rng rng(42);
        Mat a = Mat::randn(8, 8, rng), b = Mat::randn(8, 8, rng);
        Tape t;
        Tensor s = ops::sum_all(ops::gelu(ops::matmul(t.leaf(a), t.leaf(b))));
        return s.val()(0, 0);
    };
    double v1 = run(), v2 = run();
    CHECK(v1 == v2);  // bit-identical
}

TEST_CASE("svd and pseudo-inverse") {
    Rng rng(5);
    Mat a = Mat::randn(6, 4, rng);
    Svd d = svd(a);
    // reconstruction
    Mat us(6, 4);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 4; ++j) us(i, j) = d.u(i, j) * d.s[j];
    Mat rec = matmul_nt(us, d.v);
    CHECK((rec - a).max_abs() < 1e-10);

    // pinv solves least squares: C = v w^+ with v = C0 w exactly recoverable
    Mat c0 = Mat::randn(3, 4, rng);
    Mat w = Mat::randn(4, 50, rng);
    Mat v = matmul(c0, w);
    Mat c = lstsq_left(v, w);
    CHECK((c - c0).max_abs() < 1e-8);

    // rank-deficient w handled by cutoff
    Mat wdef(4, 50);
    for (int j = 0; j < 50; ++j) {
        wdef(0, j) = w(0, j);
        wdef(1, j) = w(0, j);  // duplicated row
        wdef(2, j) = w(2, j);
        wdef(3, j) = w(3, j);
    }
    Mat cd = lstsq_left(matmul(c0, wdef), wdef);
    Mat resid = matmul(cd, wdef) - matmul(c0, wdef);
    CHECK(resid.max_abs() < 1e-8);
}

TEST_CASE("adam converges on a quadratic") {
    Mat x(2, 1, {5.0, -3.0});
    AdamState st;
    AdamConfig cfg;
    cfg.lr = 0.1;
    for (int i = 0; i < 500; ++i) {
        Mat g = x;  // grad of ||x||^2/2
        adam_step({&x}, {g}, st, cfg);
    }
    CHECK(x.max_abs() < 1e-3);
}
