#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "drasp/mat.hpp"

namespace drasp {

// Reverse-mode tape over Mat values. Nodes are appended in creation order,
// which is already a topological order, so backward() is a single reverse
// scan and every node is visited exactly once. Gradients accumulate
// additively over fan-out.
class Tape;

struct Tensor {
    Tape* tape = nullptr;
    int id = -1;

    const Mat& val() const;
    Mat& grad() const;
    bool requires_grad() const;
    std::vector<int> shape() const;
};

class Tape {
public:
    struct Node {
        Mat val;
        Mat grad;           // allocated lazily in backward
        bool rg = false;    // participates in gradient flow
        std::vector<int> parents;
        std::function<void(Tape&, int)> back;  // (tape, own id)
    };

    std::vector<Node> nodes;
    bool finite_checks = true;

    Tensor emplace(Mat val, bool rg, std::vector<int> parents,
                   std::function<void(Tape&, int)> back) {
        if (finite_checks && !val.all_finite())
            throw numeric_error("non-finite value produced by tape op");
        nodes.push_back(Node{std::move(val), Mat(), rg, std::move(parents), std::move(back)});
        return Tensor{this, (int)nodes.size() - 1};
    }

    Tensor leaf(Mat val, bool requires_grad = true) {
        return emplace(std::move(val), requires_grad, {}, nullptr);
    }
    Tensor constant(Mat val) { return emplace(std::move(val), false, {}, nullptr); }

    Mat& grad_of(int id) {
        Node& n = nodes[id];
        if (n.grad.empty()) n.grad = Mat(n.val.rows(), n.val.cols());
        return n.grad;
    }

    void backward(const Tensor& root) {
        if (root.tape != this) throw std::logic_error("backward: tensor from another tape");
        const Node& r = nodes[root.id];
        if (r.val.rows() != 1 || r.val.cols() != 1)
            throw dimension_error("backward: root must be scalar");
        grad_of(root.id)(0, 0) = 1.0;
        for (int i = root.id; i >= 0; --i) {
            Node& n = nodes[i];
            if (!n.rg || n.grad.empty() || !n.back) continue;
            n.back(*this, i);
        }
        for (auto& n : nodes) {
            if (finite_checks && !n.grad.empty() && !n.grad.all_finite())
                throw numeric_error("non-finite gradient");
        }
    }

    void clear() { nodes.clear(); }
    size_t size() const { return nodes.size(); }
};

inline const Mat& Tensor::val() const { return tape->nodes[id].val; }
inline Mat& Tensor::grad() const { return tape->grad_of(id); }
inline bool Tensor::requires_grad() const { return tape->nodes[id].rg; }
inline std::vector<int> Tensor::shape() const {
    return {val().rows(), val().cols()};
}

namespace ops {

inline void accum(Tape& t, int pid, const Mat& g) {
    if (!t.nodes[pid].rg) return;
    t.grad_of(pid) += g;
}

inline Tensor add(Tensor a, Tensor b) {
    Tape& t = *a.tape;
    if (!a.val().same_shape(b.val())) throw dimension_error("add: shape mismatch");
    bool rg = a.requires_grad() || b.requires_grad();
    int ia = a.id, ib = b.id;
    return t.emplace(a.val() + b.val(), rg, {ia, ib}, [ia, ib](Tape& t, int self) {
        accum(t, ia, t.nodes[self].grad);
        accum(t, ib, t.nodes[self].grad);
    });
}

inline Tensor sub(Tensor a, Tensor b) {
    Tape& t = *a.tape;
    if (!a.val().same_shape(b.val())) throw dimension_error("sub: shape mismatch");
    bool rg = a.requires_grad() || b.requires_grad();
    int ia = a.id, ib = b.id;
    return t.emplace(a.val() - b.val(), rg, {ia, ib}, [ia, ib](Tape& t, int self) {
        accum(t, ia, t.nodes[self].grad);
        Mat g = t.nodes[self].grad;
        g *= -1.0;
        accum(t, ib, g);
    });
}

inline Tensor scale(Tensor a, double s) {
    Tape& t = *a.tape;
    int ia = a.id;
    return t.emplace(a.val() * s, a.requires_grad(), {ia}, [ia, s](Tape& t, int self) {
        Mat g = t.nodes[self].grad;
        g *= s;
        accum(t, ia, g);
    });
}

inline Tensor hadamard(Tensor a, Tensor b) {
    Tape& t = *a.tape;
    if (!a.val().same_shape(b.val())) throw dimension_error("hadamard: shape mismatch");
    Mat out = a.val();
    for (size_t i = 0; i < out.raw().size(); ++i) out.raw()[i] *= b.val().raw()[i];
    bool rg = a.requires_grad() || b.requires_grad();
    int ia = a.id, ib = b.id;
    return t.emplace(std::move(out), rg, {ia, ib}, [ia, ib](Tape& t, int self) {
        const Mat& g = t.nodes[self].grad;
        if (t.nodes[ia].rg) {
            Mat ga = g;
            for (size_t i = 0; i < ga.raw().size(); ++i) ga.raw()[i] *= t.nodes[ib].val.raw()[i];
            accum(t, ia, ga);
        }
        if (t.nodes[ib].rg) {
            Mat gb = g;
            for (size_t i = 0; i < gb.raw().size(); ++i) gb.raw()[i] *= t.nodes[ia].val.raw()[i];
            accum(t, ib, gb);
        }
    });
}

inline Tensor matmul(Tensor a, Tensor b) {
    Tape& t = *a.tape;
    Mat out = drasp::matmul(a.val(), b.val());
    bool rg = a.requires_grad() || b.requires_grad();
    int ia = a.id, ib = b.id;
    return t.emplace(std::move(out), rg, {ia, ib}, [ia, ib](Tape& t, int self) {
        const Mat& g = t.nodes[self].grad;
        if (t.nodes[ia].rg) accum(t, ia, matmul_nt(g, t.nodes[ib].val));
        if (t.nodes[ib].rg) accum(t, ib, matmul_tn(t.nodes[ia].val, g));
    });
}

inline Tensor transpose(Tensor a) {
    Tape& t = *a.tape;
    int ia = a.id;
    return t.emplace(a.val().transposed(), a.requires_grad(), {ia}, [ia](Tape& t, int self) {
        accum(t, ia, t.nodes[self].grad.transposed());
    });
}

// x (d x N) + b (d x 1) broadcast across columns
inline Tensor add_colvec(Tensor x, Tensor b) {
    Tape& t = *x.tape;
    if (b.val().cols() != 1 || b.val().rows() != x.val().rows())
        throw dimension_error("add_colvec: bias must be d x 1");
    Mat out = x.val();
    for (int i = 0; i < out.rows(); ++i)
        for (int j = 0; j < out.cols(); ++j) out(i, j) += b.val()(i, 0);
    bool rg = x.requires_grad() || b.requires_grad();
    int ix = x.id, ib = b.id;
    return t.emplace(std::move(out), rg, {ix, ib}, [ix, ib](Tape& t, int self) {
        const Mat& g = t.nodes[self].grad;
        accum(t, ix, g);
        if (t.nodes[ib].rg) {
            Mat gb(g.rows(), 1);
            for (int i = 0; i < g.rows(); ++i) {
                double s = 0;
                for (int j = 0; j < g.cols(); ++j) s += g(i, j);
                gb(i, 0) = s;
            }
            accum(t, ib, gb);
        }
    });
}

// multiply row i of x by g(i): x (d x N), gvec (d x 1)
inline Tensor rowscale(Tensor x, Tensor gvec) {
    Tape& t = *x.tape;
    if (gvec.val().cols() != 1 || gvec.val().rows() != x.val().rows())
        throw dimension_error("rowscale: scale must be d x 1");
    Mat out = x.val();
    for (int i = 0; i < out.rows(); ++i)
        for (int j = 0; j < out.cols(); ++j) out(i, j) *= gvec.val()(i, 0);
    bool rg = x.requires_grad() || gvec.requires_grad();
    int ix = x.id, ig = gvec.id;
    return t.emplace(std::move(out), rg, {ix, ig}, [ix, ig](Tape& t, int self) {
        const Mat& g = t.nodes[self].grad;
        if (t.nodes[ix].rg) {
            Mat gx = g;
            for (int i = 0; i < gx.rows(); ++i)
                for (int j = 0; j < gx.cols(); ++j) gx(i, j) *= t.nodes[ig].val(i, 0);
            accum(t, ix, gx);
        }
        if (t.nodes[ig].rg) {
            Mat gg(g.rows(), 1);
            for (int i = 0; i < g.rows(); ++i) {
                double s = 0;
                for (int j = 0; j < g.cols(); ++j) s += g(i, j) * t.nodes[ix].val(i, j);
                gg(i, 0) = s;
            }
            accum(t, ig, gg);
        }
    });
}

// subtract per-column mean over rows
inline Tensor center_cols(Tensor x) {
    Tape& t = *x.tape;
    Mat out = x.val();
    const int d = out.rows(), n = out.cols();
    for (int j = 0; j < n; ++j) {
        double mu = 0;
        for (int i = 0; i < d; ++i) mu += out(i, j);
        mu /= d;
        for (int i = 0; i < d; ++i) out(i, j) -= mu;
    }
    int ix = x.id;
    return t.emplace(std::move(out), x.requires_grad(), {ix}, [ix](Tape& t, int self) {
        const Mat& g = t.nodes[self].grad;
        Mat gx = g;
        const int d = g.rows(), n = g.cols();
        for (int j = 0; j < n; ++j) {
            double mu = 0;
            for (int i = 0; i < d; ++i) mu += g(i, j);
            mu /= d;
            for (int i = 0; i < d; ++i) gx(i, j) -= mu;
        }
        accum(t, ix, gx);
    });
}

// exact layer norm per column: y = (x - mu)/sqrt(var + eps) * gamma + beta
inline Tensor layer_norm_cols(Tensor x, Tensor gamma, Tensor beta, double eps = 1e-5) {
    Tape& t = *x.tape;
    const int d = x.val().rows(), n = x.val().cols();
    if (gamma.val().rows() != d || beta.val().rows() != d)
        throw dimension_error("layer_norm_cols: param dims");
    Mat out(d, n), xhat(d, n);
    std::vector<double> inv_sigma(n);
    for (int j = 0; j < n; ++j) {
        double mu = 0;
        for (int i = 0; i < d; ++i) mu += x.val()(i, j);
        mu /= d;
        double var = 0;
        for (int i = 0; i < d; ++i) {
            double c = x.val()(i, j) - mu;
            var += c * c;
        }
        var /= d;
        double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[j] = is;
        for (int i = 0; i < d; ++i) {
            xhat(i, j) = (x.val()(i, j) - mu) * is;
            out(i, j) = xhat(i, j) * gamma.val()(i, 0) + beta.val()(i, 0);
        }
    }
    bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    int ix = x.id, ig = gamma.id, ib = beta.id;
    return t.emplace(std::move(out), rg, {ix, ig, ib},
                     [ix, ig, ib, xhat, inv_sigma](Tape& t, int self) {
        const Mat& g = t.nodes[self].grad;
        const int d = g.rows(), n = g.cols();
        const Mat& gamma = t.nodes[ig].val;
        if (t.nodes[ix].rg) {
            Mat gx(d, n);
            for (int j = 0; j < n; ++j) {
                double m1 = 0, m2 = 0;
                for (int i = 0; i < d; ++i) {
                    double gh = g(i, j) * gamma(i, 0);
                    m1 += gh;
                    m2 += gh * xhat(i, j);
                }
                m1 /= d;
                m2 /= d;
                for (int i = 0; i < d; ++i) {
                    double gh = g(i, j) * gamma(i, 0);
                    gx(i, j) = (gh - m1 - xhat(i, j) * m2) * inv_sigma[j];
                }
            }
            accum(t, ix, gx);
        }
        if (t.nodes[ig].rg) {
            Mat gg(d, 1);
            for (int i = 0; i < d; ++i) {
                double s = 0;
                for (int j = 0; j < n; ++j) s += g(i, j) * xhat(i, j);
                gg(i, 0) = s;
            }
            accum(t, ig, gg);
        }
        if (t.nodes[ib].rg) {
            Mat gb(d, 1);
            for (int i = 0; i < d; ++i) {
                double s = 0;
                for (int j = 0; j < n; ++j) s += g(i, j);
                gb(i, 0) = s;
            }
            accum(t, ib, gb);
        }
    });
}

inline Tensor gelu(Tensor x) {
    Tape& t = *x.tape;
    Mat out = x.val();
    for (auto& v : out.raw()) v = v * 0.5 * (1.0 + std::erf(v * 0.7071067811865475244));
    int ix = x.id;
    return t.emplace(std::move(out), x.requires_grad(), {ix}, [ix](Tape& t, int self) {
        const Mat& g = t.nodes[self].grad;
        const Mat& xin = t.nodes[ix].val;
        Mat gx = g;
        for (size_t i = 0; i < gx.raw().size(); ++i) {
            double v = xin.raw()[i];
            double phi = 0.5 * (1.0 + std::erf(v * 0.7071067811865475244));
            double pdf = 0.3989422804014326779 * std::exp(-0.5 * v * v);
            gx.raw()[i] *= phi + v * pdf;
        }
        accum(t, ix, gx);
    });
}

inline Tensor sigmoid(Tensor x) {
    Tape& t = *x.tape;
    Mat out = x.val();
    for (auto& v : out.raw()) v = 1.0 / (1.0 + std::exp(-v));
    int ix = x.id;
    Mat saved = out;
    return t.emplace(std::move(out), x.requires_grad(), {ix}, [ix, saved](Tape& t, int self) {
        Mat gx = t.nodes[self].grad;
        for (size_t i = 0; i < gx.raw().size(); ++i) {
            double s = saved.raw()[i];
            gx.raw()[i] *= s * (1.0 - s);
        }
        accum(t, ix, gx);
    });
}

inline Tensor detach(Tensor x) {
    return x.tape->constant(x.val());
}

inline Tensor sum_all(Tensor x) {
    Tape& t = *x.tape;
    double s = 0;
    for (double v : x.val().raw()) s += v;
    Mat out(1, 1);
    out(0, 0) = s;
    int ix = x.id;
    return t.emplace(std::move(out), x.requires_grad(), {ix}, [ix](Tape& t, int self) {
        double g = t.nodes[self].grad(0, 0);
        const Mat& xv = t.nodes[ix].val;
        Mat gx(xv.rows(), xv.cols(), g);
        accum(t, ix, gx);
    });
}

// out(:, t) = src(:, ids[t]); used for token/position embedding lookups
inline Tensor gather_cols(Tensor src, const std::vector<int>& ids) {
    Tape& t = *src.tape;
    const Mat& s = src.val();
    Mat out(s.rows(), (int)ids.size());
    for (int j = 0; j < (int)ids.size(); ++j) {
        if (ids[j] < 0 || ids[j] >= s.cols()) throw dimension_error("gather_cols: id out of range");
        for (int i = 0; i < s.rows(); ++i) out(i, j) = s(i, ids[j]);
    }
    int is = src.id;
    return t.emplace(std::move(out), src.requires_grad(), {is}, [is, ids](Tape& t, int self) {
        const Mat& g = t.nodes[self].grad;
        Mat& gs = t.grad_of(is);
        if (!t.nodes[is].rg) return;
        for (int j = 0; j < (int)ids.size(); ++j)
            for (int i = 0; i < g.rows(); ++i) gs(i, ids[j]) += g(i, j);
    });
}

// Causal row softmax of a square matrix of attention logits: row i is a
// distribution over columns 0..i, other entries exactly zero. Stabilized by
// row-max subtraction (primitive matrices are scaled by 1e4, so this is not
// optional).
inline Tensor softmax_causal(Tensor logits) {
    Tape& t = *logits.tape;
    const Mat& x = logits.val();
    if (x.rows() != x.cols()) throw dimension_error("softmax_causal: square matrix expected");
    const int n = x.rows();
    if (n == 0) throw dimension_error("softmax_causal: empty row has no admissible entries");
    Mat out(n, n);
    for (int i = 0; i < n; ++i) {
        double mx = x(i, 0);
        for (int s = 1; s <= i; ++s) mx = std::max(mx, x(i, s));
        double z = 0;
        for (int s = 0; s <= i; ++s) {
            out(i, s) = std::exp(x(i, s) - mx);
            z += out(i, s);
        }
        for (int s = 0; s <= i; ++s) out(i, s) /= z;
    }
    int ix = logits.id;
    Mat saved = out;
    return t.emplace(std::move(out), logits.requires_grad(), {ix}, [ix, saved](Tape& t, int self) {
        const Mat& g = t.nodes[self].grad;
        const int n = g.rows();
        Mat gx(n, n);
        for (int i = 0; i < n; ++i) {
            double dot = 0;
            for (int s = 0; s <= i; ++s) dot += g(i, s) * saved(i, s);
            for (int s = 0; s <= i; ++s) gx(i, s) = saved(i, s) * (g(i, s) - dot);
        }
        accum(t, ix, gx);
    });
}

// mean over supervised columns of -log softmax(logits)[target]
inline Tensor cross_entropy_cols(Tensor logits, const std::vector<int>& targets,
                                 const std::vector<char>& supervised) {
    Tape& t = *logits.tape;
    const Mat& z = logits.val();
    const int v = z.rows(), n = z.cols();
    if ((int)targets.size() != n || (int)supervised.size() != n)
        throw dimension_error("cross_entropy_cols: alignment");
    int cnt = 0;
    double loss = 0;
    Mat probs(v, n);
    for (int j = 0; j < n; ++j) {
        if (!supervised[j]) continue;
        ++cnt;
        double mx = z(0, j);
        for (int i = 1; i < v; ++i) mx = std::max(mx, z(i, j));
        double s = 0;
        for (int i = 0; i < v; ++i) s += std::exp(z(i, j) - mx);
        double logz = mx + std::log(s);
        loss += logz - z(targets[j], j);
        for (int i = 0; i < v; ++i) probs(i, j) = std::exp(z(i, j) - logz);
    }
    if (cnt == 0) throw dimension_error("cross_entropy_cols: no supervised positions");
    Mat out(1, 1);
    out(0, 0) = loss / cnt;
    int iz = logits.id;
    return t.emplace(std::move(out), logits.requires_grad(), {iz},
                     [iz, targets, supervised, probs, cnt](Tape& t, int self) {
        double g = t.nodes[self].grad(0, 0);
        Mat gz(probs.rows(), probs.cols());
        for (int j = 0; j < probs.cols(); ++j) {
            if (!supervised[j]) continue;
            for (int i = 0; i < probs.rows(); ++i) gz(i, j) = probs(i, j) * g / cnt;
            gz(targets[j], j) -= g / cnt;
        }
        accum(t, iz, gz);
    });
}

// mean over supervised columns and vocab rows of the per-entry binary cross
// entropy between sigmoid(logits) and 0/1 targets
inline Tensor bce_cols(Tensor logits, const Mat& targets01, const std::vector<char>& supervised) {
    Tape& t = *logits.tape;
    const Mat& z = logits.val();
    if (!z.same_shape(targets01)) throw dimension_error("bce_cols: target shape");
    const int v = z.rows(), n = z.cols();
    int cnt = 0;
    double loss = 0;
    for (int j = 0; j < n; ++j) {
        if (!supervised[j]) continue;
        ++cnt;
        for (int i = 0; i < v; ++i) {
            double x = z(i, j), y = targets01(i, j);
            // log(1 + exp(x)) computed stably
            double sp = x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
            loss += sp - y * x;
        }
    }
    if (cnt == 0) throw dimension_error("bce_cols: no supervised positions");
    double denom = double(cnt) * v;
    Mat out(1, 1);
    out(0, 0) = loss / denom;
    int iz = logits.id;
    return t.emplace(std::move(out), logits.requires_grad(), {iz},
                     [iz, targets01, supervised, denom](Tape& t, int self) {
        double g = t.nodes[self].grad(0, 0);
        const Mat& z = t.nodes[iz].val;
        Mat gz(z.rows(), z.cols());
        for (int j = 0; j < z.cols(); ++j) {
            if (!supervised[j]) continue;
            for (int i = 0; i < z.rows(); ++i) {
                double q = 1.0 / (1.0 + std::exp(-z(i, j)));
                gz(i, j) = (q - targets01(i, j)) * g / denom;
            }
        }
        accum(t, iz, gz);
    });
}

// mean over supervised columns of KL(softmax(ref) || softmax(q))
inline Tensor kl_softmax_cols(const Mat& ref_logits, Tensor q, const std::vector<char>& supervised) {
    Tape& t = *q.tape;
    const Mat& z = q.val();
    if (!z.same_shape(ref_logits)) throw dimension_error("kl_softmax_cols: shape");
    const int v = z.rows(), n = z.cols();
    int cnt = 0;
    double loss = 0;
    Mat p(v, n), qprob(v, n);
    auto colsoftmax = [v](const Mat& m, int j, Mat& out) {
        double mx = m(0, j);
        for (int i = 1; i < v; ++i) mx = std::max(mx, m(i, j));
        double s = 0;
        for (int i = 0; i < v; ++i) s += std::exp(m(i, j) - mx);
        double logz = mx + std::log(s);
        for (int i = 0; i < v; ++i) out(i, j) = std::exp(m(i, j) - logz);
    };
    for (int j = 0; j < n; ++j) {
        if (!supervised[j]) continue;
        ++cnt;
        colsoftmax(ref_logits, j, p);
        colsoftmax(z, j, qprob);
        for (int i = 0; i < v; ++i) {
            if (p(i, j) > 0) loss += p(i, j) * (std::log(p(i, j)) - std::log(std::max(qprob(i, j), 1e-300)));
        }
    }
    if (cnt == 0) throw dimension_error("kl_softmax_cols: no supervised positions");
    Mat out(1, 1);
    out(0, 0) = loss / cnt;
    int iq = q.id;
    return t.emplace(std::move(out), q.requires_grad(), {iq},
                     [iq, p, qprob, supervised, cnt](Tape& t, int self) {
        double g = t.nodes[self].grad(0, 0);
        Mat gz(p.rows(), p.cols());
        for (int j = 0; j < p.cols(); ++j) {
            if (!supervised[j]) continue;
            for (int i = 0; i < p.rows(); ++i) gz(i, j) = (qprob(i, j) - p(i, j)) * g / cnt;
        }
        accum(t, iq, gz);
    });
}

// mean over supervised columns of the summed Bernoulli KLs between
// sigmoid(ref) and sigmoid(q), one Bernoulli per vocab entry
inline Tensor kl_bernoulli_cols(const Mat& ref_logits, Tensor q,
                                const std::vector<char>& supervised) {
    Tape& t = *q.tape;
    const Mat& z = q.val();
    if (!z.same_shape(ref_logits)) throw dimension_error("kl_bernoulli_cols: shape");
    const int v = z.rows(), n = z.cols();
    int cnt = 0;
    double loss = 0;
    auto sgm = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    for (int j = 0; j < n; ++j) {
        if (!supervised[j]) continue;
        ++cnt;
        for (int i = 0; i < v; ++i) {
            double p = sgm(ref_logits(i, j)), qq = sgm(z(i, j));
            qq = std::min(std::max(qq, 1e-12), 1.0 - 1e-12);
            if (p > 0) loss += p * std::log(p / qq);
            if (p < 1) loss += (1 - p) * std::log((1 - p) / (1 - qq));
        }
    }
    if (cnt == 0) throw dimension_error("kl_bernoulli_cols: no supervised positions");
    Mat out(1, 1);
    out(0, 0) = loss / cnt;
    int iq = q.id;
    Mat ref = ref_logits;
    return t.emplace(std::move(out), q.requires_grad(), {iq},
                     [iq, ref, supervised, cnt](Tape& t, int self) {
        double g = t.nodes[self].grad(0, 0);
        const Mat& z = t.nodes[iq].val;
        auto sgm = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
        Mat gz(z.rows(), z.cols());
        for (int j = 0; j < z.cols(); ++j) {
            if (!supervised[j]) continue;
            for (int i = 0; i < z.rows(); ++i)
                gz(i, j) = (sgm(z(i, j)) - sgm(ref(i, j))) * g / cnt;
        }
        accum(t, iq, gz);
    });
}

// scalar gate broadcast: out = s * x, with s a 1x1 tensor
inline Tensor scale_by(Tensor x, Tensor s) {
    Tape& t = *x.tape;
    if (s.val().rows() != 1 || s.val().cols() != 1) throw dimension_error("scale_by: scalar");
    Mat out = x.val();
    out *= s.val()(0, 0);
    bool rg = x.requires_grad() || s.requires_grad();
    int ix = x.id, is = s.id;
    return t.emplace(std::move(out), rg, {ix, is}, [ix, is](Tape& t, int self) {
        const Mat& g = t.nodes[self].grad;
        if (t.nodes[ix].rg) {
            Mat gx = g;
            gx *= t.nodes[is].val(0, 0);
            accum(t, ix, gx);
        }
        if (t.nodes[is].rg) {
            double dot = 0;
            const Mat& xv = t.nodes[ix].val;
            for (size_t i = 0; i < xv.raw().size(); ++i) dot += xv.raw()[i] * g.raw()[i];
            Mat gs(1, 1);
            gs(0, 0) = dot;
            accum(t, is, gs);
        }
    });
}

// elementwise 1/sqrt(x + eps)
inline Tensor rsqrt_shift(Tensor x, double eps) {
    Tape& t = *x.tape;
    Mat out = x.val();
    for (auto& v : out.raw()) v = 1.0 / std::sqrt(v + eps);
    int ix = x.id;
    Mat saved = out;
    return t.emplace(std::move(out), x.requires_grad(), {ix}, [ix, saved](Tape& t, int self) {
        Mat gx = t.nodes[self].grad;
        for (size_t i = 0; i < gx.raw().size(); ++i) {
            double r = saved.raw()[i];
            gx.raw()[i] *= -0.5 * r * r * r;
        }
        ops::accum(t, ix, gx);
    });
}

inline Tensor l1_norm(Tensor x) {
    Tape& t = *x.tape;
    double s = 0;
    for (double v : x.val().raw()) s += std::fabs(v);
    Mat out(1, 1);
    out(0, 0) = s;
    int ix = x.id;
    return t.emplace(std::move(out), x.requires_grad(), {ix}, [ix](Tape& t, int self) {
        double g = t.nodes[self].grad(0, 0);
        const Mat& xv = t.nodes[ix].val;
        Mat gx(xv.rows(), xv.cols());
        for (size_t i = 0; i < xv.raw().size(); ++i)
            gx.raw()[i] = g * (xv.raw()[i] > 0 ? 1.0 : (xv.raw()[i] < 0 ? -1.0 : 0.0));
        accum(t, ix, gx);
    });
}

// || x - round(x) ||_1 with subgradient sign(x - round(x))
inline Tensor l1_round_dist(Tensor x) {
    Tape& t = *x.tape;
    double s = 0;
    for (double v : x.val().raw()) s += std::fabs(v - std::nearbyint(v));
    Mat out(1, 1);
    out(0, 0) = s;
    int ix = x.id;
    return t.emplace(std::move(out), x.requires_grad(), {ix}, [ix](Tape& t, int self) {
        double g = t.nodes[self].grad(0, 0);
        const Mat& xv = t.nodes[ix].val;
        Mat gx(xv.rows(), xv.cols());
        for (size_t i = 0; i < xv.raw().size(); ++i) {
            double r = xv.raw()[i] - std::nearbyint(xv.raw()[i]);
            gx.raw()[i] = g * (r > 0 ? 1.0 : (r < 0 ? -1.0 : 0.0));
        }
        accum(t, ix, gx);
    });
}

inline Tensor sum(std::vector<Tensor> xs) {
    if (xs.empty()) throw dimension_error("sum: empty tensor list");
    Tensor acc = xs[0];
    for (size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
    return acc;
}

} // namespace ops

// ---- finite-difference gradient checking ----

struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> per_param;
    double worst = 0.0;
    bool ok(double tol) const { return worst < tol; }
};

// Central differences against the tape gradient. `f` builds the scalar
// objective from leaves the checker creates; relative error per entry is
// |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
inline GradCheckReport check_gradients(
    const std::function<Tensor(Tape&, const std::vector<Tensor>&)>& f,
    const std::vector<std::pair<std::string, Mat>>& params, double h = 1e-5) {
    GradCheckReport report;

    Tape tape;
    std::vector<Tensor> leaves;
    leaves.reserve(params.size());
    for (auto& [name, m] : params) leaves.push_back(tape.leaf(m, true));
    Tensor out = f(tape, leaves);
    tape.backward(out);
    std::vector<Mat> grads;
    for (auto& lf : leaves) grads.push_back(tape.grad_of(lf.id));

    auto eval_at = [&](const std::vector<Mat>& pvals) {
        Tape t2;
        t2.finite_checks = false;
        std::vector<Tensor> l2;
        for (auto& m : pvals) l2.push_back(t2.leaf(m, false));
        return f(t2, l2).val()(0, 0);
    };

    std::vector<Mat> pvals;
    for (auto& [name, m] : params) pvals.push_back(m);

    for (size_t p = 0; p < params.size(); ++p) {
        GradCheckEntry entry;
        entry.name = params[p].first;
        Mat& pm = pvals[p];
        for (size_t k = 0; k < pm.raw().size(); ++k) {
            double orig = pm.raw()[k];
            pm.raw()[k] = orig + h;
            double fp = eval_at(pvals);
            pm.raw()[k] = orig - h;
            double fm = eval_at(pvals);
            pm.raw()[k] = orig;
            double g_fd = (fp - fm) / (2 * h);
            double g_ad = grads[p].raw()[k];
            if (!std::isfinite(g_ad)) throw numeric_error("check_gradients: non-finite gradient");
            double rel = std::fabs(g_ad - g_fd) / std::max(1e-8, std::fabs(g_ad) + std::fabs(g_fd));
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
        }
        report.worst = std::max(report.worst, entry.max_rel_err);
        report.per_param.push_back(std::move(entry));
    }
    return report;
}

// ---- Adam/AdamW update shared by training and pruning ----

struct AdamState {
    std::vector<Mat> m, v;
    int t = 0;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled (AdamW)
};

inline void adam_step(std::vector<Mat*> params, const std::vector<Mat>& grads, AdamState& st,
                      const AdamConfig& cfg) {
    if (st.m.empty()) {
        for (auto* p : params) {
            st.m.emplace_back(p->rows(), p->cols());
            st.v.emplace_back(p->rows(), p->cols());
        }
    }
    st.t += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, st.t);
    double bc2 = 1.0 - std::pow(cfg.beta2, st.t);
    for (size_t i = 0; i < params.size(); ++i) {
        Mat& p = *params[i];
        const Mat& g = grads[i];
        for (size_t k = 0; k < p.raw().size(); ++k) {
            double gk = g.raw()[k];
            double mk = st.m[i].raw()[k] = cfg.beta1 * st.m[i].raw()[k] + (1 - cfg.beta1) * gk;
            double vk = st.v[i].raw()[k] = cfg.beta2 * st.v[i].raw()[k] + (1 - cfg.beta2) * gk * gk;
            double mhat = mk / bc1, vhat = vk / bc2;
            p.raw()[k] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p.raw()[k]);
        }
    }
}

} // namespace drasp
