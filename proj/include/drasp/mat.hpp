#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "drasp/rng.hpp"

namespace drasp {

struct dimension_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense row-major matrix of doubles. Vectors are n x 1 (or 1 x n) matrices.
class Mat {
public:
    Mat() = default;
    Mat(int rows, int cols, double fill = 0.0)
        : r_(rows), c_(cols), x_((size_t)rows * cols, fill) {
        if (rows < 0 || cols < 0) throw dimension_error("negative matrix dims");
    }
    Mat(int rows, int cols, std::vector<double> data) : r_(rows), c_(cols), x_(std::move(data)) {
        if ((size_t)rows * cols != x_.size()) throw dimension_error("matrix data size mismatch");
    }

    int rows() const { return r_; }
    int cols() const { return c_; }
    size_t size() const { return x_.size(); }
    bool empty() const { return x_.empty(); }

    double& operator()(int i, int j) { return x_[(size_t)i * c_ + j]; }
    double operator()(int i, int j) const { return x_[(size_t)i * c_ + j]; }
    double* data() { return x_.data(); }
    const double* data() const { return x_.data(); }
    std::vector<double>& raw() { return x_; }
    const std::vector<double>& raw() const { return x_; }

    bool same_shape(const Mat& o) const { return r_ == o.r_ && c_ == o.c_; }

    bool all_finite() const {
        for (double v : x_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static Mat identity(int n, double scale = 1.0) {
        Mat m(n, n);
        for (int i = 0; i < n; ++i) m(i, i) = scale;
        return m;
    }

    static Mat randn(int rows, int cols, Rng& rng, double std = 1.0) {
        Mat m(rows, cols);
        for (auto& v : m.x_) v = rng.gauss() * std;
        return m;
    }

    Mat transposed() const {
        Mat t(c_, r_);
        for (int i = 0; i < r_; ++i)
            for (int j = 0; j < c_; ++j) t(j, i) = (*this)(i, j);
        return t;
    }

    Mat slice_cols(int begin, int end) const {
        if (begin < 0 || end > c_ || begin > end) throw dimension_error("slice_cols out of range");
        Mat out(r_, end - begin);
        for (int i = 0; i < r_; ++i)
            for (int j = begin; j < end; ++j) out(i, j - begin) = (*this)(i, j);
        return out;
    }

    Mat slice_rows(int begin, int end) const {
        if (begin < 0 || end > r_ || begin > end) throw dimension_error("slice_rows out of range");
        Mat out(end - begin, c_);
        for (int i = begin; i < end; ++i)
            for (int j = 0; j < c_; ++j) out(i - begin, j) = (*this)(i, j);
        return out;
    }

    Mat col(int j) const {
        Mat out(r_, 1);
        for (int i = 0; i < r_; ++i) out(i, 0) = (*this)(i, j);
        return out;
    }

    double max_abs() const {
        double m = 0.0;
        for (double v : x_) m = std::max(m, std::fabs(v));
        return m;
    }

    double frob_norm() const {
        double s = 0.0;
        for (double v : x_) s += v * v;
        return std::sqrt(s);
    }

    Mat& operator+=(const Mat& o) {
        require_same(o, "operator+=");
        for (size_t i = 0; i < x_.size(); ++i) x_[i] += o.x_[i];
        return *this;
    }
    Mat& operator-=(const Mat& o) {
        require_same(o, "operator-=");
        for (size_t i = 0; i < x_.size(); ++i) x_[i] -= o.x_[i];
        return *this;
    }
    Mat& operator*=(double s) {
        for (auto& v : x_) v *= s;
        return *this;
    }

    friend Mat operator+(Mat a, const Mat& b) { return a += b; }
    friend Mat operator-(Mat a, const Mat& b) { return a -= b; }
    friend Mat operator*(Mat a, double s) { return a *= s; }
    friend Mat operator*(double s, Mat a) { return a *= s; }

private:
    void require_same(const Mat& o, const char* op) const {
        if (!same_shape(o))
            throw dimension_error(std::string(op) + ": shape mismatch " + shape_str() + " vs " +
                                  o.shape_str());
    }
    std::string shape_str() const {
        return std::to_string(r_) + "x" + std::to_string(c_);
    }

    int r_ = 0, c_ = 0;
    std::vector<double> x_;
};

// C = A * B
inline Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols() != b.rows())
        throw dimension_error("matmul: inner dims disagree (" + std::to_string(a.cols()) + " vs " +
                              std::to_string(b.rows()) + ")");
    Mat c(a.rows(), b.cols());
    const int m = a.rows(), k = a.cols(), n = b.cols();
    const double* __restrict ap = a.data();
    const double* __restrict bp = b.data();
    double* __restrict cp = c.data();
    for (int i = 0; i < m; ++i) {
        const double* arow = ap + (size_t)i * k;
        double* crow = cp + (size_t)i * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = bp + (size_t)p * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

// C = A^T * B
inline Mat matmul_tn(const Mat& a, const Mat& b) {
    if (a.rows() != b.rows()) throw dimension_error("matmul_tn: dims disagree");
    Mat c(a.cols(), b.cols());
    const int m = a.cols(), k = a.rows(), n = b.cols();
    for (int p = 0; p < k; ++p) {
        const double* arow = a.data() + (size_t)p * m;
        const double* brow = b.data() + (size_t)p * n;
        for (int i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c.data() + (size_t)i * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

// C = A * B^T
inline Mat matmul_nt(const Mat& a, const Mat& b) {
    if (a.cols() != b.cols()) throw dimension_error("matmul_nt: dims disagree");
    Mat c(a.rows(), b.rows());
    const int m = a.rows(), k = a.cols(), n = b.rows();
    for (int i = 0; i < m; ++i) {
        const double* arow = a.data() + (size_t)i * k;
        double* crow = c.data() + (size_t)i * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b.data() + (size_t)j * k;
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += arow[p] * brow[p];
            crow[j] = s;
        }
    }
    return c;
}

struct Svd {
    Mat u;                   // m x r
    std::vector<double> s;   // r singular values, descending
    Mat v;                   // n x r
};

// One-sided Jacobi SVD. Cost is O(min(m,n)^2 * max(m,n)) per sweep, fine for
// the small/thin matrices we fit primitives with.
inline Svd svd(const Mat& a_in) {
    const bool flip = a_in.rows() < a_in.cols();
    Mat a = flip ? a_in.transposed() : a_in;  // tall: m >= n
    const int m = a.rows(), n = a.cols();
    Mat v = Mat::identity(n);

    auto col_dot = [&](const Mat& x, int p, int q) {
        double s = 0.0;
        for (int i = 0; i < m; ++i) s += x(i, p) * x(i, q);
        return s;
    };

    const int max_sweeps = 60;
    const double eps = 1e-15;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                double apq = col_dot(a, p, q);
                double app = col_dot(a, p, p);
                double aqq = col_dot(a, q, q);
                if (std::fabs(apq) <= eps * std::sqrt(app * aqq) || apq == 0.0) continue;
                off += std::fabs(apq);
                double tau = (aqq - app) / (2.0 * apq);
                double t = (tau >= 0 ? 1.0 : -1.0) / (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
                double cs = 1.0 / std::sqrt(1.0 + t * t);
                double sn = cs * t;
                for (int i = 0; i < m; ++i) {
                    double xp = a(i, p), xq = a(i, q);
                    a(i, p) = cs * xp - sn * xq;
                    a(i, q) = sn * xp + cs * xq;
                }
                for (int i = 0; i < n; ++i) {
                    double xp = v(i, p), xq = v(i, q);
                    v(i, p) = cs * xp - sn * xq;
                    v(i, q) = sn * xp + cs * xq;
                }
            }
        }
        if (off == 0.0) break;
    }

    std::vector<double> sig(n);
    Mat u(m, n);
    std::vector<int> order(n);
    for (int j = 0; j < n; ++j) {
        sig[j] = std::sqrt(std::max(0.0, col_dot(a, j, j)));
        order[j] = j;
    }
    std::sort(order.begin(), order.end(), [&](int x, int y) { return sig[x] > sig[y]; });

    Svd out;
    out.s.resize(n);
    out.u = Mat(m, n);
    out.v = Mat(n, n);
    for (int jj = 0; jj < n; ++jj) {
        int j = order[jj];
        out.s[jj] = sig[j];
        double inv = sig[j] > 0 ? 1.0 / sig[j] : 0.0;
        for (int i = 0; i < m; ++i) out.u(i, jj) = a(i, j) * inv;
        for (int i = 0; i < n; ++i) out.v(i, jj) = v(i, j);
    }
    if (flip) std::swap(out.u, out.v);
    return out;
}

// Moore-Penrose pseudo-inverse; singular values below cutoff * sigma_max are
// treated as zero.
inline Mat pinv(const Mat& a, double cutoff = 1e-8) {
    Svd d = svd(a);
    double smax = d.s.empty() ? 0.0 : d.s[0];
    int r = (int)d.s.size();
    Mat vs = d.v;  // n x r, scale columns by 1/s
    for (int j = 0; j < r; ++j) {
        double inv = (smax > 0 && d.s[j] > cutoff * smax) ? 1.0 / d.s[j] : 0.0;
        for (int i = 0; i < vs.rows(); ++i) vs(i, j) *= inv;
    }
    return matmul_nt(vs, d.u);  // n x m
}

// Least squares argmin_C ||v - C w||_F : C = v * pinv(w).
inline Mat lstsq_left(const Mat& v, const Mat& w, double cutoff = 1e-8) {
    if (v.cols() != w.cols()) throw dimension_error("lstsq_left: sample counts differ");
    return matmul(v, pinv(w, cutoff));
}

} // namespace drasp
