#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "drasp/mat.hpp"
#include "drasp/tasks.hpp"

namespace drasp {

// ---- element-wise primitives (pure per-position functions) ----
//
// ids: no_op, sharpen(n), harden, balance01(n), is_pure(tau), keep_i(i),
// cartesian. Single column in, single column out; output dimension depends
// on the primitive.

inline int elementwise_output_dim(const std::string& id, double param,
                                  const std::vector<int>& input_dims) {
    if (id == "no_op" || id == "sharpen" || id == "harden") return input_dims.at(0);
    if (id == "balance01") return 3;
    if (id == "is_pure") return input_dims.at(0) + 1;
    if (id == "keep_i") return input_dims.at((size_t)param);
    if (id == "cartesian") {
        int p = 1;
        for (int d : input_dims) p *= d;
        return p;
    }
    throw std::runtime_error("unknown elementwise primitive " + id);
}

// inputs: one column per input variable
inline std::vector<double> elementwise_apply(const std::string& id, double param,
                                             const std::vector<std::vector<double>>& inputs) {
    if (id == "no_op") return inputs.at(0);
    if (id == "sharpen") {
        const auto& x = inputs.at(0);
        std::vector<double> out(x.size());
        double n = param, z = 0;
        for (size_t i = 0; i < x.size(); ++i) {
            out[i] = std::pow(std::max(x[i], 0.0), n);
            z += out[i];
        }
        if (z > 0)
            for (auto& v : out) v /= z;
        return out;
    }
    if (id == "harden") {
        const auto& x = inputs.at(0);
        std::vector<double> out(x.size(), 0.0);
        size_t best = 0;
        for (size_t i = 1; i < x.size(); ++i)
            if (x[i] > x[best]) best = i;
        out[best] = 1.0;
        return out;
    }
    if (id == "balance01") {
        // input is a token histogram; entries for symbols "0" and "1" sit at
        // the first two normal token ids
        const auto& x = inputs.at(0);
        double x0 = x.at(NUM_SPECIAL + 0), x1 = x.at(NUM_SPECIAL + 1);
        double n = param;
        double a = std::pow(std::max(x1 - x0, 0.0), n);
        double b = std::pow(std::max(x0 - x1, 0.0), n);
        return {a, b, 1.0 - a - b};
    }
    if (id == "is_pure") {
        const auto& x = inputs.at(0);
        std::vector<double> out(x.size() + 1, 0.0);
        double cnt = 0;
        for (size_t i = 0; i < x.size(); ++i) {
            out[i] = x[i] > param ? 1.0 : 0.0;
            cnt += out[i];
        }
        out[x.size()] = 1.0 - cnt;
        return out;
    }
    if (id == "keep_i") return inputs.at((size_t)param);
    if (id == "cartesian") {
        // normalized joint histogram: entry (j1..js) = min_k x^(k)_{jk}, then
        // normalized to sum 1; flattened row-major over inputs
        std::vector<int> dims;
        for (auto& v : inputs) dims.push_back((int)v.size());
        int total = 1;
        for (int d : dims) total *= d;
        std::vector<double> out(total);
        double z = 0;
        for (int flat = 0; flat < total; ++flat) {
            int rem = flat;
            double mn = 1e300;
            for (int k = (int)dims.size() - 1; k >= 0; --k) {
                int idx = rem % dims[k];
                rem /= dims[k];
                mn = std::min(mn, inputs[k][idx]);
            }
            out[flat] = mn;
            z += mn;
        }
        if (z > 0)
            for (auto& v : out) v /= z;
        return out;
    }
    throw std::runtime_error("unknown elementwise primitive " + id);
}

// column-wise application over a set of d(v) x N inputs
inline Mat elementwise_apply_cols(const std::string& id, double param,
                                  const std::vector<Mat>& inputs) {
    const int n = inputs.at(0).cols();
    std::vector<int> dims;
    for (auto& m : inputs) dims.push_back(m.rows());
    Mat out(elementwise_output_dim(id, param, dims), n);
    std::vector<std::vector<double>> cols(inputs.size());
    for (int j = 0; j < n; ++j) {
        for (size_t k = 0; k < inputs.size(); ++k) {
            cols[k].resize(inputs[k].rows());
            for (int i = 0; i < inputs[k].rows(); ++i) cols[k][i] = inputs[k](i, j);
        }
        auto o = elementwise_apply(id, param, cols);
        for (int i = 0; i < out.rows(); ++i) out(i, j) = o[i];
    }
    return out;
}

// single-input candidate list in App. G order
struct ElementwiseCandidate {
    std::string id;
    double param;
    std::string display;
};

inline std::vector<ElementwiseCandidate> single_input_candidates(bool binary_token_input) {
    std::vector<ElementwiseCandidate> out = {
        {"no_op", 0, "no_op"},
        {"sharpen", 2, "sharpen(2)"},
        {"sharpen", 3, "sharpen(3)"},
        {"sharpen", 5, "sharpen(5)"},
        {"harden", 0, "harden"},
    };
    if (binary_token_input) {
        out.push_back({"balance01", 0.5, "balance01(0.5)"});
        out.push_back({"balance01", 0.05, "balance01(0.05)"});
        out.push_back({"balance01", 0.01, "balance01(0.01)"});
    }
    for (double tau : {0.95, 0.9, 0.85, 0.8, 0.75, 0.7})
        out.push_back({"is_pure", tau, "is_pure(" + std::to_string(tau).substr(0, 4) + ")"});
    return out;
}

// ---- tensor primitives (Table-style select/project templates) ----
//
// All realizations are scaled by 10,000 so that softmax over them is
// effectively hard. Non-square shapes truncate from the top left corner.

constexpr double PRIMITIVE_SCALE = 10000.0;

struct TensorPrimitive {
    std::string id;     // diagonal, kth_diagonal, every_kth, to_special,
                        // decreasing, increasing, zeros
    int k = 0;          // diagonal offset / stride
    int special = -1;   // TOK_BOS / TOK_SEP / TOK_EOS for to_special
    std::string display;
};

inline Mat realize_tensor_primitive(const TensorPrimitive& p, int rows, int cols, double scale = PRIMITIVE_SCALE) {
    Mat m(rows, cols);
    if (p.id == "zeros") return m;
    if (p.id == "diagonal") {
        for (int i = 0; i < std::min(rows, cols); ++i) m(i, i) = scale;
        return m;
    }
    if (p.id == "kth_diagonal") {
        // rows index queries, cols index keys; entry (i, j) active when
        // j == i - k (the key sits k steps before the query)
        for (int i = 0; i < rows; ++i) {
            int j = i - p.k;
            if (j >= 0 && j < cols) m(i, j) = scale;
        }
        return m;
    }
    if (p.id == "every_kth") {
        for (int i = 0; i < rows; i += p.k)
            for (int j = 0; j < cols; j += p.k) m(i, j) = scale;
        return m;
    }
    if (p.id == "to_special") {
        if (p.special < 0 || p.special >= cols) return m;
        for (int i = 0; i < rows; ++i) m(i, p.special) = scale;
        return m;
    }
    if (p.id == "decreasing") {  // "k is first": weight falls off with key index
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) m(i, j) = scale * double(cols - j) / cols;
        return m;
    }
    if (p.id == "increasing") {  // "k is last"
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) m(i, j) = scale * double(j + 1) / cols;
        return m;
    }
    throw std::runtime_error("unknown tensor primitive " + p.id);
}

inline Mat realize_tensor_primitive_vec(const TensorPrimitive& p, int dim, double scale = PRIMITIVE_SCALE) {
    // 1 x dim row vector (key/bias side)
    Mat m(1, dim);
    if (p.id == "zeros") return m;
    if (p.id == "to_special") {
        if (p.special >= 0 && p.special < dim) m(0, p.special) = scale;
        return m;
    }
    if (p.id == "decreasing") {
        for (int j = 0; j < dim; ++j) m(0, j) = scale * double(dim - j) / dim;
        return m;
    }
    if (p.id == "increasing") {
        for (int j = 0; j < dim; ++j) m(0, j) = scale * double(j + 1) / dim;
        return m;
    }
    throw std::runtime_error("tensor primitive not defined for vectors: " + p.id);
}

// candidate orders per role (App-style). "Second/Third Diagonal" are
// kth_diagonal with k=1,2 relative to (k==q-k); every_kth strides 2,3.
enum class TensorRole { attention_bias, attention_matrix, logits_bias, logits_matrix };

inline std::vector<TensorPrimitive> tensor_candidates(TensorRole role) {
    auto diag = [](int k) {
        if (k == 0) return TensorPrimitive{"diagonal", 0, -1, "(k==q)"};
        return TensorPrimitive{"kth_diagonal", k, -1, "(k==q-" + std::to_string(k) + ")"};
    };
    auto every = [](int k) {
        return TensorPrimitive{"every_kth", k, -1, "(k%" + std::to_string(k) + "==q%" +
                                                       std::to_string(k) + "==0)"};
    };
    auto to_special = [](int tok, const char* name, bool key_side) {
        return TensorPrimitive{"to_special", 0, tok,
                               std::string(key_side ? "(k==" : "(out==") + name + ")"};
    };
    switch (role) {
        case TensorRole::attention_bias:
            return {{"zeros", 0, -1, "(uniform selection)"},
                    to_special(TOK_BOS, "BOS", true),
                    to_special(TOK_EOS, "EOS", true),
                    to_special(TOK_SEP, "SEP", true),
                    {"decreasing", 0, -1, "(k is first)"},
                    {"increasing", 0, -1, "(k is last)"}};
        case TensorRole::attention_matrix:
            return {{"zeros", 0, -1, "(uniform selection)"},
                    to_special(TOK_BOS, "BOS", true),
                    to_special(TOK_SEP, "SEP", true),
                    diag(0),
                    diag(1),
                    diag(2),
                    every(2),
                    every(3),
                    {"decreasing", 0, -1, "(k is first)"},
                    {"increasing", 0, -1, "(k is last)"}};
        case TensorRole::logits_bias:
            return {{"zeros", 0, -1, "(uniform selection)"},
                    to_special(TOK_EOS, "EOS", false)};
        case TensorRole::logits_matrix:
            return {{"zeros", 0, -1, "(uniform selection)"},
                    to_special(TOK_EOS, "EOS", false),
                    {"diagonal", 0, -1, "(inp==out)"}};
    }
    return {};
}

} // namespace drasp
