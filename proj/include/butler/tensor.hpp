#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "butler/common.hpp"
#include "butler/rng.hpp"

namespace butler {

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

// Dense row-major tensor. F is float for training/eval runs and double for
// gradient-verification runs.
template <typename F>
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<F> data;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
        data.assign(size_t(numel_of(shape)), F(0));
    }
    Tensor(std::vector<int64_t> s, std::vector<F> d) : shape(std::move(s)), data(std::move(d)) {
        if (int64_t(data.size()) != numel_of(shape))
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }

    static Tensor scalar(F v) {
        Tensor t({1});
        t.data[0] = v;
        return t;
    }

    static Tensor from_rows(std::initializer_list<std::initializer_list<F>> rows) {
        int64_t r = int64_t(rows.size());
        int64_t c = r ? int64_t(rows.begin()->size()) : 0;
        Tensor t({r, c});
        int64_t i = 0;
        for (const auto& row : rows) {
            if (int64_t(row.size()) != c) throw ShapeError("ragged row initializer");
            for (F v : row) t.data[size_t(i++)] = v;
        }
        return t;
    }

    int64_t numel() const { return int64_t(data.size()); }
    int rank() const { return int(shape.size()); }
    int64_t rows() const { return shape.at(0); }
    int64_t cols() const { return shape.at(1); }

    F& at(int64_t i) { return data[size_t(i)]; }
    F at(int64_t i) const { return data[size_t(i)]; }
    F& at(int64_t i, int64_t j) { return data[size_t(i * cols() + j)]; }
    F at(int64_t i, int64_t j) const { return data[size_t(i * cols() + j)]; }

    const F* row_ptr(int64_t i) const { return data.data() + i * cols(); }
    F* row_ptr(int64_t i) { return data.data() + i * cols(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (F v : data)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

    void fill_uniform(Rng& rng, F lo, F hi) {
        for (F& v : data) v = F(rng.uniform(double(lo), double(hi)));
    }

    template <typename G>
    Tensor<G> cast() const {
        Tensor<G> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = G(data[i]);
        return out;
    }
};

namespace kernels {

// Fixed-order SIMD dot product. The reduction order is chosen at compile
// time, so results are bit-stable across calls within one binary and do not
// depend on surrounding matrix sizes (prefix rows equal full-sequence rows).
template <typename F>
inline F dot(const F* __restrict a, const F* __restrict b, int64_t n) {
    F s = F(0);
#pragma omp simd reduction(+ : s)
    for (int64_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

template <typename F>
inline void axpy(F alpha, const F* __restrict x, F* __restrict y, int64_t n) {
#pragma omp simd
    for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace kernels

// c[m×n] = a[m×k] · b[k×n]
template <typename F>
Tensor<F> matmul(const Tensor<F>& a, const Tensor<F>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
        throw ShapeError("matmul shapes " + shape_str(a.shape) + " x " + shape_str(b.shape));
    const int64_t m = a.rows(), k = a.cols(), n = b.cols();
    // transpose b once so inner loops are contiguous dots
    std::vector<F> bt(size_t(k * n));
    for (int64_t t = 0; t < k; ++t)
        for (int64_t j = 0; j < n; ++j) bt[size_t(j * k + t)] = b.at(t, j);
    Tensor<F> c({m, n});
    for (int64_t i = 0; i < m; ++i) {
        const F* arow = a.row_ptr(i);
        F* crow = c.row_ptr(i);
        for (int64_t j = 0; j < n; ++j) crow[j] = kernels::dot(arow, &bt[size_t(j * k)], k);
    }
    return c;
}

// c[m×n] = a[m×k] · b[n×k]^T  (rows-of-a against rows-of-b)
template <typename F>
Tensor<F> matmul_nt(const Tensor<F>& a, const Tensor<F>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols())
        throw ShapeError("matmul_nt shapes " + shape_str(a.shape) + " x " + shape_str(b.shape));
    const int64_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor<F> c({m, n});
    for (int64_t i = 0; i < m; ++i) {
        const F* arow = a.row_ptr(i);
        F* crow = c.row_ptr(i);
        for (int64_t j = 0; j < n; ++j) crow[j] = kernels::dot(arow, b.row_ptr(j), k);
    }
    return c;
}

// c[k×n] = a[m×k]^T · b[m×n], accumulated row-wise (axpy form)
template <typename F>
Tensor<F> matmul_tn(const Tensor<F>& a, const Tensor<F>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.rows() != b.rows())
        throw ShapeError("matmul_tn shapes " + shape_str(a.shape) + " x " + shape_str(b.shape));
    const int64_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor<F> c({k, n});
    for (int64_t t = 0; t < m; ++t) {
        const F* arow = a.row_ptr(t);
        const F* brow = b.row_ptr(t);
        for (int64_t i = 0; i < k; ++i) kernels::axpy(arow[i], brow, c.row_ptr(i), n);
    }
    return c;
}

template <typename F>
Tensor<F> transpose(const Tensor<F>& a) {
    if (a.rank() != 2) throw ShapeError("transpose expects rank-2, got " + shape_str(a.shape));
    Tensor<F> t({a.cols(), a.rows()});
    for (int64_t i = 0; i < a.rows(); ++i)
        for (int64_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
    return t;
}

// Row-stable softmax: per-row max subtraction, fixed summation order.
template <typename F>
Tensor<F> softmax_rows(const Tensor<F>& x) {
    if (x.rank() != 2) throw ShapeError("softmax_rows expects rank-2, got " + shape_str(x.shape));
    Tensor<F> y({x.rows(), x.cols()});
    for (int64_t i = 0; i < x.rows(); ++i) {
        const F* in = x.row_ptr(i);
        F* out = y.row_ptr(i);
        F mx = in[0];
        for (int64_t j = 1; j < x.cols(); ++j) mx = std::max(mx, in[j]);
        F sum = F(0);
        for (int64_t j = 0; j < x.cols(); ++j) {
            out[j] = std::exp(in[j] - mx);
            sum += out[j];
        }
        for (int64_t j = 0; j < x.cols(); ++j) out[j] /= sum;
    }
    return y;
}

template <typename F>
inline F sigmoid(F v) {
    return F(1) / (F(1) + std::exp(-v));
}

template <typename F>
Tensor<F> silu(const Tensor<F>& x) {
    Tensor<F> y;
    y.shape = x.shape;
    y.data.resize(x.data.size());
    for (size_t i = 0; i < x.data.size(); ++i) y.data[i] = x.data[i] * sigmoid(x.data[i]);
    return y;
}

template <typename F>
Tensor<F> gelu(const Tensor<F>& x) {
    Tensor<F> y;
    y.shape = x.shape;
    y.data.resize(x.data.size());
    const F inv_sqrt2 = F(0.7071067811865475244L);
    for (size_t i = 0; i < x.data.size(); ++i)
        y.data[i] = F(0.5) * x.data[i] * (F(1) + std::erf(x.data[i] * inv_sqrt2));
    return y;
}

// mean over positions of -log softmax(logits)[target], in nats per token
template <typename F>
F cross_entropy(const Tensor<F>& logits, const std::vector<int>& targets) {
    if (logits.rank() != 2 || int64_t(targets.size()) != logits.rows())
        throw ShapeError("cross_entropy logits " + shape_str(logits.shape) + " vs " +
                         std::to_string(targets.size()) + " targets");
    const int64_t v = logits.cols();
    F total = F(0);
    for (int64_t i = 0; i < logits.rows(); ++i) {
        int t = targets[size_t(i)];
        if (t < 0 || t >= v)
            throw IndexError("target " + std::to_string(t) + " outside vocabulary of " +
                             std::to_string(v));
        const F* row = logits.row_ptr(i);
        F mx = row[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        F sum = F(0);
        for (int64_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
        total += -(row[t] - mx - std::log(sum));
    }
    return total / F(logits.rows());
}

}  // namespace butler
