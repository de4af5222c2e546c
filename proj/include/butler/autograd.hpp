#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "butler/tensor.hpp"

namespace butler {

// Trainable weight container. grad is all-zeros right after an optimizer
// step or an explicit reset.
template <typename F>
struct Parameter {
    Tensor<F> value;
    Tensor<F> grad;
    std::string name;

    Parameter() = default;
    Parameter(std::string n, Tensor<F> v)
        : value(std::move(v)), grad(Tensor<F>::zeros(value.shape)), name(std::move(n)) {}

    void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), F(0)); }
};

// Reverse-mode tape. One tape is recorded per forward call and freed after
// backward; node order is already topological.
template <typename F>
class Tape {
public:
    struct Var {
        int32_t id = -1;
    };

    Var leaf(Parameter<F>& p) {
        Var v = push(p.value, true);
        nodes_[size_t(v.id)].param = &p;
        return v;
    }

    Var constant(Tensor<F> t) { return push(std::move(t), false); }

    const Tensor<F>& value(Var v) const { return nodes_[size_t(v.id)].value; }
    Tensor<F>& grad(Var v) { return grad_of(v.id); }
    bool requires_grad(Var v) const { return nodes_[size_t(v.id)].requires_grad; }

    // ---- operations -------------------------------------------------------

    Var matmul(Var a, Var b) {
        Var out = push(butler::matmul(value(a), value(b)), requires_grad(a) || requires_grad(b));
        record(out, [this, a, b, out] {
            const Tensor<F>& g = grad_of(out.id);
            if (requires_grad(a)) accumulate(a, matmul_nt(g, value(b)));       // dA = G·Bᵀ
            if (requires_grad(b)) accumulate(b, matmul_tn(value(a), g));       // dB = Aᵀ·G
        });
        return out;
    }

    // c = a·bᵀ, with b stored row-major [n, k]
    Var matmul_nt(Var a, Var b) {
        Var out =
            push(butler::matmul_nt(value(a), value(b)), requires_grad(a) || requires_grad(b));
        record(out, [this, a, b, out] {
            const Tensor<F>& g = grad_of(out.id);
            if (requires_grad(a)) accumulate(a, butler::matmul(g, value(b)));   // dA = G·B
            if (requires_grad(b)) accumulate(b, matmul_tn(g, value(a)));        // dB = Gᵀ·A
        });
        return out;
    }

    Var add(Var a, Var b) {
        check_same(a, b, "add");
        Tensor<F> y = value(a);
        for (size_t i = 0; i < y.data.size(); ++i) y.data[i] += value(b).data[i];
        Var out = push(std::move(y), requires_grad(a) || requires_grad(b));
        record(out, [this, a, b, out] {
            const Tensor<F>& g = grad_of(out.id);
            if (requires_grad(a)) accumulate(a, g);
            if (requires_grad(b)) accumulate(b, g);
        });
        return out;
    }

    Var sub(Var a, Var b) {
        check_same(a, b, "sub");
        Tensor<F> y = value(a);
        for (size_t i = 0; i < y.data.size(); ++i) y.data[i] -= value(b).data[i];
        Var out = push(std::move(y), requires_grad(a) || requires_grad(b));
        record(out, [this, a, b, out] {
            const Tensor<F>& g = grad_of(out.id);
            if (requires_grad(a)) accumulate(a, g);
            if (requires_grad(b)) {
                Tensor<F> neg = g;
                for (F& x : neg.data) x = -x;
                accumulate(b, neg);
            }
        });
        return out;
    }

    Var hadamard(Var a, Var b) {
        check_same(a, b, "hadamard");
        Tensor<F> y = value(a);
        for (size_t i = 0; i < y.data.size(); ++i) y.data[i] *= value(b).data[i];
        Var out = push(std::move(y), requires_grad(a) || requires_grad(b));
        record(out, [this, a, b, out] {
            const Tensor<F>& g = grad_of(out.id);
            if (requires_grad(a)) {
                Tensor<F> da = g;
                for (size_t i = 0; i < da.data.size(); ++i) da.data[i] *= value(b).data[i];
                accumulate(a, da);
            }
            if (requires_grad(b)) {
                Tensor<F> db = g;
                for (size_t i = 0; i < db.data.size(); ++i) db.data[i] *= value(a).data[i];
                accumulate(b, db);
            }
        });
        return out;
    }

    Var scale(Var a, F c) {
        Tensor<F> y = value(a);
        for (F& x : y.data) x *= c;
        Var out = push(std::move(y), requires_grad(a));
        record(out, [this, a, c, out] {
            if (!requires_grad(a)) return;
            Tensor<F> g = grad_of(out.id);
            for (F& x : g.data) x *= c;
            accumulate(a, g);
        });
        return out;
    }

    // broadcast-add a length-n bias over every row of an m×n matrix
    Var add_rowvec(Var x, Var b) {
        const Tensor<F>& xv = value(x);
        const Tensor<F>& bv = value(b);
        if (xv.rank() != 2 || bv.numel() != xv.cols())
            throw ShapeError("add_rowvec " + shape_str(xv.shape) + " + " + shape_str(bv.shape));
        Tensor<F> y = xv;
        for (int64_t i = 0; i < xv.rows(); ++i)
            for (int64_t j = 0; j < xv.cols(); ++j) y.at(i, j) += bv.at(j);
        Var out = push(std::move(y), requires_grad(x) || requires_grad(b));
        record(out, [this, x, b, out] {
            const Tensor<F>& g = grad_of(out.id);
            if (requires_grad(x)) accumulate(x, g);
            if (requires_grad(b)) {
                Tensor<F> db = Tensor<F>::zeros(value(b).shape);
                for (int64_t i = 0; i < g.rows(); ++i)
                    for (int64_t j = 0; j < g.cols(); ++j) db.at(j) += g.at(i, j);
                accumulate(b, db);
            }
        });
        return out;
    }

    Var silu(Var a) {
        Var out = push(butler::silu(value(a)), requires_grad(a));
        record(out, [this, a, out] {
            if (!requires_grad(a)) return;
            const Tensor<F>& g = grad_of(out.id);
            const Tensor<F>& xv = value(a);
            Tensor<F> dx = g;
            for (size_t i = 0; i < dx.data.size(); ++i) {
                F s = sigmoid(xv.data[i]);
                dx.data[i] *= s * (F(1) + xv.data[i] * (F(1) - s));
            }
            accumulate(a, dx);
        });
        return out;
    }

    Var gelu(Var a) {
        Var out = push(butler::gelu(value(a)), requires_grad(a));
        record(out, [this, a, out] {
            if (!requires_grad(a)) return;
            const Tensor<F>& g = grad_of(out.id);
            const Tensor<F>& xv = value(a);
            Tensor<F> dx = g;
            const F inv_sqrt2 = F(0.7071067811865475244L);
            const F inv_sqrt2pi = F(0.3989422804014326779L);
            for (size_t i = 0; i < dx.data.size(); ++i) {
                F x = xv.data[i];
                F cdf = F(0.5) * (F(1) + std::erf(x * inv_sqrt2));
                F pdf = inv_sqrt2pi * std::exp(F(-0.5) * x * x);
                dx.data[i] *= cdf + x * pdf;
            }
            accumulate(a, dx);
        });
        return out;
    }

    // y_ij = g_j · x_ij / rms(x_i), rms over each row with epsilon
    Var rmsnorm(Var x, Var gain, F eps = F(1e-5)) {
        const Tensor<F>& xv = value(x);
        const Tensor<F>& gv = value(gain);
        if (xv.rank() != 2 || gv.numel() != xv.cols())
            throw ShapeError("rmsnorm " + shape_str(xv.shape) + " gain " + shape_str(gv.shape));
        const int64_t m = xv.rows(), n = xv.cols();
        Tensor<F> y({m, n});
        std::vector<F> rms(static_cast<size_t>(m));
        for (int64_t i = 0; i < m; ++i) {
            F ss = F(0);
            for (int64_t j = 0; j < n; ++j) ss += xv.at(i, j) * xv.at(i, j);
            rms[size_t(i)] = std::sqrt(ss / F(n) + eps);
            for (int64_t j = 0; j < n; ++j) y.at(i, j) = gv.at(j) * xv.at(i, j) / rms[size_t(i)];
        }
        Var out = push(std::move(y), requires_grad(x) || requires_grad(gain));
        record(out, [this, x, gain, out, rms = std::move(rms), n] {
            const Tensor<F>& g = grad_of(out.id);
            const Tensor<F>& xv2 = value(x);
            const Tensor<F>& gv2 = value(gain);
            if (requires_grad(gain)) {
                Tensor<F> dg = Tensor<F>::zeros(value(gain).shape);
                for (int64_t i = 0; i < g.rows(); ++i)
                    for (int64_t j = 0; j < n; ++j)
                        dg.at(j) += g.at(i, j) * xv2.at(i, j) / rms[size_t(i)];
                accumulate(gain, dg);
            }
            if (requires_grad(x)) {
                Tensor<F> dx = Tensor<F>::zeros(xv2.shape);
                for (int64_t i = 0; i < g.rows(); ++i) {
                    F r = rms[size_t(i)];
                    F inner = F(0);
                    for (int64_t j = 0; j < n; ++j) inner += g.at(i, j) * gv2.at(j) * xv2.at(i, j);
                    for (int64_t j = 0; j < n; ++j)
                        dx.at(i, j) = g.at(i, j) * gv2.at(j) / r -
                                      xv2.at(i, j) * inner / (F(n) * r * r * r);
                }
                accumulate(x, dx);
            }
        });
        return out;
    }

    Var softmax_rows(Var x) {
        Var out = push(butler::softmax_rows(value(x)), requires_grad(x));
        record(out, [this, x, out] {
            if (!requires_grad(x)) return;
            const Tensor<F>& g = grad_of(out.id);
            const Tensor<F>& p = value(out);
            Tensor<F> dx = Tensor<F>::zeros(p.shape);
            for (int64_t i = 0; i < p.rows(); ++i) {
                F inner = F(0);
                for (int64_t j = 0; j < p.cols(); ++j) inner += g.at(i, j) * p.at(i, j);
                for (int64_t j = 0; j < p.cols(); ++j)
                    dx.at(i, j) = p.at(i, j) * (g.at(i, j) - inner);
            }
            accumulate(x, dx);
        });
        return out;
    }

    // columns [c0, c1) of a matrix
    Var slice_cols(Var x, int64_t c0, int64_t c1) {
        const Tensor<F>& xv = value(x);
        if (xv.rank() != 2 || c0 < 0 || c1 > xv.cols() || c0 >= c1)
            throw ShapeError("slice_cols [" + std::to_string(c0) + "," + std::to_string(c1) +
                             ") of " + shape_str(xv.shape));
        Tensor<F> y({xv.rows(), c1 - c0});
        for (int64_t i = 0; i < xv.rows(); ++i)
            for (int64_t j = c0; j < c1; ++j) y.at(i, j - c0) = xv.at(i, j);
        Var out = push(std::move(y), requires_grad(x));
        record(out, [this, x, out, c0] {
            if (!requires_grad(x)) return;
            const Tensor<F>& g = grad_of(out.id);
            Tensor<F>& gx = grad_of(x.id);
            for (int64_t i = 0; i < g.rows(); ++i)
                for (int64_t j = 0; j < g.cols(); ++j) gx.at(i, c0 + j) += g.at(i, j);
        });
        return out;
    }

    // rows of an embedding table selected by token ids
    Var gather_rows(Var table, const std::vector<int>& ids) {
        const Tensor<F>& tv = value(table);
        if (tv.rank() != 2) throw ShapeError("gather_rows table " + shape_str(tv.shape));
        Tensor<F> y({int64_t(ids.size()), tv.cols()});
        for (size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= tv.rows())
                throw IndexError("row id " + std::to_string(ids[i]) + " outside table of " +
                                 std::to_string(tv.rows()));
            for (int64_t j = 0; j < tv.cols(); ++j) y.at(int64_t(i), j) = tv.at(ids[i], j);
        }
        Var out = push(std::move(y), requires_grad(table));
        record(out, [this, table, out, ids] {
            if (!requires_grad(table)) return;
            const Tensor<F>& g = grad_of(out.id);
            Tensor<F>& gt = grad_of(table.id);
            for (size_t i = 0; i < ids.size(); ++i)
                for (int64_t j = 0; j < g.cols(); ++j) gt.at(ids[i], j) += g.at(int64_t(i), j);
        });
        return out;
    }

    // Fused multi-head causal attention over already-projected Q,K,V (each
    // L×E split into H heads). Returns the concatenated head outputs (L×E).
    Var causal_attention(Var q, Var k, Var v, int heads) {
        const Tensor<F>& qv = value(q);
        const Tensor<F>& kv = value(k);
        const Tensor<F>& vv = value(v);
        if (qv.shape != kv.shape || qv.shape != vv.shape || qv.rank() != 2 ||
            qv.cols() % heads != 0)
            throw ShapeError("causal_attention q " + shape_str(qv.shape) + " heads " +
                             std::to_string(heads));
        const int64_t L = qv.rows(), E = qv.cols(), D = E / heads;
        const F inv_sqrt_d = F(1) / std::sqrt(F(D));
        Tensor<F> y({L, E});
        auto probs = std::make_shared<std::vector<Tensor<F>>>();
        probs->reserve(size_t(heads));
        for (int h = 0; h < heads; ++h) {
            const int64_t off = int64_t(h) * D;
            Tensor<F> p({L, L});
            for (int64_t i = 0; i < L; ++i) {
                // causal row softmax over logits q_i·k_j/√D, j ≤ i
                F mx = F(0);
                for (int64_t j = 0; j <= i; ++j) {
                    F a = kernels::dot(qv.row_ptr(i) + off, kv.row_ptr(j) + off, D) * inv_sqrt_d;
                    p.at(i, j) = a;
                    mx = j == 0 ? a : std::max(mx, a);
                }
                F sum = F(0);
                for (int64_t j = 0; j <= i; ++j) {
                    p.at(i, j) = std::exp(p.at(i, j) - mx);
                    sum += p.at(i, j);
                }
                for (int64_t j = 0; j <= i; ++j) p.at(i, j) /= sum;
                for (int64_t t = 0; t <= i; ++t)
                    kernels::axpy(p.at(i, t), vv.row_ptr(t) + off, y.row_ptr(i) + off, D);
            }
            probs->push_back(std::move(p));
        }
        Var out = push(std::move(y), requires_grad(q) || requires_grad(k) || requires_grad(v));
        record(out, [this, q, k, v, out, heads, probs, L, D, inv_sqrt_d] {
            const Tensor<F>& g = grad_of(out.id);
            const Tensor<F>& qv2 = value(q);
            const Tensor<F>& kv2 = value(k);
            const Tensor<F>& vv2 = value(v);
            Tensor<F> dq = Tensor<F>::zeros(qv2.shape);
            Tensor<F> dk = Tensor<F>::zeros(kv2.shape);
            Tensor<F> dv = Tensor<F>::zeros(vv2.shape);
            for (int h = 0; h < heads; ++h) {
                const int64_t off = int64_t(h) * D;
                const Tensor<F>& p = (*probs)[size_t(h)];
                for (int64_t i = 0; i < L; ++i) {
                    // dP_ij = dO_i·V_j ; dA = P ⊙ (dP − Σ_j dP_ij P_ij)
                    F inner = F(0);
                    std::vector<F> dp(static_cast<size_t>(i + 1));
                    for (int64_t j = 0; j <= i; ++j) {
                        F d = kernels::dot(g.row_ptr(i) + off, vv2.row_ptr(j) + off, D);
                        dp[size_t(j)] = d;
                        inner += d * p.at(i, j);
                    }
                    for (int64_t j = 0; j <= i; ++j) {
                        F pij = p.at(i, j);
                        F da = pij * (dp[size_t(j)] - inner) * inv_sqrt_d;
                        kernels::axpy(da, kv2.row_ptr(j) + off, dq.row_ptr(i) + off, D);
                        kernels::axpy(da, qv2.row_ptr(i) + off, dk.row_ptr(j) + off, D);
                        kernels::axpy(pij, g.row_ptr(i) + off, dv.row_ptr(j) + off, D);
                    }
                }
            }
            if (requires_grad(q)) accumulate(q, dq);
            if (requires_grad(k)) accumulate(k, dk);
            if (requires_grad(v)) accumulate(v, dv);
        });
        return out;
    }

    // scalar: mean over positions of -log softmax(logits)[target]
    Var cross_entropy_loss(Var logits, const std::vector<int>& targets) {
        F loss = cross_entropy(value(logits), targets);
        Var out = push(Tensor<F>::scalar(loss), requires_grad(logits));
        record(out, [this, logits, out, targets] {
            if (!requires_grad(logits)) return;
            F go = grad_of(out.id).at(0);
            const Tensor<F>& lv = value(logits);
            Tensor<F> probs = butler::softmax_rows(lv);
            Tensor<F> dl = std::move(probs);
            const F scale = go / F(lv.rows());
            for (int64_t i = 0; i < lv.rows(); ++i) {
                for (int64_t j = 0; j < lv.cols(); ++j) dl.at(i, j) *= scale;
                dl.at(i, targets[size_t(i)]) -= scale;
            }
            accumulate(logits, dl);
        });
        return out;
    }

    Var sum_all(Var x) {
        const Tensor<F>& xv = value(x);
        F sum = F(0);
        for (F v : xv.data) sum += v;
        Var out = push(Tensor<F>::scalar(sum), requires_grad(x));
        record(out, [this, x, out] {
            if (!requires_grad(x)) return;
            F go = grad_of(out.id).at(0);
            Tensor<F> dx;
            dx.shape = value(x).shape;
            dx.data.assign(value(x).data.size(), go);
            accumulate(x, dx);
        });
        return out;
    }

    Var mean_all(Var x) {
        const Tensor<F>& xv = value(x);
        F sum = F(0);
        for (F v : xv.data) sum += v;
        Var out = push(Tensor<F>::scalar(sum / F(xv.numel())), requires_grad(x));
        record(out, [this, x, out] {
            if (!requires_grad(x)) return;
            F go = grad_of(out.id).at(0) / F(value(x).numel());
            Tensor<F> dx;
            dx.shape = value(x).shape;
            dx.data.assign(value(x).data.size(), go);
            accumulate(x, dx);
        });
        return out;
    }

    Var square(Var x) { return hadamard(x, x); }

    // ---- backward ---------------------------------------------------------

    // Backpropagate from a scalar root; Parameter grads are accumulated and
    // the tape's intermediates are released by destroying the tape.
    void backward(Var root) {
        if (value(root).numel() != 1)
            throw ContractError("backward root must be scalar, got " +
                                shape_str(value(root).shape));
        grad_of(root.id) = Tensor<F>::scalar(F(1));
        run_backward();
    }

    // Backpropagate from externally computed gradients (used by the
    // blockwise streaming loss, which produces ∇Q_imp / ∇K_imp itself).
    void backward_from(const std::vector<std::pair<Var, Tensor<F>>>& seeds) {
        for (const auto& [var, g] : seeds) {
            if (g.shape != value(var).shape)
                throw ShapeError("seed grad " + shape_str(g.shape) + " vs value " +
                                 shape_str(value(var).shape));
            accumulate(var, g);
        }
        run_backward();
    }

    size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<F> value;
        Tensor<F> grad;  // allocated lazily
        bool requires_grad = false;
        std::function<void()> backward_fn;
        Parameter<F>* param = nullptr;
    };

    Var push(Tensor<F> v, bool rg) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = rg;
        nodes_.push_back(std::move(n));
        return Var{int32_t(nodes_.size() - 1)};
    }

    void record(Var out, std::function<void()> fn) {
        if (nodes_[size_t(out.id)].requires_grad) nodes_[size_t(out.id)].backward_fn = std::move(fn);
    }

    Tensor<F>& grad_of(int32_t id) {
        Node& n = nodes_[size_t(id)];
        if (n.grad.data.empty() && n.value.numel() > 0) n.grad = Tensor<F>::zeros(n.value.shape);
        return n.grad;
    }

    void accumulate(Var v, const Tensor<F>& g) {
        Tensor<F>& dst = grad_of(v.id);
        for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += g.data[i];
    }

    void check_same(Var a, Var b, const char* op) const {
        if (!value(a).same_shape(value(b)))
            throw ShapeError(std::string(op) + " shapes " + shape_str(value(a).shape) + " vs " +
                             shape_str(value(b).shape));
    }

    void run_backward() {
        for (size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.data.empty()) continue;
            if (n.backward_fn) n.backward_fn();
            if (n.param) {
                for (size_t j = 0; j < n.grad.data.size(); ++j)
                    n.param->grad.data[j] += n.grad.data[j];
            }
            // release intermediate buffers as soon as this node is done
            if (!n.param) {
                n.grad.data.clear();
                n.grad.data.shrink_to_fit();
            }
            n.backward_fn = nullptr;
        }
    }

    std::vector<Node> nodes_;
};

template <typename F>
using Var = typename Tape<F>::Var;

}  // namespace butler
