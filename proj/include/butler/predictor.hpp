#pragma once

#include <string>
#include <vector>

#include "butler/host.hpp"

namespace butler {

// Predictor heads cover host layers 2..N (layer 1 is excluded from the loss
// and kept dense at selection time). Host layer l (0-based, l >= 1), head h
// maps to predictor head (l-1)*H + h.
inline int predictor_head_index(int layer, int head, int n_heads) {
    return (layer - 1) * n_heads + head;
}

struct PredictorConfig {
    int e_red = 16;          // reduced dim for the predictor's own attention
    int d = 8;               // interaction head dim, d << E
    int h_p = 2;             // predictor attention heads
    int w_qk = 0;            // hidden width of the Q/K projection nets; 0 = mean(in, out)
    double target_ratio = 0.011;

    int out_heads(const HostConfig& host) const { return (host.n_layers - 1) * host.n_heads; }
    int out_dim(const HostConfig& host) const { return out_heads(host) * d; }
    int qk_hidden(const HostConfig& host) const {
        return w_qk > 0 ? w_qk : (host.embed_dim + out_dim(host)) / 2;
    }

    void validate(const HostConfig& host) const {
        if (d < 1 || d > host.head_dim)
            throw ConfigError("interaction dim d=" + std::to_string(d) + " outside [1, D=" +
                              std::to_string(host.head_dim) + "]");
        if (e_red < 1 || e_red > host.embed_dim)
            throw ConfigError("e_red=" + std::to_string(e_red) + " outside [1, E]");
        if (h_p < 1 || e_red % h_p != 0)
            throw ConfigError("e_red must be divisible by h_p");
    }
};

// Closed-form scalar parameter count for a predictor configuration,
// matching the tensors allocated by Predictor below.
inline int64_t predictor_param_count(const PredictorConfig& p, const HostConfig& host) {
    const int64_t E = host.embed_dim, R = p.e_red;
    const int64_t OD = p.out_dim(host), W = p.qk_hidden(host);
    int64_t trunk = R * E + R;               // down projection
    trunk += 4 * (R * R + R);                // attention block wq/wk/wv/wo (+biases)
    trunk += R * R + R;                      // up-FFN first linear
    trunk += E * R + E;                      // up-FFN second linear to E
    int64_t qknn = W * E + W + OD * W;       // two linears, no bias on the output layer
    return trunk + 2 * qknn;
}

// Finds a PredictorConfig whose realized parameter count lands within the
// [1.0%, 1.2%] band of the host parameter count. The search walks d from
// large to small, then e_red, then shrinks the Q/K hidden width.
inline PredictorConfig size_for_budget(const HostConfig& host, int64_t host_param_count,
                                       double target_ratio) {
    if (target_ratio < 0.010 || target_ratio > 0.012)
        throw ContractError("target_ratio " + std::to_string(target_ratio) +
                            " outside [0.010, 0.012]");
    const double lo = 0.010, hi = 0.012;
    double min_ratio = 1e18;
    std::vector<int> d_cands;
    for (int d : {8, 6, 4, 3, 2, 1})
        if (d <= host.head_dim) d_cands.push_back(d);
    std::vector<int> e_cands;
    for (int e : {32, 24, 16, 12, 8, 6, 4, 2})
        if (e <= host.embed_dim) e_cands.push_back(e);
    for (int d : d_cands) {
        for (int e_red : e_cands) {
            PredictorConfig p;
            p.d = d;
            p.e_red = e_red;
            p.h_p = e_red % 2 == 0 ? 2 : 1;
            p.target_ratio = target_ratio;
            const int w_mean = p.qk_hidden(host);
            auto ratio_at = [&](int w) {
                p.w_qk = w;
                return double(predictor_param_count(p, host)) / double(host_param_count);
            };
            // the count is monotone in w: walk from the mean width toward the band
            double r0 = ratio_at(w_mean);
            min_ratio = std::min(min_ratio, r0);
            if (r0 >= lo && r0 <= hi) return p;
            int step = r0 > hi ? -1 : 1;
            for (int w = w_mean + step; w >= 2 && w <= 1 << 20; w += step) {
                double ratio = ratio_at(w);
                min_ratio = std::min(min_ratio, ratio);
                if (ratio >= lo && ratio <= hi) return p;
                if ((step < 0 && ratio < lo) || (step > 0 && ratio > hi)) break;
            }
        }
    }
    throw SizingError("no config fits the [1.0%, 1.2%] band; smallest achievable ratio " +
                      std::to_string(min_ratio));
}

template <typename F>
struct ImportanceOut {
    std::vector<Tensor<F>> a_pred;  // per predictor head, L×L (pre-softmax, pre-mask)
    std::vector<Tensor<F>> q_imp;   // per predictor head, L×d
    std::vector<Tensor<F>> k_imp;   // per predictor head, L×d
};

// The TokenButler network: first-layer hidden states -> approximate
// attention logits for every later layer/head of the host.
template <typename F>
class Predictor {
public:
    PredictorConfig cfg;
    HostConfig host_cfg;
    Parameter<F> dproj_w, dproj_b;
    Parameter<F> wq, bq, wk, bk, wv, bv, wo, bo;          // attention over e_red
    Parameter<F> up1_w, up1_b, up2_w, up2_b;              // FFN back to E, residual into I
    Parameter<F> qimp1_w, qimp1_b, qimp2_w;               // Q_imp net (no bias on output)
    Parameter<F> kimp1_w, kimp1_b, kimp2_w;               // K_imp net

    Predictor() = default;

    Predictor(PredictorConfig c, HostConfig hc, const Rng& root) : cfg(c), host_cfg(hc) {
        cfg.validate(host_cfg);
        const int E = host_cfg.embed_dim, R = cfg.e_red;
        const int OD = cfg.out_dim(host_cfg), W = cfg.qk_hidden(host_cfg);
        Rng init = root.stream("butler-init");
        dproj_w = make_linear(init, "dproj_w", R, E);
        dproj_b = make_zeros("dproj_b", R);
        wq = make_linear(init, "attn.wq", R, R);
        bq = make_zeros("attn.bq", R);
        wk = make_linear(init, "attn.wk", R, R);
        bk = make_zeros("attn.bk", R);
        wv = make_linear(init, "attn.wv", R, R);
        bv = make_zeros("attn.bv", R);
        wo = make_linear(init, "attn.wo", R, R);
        bo = make_zeros("attn.bo", R);
        up1_w = make_linear(init, "up1_w", R, R);
        up1_b = make_zeros("up1_b", R);
        up2_w = make_linear(init, "up2_w", E, R);
        up2_b = make_zeros("up2_b", E);
        qimp1_w = make_linear(init, "qimp1_w", W, E);
        qimp1_b = make_zeros("qimp1_b", W);
        qimp2_w = make_linear(init, "qimp2_w", OD, W);
        kimp1_w = make_linear(init, "kimp1_w", W, E);
        kimp1_b = make_zeros("kimp1_b", W);
        kimp2_w = make_linear(init, "kimp2_w", OD, W);
    }

    std::vector<Parameter<F>*> parameters() {
        return {&dproj_w, &dproj_b, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo,
                &up1_w, &up1_b, &up2_w, &up2_b, &qimp1_w, &qimp1_b, &qimp2_w,
                &kimp1_w, &kimp1_b, &kimp2_w};
    }

    std::vector<const Parameter<F>*> parameters() const {
        auto& self = *const_cast<Predictor*>(this);
        std::vector<const Parameter<F>*> out;
        for (auto* p : self.parameters()) out.push_back(p);
        return out;
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto* p : parameters()) n += p->value.numel();
        return n;
    }

    double realized_ratio(int64_t host_param_count) const {
        return double(param_count()) / double(host_param_count);
    }

    // -------- inference -----------------------------------------------------

    // I' = I + FFN(Attn(Dproj(I))); Q_imp/K_imp from I'; A_pred = QKᵀ/√d.
    ImportanceOut<F> predict_importance(const Tensor<F>& first_layer_out,
                                        bool want_logits = true) const {
        if (first_layer_out.rank() != 2 || first_layer_out.cols() != host_cfg.embed_dim)
            throw ContractError("first-layer states " + shape_str(first_layer_out.shape) +
                                " do not match host embed dim");
        if (first_layer_out.rows() > host_cfg.max_seq)
            throw ContextError("sequence longer than host context limit");
        const Tensor<F>& I = first_layer_out;
        const int64_t L = I.rows();
        const int d = cfg.d;
        Tensor<F> r = linear_eval(I, dproj_w.value, dproj_b.value);
        Tensor<F> aq = linear_eval(r, wq.value, bq.value);
        Tensor<F> ak = linear_eval(r, wk.value, bk.value);
        Tensor<F> av = linear_eval(r, wv.value, bv.value);
        Tensor<F> attn = causal_attention_eval(aq, ak, av, cfg.h_p);
        Tensor<F> h = linear_eval(attn, wo.value, bo.value);
        Tensor<F> u = linear_eval(silu(linear_eval(h, up1_w.value, up1_b.value)),
                                  up2_w.value, up2_b.value);
        Tensor<F> iprime = I;
        for (size_t i = 0; i < iprime.data.size(); ++i) iprime.data[i] += u.data[i];
        Tensor<F> qflat = matmul_nt(silu(linear_eval(iprime, qimp1_w.value, qimp1_b.value)),
                                    qimp2_w.value);
        Tensor<F> kflat = matmul_nt(silu(linear_eval(iprime, kimp1_w.value, kimp1_b.value)),
                                    kimp2_w.value);
        const int P = cfg.out_heads(host_cfg);
        ImportanceOut<F> out;
        out.q_imp.reserve(size_t(P));
        out.k_imp.reserve(size_t(P));
        const F inv_sqrt_d = F(1) / std::sqrt(F(d));
        for (int p = 0; p < P; ++p) {
            Tensor<F> qh({L, d}), kh({L, d});
            for (int64_t i = 0; i < L; ++i)
                for (int j = 0; j < d; ++j) {
                    qh.at(i, j) = qflat.at(i, p * d + j);
                    kh.at(i, j) = kflat.at(i, p * d + j);
                }
            if (want_logits) {
                Tensor<F> a = matmul_nt(qh, kh);
                for (F& v : a.data) v *= inv_sqrt_d;
                out.a_pred.push_back(std::move(a));
            }
            out.q_imp.push_back(std::move(qh));
            out.k_imp.push_back(std::move(kh));
        }
        return out;
    }

    // -------- training path --------------------------------------------------

    struct TrainOut {
        std::vector<Var<F>> q_imp;  // per predictor head, L×d
        std::vector<Var<F>> k_imp;
    };

    TrainOut forward_train(Tape<F>& t, const Tensor<F>& first_layer_out) {
        Var<F> I = t.constant(first_layer_out);
        Var<F> r = lin(t, I, dproj_w, dproj_b);
        Var<F> attn = t.causal_attention(lin(t, r, wq, bq), lin(t, r, wk, bk),
                                         lin(t, r, wv, bv), cfg.h_p);
        Var<F> h = lin(t, attn, wo, bo);
        Var<F> u = lin(t, t.silu(lin(t, h, up1_w, up1_b)), up2_w, up2_b);
        Var<F> iprime = t.add(I, u);
        Var<F> qflat = t.matmul_nt(t.silu(lin(t, iprime, qimp1_w, qimp1_b)), t.leaf(qimp2_w));
        Var<F> kflat = t.matmul_nt(t.silu(lin(t, iprime, kimp1_w, kimp1_b)), t.leaf(kimp2_w));
        TrainOut out;
        const int P = cfg.out_heads(host_cfg), d = cfg.d;
        for (int p = 0; p < P; ++p) {
            out.q_imp.push_back(t.slice_cols(qflat, int64_t(p) * d, int64_t(p + 1) * d));
            out.k_imp.push_back(t.slice_cols(kflat, int64_t(p) * d, int64_t(p + 1) * d));
        }
        return out;
    }

private:
    static Var<F> lin(Tape<F>& t, Var<F> x, Parameter<F>& w, Parameter<F>& b) {
        return t.add_rowvec(t.matmul_nt(x, t.leaf(w)), t.leaf(b));
    }

    static Tensor<F> linear_eval(const Tensor<F>& x, const Tensor<F>& w, const Tensor<F>& b) {
        Tensor<F> y = matmul_nt(x, w);
        for (int64_t i = 0; i < y.rows(); ++i)
            for (int64_t j = 0; j < y.cols(); ++j) y.at(i, j) += b.at(j);
        return y;
    }

    static Tensor<F> causal_attention_eval(const Tensor<F>& q, const Tensor<F>& k,
                                           const Tensor<F>& v, int heads) {
        const int64_t L = q.rows(), E = q.cols(), D = E / heads;
        const F inv_sqrt_d = F(1) / std::sqrt(F(D));
        Tensor<F> y({L, E});
        std::vector<F> row;
        for (int h = 0; h < heads; ++h) {
            const int64_t off = int64_t(h) * D;
            for (int64_t i = 0; i < L; ++i) {
                row.assign(size_t(i + 1), F(0));
                F mx = F(0);
                for (int64_t j = 0; j <= i; ++j) {
                    row[size_t(j)] =
                        kernels::dot(q.row_ptr(i) + off, k.row_ptr(j) + off, D) * inv_sqrt_d;
                    mx = j == 0 ? row[0] : std::max(mx, row[size_t(j)]);
                }
                F sum = F(0);
                for (int64_t j = 0; j <= i; ++j) {
                    row[size_t(j)] = std::exp(row[size_t(j)] - mx);
                    sum += row[size_t(j)];
                }
                for (int64_t j = 0; j <= i; ++j)
                    kernels::axpy(row[size_t(j)] / sum, v.row_ptr(j) + off, y.row_ptr(i) + off,
                                  D);
            }
        }
        return y;
    }

    Parameter<F> make_linear(Rng& root, const std::string& name, int64_t out, int64_t in) {
        Tensor<F> w({out, in});
        Rng r = root.stream(name);
        F bound = F(1) / std::sqrt(F(in));
        w.fill_uniform(r, -bound, bound);
        return Parameter<F>(name, std::move(w));
    }

    Parameter<F> make_zeros(const std::string& name, int64_t n) {
        return Parameter<F>(name, Tensor<F>::zeros({n}));
    }
};

}  // namespace butler
