#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "butler/autograd.hpp"
#include "butler/tokenizer.hpp"

namespace butler {

struct HostConfig {
    int n_layers = 4;   // N
    int n_heads = 4;    // H
    int embed_dim = 128;  // E
    int head_dim = 32;    // D
    int vocab = 0;        // V, fixed by the tokenizer
    int max_seq = 256;    // context limit

    void validate() const {
        if (embed_dim != n_heads * head_dim)
            throw ConfigError("embed_dim " + std::to_string(embed_dim) + " != n_heads*head_dim " +
                              std::to_string(n_heads * head_dim));
        if (n_layers < 2) throw ConfigError("host needs at least 2 layers");
        if (max_seq < 16) throw ConfigError("max_seq must be >= 16");
        if (max_seq > 512) throw ConfigError("max_seq capped at 512");
    }
};

// Ground truth the predictor learns: pre-softmax, pre-causal-mask logits for
// every layer/head, the first layer's post-attention hidden state, and the
// per-head Q/K rows (kept for the blockwise loss and page metadata).
template <typename F>
struct AttentionTrace {
    int n_layers = 0;
    int n_heads = 0;
    int head_dim = 0;
    // a_true[layer*H + head][i][j] = dot(q_i, k_j)/sqrt(D); row i spans all j
    std::vector<std::vector<std::vector<F>>> a_true;
    std::vector<Tensor<F>> q;  // per head, L×D
    std::vector<Tensor<F>> k;  // per head, L×D
    Tensor<F> first_layer_out;  // I, L×E

    int head_index(int layer, int head) const { return layer * n_heads + head; }
    int head_count() const { return n_layers * n_heads; }
    int64_t len() const { return first_layer_out.rows(); }
};

// Retained-token sets for one decode step: keep[layer*H + head] lists the
// past indices a head may attend to. Layer 0 is always dense and its slots
// are ignored.
struct StepMask {
    int n_layers = 0;
    int n_heads = 0;
    std::vector<std::vector<int>> keep;

    StepMask() = default;
    StepMask(int layers, int heads)
        : n_layers(layers), n_heads(heads), keep(size_t(layers * heads)) {}

    std::vector<int>& at(int layer, int head) { return keep[size_t(layer * n_heads + head)]; }
    const std::vector<int>& at(int layer, int head) const {
        return keep[size_t(layer * n_heads + head)];
    }
};

namespace detail {

template <typename F>
inline void append_row(Tensor<F>& t, const F* row, int64_t n) {
    if (t.shape.empty()) t.shape = {0, n};
    t.data.insert(t.data.end(), row, row + n);
    t.shape[0] += 1;
}

// y[j] = dot(x, w.row(j)) + b[j]; weights stored [out, in]
template <typename F>
inline void linear_row(const F* x, const Tensor<F>& w, const Tensor<F>& b, F* y) {
    const int64_t out = w.rows(), in = w.cols();
    for (int64_t j = 0; j < out; ++j) y[j] = kernels::dot(x, w.row_ptr(j), in) + b.at(j);
}

template <typename F>
inline void rmsnorm_row(const F* x, const Tensor<F>& gain, int64_t n, F* y, F eps = F(1e-5)) {
    F ss = F(0);
    for (int64_t j = 0; j < n; ++j) ss += x[j] * x[j];
    F r = std::sqrt(ss / F(n) + eps);
    for (int64_t j = 0; j < n; ++j) y[j] = gain.at(j) * x[j] / r;
}

// mean of -log softmax(row)[target]
template <typename F>
inline F ce_row(const F* row, int64_t v, int target) {
    if (target < 0 || target >= v)
        throw IndexError("target " + std::to_string(target) + " outside vocabulary");
    F mx = row[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    F sum = F(0);
    for (int64_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
    return -(row[target] - mx - std::log(sum));
}

}  // namespace detail

template <typename F>
struct HostLayer {
    Parameter<F> ln1_g, wq, bq, wk, bk, wv, bv, wo, bo;
    Parameter<F> ln2_g, w1, b1, w2, b2;
};

// Decoder-only pre-norm transformer standing in for the frozen LLM.
// All linear weights are stored [out, in].
template <typename F>
class Host {
public:
    HostConfig cfg;
    CharTokenizer tokenizer;
    Parameter<F> tok_emb, pos_emb;
    std::vector<HostLayer<F>> layers;
    Parameter<F> ln_f, head_w, head_b;

    Host() = default;

    Host(HostConfig c, CharTokenizer tok, const Rng& root) : cfg(c), tokenizer(std::move(tok)) {
        cfg.vocab = tokenizer.vocab_size();
        cfg.validate();
        const int E = cfg.embed_dim, V = cfg.vocab, F4 = 4 * E;
        Rng init = root.stream("host-init");
        tok_emb = make_linear(init, "tok_emb", V, E, E);
        pos_emb = make_linear(init, "pos_emb", cfg.max_seq, E, E);
        layers.resize(size_t(cfg.n_layers));
        for (int l = 0; l < cfg.n_layers; ++l) {
            auto& L = layers[size_t(l)];
            std::string pfx = "layer" + std::to_string(l) + ".";
            L.ln1_g = make_ones(pfx + "ln1_g", E);
            L.wq = make_linear(init, pfx + "wq", E, E, E);
            L.bq = make_zeros(pfx + "bq", E);
            L.wk = make_linear(init, pfx + "wk", E, E, E);
            L.bk = make_zeros(pfx + "bk", E);
            L.wv = make_linear(init, pfx + "wv", E, E, E);
            L.bv = make_zeros(pfx + "bv", E);
            L.wo = make_linear(init, pfx + "wo", E, E, E);
            L.bo = make_zeros(pfx + "bo", E);
            L.ln2_g = make_ones(pfx + "ln2_g", E);
            L.w1 = make_linear(init, pfx + "w1", F4, E, E);
            L.b1 = make_zeros(pfx + "b1", F4);
            L.w2 = make_linear(init, pfx + "w2", E, F4, F4);
            L.b2 = make_zeros(pfx + "b2", E);
        }
        ln_f = make_ones("ln_f", E);
        head_w = make_linear(init, "head_w", V, E, E);
        head_b = make_zeros("head_b", V);
    }

    std::vector<Parameter<F>*> parameters() {
        std::vector<Parameter<F>*> out{&tok_emb, &pos_emb};
        for (auto& L : layers)
            for (Parameter<F>* p : {&L.ln1_g, &L.wq, &L.bq, &L.wk, &L.bk, &L.wv, &L.bv, &L.wo,
                                    &L.bo, &L.ln2_g, &L.w1, &L.b1, &L.w2, &L.b2})
                out.push_back(p);
        out.push_back(&ln_f);
        out.push_back(&head_w);
        out.push_back(&head_b);
        return out;
    }

    std::vector<const Parameter<F>*> parameters() const {
        auto& self = *const_cast<Host*>(this);
        std::vector<const Parameter<F>*> out;
        for (auto* p : self.parameters()) out.push_back(p);
        return out;
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto* p : parameters()) n += p->value.numel();
        return n;
    }

    // -------- incremental dense/masked evaluation --------------------------

    // Per-sequence evaluation cache. Rows are appended one token at a time;
    // with a fixed mask, row t only ever depends on rows <= t, so prefix
    // evaluation is bit-identical to full-sequence evaluation.
    struct EvalState {
        std::vector<int> tokens;
        std::vector<Tensor<F>> q, k, v;    // per layer, L×E
        std::vector<Tensor<F>> hidden;     // per layer, L×E (input to layer)
        Tensor<F> logits;                  // L×V
        AttentionTrace<F> trace;
        bool want_trace = false;
        const StepMask* mask = nullptr;  // fixed for the lifetime of the state
    };

    EvalState begin_eval(bool want_trace, const StepMask* mask = nullptr) const {
        EvalState s;
        s.want_trace = want_trace;
        s.mask = mask;
        const int NL = cfg.n_layers;
        s.q.resize(size_t(NL));
        s.k.resize(size_t(NL));
        s.v.resize(size_t(NL));
        s.hidden.resize(size_t(NL));
        if (want_trace) {
            s.trace.n_layers = NL;
            s.trace.n_heads = cfg.n_heads;
            s.trace.head_dim = cfg.head_dim;
            s.trace.a_true.resize(size_t(NL * cfg.n_heads));
            s.trace.q.resize(size_t(NL * cfg.n_heads));
            s.trace.k.resize(size_t(NL * cfg.n_heads));
        }
        if (mask != nullptr) validate_mask(*mask);
        return s;
    }

    void extend_eval(EvalState& s, int token) const {
        const int E = cfg.embed_dim, H = cfg.n_heads, D = cfg.head_dim, V = cfg.vocab;
        const int64_t t = int64_t(s.tokens.size());
        if (t >= cfg.max_seq)
            throw ContextError("sequence length " + std::to_string(t + 1) + " exceeds limit " +
                               std::to_string(cfg.max_seq));
        if (token < 0 || token >= V)
            throw VocabError("token id " + std::to_string(token) + " outside vocabulary");
        s.tokens.push_back(token);
        const F inv_sqrt_d = F(1) / std::sqrt(F(D));

        std::vector<F> x(static_cast<size_t>(E));
        for (int j = 0; j < E; ++j)
            x[size_t(j)] = tok_emb.value.at(token, j) + pos_emb.value.at(t, j);

        std::vector<F> xn(static_cast<size_t>(E)), qr(static_cast<size_t>(E)), kr(static_cast<size_t>(E)), vr(static_cast<size_t>(E));
        std::vector<F> attn(static_cast<size_t>(E)), proj(static_cast<size_t>(E));
        std::vector<F> ff(static_cast<size_t>(4 * E)), ff2(static_cast<size_t>(E));
        std::vector<F> arow;
        for (int l = 0; l < cfg.n_layers; ++l) {
            const auto& L = layers[size_t(l)];
            detail::append_row(s.hidden[size_t(l)], x.data(), E);
            detail::rmsnorm_row(x.data(), L.ln1_g.value, E, xn.data());
            detail::linear_row(xn.data(), L.wq.value, L.bq.value, qr.data());
            detail::linear_row(xn.data(), L.wk.value, L.bk.value, kr.data());
            detail::linear_row(xn.data(), L.wv.value, L.bv.value, vr.data());
            detail::append_row(s.q[size_t(l)], qr.data(), E);
            detail::append_row(s.k[size_t(l)], kr.data(), E);
            detail::append_row(s.v[size_t(l)], vr.data(), E);

            const Tensor<F>& Kl = s.k[size_t(l)];
            const Tensor<F>& Vl = s.v[size_t(l)];
            const Tensor<F>& Ql = s.q[size_t(l)];
            for (int h = 0; h < H; ++h) {
                const int64_t off = int64_t(h) * D;
                const int hi = l * H + h;
                arow.assign(size_t(t + 1), F(0));
                for (int64_t j = 0; j <= t; ++j)
                    arow[size_t(j)] =
                        kernels::dot(qr.data() + off, Kl.row_ptr(j) + off, D) * inv_sqrt_d;
                if (s.want_trace) {
                    auto& at = s.trace.a_true[size_t(hi)];
                    at.emplace_back(arow.begin(), arow.end());
                    // backfill column t of earlier rows: dot(q_i, k_t)
                    for (int64_t i = 0; i < t; ++i)
                        at[size_t(i)].push_back(
                            kernels::dot(Ql.row_ptr(i) + off, kr.data() + off, D) * inv_sqrt_d);
                    detail::append_row(s.trace.q[size_t(hi)], qr.data() + off, D);
                    detail::append_row(s.trace.k[size_t(hi)], kr.data() + off, D);
                }
                // selection mask: excluded causal positions get -1e9 (layer 0 dense)
                if (s.mask != nullptr && l >= 1) {
                    const std::vector<int>& keep = s.mask->at(l, h);
                    size_t ki = 0;
                    for (int64_t j = 0; j <= t; ++j) {
                        while (ki < keep.size() && keep[ki] < j) ++ki;
                        bool kept = ki < keep.size() && keep[ki] == j;
                        if (!kept) arow[size_t(j)] += F(-1e9);
                    }
                }
                F mx = arow[0];
                for (int64_t j = 1; j <= t; ++j) mx = std::max(mx, arow[size_t(j)]);
                F sum = F(0);
                for (int64_t j = 0; j <= t; ++j) {
                    arow[size_t(j)] = std::exp(arow[size_t(j)] - mx);
                    sum += arow[size_t(j)];
                }
                for (int64_t j = 0; j < D; ++j) attn[size_t(off + j)] = F(0);
                for (int64_t j = 0; j <= t; ++j)
                    kernels::axpy(arow[size_t(j)] / sum, Vl.row_ptr(j) + off,
                                  attn.data() + off, int64_t(D));
            }
            detail::linear_row(attn.data(), L.wo.value, L.bo.value, proj.data());
            for (int j = 0; j < E; ++j) x[size_t(j)] += proj[size_t(j)];
            if (l == 0 && s.want_trace)
                detail::append_row(s.trace.first_layer_out, x.data(), E);
            detail::rmsnorm_row(x.data(), L.ln2_g.value, E, xn.data());
            detail::linear_row(xn.data(), L.w1.value, L.b1.value, ff.data());
            for (int j = 0; j < 4 * E; ++j) {
                F u = ff[size_t(j)];
                ff[size_t(j)] = F(0.5) * u * (F(1) + std::erf(u * F(0.7071067811865475244L)));
            }
            detail::linear_row(ff.data(), L.w2.value, L.b2.value, ff2.data());
            for (int j = 0; j < E; ++j) x[size_t(j)] += ff2[size_t(j)];
        }
        detail::rmsnorm_row(x.data(), ln_f.value, E, xn.data());
        std::vector<F> lrow(static_cast<size_t>(V));
        detail::linear_row(xn.data(), head_w.value, head_b.value, lrow.data());
        detail::append_row(s.logits, lrow.data(), int64_t(V));
    }

    // Full forward with trace extraction (dense attention; causal masking is
    // applied for value mixing, the recorded logits are pre-mask).
    std::pair<Tensor<F>, AttentionTrace<F>> forward_traced(const std::vector<int>& tokens) const {
        check_context(tokens.size());
        EvalState s = begin_eval(true);
        for (int tok : tokens) extend_eval(s, tok);
        return {std::move(s.logits), std::move(s.trace)};
    }

    // Final-position next-token logits under a per-head retained-index mask.
    Tensor<F> forward_masked(const std::vector<int>& tokens, const StepMask& mask) const {
        check_context(tokens.size());
        if (tokens.empty()) throw ContractError("forward_masked needs at least one token");
        EvalState s = begin_eval(false, &mask);
        for (int tok : tokens) extend_eval(s, tok);
        Tensor<F> out({int64_t(cfg.vocab)});
        const F* last = s.logits.row_ptr(s.logits.rows() - 1);
        std::copy(last, last + cfg.vocab, out.data.begin());
        return out;
    }

    F dense_perplexity(const std::vector<int>& tokens) const {
        if (tokens.size() < 2) throw ContractError("perplexity needs at least 2 tokens");
        auto [logits, trace] = forward_traced(tokens);
        return perplexity_from_logits(logits, tokens);
    }

    F perplexity_from_logits(const Tensor<F>& logits, const std::vector<int>& tokens) const {
        if (tokens.size() < 2) throw ContractError("perplexity needs at least 2 tokens");
        F total = F(0);
        for (size_t i = 0; i + 1 < tokens.size(); ++i)
            total += detail::ce_row(logits.row_ptr(int64_t(i)), cfg.vocab, tokens[i + 1]);
        return std::exp(total / F(tokens.size() - 1));
    }

    // -------- training path (autodiff) --------------------------------------

    Var<F> forward_train(Tape<F>& t, const std::vector<int>& tokens) {
        check_context(tokens.size());
        const int64_t L = int64_t(tokens.size());
        std::vector<int> pos(static_cast<size_t>(L));
        for (int64_t i = 0; i < L; ++i) pos[size_t(i)] = int(i);
        Var<F> x = t.add(t.gather_rows(t.leaf(tok_emb), tokens),
                         t.gather_rows(t.leaf(pos_emb), pos));
        for (auto& L_ : layers) {
            Var<F> xn = t.rmsnorm(x, t.leaf(L_.ln1_g));
            Var<F> q = linear(t, xn, L_.wq, L_.bq);
            Var<F> k = linear(t, xn, L_.wk, L_.bk);
            Var<F> v = linear(t, xn, L_.wv, L_.bv);
            Var<F> a = t.causal_attention(q, k, v, cfg.n_heads);
            x = t.add(x, linear(t, a, L_.wo, L_.bo));
            Var<F> xn2 = t.rmsnorm(x, t.leaf(L_.ln2_g));
            Var<F> f = linear(t, t.gelu(linear(t, xn2, L_.w1, L_.b1)), L_.w2, L_.b2);
            x = t.add(x, f);
        }
        Var<F> xf = t.rmsnorm(x, t.leaf(ln_f));
        return linear(t, xf, head_w, head_b);
    }

    // weights are stored [out, in]; apply as x·Wᵀ + b
    static Var<F> linear(Tape<F>& t, Var<F> x, Parameter<F>& w, Parameter<F>& b) {
        Var<F> wt = t.leaf(w);
        // x·Wᵀ via matmul(x, transpose(W)) expressed with existing ops
        return t.add_rowvec(t.matmul_nt(x, wt), t.leaf(b));
    }

private:
    void check_context(size_t n) const {
        if (int(n) > cfg.max_seq)
            throw ContextError("sequence length " + std::to_string(n) + " exceeds limit " +
                               std::to_string(cfg.max_seq));
    }

    void validate_mask(const StepMask& m) const {
        if (m.n_layers != cfg.n_layers || m.n_heads != cfg.n_heads)
            throw ContractError("mask geometry " + std::to_string(m.n_layers) + "x" +
                                std::to_string(m.n_heads) + " does not match host");
        for (int l = 1; l < cfg.n_layers; ++l)
            for (int h = 0; h < cfg.n_heads; ++h)
                if (m.at(l, h).empty())
                    throw ContractError("mask retains zero tokens at layer " + std::to_string(l) +
                                        " head " + std::to_string(h));
    }

    Parameter<F> make_linear(Rng& root, const std::string& name, int64_t out, int64_t in,
                             int64_t fan_in) {
        Tensor<F> w({out, in});
        Rng r = root.stream(name);
        F bound = F(1) / std::sqrt(F(fan_in));
        w.fill_uniform(r, -bound, bound);
        return Parameter<F>(name, std::move(w));
    }

    Parameter<F> make_zeros(const std::string& name, int64_t n) {
        return Parameter<F>(name, Tensor<F>::zeros({n}));
    }

    Parameter<F> make_ones(const std::string& name, int64_t n) {
        Tensor<F> t({n});
        std::fill(t.data.begin(), t.data.end(), F(1));
        return Parameter<F>(name, std::move(t));
    }
};

}  // namespace butler
