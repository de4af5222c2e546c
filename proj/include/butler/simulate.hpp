#pragma once

#include <chrono>
#include <optional>
#include <string>
#include <vector>

#include "butler/host.hpp"
#include "butler/predictor.hpp"
#include "butler/sparsity.hpp"

namespace butler {

enum class PolicyKind {
    oracle,
    oracle_evict,
    streaming,
    h2o,
    snapkv,
    quest,
    butler,
    proxy_first,
    proxy_prev,
    random,
};

inline PolicyKind policy_from_string(const std::string& s) {
    if (s == "oracle") return PolicyKind::oracle;
    if (s == "oracle-evict") return PolicyKind::oracle_evict;
    if (s == "streaming") return PolicyKind::streaming;
    if (s == "h2o") return PolicyKind::h2o;
    if (s == "snapkv") return PolicyKind::snapkv;
    if (s == "quest") return PolicyKind::quest;
    if (s == "butler") return PolicyKind::butler;
    if (s == "proxy-first") return PolicyKind::proxy_first;
    if (s == "proxy-prev") return PolicyKind::proxy_prev;
    if (s == "random") return PolicyKind::random;
    throw ConfigError("unknown policy '" + s + "'");
}

inline std::string policy_name(PolicyKind k) {
    switch (k) {
        case PolicyKind::oracle: return "oracle";
        case PolicyKind::oracle_evict: return "oracle-evict";
        case PolicyKind::streaming: return "streaming";
        case PolicyKind::h2o: return "h2o";
        case PolicyKind::snapkv: return "snapkv";
        case PolicyKind::quest: return "quest";
        case PolicyKind::butler: return "butler";
        case PolicyKind::proxy_first: return "proxy-first";
        case PolicyKind::proxy_prev: return "proxy-prev";
        case PolicyKind::random: return "random";
    }
    return "?";
}

inline bool policy_is_stateful(PolicyKind k) {
    return k == PolicyKind::h2o || k == PolicyKind::oracle_evict;
}

inline bool policy_needs_predictor(PolicyKind k) { return k == PolicyKind::butler; }

// Builds per-head retained sets for one decode step at a time. Eviction
// policies own per-head state and must be stepped over t = 0, 1, 2, ...
// without gaps.
template <typename F>
class PolicyRunner {
public:
    PolicyRunner(PolicyKind kind, PolicyConfig cfg, const HostConfig& host)
        : kind_(kind), cfg_(cfg), host_(host), rng_(cfg.seed) {
        cfg_.validate();
        const size_t cells = size_t((host.n_layers - 1) * host.n_heads);
        if (kind_ == PolicyKind::h2o) h2o_.resize(cells);
        if (kind_ == PolicyKind::oracle_evict) evict_.resize(cells);
    }

    PolicyKind kind() const { return kind_; }
    bool stateful() const { return policy_is_stateful(kind_); }

    // a_pred: per predictor head L×L logits (butler only), rows >= t+1
    StepMask step(int t, const AttentionTrace<F>& trace,
                  const std::vector<Tensor<F>>* a_pred) {
        if (stateful()) {
            if (t != next_t_)
                throw ContractError("eviction policy stepped at t=" + std::to_string(t) +
                                    ", expected " + std::to_string(next_t_));
            ++next_t_;
        }
        const int H = host_.n_heads;
        const int k = budget(t, cfg_.sparsity, cfg_.anchors);
        StepMask mask(host_.n_layers, H);
        for (int l = 1; l < host_.n_layers; ++l) {
            for (int h = 0; h < H; ++h) {
                const int hi = trace.head_index(l, h);
                const int cell = (l - 1) * H + h;
                const auto& row = trace.a_true[size_t(hi)][size_t(t)];
                std::span<const F> true_row(row.data(), size_t(t + 1));
                std::vector<int> sel;
                switch (kind_) {
                    case PolicyKind::oracle:
                        sel = oracle_select(true_row, k, cfg_.anchors);
                        break;
                    case PolicyKind::oracle_evict:
                        sel = oracle_evict_step(evict_[size_t(cell)], true_row, t, k,
                                                cfg_.anchors);
                        break;
                    case PolicyKind::streaming: {
                        int w = cfg_.window > 0 ? cfg_.window
                                                : std::max(1, k - cfg_.anchors);
                        sel = streaming_select(t, w, cfg_.anchors);
                        break;
                    }
                    case PolicyKind::h2o:
                        sel = h2o_step(h2o_[size_t(cell)], true_row, t, k, cfg_.anchors);
                        break;
                    case PolicyKind::snapkv: {
                        std::vector<std::span<const F>> rows;
                        for (int r = std::max(0, t - cfg_.obs_window + 1); r <= t; ++r) {
                            const auto& rr = trace.a_true[size_t(hi)][size_t(r)];
                            rows.emplace_back(rr.data(), size_t(r + 1));
                        }
                        sel = snapkv_select(rows, t, k, cfg_.anchors, cfg_.pooling);
                        break;
                    }
                    case PolicyKind::quest: {
                        const Tensor<F>& keys = trace.k[size_t(hi)];
                        auto key_row = [&](int64_t r) { return keys.row_ptr(r); };
                        PageMeta<F> meta = build_page_meta<F>(key_row, int64_t(t + 1),
                                                              keys.cols(), cfg_.page_size);
                        const Tensor<F>& queries = trace.q[size_t(hi)];
                        std::span<const F> qrow(queries.row_ptr(t), size_t(queries.cols()));
                        sel = quest_page_select(qrow, meta, k, cfg_.anchors, t);
                        break;
                    }
                    case PolicyKind::butler: {
                        if (a_pred == nullptr)
                            throw ConfigError("butler policy requires a predictor");
                        const Tensor<F>& ap = (*a_pred)[size_t(predictor_head_index(l, h, H))];
                        std::span<const F> prow(ap.row_ptr(t), size_t(t + 1));
                        sel = butler_select(prow, k, cfg_.anchors);
                        break;
                    }
                    case PolicyKind::proxy_first: {
                        const auto& pr = trace.a_true[size_t(trace.head_index(0, h))][size_t(t)];
                        sel = proxy_select(std::span<const F>(pr.data(), size_t(t + 1)), k,
                                           cfg_.anchors);
                        break;
                    }
                    case PolicyKind::proxy_prev: {
                        const auto& pr =
                            trace.a_true[size_t(trace.head_index(l - 1, h))][size_t(t)];
                        sel = proxy_select(std::span<const F>(pr.data(), size_t(t + 1)), k,
                                           cfg_.anchors);
                        break;
                    }
                    case PolicyKind::random: {
                        Rng r = rng_.stream("random-policy",
                                            (uint64_t(uint32_t(t)) << 16) | uint64_t(cell));
                        sel = random_select(t, k, cfg_.anchors, r);
                        break;
                    }
                }
                mask.at(l, h) = std::move(sel);
            }
        }
        return mask;
    }

private:
    PolicyKind kind_;
    PolicyConfig cfg_;
    HostConfig host_;
    Rng rng_;
    int next_t_ = 0;
    std::vector<H2OState<F>> h2o_;
    std::vector<OracleEvictState> evict_;
};

// 1 - (retained cells / available cells) over steps, layers >= 2, heads.
inline double net_sparsity(const std::vector<StepMask>& masks) {
    int64_t kept = 0, avail = 0;
    for (size_t step = 0; step < masks.size(); ++step) {
        const StepMask& m = masks[step];
        for (int l = 1; l < m.n_layers; ++l)
            for (int h = 0; h < m.n_heads; ++h) {
                kept += int64_t(m.at(l, h).size());
                avail += int64_t(step) + 1;
            }
    }
    return avail == 0 ? 0.0 : 1.0 - double(kept) / double(avail);
}

template <typename F>
struct SimResult {
    std::string policy;
    double sparsity = 0;
    double net_sparsity = 0;
    double ppl_masked = 0;
    double ppl_dense = 0;
    uint64_t seed = 0;
    int length = 0;
    double wall_ms = 0;
    std::vector<StepMask> masks;  // masks[i] is the selection at step t=i
};

// Shared decode-simulation engine. Tokens stream in one at a time; the dense
// trace extends incrementally (bit-identical to a one-shot traced forward),
// masks are built per step, and masked forwards run over the prefix.
template <typename F>
class DecodeSession {
public:
    DecodeSession(const Host<F>& host, const Predictor<F>* pred, PolicyKind kind,
                  PolicyConfig cfg)
        : host_(host), pred_(pred), runner_(kind, cfg, host.cfg) {
        if (policy_needs_predictor(kind) && pred == nullptr)
            throw ConfigError("butler policy requires a predictor checkpoint");
        if (!policy_needs_predictor(kind) && pred != nullptr)
            throw ConfigError("predictor supplied for a policy that does not use one");
        dense_ = host.begin_eval(true);
    }

    void push(int token) { host_.extend_eval(dense_, token); }

    int length() const { return int(dense_.tokens.size()); }
    const std::vector<int>& tokens() const { return dense_.tokens; }
    const AttentionTrace<F>& trace() const { return dense_.trace; }
    const Tensor<F>& dense_logits() const { return dense_.logits; }

    // Selection for step t (0-based query position); requires t < length().
    StepMask mask_for_step(int t) {
        if (t < 0 || t >= length()) throw ContractError("mask requested past sequence end");
        return runner_.step(t, dense_.trace, predictor_logits(t));
    }

    // Stateful policies consume trace rows during the prefix without masked
    // forwards; stateless policies have nothing to advance.
    void advance_state(int t) {
        if (runner_.stateful()) (void)runner_.step(t, dense_.trace, nullptr);
    }

    bool stateful() const { return runner_.stateful(); }

    // Masked final-position logits over tokens[0..t].
    Tensor<F> masked_logits(int t, const StepMask& mask) const {
        std::vector<int> prefix(dense_.tokens.begin(), dense_.tokens.begin() + t + 1);
        return host_.forward_masked(prefix, mask);
    }

    // One greedy decode step at the current end of sequence: mask, masked
    // forward, argmax, append. Returns the generated token.
    int greedy_step(std::vector<StepMask>* mask_log = nullptr) {
        const int t = length() - 1;
        StepMask mask = mask_for_step(t);
        Tensor<F> logits = masked_logits(t, mask);
        int best = 0;
        for (int j = 1; j < host_.cfg.vocab; ++j)
            if (logits.at(j) > logits.at(best)) best = j;
        if (mask_log) mask_log->push_back(std::move(mask));
        push(best);
        return best;
    }

private:
    const std::vector<Tensor<F>>* predictor_logits(int t) {
        if (pred_ == nullptr) return nullptr;
        (void)t;
        if (apred_len_ != length()) {
            auto out = pred_->predict_importance(dense_.trace.first_layer_out, true);
            apred_ = std::move(out.a_pred);
            apred_len_ = length();
        }
        return &apred_;
    }

    const Host<F>& host_;
    const Predictor<F>* pred_;
    PolicyRunner<F> runner_;
    typename Host<F>::EvalState dense_;
    std::vector<Tensor<F>> apred_;
    int apred_len_ = -1;
};

// Token-by-token decode over a full sequence (no prefill): at each step t
// the policy selects from information available at t, the masked forward
// scores the true next token, and layer 1 stays dense.
template <typename F>
SimResult<F> simulate_decode(const Host<F>& host, const Predictor<F>* pred, PolicyKind kind,
                             const PolicyConfig& cfg, const std::vector<int>& tokens,
                             uint64_t seed) {
    if (tokens.size() < 2) throw ContractError("decode simulation needs at least 2 tokens");
    auto t0 = std::chrono::steady_clock::now();
    DecodeSession<F> session(host, pred, kind, cfg);
    for (int tok : tokens) session.push(tok);
    const int L = int(tokens.size());
    SimResult<F> res;
    res.policy = policy_name(kind);
    res.sparsity = cfg.sparsity;
    res.seed = seed;
    res.length = L;
    F ce_masked = F(0);
    for (int t = 0; t + 1 < L; ++t) {
        StepMask mask = session.mask_for_step(t);
        Tensor<F> logits = session.masked_logits(t, mask);
        ce_masked += detail::ce_row(logits.data.data(), host.cfg.vocab, tokens[size_t(t + 1)]);
        res.masks.push_back(std::move(mask));
    }
    res.ppl_masked = double(std::exp(ce_masked / F(L - 1)));
    F ce_dense = F(0);
    for (int t = 0; t + 1 < L; ++t)
        ce_dense += detail::ce_row(session.dense_logits().row_ptr(t), host.cfg.vocab,
                                   tokens[size_t(t + 1)]);
    res.ppl_dense = double(std::exp(ce_dense / F(L - 1)));
    res.net_sparsity = net_sparsity(res.masks);
    auto t1 = std::chrono::steady_clock::now();
    res.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    return res;
}

// Greedy continuation of a prefix under a policy; stateful policies walk the
// prefix first so their eviction history is in place.
template <typename F>
std::vector<int> greedy_continue(const Host<F>& host, const Predictor<F>* pred, PolicyKind kind,
                                 const PolicyConfig& cfg, const std::vector<int>& prefix, int n,
                                 std::vector<StepMask>* mask_log = nullptr) {
    if (prefix.empty()) throw ContractError("greedy_continue needs a non-empty prefix");
    if (int(prefix.size()) + n > host.cfg.max_seq)
        throw ContextError("prefix plus continuation exceeds the context limit");
    DecodeSession<F> session(host, pred, kind, cfg);
    for (int tok : prefix) session.push(tok);
    if (session.stateful())
        for (int t = 0; t + 1 < int(prefix.size()); ++t) session.advance_state(t);
    std::vector<int> out;
    for (int i = 0; i < n; ++i) out.push_back(session.greedy_step(mask_log));
    return out;
}

}  // namespace butler
