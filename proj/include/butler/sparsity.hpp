#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "butler/common.hpp"
#include "butler/rng.hpp"

namespace butler {

enum class Pooling { mean, max };

struct PolicyConfig {
    double sparsity = 0.5;  // s, fraction of past tokens dropped
    int anchors = 4;        // A, always-retained leading positions
    int window = 0;         // W for streaming; 0 tracks the budget
    int obs_window = 16;    // O, SnapKV observation rows
    int page_size = 16;     // P, Quest page granularity
    Pooling pooling = Pooling::mean;
    uint64_t seed = 0;      // random-policy stream

    void validate() const {
        if (sparsity < 0.0 || sparsity >= 1.0)
            throw ConfigError("sparsity must lie in [0, 1)");
        if (anchors < 0) throw ConfigError("anchors must be >= 0");
        if (window < 0) throw ConfigError("window must be >= 1 (or 0 for budget-tracking)");
        if (obs_window < 1) throw ConfigError("obs_window must be >= 1");
        if (page_size < 1) throw ConfigError("page_size must be >= 1");
    }
};

// k = max(A+1, ceil((1-s)·(t+1))), capped at t+1. The tiny epsilon keeps
// exact products like 0.5·100 from ceiling up on floating-point dust.
inline int budget(int t, double s, int anchors) {
    if (t < 0) throw ContractError("budget needs t >= 0");
    double raw = (1.0 - s) * double(t + 1);
    int k = int(std::ceil(raw - 1e-9));
    k = std::max(k, anchors + 1);
    return std::min(k, t + 1);
}

namespace detail {

// anchors {0..A-1} plus the current index t, clipped to the valid range
inline std::vector<int> forced_set(int t, int anchors) {
    std::vector<int> f;
    for (int i = 0; i < anchors && i <= t; ++i) f.push_back(i);
    if (f.empty() || f.back() != t) f.push_back(t);
    return f;
}

// forced indices plus the top-(k-|forced|) remaining candidates by score;
// ties break toward the smaller index
template <typename F>
std::vector<int> top_fill(std::span<const F> scores, const std::vector<int>& candidates, int k,
                          const std::vector<int>& forced) {
    if (k < int(forced.size()))
        throw ContractError("budget " + std::to_string(k) + " below forced set of " +
                            std::to_string(forced.size()));
    std::vector<char> is_forced(scores.size(), 0);
    for (int f : forced) is_forced[size_t(f)] = 1;
    std::vector<int> rest;
    rest.reserve(candidates.size());
    for (int c : candidates)
        if (!is_forced[size_t(c)]) rest.push_back(c);
    int need = std::min<int>(k - int(forced.size()), int(rest.size()));
    std::partial_sort(rest.begin(), rest.begin() + need, rest.end(), [&](int a, int b) {
        if (scores[size_t(a)] != scores[size_t(b)]) return scores[size_t(a)] > scores[size_t(b)];
        return a < b;
    });
    std::vector<int> out(forced);
    out.insert(out.end(), rest.begin(), rest.begin() + need);
    std::sort(out.begin(), out.end());
    return out;
}

inline std::vector<int> iota_to(int t) {
    std::vector<int> v(size_t(t + 1));
    for (int i = 0; i <= t; ++i) v[size_t(i)] = i;
    return v;
}

// softmax over an arbitrary index subset of a logit row
template <typename F>
std::vector<F> subset_softmax(std::span<const F> row, const std::vector<int>& idx) {
    F mx = row[size_t(idx[0])];
    for (int i : idx) mx = std::max(mx, row[size_t(i)]);
    std::vector<F> w(idx.size());
    F sum = F(0);
    for (size_t n = 0; n < idx.size(); ++n) {
        w[n] = std::exp(row[size_t(idx[n])] - mx);
        sum += w[n];
    }
    for (F& v : w) v /= sum;
    return w;
}

}  // namespace detail

// Best-possible selection given the true pre-softmax logits of the current
// query over positions 0..t.
template <typename F>
std::vector<int> oracle_select(std::span<const F> true_logit_row, int k, int anchors) {
    const int t = int(true_logit_row.size()) - 1;
    if (t < 0) throw ContractError("oracle_select needs a non-empty row");
    return detail::top_fill(true_logit_row, detail::iota_to(t), k,
                            detail::forced_set(t, anchors));
}

// Recency window of W positions plus the anchor sink.
inline std::vector<int> streaming_select(int t, int window, int anchors) {
    std::vector<int> out;
    for (int i = 0; i < anchors && i <= t; ++i) out.push_back(i);
    for (int i = std::max(t - window + 1, 0); i <= t; ++i)
        if (out.empty() || i > out.back()) out.push_back(i);
    return out;
}

// Heavy-hitter eviction state: accumulated post-softmax attention mass per
// retained index. Evicted indices never return.
template <typename F>
struct H2OState {
    std::vector<int> retained;  // sorted
    std::vector<F> acc;         // parallel to retained
};

// Admit index t, accumulate the step's attention weights over the retained
// set, then evict the lowest-scoring non-anchor, non-current index while
// over budget.
template <typename F>
std::vector<int> h2o_step(H2OState<F>& state, std::span<const F> true_logit_row, int t, int k,
                          int anchors) {
    state.retained.push_back(t);
    state.acc.push_back(F(0));
    std::vector<F> w = detail::subset_softmax(true_logit_row, state.retained);
    for (size_t i = 0; i < w.size(); ++i) state.acc[i] += w[i];
    while (int(state.retained.size()) > k) {
        int evict_pos = -1;
        for (size_t i = 0; i < state.retained.size(); ++i) {
            int idx = state.retained[i];
            if (idx < anchors || idx == t) continue;
            if (evict_pos < 0 || state.acc[i] < state.acc[size_t(evict_pos)]) evict_pos = int(i);
        }
        if (evict_pos < 0) break;  // nothing evictable below budget pressure
        state.retained.erase(state.retained.begin() + evict_pos);
        state.acc.erase(state.acc.begin() + evict_pos);
    }
    return state.retained;
}

// Pooled attention mass over the last O causal rows. Rows are the true
// pre-softmax logit rows; weights are their causal softmax.
template <typename F>
std::vector<int> snapkv_select(const std::vector<std::span<const F>>& recent_rows, int t, int k,
                               int anchors, Pooling pooling) {
    if (recent_rows.empty()) throw ContractError("snapkv needs at least one observation row");
    std::vector<F> importance(size_t(t + 1), F(0));
    for (const auto& row : recent_rows) {
        const int ri = int(row.size()) - 1;  // row index == causal length - 1
        std::vector<F> w = detail::subset_softmax(row, detail::iota_to(ri));
        for (int j = 0; j <= ri && j <= t; ++j) {
            if (pooling == Pooling::mean)
                importance[size_t(j)] += w[size_t(j)];
            else
                importance[size_t(j)] = std::max(importance[size_t(j)], w[size_t(j)]);
        }
    }
    if (pooling == Pooling::mean)
        for (F& v : importance) v /= F(recent_rows.size());
    return detail::top_fill(std::span<const F>(importance), detail::iota_to(t), k,
                            detail::forced_set(t, anchors));
}

// Per-page elementwise min/max over key rows.
template <typename F>
struct PageMeta {
    int page_size = 0;
    int64_t dim = 0;
    int64_t n_keys = 0;
    std::vector<std::vector<F>> mins;  // per page, length dim
    std::vector<std::vector<F>> maxs;
};

template <typename F, typename KeyRow>
PageMeta<F> build_page_meta(KeyRow&& key_row, int64_t n_keys, int64_t dim, int page_size) {
    if (page_size < 1) throw ContractError("page_size must be >= 1");
    PageMeta<F> meta;
    meta.page_size = page_size;
    meta.dim = dim;
    meta.n_keys = n_keys;
    for (int64_t start = 0; start < n_keys; start += page_size) {
        int64_t end = std::min<int64_t>(start + page_size, n_keys);
        std::vector<F> mn(size_t(dim)), mx(size_t(dim));
        const F* first = key_row(start);
        std::copy(first, first + dim, mn.begin());
        std::copy(first, first + dim, mx.begin());
        for (int64_t r = start + 1; r < end; ++r) {
            const F* row = key_row(r);
            for (int64_t j = 0; j < dim; ++j) {
                mn[size_t(j)] = std::min(mn[size_t(j)], row[j]);
                mx[size_t(j)] = std::max(mx[size_t(j)], row[j]);
            }
        }
        meta.mins.push_back(std::move(mn));
        meta.maxs.push_back(std::move(mx));
    }
    return meta;
}

// Σ_i max(q_i·max_i, q_i·min_i): an upper bound on any per-token dot
// product within the page.
template <typename F>
F quest_page_score(std::span<const F> query, const PageMeta<F>& meta, size_t page) {
    F s = F(0);
    for (int64_t j = 0; j < meta.dim; ++j)
        s += std::max(query[size_t(j)] * meta.maxs[page][size_t(j)],
                      query[size_t(j)] * meta.mins[page][size_t(j)]);
    return s;
}

// Whole pages are admitted by score until the budget is covered, so the
// retained set may exceed k by up to page_size-1.
template <typename F>
std::vector<int> quest_page_select(std::span<const F> query, const PageMeta<F>& meta, int k,
                                   int anchors, int t) {
    std::vector<int> forced = detail::forced_set(t, anchors);
    const size_t n_pages = size_t((t + meta.page_size) / meta.page_size);
    std::vector<std::pair<F, size_t>> ranked;
    for (size_t p = 0; p < n_pages && p < meta.mins.size(); ++p)
        ranked.emplace_back(quest_page_score(query, meta, p), p);
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    std::vector<char> chosen(size_t(t + 1), 0);
    for (int f : forced) chosen[size_t(f)] = 1;
    const int need = k - int(forced.size());
    int covered = 0;
    for (const auto& [score, p] : ranked) {
        if (covered >= need) break;
        int start = int(p) * meta.page_size;
        int end = std::min(start + meta.page_size, t + 1);
        for (int i = start; i < end; ++i) {
            if (!chosen[size_t(i)]) {
                chosen[size_t(i)] = 1;
                ++covered;
            }
        }
    }
    std::vector<int> out;
    for (int i = 0; i <= t; ++i)
        if (chosen[size_t(i)]) out.push_back(i);
    return out;
}

// Same ranking rule as the oracle, applied to predicted logits.
template <typename F>
std::vector<int> butler_select(std::span<const F> pred_logit_row, int k, int anchors) {
    return oracle_select(pred_logit_row, k, anchors);
}

// Oracle ranking using a proxy layer's logits (first layer or the previous
// layer), head index preserved.
template <typename F>
std::vector<int> proxy_select(std::span<const F> proxy_logit_row, int k, int anchors) {
    return oracle_select(proxy_logit_row, k, anchors);
}

// Uniform-random fill of the non-forced slots; baseline for ordering checks.
inline std::vector<int> random_select(int t, int k, int anchors, Rng& rng) {
    std::vector<int> forced = detail::forced_set(t, anchors);
    std::vector<char> is_forced(size_t(t + 1), 0);
    for (int f : forced) is_forced[size_t(f)] = 1;
    std::vector<int> rest;
    for (int i = 0; i <= t; ++i)
        if (!is_forced[size_t(i)]) rest.push_back(i);
    // Fisher-Yates prefix shuffle
    const int need = std::min<int>(k - int(forced.size()), int(rest.size()));
    for (int i = 0; i < need; ++i) {
        size_t j = size_t(i) + size_t(rng.next_below(uint64_t(rest.size() - size_t(i))));
        std::swap(rest[size_t(i)], rest[j]);
    }
    std::vector<int> out(forced);
    out.insert(out.end(), rest.begin(), rest.begin() + need);
    std::sort(out.begin(), out.end());
    return out;
}

// Prefill-eviction oracle: after each step, indices outside the current
// oracle selection are dropped permanently.
struct OracleEvictState {
    std::vector<int> retained;  // sorted
};

template <typename F>
std::vector<int> oracle_evict_step(OracleEvictState& state, std::span<const F> true_logit_row,
                                   int t, int k, int anchors) {
    std::vector<int> candidates = state.retained;
    candidates.push_back(t);
    std::vector<int> sel =
        detail::top_fill(true_logit_row, candidates, k, detail::forced_set(t, anchors));
    state.retained = sel;
    return sel;
}

}  // namespace butler
