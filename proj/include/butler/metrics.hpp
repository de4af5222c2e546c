#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "butler/host.hpp"

namespace butler {

namespace detail {

// top-k index set by (value desc, index asc)
template <typename F>
std::vector<int> topk_indices(std::span<const F> row, int k) {
    std::vector<int> idx(row.size());
    for (size_t i = 0; i < row.size(); ++i) idx[i] = int(i);
    k = std::min<int>(k, int(row.size()));
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
        if (row[size_t(a)] != row[size_t(b)]) return row[size_t(a)] > row[size_t(b)];
        return a < b;
    });
    idx.resize(size_t(k));
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace detail

// Fraction of the true top-k tokens the prediction recovers, averaged over
// causal rows (>= 2 candidates) and heads; k = ceil(fraction*(t+1)).
template <typename F>
double topk_classification_accuracy(const std::vector<Tensor<F>>& a_true,
                                    const std::vector<Tensor<F>>& a_pred,
                                    double fraction = 0.5) {
    if (a_true.size() != a_pred.size())
        throw ContractError("head counts differ in classification accuracy");
    double total = 0;
    int64_t rows = 0;
    for (size_t h = 0; h < a_true.size(); ++h) {
        const Tensor<F>& t = a_true[h];
        const Tensor<F>& p = a_pred[h];
        if (t.shape != p.shape || t.rank() != 2 || t.rows() != t.cols())
            throw ContractError("logit shapes " + shape_str(t.shape) + " vs " +
                                shape_str(p.shape));
        for (int64_t r = 1; r < t.rows(); ++r) {
            const int k = int(std::ceil(fraction * double(r + 1) - 1e-9));
            std::vector<int> st =
                detail::topk_indices(std::span<const F>(t.row_ptr(r), size_t(r + 1)), k);
            std::vector<int> sp =
                detail::topk_indices(std::span<const F>(p.row_ptr(r), size_t(r + 1)), k);
            std::vector<int> inter;
            std::set_intersection(st.begin(), st.end(), sp.begin(), sp.end(),
                                  std::back_inserter(inter));
            total += double(inter.size()) / double(k);
            ++rows;
        }
    }
    if (rows == 0) throw ContractError("no rows with >= 2 candidates");
    return total / double(rows);
}

struct ConsensusMatrix {
    int heads = 0;
    std::vector<double> matrix;  // heads × heads, row-major
    double mean_upper = 0;       // mean of the strict upper triangle
    int flagged_pairs = 0;       // zero-variance pairs reported as 0

    double at(int i, int j) const { return matrix[size_t(i * heads + j)]; }
};

namespace detail {

template <typename F>
double pearson(const std::vector<F>& a, const std::vector<F>& b, bool& degenerate) {
    const size_t n = a.size();
    double ma = 0, mb = 0;
    for (size_t i = 0; i < n; ++i) {
        ma += double(a[i]);
        mb += double(b[i]);
    }
    ma /= double(n);
    mb /= double(n);
    double sab = 0, saa = 0, sbb = 0;
    for (size_t i = 0; i < n; ++i) {
        double da = double(a[i]) - ma, db = double(b[i]) - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa <= 0 || sbb <= 0) {
        degenerate = true;
        return 0.0;
    }
    degenerate = false;
    return sab / std::sqrt(saa * sbb);
}

}  // namespace detail

// Pairwise Pearson correlation of every head's final-position causal logit
// row, averaged over sequences; the diagonal is 1 by convention and
// zero-variance pairs contribute 0 and are flagged.
template <typename F>
ConsensusMatrix cross_head_consensus(const std::vector<std::vector<std::vector<F>>>& rows_per_seq) {
    if (rows_per_seq.size() < 2)
        throw ContractError("consensus needs at least 2 sequences");
    const int nh = int(rows_per_seq.front().size());
    for (const auto& seq : rows_per_seq)
        if (int(seq.size()) != nh) throw ContractError("sequences disagree on head count");
    ConsensusMatrix out;
    out.heads = nh;
    out.matrix.assign(size_t(nh * nh), 0.0);
    for (const auto& seq : rows_per_seq) {
        for (int i = 0; i < nh; ++i) {
            for (int j = i; j < nh; ++j) {
                double r;
                if (i == j) {
                    r = 1.0;
                } else {
                    bool degenerate = false;
                    r = detail::pearson(seq[size_t(i)], seq[size_t(j)], degenerate);
                    if (degenerate) ++out.flagged_pairs;
                }
                out.matrix[size_t(i * nh + j)] += r;
                if (i != j) out.matrix[size_t(j * nh + i)] += r;
            }
        }
    }
    const double inv = 1.0 / double(rows_per_seq.size());
    for (double& v : out.matrix) v *= inv;
    double sum = 0;
    int64_t count = 0;
    for (int i = 0; i < nh; ++i)
        for (int j = i + 1; j < nh; ++j) {
            sum += out.at(i, j);
            ++count;
        }
    out.mean_upper = count ? sum / double(count) : 0.0;
    return out;
}

// Convenience: extract each head's final-row causal logits from traces.
template <typename F>
ConsensusMatrix consensus_from_traces(const std::vector<AttentionTrace<F>>& traces) {
    std::vector<std::vector<std::vector<F>>> rows;
    rows.reserve(traces.size());
    for (const auto& tr : traces) {
        std::vector<std::vector<F>> heads;
        const int64_t last = tr.len() - 1;
        for (int hi = 0; hi < tr.head_count(); ++hi) {
            const auto& row = tr.a_true[size_t(hi)][size_t(last)];
            heads.emplace_back(row.begin(), row.begin() + last + 1);
        }
        rows.push_back(std::move(heads));
    }
    return cross_head_consensus(rows);
}

// -------- run-record aggregation ------------------------------------------------

struct RunRecord {
    std::string policy;
    double sparsity = 0;
    std::map<std::string, double> metrics;
};

struct SummaryRow {
    std::string policy;
    double sparsity = 0;
    int count = 0;
    std::map<std::string, double> means;
};

// Grouped means by (policy, sparsity); all records must share one schema.
inline std::vector<SummaryRow> aggregate_report(const std::vector<RunRecord>& records) {
    std::vector<SummaryRow> rows;
    if (records.empty()) return rows;
    for (const auto& r : records)
        if (r.metrics.size() != records.front().metrics.size() ||
            !std::equal(r.metrics.begin(), r.metrics.end(), records.front().metrics.begin(),
                        [](const auto& a, const auto& b) { return a.first == b.first; }))
            throw AggregationError("records do not share a schema");
    std::map<std::pair<std::string, double>, SummaryRow> groups;
    for (const auto& r : records) {
        auto key = std::make_pair(r.policy, r.sparsity);
        SummaryRow& row = groups[key];
        if (row.count == 0) {
            row.policy = r.policy;
            row.sparsity = r.sparsity;
            for (const auto& [k, v] : r.metrics) row.means[k] = 0;
        }
        row.count += 1;
        for (const auto& [k, v] : r.metrics) row.means[k] += v;
    }
    for (auto& [key, row] : groups) {
        for (auto& [k, v] : row.means) v /= double(row.count);
        rows.push_back(row);
    }
    return rows;
}

}  // namespace butler
