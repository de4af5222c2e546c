#include <catch2/catch_amalgamated.hpp>

#include "butler/trainer.hpp"
#include "helpers.hpp"

using namespace butler;
using namespace butler::testing;

namespace {

// Reference masked forward with *physical* K/V row deletion per head, using
// the same dot kernels; returns the final-position logits.
template <typename F>
Tensor<F> row_deletion_forward(const Host<F>& host, const std::vector<int>& tokens,
                               const StepMask& mask) {
    const int E = host.cfg.embed_dim, H = host.cfg.n_heads, D = host.cfg.head_dim;
    const int64_t L = int64_t(tokens.size());
    const F inv_sqrt_d = F(1) / std::sqrt(F(D));
    std::vector<Tensor<F>> x(1, Tensor<F>({L, int64_t(E)}));
    for (int64_t i = 0; i < L; ++i)
        for (int j = 0; j < E; ++j)
            x[0].at(i, j) =
                host.tok_emb.value.at(tokens[size_t(i)], j) + host.pos_emb.value.at(i, j);
    Tensor<F> cur = x[0];
    std::vector<F> xn(size_t(E)), tmp(size_t(E)), ff(size_t(4 * E));
    for (int l = 0; l < host.cfg.n_layers; ++l) {
        const auto& lay = host.layers[size_t(l)];
        Tensor<F> q({L, int64_t(E)}), k({L, int64_t(E)}), v({L, int64_t(E)});
        for (int64_t i = 0; i < L; ++i) {
            detail::rmsnorm_row(cur.row_ptr(i), lay.ln1_g.value, E, xn.data());
            detail::linear_row(xn.data(), lay.wq.value, lay.bq.value, q.row_ptr(i));
            detail::linear_row(xn.data(), lay.wk.value, lay.bk.value, k.row_ptr(i));
            detail::linear_row(xn.data(), lay.wv.value, lay.bv.value, v.row_ptr(i));
        }
        Tensor<F> attn({L, int64_t(E)});
        for (int h = 0; h < H; ++h) {
            const int64_t off = int64_t(h) * D;
            for (int64_t i = 0; i < L; ++i) {
                std::vector<int> visible;
                if (l >= 1) {
                    for (int j : mask.at(l, h))
                        if (j <= i) visible.push_back(j);
                } else {
                    for (int j = 0; j <= i; ++j) visible.push_back(j);
                }
                REQUIRE(!visible.empty());
                std::vector<F> logit(visible.size());
                F mx = -std::numeric_limits<F>::infinity();
                for (size_t n = 0; n < visible.size(); ++n) {
                    logit[n] = kernels::dot(q.row_ptr(i) + off, k.row_ptr(visible[n]) + off, D) *
                               inv_sqrt_d;
                    mx = std::max(mx, logit[n]);
                }
                F sum = F(0);
                for (F& lv : logit) {
                    lv = std::exp(lv - mx);
                    sum += lv;
                }
                for (int64_t jj = 0; jj < D; ++jj) attn.at(i, off + jj) = F(0);
                for (size_t n = 0; n < visible.size(); ++n)
                    kernels::axpy(logit[n] / sum, v.row_ptr(visible[n]) + off,
                                  attn.row_ptr(i) + off, int64_t(D));
            }
        }
        for (int64_t i = 0; i < L; ++i) {
            detail::linear_row(attn.row_ptr(i), lay.wo.value, lay.bo.value, tmp.data());
            for (int j = 0; j < E; ++j) cur.at(i, j) += tmp[size_t(j)];
            detail::rmsnorm_row(cur.row_ptr(i), lay.ln2_g.value, E, xn.data());
            detail::linear_row(xn.data(), lay.w1.value, lay.b1.value, ff.data());
            for (int j = 0; j < 4 * E; ++j) {
                F u = ff[size_t(j)];
                ff[size_t(j)] = F(0.5) * u * (F(1) + std::erf(u * F(0.7071067811865475244L)));
            }
            detail::linear_row(ff.data(), lay.w2.value, lay.b2.value, tmp.data());
            for (int j = 0; j < E; ++j) cur.at(i, j) += tmp[size_t(j)];
        }
    }
    Tensor<F> out({int64_t(host.cfg.vocab)});
    detail::rmsnorm_row(cur.row_ptr(L - 1), host.ln_f.value, E, xn.data());
    detail::linear_row(xn.data(), host.head_w.value, host.head_b.value, out.data.data());
    return out;
}

StepMask full_mask(const HostConfig& cfg, int L) {
    StepMask m(cfg.n_layers, cfg.n_heads);
    for (int l = 0; l < cfg.n_layers; ++l)
        for (int h = 0; h < cfg.n_heads; ++h)
            for (int j = 0; j < L; ++j) m.at(l, h).push_back(j);
    return m;
}

}  // namespace

TEST_CASE("tokenizer round trips and rejects the unknown") {
    CharTokenizer tok = CharTokenizer::from_corpus("abc d");
    CHECK(tok.tokenize("").empty());
    CHECK(tok.detokenize({}).empty());
    auto ids = tok.tokenize("ab");
    CHECK(tok.detokenize(ids) == "ab");
    CHECK_THROWS_AS(tok.tokenize("abz"), VocabError);
    CHECK_THROWS_AS(tok.detokenize({99}), VocabError);

    std::string corpus = small_corpus();
    CharTokenizer big = CharTokenizer::from_corpus(corpus);
    CHECK(big.detokenize(big.tokenize(corpus)) == corpus);
    CHECK(big.vocab_size() >= 2);
}

TEST_CASE("forward_traced shapes and the degenerate length") {
    Host<float> host = tiny_host<float>();
    std::vector<int> one{CharTokenizer::kBot};
    auto [logits1, trace1] = host.forward_traced(one);
    CHECK(logits1.rows() == 1);
    CHECK(logits1.cols() == host.cfg.vocab);
    CHECK(trace1.a_true.size() == size_t(4));
    CHECK(trace1.a_true[0].size() == 1);
    CHECK(trace1.a_true[0][0].size() == 1);
    CHECK(trace1.first_layer_out.rows() == 1);
    CHECK(trace1.first_layer_out.cols() == host.cfg.embed_dim);

    auto ids = host.tokenizer.tokenize("the quick");
    auto [logits, trace] = host.forward_traced(ids);
    const int64_t L = int64_t(ids.size());
    for (int hi = 0; hi < trace.head_count(); ++hi) {
        CHECK(trace.a_true[size_t(hi)].size() == size_t(L));
        for (const auto& row : trace.a_true[size_t(hi)]) CHECK(row.size() == size_t(L));
        CHECK(trace.q[size_t(hi)].rows() == L);
        CHECK(trace.q[size_t(hi)].cols() == host.cfg.head_dim);
    }

    std::vector<int> too_long(size_t(host.cfg.max_seq + 1), 1);
    CHECK_THROWS_AS(host.forward_traced(too_long), ContextError);
}

TEST_CASE("a_true consistency with stored Q/K and determinism") {
    Host<float> host = tiny_host<float>(7);
    auto ids = host.tokenizer.tokenize("jumps over");
    auto [logits, trace] = host.forward_traced(ids);
    const float inv = 1.0f / std::sqrt(float(host.cfg.head_dim));
    double max_err = 0;
    for (int hi = 0; hi < trace.head_count(); ++hi) {
        const auto& q = trace.q[size_t(hi)];
        const auto& k = trace.k[size_t(hi)];
        for (int64_t i = 0; i < q.rows(); ++i)
            for (int64_t j = 0; j < q.rows(); ++j) {
                double ref = 0;
                for (int64_t d = 0; d < q.cols(); ++d)
                    ref += double(q.at(i, d)) * double(k.at(j, d));
                ref *= inv;
                max_err = std::max(
                    max_err, std::abs(ref - double(trace.a_true[size_t(hi)][size_t(i)][size_t(j)])));
            }
    }
    CHECK(max_err <= 1e-5);

    auto [logits2, trace2] = host.forward_traced(ids);
    CHECK(std::memcmp(logits.data.data(), logits2.data.data(), logits.data.size() * 4) == 0);
    for (int hi = 0; hi < trace.head_count(); ++hi)
        for (size_t i = 0; i < trace.a_true[size_t(hi)].size(); ++i)
            CHECK(trace.a_true[size_t(hi)][i] == trace2.a_true[size_t(hi)][i]);
}

TEST_CASE("prefix rows equal full-sequence rows bitwise") {
    Host<float> host = tiny_host<float>(9);
    auto ids = host.tokenizer.tokenize("lazy dog. the");
    auto [full_logits, trace] = host.forward_traced(ids);
    for (size_t cut : {size_t(1), size_t(4), ids.size() - 1}) {
        std::vector<int> prefix(ids.begin(), ids.begin() + long(cut));
        auto [plogits, ptrace] = host.forward_traced(prefix);
        for (int64_t j = 0; j < plogits.cols(); ++j)
            CHECK(plogits.at(int64_t(cut) - 1, j) == full_logits.at(int64_t(cut) - 1, j));
    }
}

TEST_CASE("forward_masked: identity mask is bit-exact, masks hold normalization") {
    Host<float> host = tiny_host<float>(21);
    auto ids = host.tokenizer.tokenize("red fox jumps");
    auto [logits, trace] = host.forward_traced(ids);
    const int L = int(ids.size());

    Tensor<float> final_masked = host.forward_masked(ids, full_mask(host.cfg, L));
    for (int64_t j = 0; j < final_masked.numel(); ++j)
        CHECK(final_masked.at(j) == logits.at(L - 1, j));

    // anchors + current only: a valid probability distribution must come out
    StepMask narrow(host.cfg.n_layers, host.cfg.n_heads);
    for (int l = 0; l < host.cfg.n_layers; ++l)
        for (int h = 0; h < host.cfg.n_heads; ++h) narrow.at(l, h) = {0, L - 1};
    Tensor<float> out = host.forward_masked(ids, narrow);
    Tensor<float> probs = softmax_rows(Tensor<float>({1, int64_t(host.cfg.vocab)}, out.data));
    double sum = 0;
    for (int64_t j = 0; j < probs.numel(); ++j) sum += probs.at(j);
    CHECK(sum == Catch::Approx(1.0).margin(1e-5));

    StepMask empty(host.cfg.n_layers, host.cfg.n_heads);
    for (int l = 0; l < host.cfg.n_layers; ++l)
        for (int h = 0; h < host.cfg.n_heads; ++h) empty.at(l, h) = {0};
    empty.at(1, 1).clear();
    CHECK_THROWS_AS(host.forward_masked(ids, empty), ContractError);
}

TEST_CASE("forward_masked equals physical row deletion on random masks") {
    Host<float> host = tiny_host<float>(31);
    auto ids = host.tokenizer.tokenize("over the lazy");
    const int L = int(ids.size());
    Rng rng(5);
    for (int trial = 0; trial < 5; ++trial) {
        StepMask m(host.cfg.n_layers, host.cfg.n_heads);
        for (int l = 0; l < host.cfg.n_layers; ++l)
            for (int h = 0; h < host.cfg.n_heads; ++h) {
                std::vector<int>& keep = m.at(l, h);
                keep.push_back(0);  // keep an anchor so every row sees a key
                for (int j = 1; j < L; ++j)
                    if (rng.next_below(2) == 0 || j == L - 1) keep.push_back(j);
            }
        Tensor<float> masked = host.forward_masked(ids, m);
        Tensor<float> reference = row_deletion_forward(host, ids, m);
        CHECK(max_abs_diff(masked, reference) <= 1e-6);
    }
}

TEST_CASE("dense perplexity: uniform and confident limits, scalar oracle") {
    Host<float> host = tiny_host<float>(11);
    auto ids = host.tokenizer.tokenize("quick red");
    SECTION("uniform logits give ppl == V") {
        for (auto& v : host.head_w.value.data) v = 0;
        for (auto& v : host.head_b.value.data) v = 0;
        CHECK(double(host.dense_perplexity(ids)) ==
              Catch::Approx(double(host.cfg.vocab)).margin(1e-3));
    }
    SECTION("matches a per-position scalar recomputation") {
        auto [logits, trace] = host.forward_traced(ids);
        double total = 0;
        for (size_t i = 0; i + 1 < ids.size(); ++i) {
            double denom = 0, mx = -1e30;
            for (int64_t j = 0; j < logits.cols(); ++j)
                mx = std::max(mx, double(logits.at(int64_t(i), j)));
            for (int64_t j = 0; j < logits.cols(); ++j)
                denom += std::exp(double(logits.at(int64_t(i), j)) - mx);
            total += -(double(logits.at(int64_t(i), ids[i + 1])) - mx - std::log(denom));
        }
        double expect = std::exp(total / double(ids.size() - 1));
        CHECK(double(host.dense_perplexity(ids)) == Catch::Approx(expect).epsilon(1e-4));
    }
    SECTION("needs at least two tokens") {
        CHECK_THROWS_AS(host.dense_perplexity({1}), ContractError);
    }
}

TEST_CASE("train_host memorizes periodic text") {
    std::string pattern;
    while (pattern.size() < 4000) pattern += "abcdefgh ijklmnop qrstuvwx yz. ";
    HostConfig cfg = tiny_host_config<float>();
    Host<float> host(cfg, CharTokenizer::from_corpus(pattern), Rng(3));
    HostTrainConfig tc;
    tc.steps = 400;
    tc.batch = 2;
    tc.seq_len = 32;
    tc.lr = 3e-3;
    tc.seed = 3;
    HostTrainReport rep = train_host(host, pattern, tc);
    CHECK(rep.final_ppl < 2.0);
    CHECK(rep.final_ppl <= 0.5 * rep.initial_ppl);
}

TEST_CASE("train_host is deterministic and guards small corpora") {
    std::string corpus = small_corpus();
    HostConfig cfg = tiny_host_config<float>();
    auto run = [&]() {
        Host<float> host(cfg, CharTokenizer::from_corpus(corpus), Rng(5));
        HostTrainConfig tc;
        tc.steps = 30;
        tc.batch = 2;
        tc.seq_len = 24;
        tc.seed = 5;
        train_host(host, corpus, tc);
        return encode_checkpoint(host_to_checkpoint(host, 5, 30));
    };
    CHECK(run() == run());

    Host<float> host(cfg, CharTokenizer::from_corpus("tiny"), Rng(5));
    HostTrainConfig tc;
    CHECK_THROWS_AS(train_host(host, std::string("tiny"), tc), DataError);
}
