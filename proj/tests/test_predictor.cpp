#include <catch2/catch_amalgamated.hpp>

#include "butler/gradcheck.hpp"
#include "butler/trainer.hpp"
#include "helpers.hpp"

using namespace butler;
using namespace butler::testing;

namespace {

// independent enumeration of every weight tensor a predictor allocates
int64_t enumerate_params(const PredictorConfig& p, const HostConfig& host) {
    const int64_t E = host.embed_dim, R = p.e_red;
    const int64_t OD = int64_t(p.out_heads(host)) * p.d;
    const int64_t W = p.w_qk > 0 ? p.w_qk : (E + OD) / 2;
    int64_t n = 0;
    n += R * E + R;                       // dproj
    for (int i = 0; i < 4; ++i) n += R * R + R;  // wq wk wv wo + biases
    n += R * R + R;                       // up1
    n += E * R + E;                       // up2
    n += 2 * (W * E + W + OD * W);        // q/k nets, no output bias
    return n;
}

// fully materialized step-by-step reference of predict_importance using
// plain double loops (no shared kernels)
std::vector<Tensor<float>> reference_importance(const Predictor<float>& pred,
                                                const Tensor<float>& I) {
    const HostConfig& hc = pred.host_cfg;
    const int64_t L = I.rows(), E = hc.embed_dim, R = pred.cfg.e_red;
    auto lin = [](const Tensor<float>& x, const Tensor<float>& w, const Tensor<float>* b) {
        Tensor<float> y({x.rows(), w.rows()});
        for (int64_t i = 0; i < x.rows(); ++i)
            for (int64_t o = 0; o < w.rows(); ++o) {
                double s = b ? double(b->at(o)) : 0.0;
                for (int64_t t = 0; t < x.cols(); ++t)
                    s += double(x.at(i, t)) * double(w.at(o, t));
                y.at(i, o) = float(s);
            }
        return y;
    };
    Tensor<float> r = lin(I, pred.dproj_w.value, &pred.dproj_b.value);
    Tensor<float> q = lin(r, pred.wq.value, &pred.bq.value);
    Tensor<float> k = lin(r, pred.wk.value, &pred.bk.value);
    Tensor<float> v = lin(r, pred.wv.value, &pred.bv.value);
    const int hp = pred.cfg.h_p;
    const int64_t hd = R / hp;
    Tensor<float> attn({L, R});
    for (int h = 0; h < hp; ++h) {
        const int64_t off = int64_t(h) * hd;
        for (int64_t i = 0; i < L; ++i) {
            std::vector<double> row(size_t(i + 1));
            double mx = -1e300;
            for (int64_t j = 0; j <= i; ++j) {
                double s = 0;
                for (int64_t t = 0; t < hd; ++t)
                    s += double(q.at(i, off + t)) * double(k.at(j, off + t));
                row[size_t(j)] = s / std::sqrt(double(hd));
                mx = std::max(mx, row[size_t(j)]);
            }
            double denom = 0;
            for (int64_t j = 0; j <= i; ++j) denom += std::exp(row[size_t(j)] - mx);
            for (int64_t t = 0; t < hd; ++t) {
                double acc = 0;
                for (int64_t j = 0; j <= i; ++j)
                    acc += std::exp(row[size_t(j)] - mx) / denom * double(v.at(j, off + t));
                attn.at(i, off + t) = float(acc);
            }
        }
    }
    Tensor<float> h1 = lin(attn, pred.wo.value, &pred.bo.value);
    Tensor<float> u1 = lin(h1, pred.up1_w.value, &pred.up1_b.value);
    for (auto& x : u1.data) x = x / (1.0f + std::exp(-x)) * 1.0f;  // silu
    Tensor<float> u2 = lin(u1, pred.up2_w.value, &pred.up2_b.value);
    Tensor<float> iprime = I;
    for (size_t i = 0; i < iprime.data.size(); ++i) iprime.data[i] += u2.data[i];
    Tensor<float> qh1 = lin(iprime, pred.qimp1_w.value, &pred.qimp1_b.value);
    for (auto& x : qh1.data) x = x / (1.0f + std::exp(-x));
    Tensor<float> qflat = lin(qh1, pred.qimp2_w.value, nullptr);
    Tensor<float> kh1 = lin(iprime, pred.kimp1_w.value, &pred.kimp1_b.value);
    for (auto& x : kh1.data) x = x / (1.0f + std::exp(-x));
    Tensor<float> kflat = lin(kh1, pred.kimp2_w.value, nullptr);
    const int P = pred.cfg.out_heads(hc), d = pred.cfg.d;
    std::vector<Tensor<float>> out;
    for (int p = 0; p < P; ++p) {
        Tensor<float> a({L, L});
        for (int64_t i = 0; i < L; ++i)
            for (int64_t j = 0; j < L; ++j) {
                double s = 0;
                for (int t = 0; t < d; ++t)
                    s += double(qflat.at(i, p * d + t)) * double(kflat.at(j, p * d + t));
                a.at(i, j) = float(s / std::sqrt(double(d)));
            }
        out.push_back(std::move(a));
    }
    return out;
}

}  // namespace

TEST_CASE("size_for_budget lands in the band on the default host") {
    std::string corpus = small_corpus();
    CharTokenizer tok = CharTokenizer::from_corpus(corpus);
    HostConfig hc;
    hc.vocab = tok.vocab_size();
    Host<float> host(hc, tok, Rng(1));
    PredictorConfig pc = size_for_budget(hc, host.param_count(), 0.011);
    Predictor<float> pred(pc, hc, Rng(2));
    const int64_t enumerated = enumerate_params(pc, hc);
    CHECK(pred.param_count() == enumerated);
    double ratio = double(enumerated) / double(host.param_count());
    CHECK(ratio >= 0.010);
    CHECK(ratio <= 0.012);
}

TEST_CASE("size_for_budget applies the band to a stated host size") {
    HostConfig hc;  // structure of the default host, count supplied explicitly
    hc.vocab = 64;
    PredictorConfig pc = size_for_budget(hc, 10'000'000, 0.011);
    int64_t params = predictor_param_count(pc, hc);
    CHECK(params >= 100'000);
    CHECK(params <= 120'000);
}

TEST_CASE("size_for_budget reports infeasibility with the nearest ratio") {
    HostConfig hc;
    hc.n_layers = 2;
    hc.n_heads = 2;
    hc.embed_dim = 16;
    hc.head_dim = 8;
    hc.vocab = 8;
    try {
        size_for_budget(hc, 1000, 0.011);
        FAIL("expected a sizing error");
    } catch (const SizingError& e) {
        CHECK(std::string(e.what()).find("smallest achievable") != std::string::npos);
    }
    CHECK_THROWS_AS(size_for_budget(hc, 1000, 0.5), ContractError);
}

TEST_CASE("param_count: closed forms and the empty edge") {
    Host<float> host = tiny_host<float>();
    Predictor<float> pred = tiny_predictor(host);
    CHECK(pred.param_count() == enumerate_params(pred.cfg, host.cfg));

    // single linear with bias: E*E_red + E_red of it is the dproj slice
    CHECK(pred.dproj_w.value.numel() + pred.dproj_b.value.numel() ==
          int64_t(host.cfg.embed_dim) * pred.cfg.e_red + pred.cfg.e_red);
}

TEST_CASE("predict_importance: shapes, L=1, annihilator, reference oracle") {
    Host<float> host = tiny_host<float>(51);
    Predictor<float> pred = tiny_predictor(host, 52);
    auto ids = host.tokenizer.tokenize("fox jumps");
    auto [logits, trace] = host.forward_traced(ids);
    const int64_t L = trace.len();
    auto imp = pred.predict_importance(trace.first_layer_out, true);
    const int P = pred.cfg.out_heads(host.cfg);
    REQUIRE(int(imp.a_pred.size()) == P);
    for (const auto& a : imp.a_pred) {
        CHECK(a.rows() == L);
        CHECK(a.cols() == L);
    }

    SECTION("L=1 head logit equals dot(q,k)/sqrt(d)") {
        Tensor<float> one_row({1, int64_t(host.cfg.embed_dim)});
        for (int64_t j = 0; j < one_row.numel(); ++j)
            one_row.at(j) = trace.first_layer_out.at(0, j);
        auto imp1 = pred.predict_importance(one_row, true);
        for (int p = 0; p < P; ++p) {
            CHECK(imp1.a_pred[size_t(p)].numel() == 1);
            double ref = 0;
            for (int t = 0; t < pred.cfg.d; ++t)
                ref += double(imp1.q_imp[size_t(p)].at(0, t)) *
                       double(imp1.k_imp[size_t(p)].at(0, t));
            ref /= std::sqrt(double(pred.cfg.d));
            CHECK(double(imp1.a_pred[size_t(p)].at(0, 0)) == Catch::Approx(ref).margin(1e-6));
        }
    }

    SECTION("zero output weights annihilate the prediction") {
        Predictor<float> zeroed = pred;
        std::fill(zeroed.qimp2_w.value.data.begin(), zeroed.qimp2_w.value.data.end(), 0.0f);
        auto impz = zeroed.predict_importance(trace.first_layer_out, true);
        for (const auto& a : impz.a_pred)
            for (float v : a.data) CHECK(v == 0.0f);
    }

    SECTION("matches the unfused step-by-step reference") {
        auto ref = reference_importance(pred, trace.first_layer_out);
        for (int p = 0; p < P; ++p) CHECK(max_abs_diff(imp.a_pred[size_t(p)], ref[size_t(p)]) <= 1e-4);
    }

    SECTION("shape contract errors") {
        Tensor<float> wrong({3, int64_t(host.cfg.embed_dim + 1)});
        CHECK_THROWS_AS(pred.predict_importance(wrong, true), ContractError);
    }
}

TEST_CASE("predictor init is deterministic in the seed") {
    Host<float> host = tiny_host<float>(61);
    Predictor<float> a = tiny_predictor(host, 62);
    Predictor<float> b = tiny_predictor(host, 62);
    Predictor<float> c = tiny_predictor(host, 63);
    std::string bytes_a = encode_checkpoint(predictor_to_checkpoint(a, host, 62, 0));
    std::string bytes_b = encode_checkpoint(predictor_to_checkpoint(b, host, 62, 0));
    std::string bytes_c = encode_checkpoint(predictor_to_checkpoint(c, host, 62, 0));
    CHECK(bytes_a == bytes_b);
    CHECK(bytes_a != bytes_c);
}

TEST_CASE("predictor loss graph passes finite differences (64-bit, L=8)") {
    std::string corpus = small_corpus();
    HostConfig hc = tiny_host_config<double>();
    Host<double> host(hc, CharTokenizer::from_corpus(corpus), Rng(71));
    Predictor<double> pred = tiny_predictor(host, 72);
    auto ids = host.tokenizer.tokenize("the qui");
    ids.insert(ids.begin(), CharTokenizer::kBot);
    REQUIRE(ids.size() == 8);
    auto [logits, trace] = host.forward_traced(ids);
    const int H = hc.n_heads;
    const int P = pred.cfg.out_heads(hc);
    const int64_t L = trace.len();

    auto build = [&](Tape<double>& t) {
        auto heads = pred.forward_train(t, trace.first_layer_out);
        Var<double> total{};
        for (int p = 0; p < P; ++p) {
            int l = 1 + p / H, h = p % H;
            Tensor<double> at({L, L});
            const auto& rows = trace.a_true[size_t(trace.head_index(l, h))];
            for (int64_t i = 0; i < L; ++i)
                for (int64_t j = 0; j < L; ++j) at.at(i, j) = rows[size_t(i)][size_t(j)];
            Var<double> ap = t.scale(t.matmul_nt(heads.q_imp[size_t(p)], heads.k_imp[size_t(p)]),
                                     1.0 / std::sqrt(double(pred.cfg.d)));
            Var<double> sq = t.sum_all(t.square(t.sub(ap, t.constant(std::move(at)))));
            total = p == 0 ? sq : t.add(total, sq);
        }
        return t.scale(total, 1.0 / double(P * L * L));
    };
    double err = finite_diff_check<double>(build, pred.parameters(), 1e-4);
    CHECK(err <= 1e-3);
}
