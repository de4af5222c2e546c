#pragma once

#include <string>
#include <vector>

#include "butler/bench.hpp"
#include "butler/host.hpp"
#include "butler/predictor.hpp"
#include "butler/rng.hpp"

namespace butler::testing {

template <typename F>
Tensor<F> random_tensor(Rng& rng, std::vector<int64_t> shape, double lo = -1.0, double hi = 1.0) {
    Tensor<F> t(std::move(shape));
    t.fill_uniform(rng, F(lo), F(hi));
    return t;
}

// triple-loop reference matmul, kept independent of the production kernels
template <typename F>
Tensor<F> matmul_reference(const Tensor<F>& a, const Tensor<F>& b) {
    Tensor<F> c({a.rows(), b.cols()});
    for (int64_t i = 0; i < a.rows(); ++i)
        for (int64_t j = 0; j < b.cols(); ++j) {
            F s = F(0);
            for (int64_t t = 0; t < a.cols(); ++t) s += a.at(i, t) * b.at(t, j);
            c.at(i, j) = s;
        }
    return c;
}

template <typename F>
double max_abs_diff(const Tensor<F>& a, const Tensor<F>& b) {
    double m = 0;
    for (size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(double(a.data[i]) - double(b.data[i])));
    return m;
}

inline std::string small_corpus() {
    // periodic text with a small alphabet; long enough for 10*max_seq checks
    std::string pattern = "the quick red fox jumps over the lazy dog. ";
    std::string out;
    while (out.size() < 4000) out += pattern;
    return out;
}

template <typename F>
HostConfig tiny_host_config(int vocab_hint = 0) {
    (void)vocab_hint;
    HostConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.embed_dim = 16;
    cfg.head_dim = 8;
    cfg.max_seq = 32;
    return cfg;
}

template <typename F>
Host<F> tiny_host(uint64_t seed = 42, const std::string& corpus = small_corpus()) {
    return Host<F>(tiny_host_config<F>(), CharTokenizer::from_corpus(corpus), Rng(seed));
}

template <typename F>
Predictor<F> tiny_predictor(const Host<F>& host, uint64_t seed = 43) {
    PredictorConfig pc;
    pc.e_red = 8;
    pc.d = 4;
    pc.h_p = 2;
    pc.w_qk = 6;
    return Predictor<F>(pc, host.cfg, Rng(seed));
}

}  // namespace butler::testing
