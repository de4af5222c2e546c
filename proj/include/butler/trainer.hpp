#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "butler/optim.hpp"
#include "butler/predictor.hpp"
#include "butler/sha256.hpp"

namespace butler {

enum class LossDomain { full, causal_only };

inline LossDomain loss_domain_from_string(const std::string& s) {
    if (s == "full" || s == "full-matrix") return LossDomain::full;
    if (s == "causal" || s == "causal-only") return LossDomain::causal_only;
    throw ConfigError("unknown loss domain '" + s + "'");
}

struct TrainConfig {
    int steps = 2000;
    int batch = 2;
    int seq_len = 64;  // token count per sequence, including begin-of-text
    double lr = 3e-4;
    int block_size = 64;
    uint64_t seed = 0;
    LossDomain domain = LossDomain::full;
    bool blockwise = true;  // use the streaming loss path for training

    void validate(const HostConfig& host) const {
        if (block_size < 1) throw ContractError("block_size must be >= 1");
        if (seq_len < 2 || seq_len > host.max_seq)
            throw ConfigError("seq_len outside [2, max_seq]");
        if (batch < 1) throw ConfigError("batch must be >= 1");
    }
};

struct LossReport {
    int step = 0;
    double mse = 0;
    double grad_norm = 0;
    double wall_ms = 0;
};

// Peak materialization audit for the streaming loss path.
struct BlockwiseStats {
    size_t peak_logit_floats = 0;  // largest logit block buffer, per head
    size_t blocks = 0;
};

namespace detail {

inline int64_t domain_count(LossDomain domain, int64_t L) {
    return domain == LossDomain::full ? L * L : L * (L + 1) / 2;
}

}  // namespace detail

// Sum of squared differences over the selected domain divided by element
// count, iterated head -> row -> column in fixed order.
template <typename F>
F mse_logits_naive(const std::vector<Tensor<F>>& a_pred, const std::vector<Tensor<F>>& a_true,
                   LossDomain domain = LossDomain::full) {
    if (a_pred.size() != a_true.size())
        throw ContractError("head counts differ: " + std::to_string(a_pred.size()) + " vs " +
                            std::to_string(a_true.size()));
    F total = F(0);
    int64_t count = 0;
    for (size_t h = 0; h < a_pred.size(); ++h) {
        const Tensor<F>& p = a_pred[h];
        const Tensor<F>& t = a_true[h];
        if (p.shape != t.shape || p.rank() != 2 || p.rows() != p.cols())
            throw ContractError("logit shapes " + shape_str(p.shape) + " vs " +
                                shape_str(t.shape));
        const int64_t L = p.rows();
        for (int64_t i = 0; i < L; ++i) {
            const int64_t jmax = domain == LossDomain::full ? L - 1 : i;
            for (int64_t j = 0; j <= jmax; ++j) {
                F d = p.at(i, j) - t.at(i, j);
                total += d * d;
            }
        }
        count += detail::domain_count(domain, L);
    }
    return count ? total / F(count) : F(0);
}

namespace detail {

// Shared streaming core: recomputes the true and predicted logit blocks
// (one block_size² buffer, per head, at a time) and hands each block to a
// consumer. Loss and gradient passes both run through here.
template <typename F, typename BlockFn>
void blockwise_sweep(const Tensor<F>& q, const Tensor<F>& k, const Tensor<F>& q_imp,
                     const Tensor<F>& k_imp, int block_size, LossDomain domain,
                     BlockwiseStats* stats, BlockFn&& consume) {
    const int64_t L = q.rows(), D = q.cols(), d = q_imp.cols();
    if (k.rows() != L || q_imp.rows() != L || k_imp.rows() != L || k.cols() != D ||
        k_imp.cols() != d)
        throw ContractError("blockwise inputs disagree on L/D/d");
    if (block_size < 1) throw ContractError("block_size must be >= 1");
    const F inv_sqrt_D = F(1) / std::sqrt(F(D));
    const F inv_sqrt_d = F(1) / std::sqrt(F(d));
    std::vector<F> buf;
    for (int64_t bi = 0; bi < L; bi += block_size) {
        const int64_t ilim = std::min<int64_t>(bi + block_size, L);
        for (int64_t bj = 0; bj < L; bj += block_size) {
            if (domain == LossDomain::causal_only && bj >= ilim) continue;
            const int64_t jlim = std::min<int64_t>(bj + block_size, L);
            const int64_t bw = jlim - bj;
            buf.assign(size_t((ilim - bi) * bw), F(0));
            if (stats) {
                stats->peak_logit_floats = std::max(stats->peak_logit_floats, buf.size());
                stats->blocks += 1;
            }
            for (int64_t i = bi; i < ilim; ++i) {
                const int64_t jmax =
                    domain == LossDomain::full ? jlim - 1 : std::min<int64_t>(jlim - 1, i);
                for (int64_t j = bj; j <= jmax; ++j) {
                    F ap = kernels::dot(q_imp.row_ptr(i), k_imp.row_ptr(j), d) * inv_sqrt_d;
                    F at = kernels::dot(q.row_ptr(i), k.row_ptr(j), D) * inv_sqrt_D;
                    buf[size_t((i - bi) * bw + (j - bj))] = ap - at;
                }
            }
            consume(bi, ilim, bj, jlim, bw, std::span<const F>(buf));
        }
    }
}

}  // namespace detail

// Streaming-form MSE between true logits QKᵀ/√D and predicted logits
// Q_imp K_impᵀ/√d, never materializing more than block_size² logits per head.
template <typename F>
F mse_logits_blockwise(const std::vector<Tensor<F>>& q, const std::vector<Tensor<F>>& k,
                       const std::vector<Tensor<F>>& q_imp,
                       const std::vector<Tensor<F>>& k_imp, int block_size,
                       LossDomain domain = LossDomain::full, BlockwiseStats* stats = nullptr) {
    if (q.size() != k.size() || q.size() != q_imp.size() || q.size() != k_imp.size())
        throw ContractError("blockwise head counts disagree");
    F total = F(0);
    int64_t count = 0;
    for (size_t h = 0; h < q.size(); ++h) {
        detail::blockwise_sweep(q[h], k[h], q_imp[h], k_imp[h], block_size, domain, stats,
                                [&](int64_t bi, int64_t ilim, int64_t bj, int64_t jlim,
                                    int64_t bw, std::span<const F> buf) {
                                    for (int64_t i = bi; i < ilim; ++i) {
                                        const int64_t jmax = domain == LossDomain::full
                                                                 ? jlim - 1
                                                                 : std::min<int64_t>(jlim - 1, i);
                                        for (int64_t j = bj; j <= jmax; ++j) {
                                            F dv = buf[size_t((i - bi) * bw + (j - bj))];
                                            total += dv * dv;
                                        }
                                    }
                                });
        count += detail::domain_count(domain, q[h].rows());
    }
    return count ? total / F(count) : F(0);
}

// Gradients of the blockwise loss w.r.t. Q_imp and K_imp, computed block by
// block; peak intermediate memory is one block buffer plus the L×d outputs.
template <typename F>
std::pair<std::vector<Tensor<F>>, std::vector<Tensor<F>>> blockwise_grads(
    const std::vector<Tensor<F>>& q, const std::vector<Tensor<F>>& k,
    const std::vector<Tensor<F>>& q_imp, const std::vector<Tensor<F>>& k_imp, int block_size,
    LossDomain domain = LossDomain::full, BlockwiseStats* stats = nullptr) {
    if (q.size() != k.size() || q.size() != q_imp.size() || q.size() != k_imp.size())
        throw ContractError("blockwise head counts disagree");
    int64_t count = 0;
    for (size_t h = 0; h < q.size(); ++h) count += detail::domain_count(domain, q[h].rows());
    std::vector<Tensor<F>> gq, gk;
    gq.reserve(q.size());
    gk.reserve(q.size());
    for (size_t h = 0; h < q.size(); ++h) {
        const int64_t d = q_imp[h].cols();
        const F inv_sqrt_d = F(1) / std::sqrt(F(d));
        const F coef = F(2) * inv_sqrt_d / F(count);
        Tensor<F> gqh = Tensor<F>::zeros(q_imp[h].shape);
        Tensor<F> gkh = Tensor<F>::zeros(k_imp[h].shape);
        detail::blockwise_sweep(
            q[h], k[h], q_imp[h], k_imp[h], block_size, domain, stats,
            [&](int64_t bi, int64_t ilim, int64_t bj, int64_t jlim, int64_t bw,
                std::span<const F> buf) {
                for (int64_t i = bi; i < ilim; ++i) {
                    const int64_t jmax =
                        domain == LossDomain::full ? jlim - 1 : std::min<int64_t>(jlim - 1, i);
                    for (int64_t j = bj; j <= jmax; ++j) {
                        F g = coef * buf[size_t((i - bi) * bw + (j - bj))];
                        kernels::axpy(g, k_imp[h].row_ptr(j), gqh.row_ptr(i), d);
                        kernels::axpy(g, q_imp[h].row_ptr(i), gkh.row_ptr(j), d);
                    }
                }
            });
        gq.push_back(std::move(gqh));
        gk.push_back(std::move(gkh));
    }
    return {std::move(gq), std::move(gk)};
}

// -------- corpus handling ----------------------------------------------------

// Host trains on [0, 0.8); the predictor trains on the disjoint slice
// [0.8, 0.9); [0.9, 1.0) is held out for evaluation.
struct CorpusSplits {
    std::string host_train;
    std::string butler_train;
    std::string held_out;

    static CorpusSplits from_text(const std::string& text) {
        CorpusSplits s;
        size_t a = text.size() * 8 / 10;
        size_t b = text.size() * 9 / 10;
        s.host_train = text.substr(0, a);
        s.butler_train = text.substr(a, b - a);
        s.held_out = text.substr(b);
        return s;
    }
};

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// -------- host training -------------------------------------------------------

struct HostTrainConfig {
    int steps = 5000;
    int batch = 2;
    int seq_len = 64;  // tokens per sequence, including begin-of-text
    double lr = 1e-3;
    uint64_t seed = 0;
    int eval_windows = 8;
};

struct HostTrainReport {
    double initial_ppl = 0;
    double final_ppl = 0;
    std::vector<LossReport> losses;
};

template <typename F>
F held_out_perplexity(const Host<F>& host, const std::string& held_out, int seq_len,
                      int max_windows) {
    const int chars = seq_len - 1;
    if (int(held_out.size()) < chars) throw DataError("held-out split shorter than one window");
    F total = F(0);
    int64_t positions = 0;
    int windows = 0;
    for (size_t off = 0; off + size_t(chars) <= held_out.size() && windows < max_windows;
         off += size_t(chars), ++windows) {
        std::vector<int> ids = host.tokenizer.tokenize(held_out.substr(off, size_t(chars)));
        ids.insert(ids.begin(), CharTokenizer::kBot);
        auto [logits, trace] = host.forward_traced(ids);
        for (size_t i = 0; i + 1 < ids.size(); ++i) {
            total += detail::ce_row(logits.row_ptr(int64_t(i)), host.cfg.vocab, ids[i + 1]);
            ++positions;
        }
    }
    return std::exp(total / F(positions));
}

template <typename F>
HostTrainReport train_host(Host<F>& host, const std::string& corpus, const HostTrainConfig& tc) {
    if (corpus.size() < size_t(10 * host.cfg.max_seq))
        throw DataError("corpus has " + std::to_string(corpus.size()) +
                        " chars, need at least 10*max_seq = " +
                        std::to_string(10 * host.cfg.max_seq));
    CorpusSplits splits = CorpusSplits::from_text(corpus);
    const int L = tc.seq_len;
    const int chars = L;  // L-1 inputs after BOT plus the final target
    if (int(splits.host_train.size()) < chars + 1) throw DataError("training split too small");

    HostTrainReport report;
    report.initial_ppl = double(held_out_perplexity(host, splits.held_out, L, tc.eval_windows));

    std::vector<Parameter<F>*> params = host.parameters();
    std::vector<AdamState<F>> states;
    states.reserve(params.size());
    for (auto* p : params) states.emplace_back(*p, F(tc.lr));

    Rng order = Rng(tc.seed).stream("batch-order");
    auto t0 = std::chrono::steady_clock::now();
    for (int step = 0; step < tc.steps; ++step) {
        F loss_acc = F(0);
        for (int b = 0; b < tc.batch; ++b) {
            size_t start = size_t(order.next_below(splits.host_train.size() - size_t(chars)));
            std::string window = splits.host_train.substr(start, size_t(chars));
            std::vector<int> ids = host.tokenizer.tokenize(window);
            std::vector<int> inputs(1, CharTokenizer::kBot);
            inputs.insert(inputs.end(), ids.begin(), ids.end() - 1);
            Tape<F> tape;
            Var<F> logits = host.forward_train(tape, inputs);
            Var<F> loss = tape.cross_entropy_loss(logits, ids);
            Var<F> scaled = tape.scale(loss, F(1) / F(tc.batch));
            loss_acc += tape.value(loss).at(0);
            tape.backward(scaled);
        }
        double mse = double(loss_acc) / tc.batch;
        if (!std::isfinite(mse))
            throw TrainAbortError("non-finite loss at step " + std::to_string(step) +
                                  ", batch seed " + std::to_string(order.key()));
        double gnorm = 0;
        for (auto* p : params)
            for (F g : p->grad.data) gnorm += double(g) * double(g);
        for (size_t i = 0; i < params.size(); ++i) adam_step(*params[i], states[i]);
        auto now = std::chrono::steady_clock::now();
        report.losses.push_back(
            {step, mse, std::sqrt(gnorm),
             std::chrono::duration<double, std::milli>(now - t0).count()});
    }
    report.final_ppl = double(held_out_perplexity(host, splits.held_out, L, tc.eval_windows));
    return report;
}

// -------- predictor training ---------------------------------------------------

template <typename F>
std::string params_sha(const std::vector<const Parameter<F>*>& params) {
    Sha256 h;
    for (const auto* p : params) {
        for (F v : p->value.data) {
            float f = float(v);
            uint32_t bits;
            std::memcpy(&bits, &f, 4);
            uint8_t le[4] = {uint8_t(bits), uint8_t(bits >> 8), uint8_t(bits >> 16),
                             uint8_t(bits >> 24)};
            h.update(le, 4);
        }
    }
    return Sha256::hex(h.digest());
}

// One training batch -> MSE on pre-softmax logits over layers 2..N, backprop
// into the predictor only (the host is frozen). Both the materialized and the
// streaming loss paths are available; they agree within tolerance.
template <typename F>
std::vector<LossReport> train_predictor(const Host<F>& host, Predictor<F>& pred,
                                        const std::string& corpus, const TrainConfig& tc) {
    tc.validate(host.cfg);
    CorpusSplits splits = CorpusSplits::from_text(corpus);
    const int L = tc.seq_len;
    const int chars = L - 1;
    if (int(splits.butler_train.size()) < chars + 1)
        throw DataError("predictor training split too small");
    const int H = host.cfg.n_heads;
    const int P = pred.cfg.out_heads(host.cfg);

    std::vector<Parameter<F>*> params = pred.parameters();
    std::vector<AdamState<F>> states;
    for (auto* p : params) states.emplace_back(*p, F(tc.lr));

    std::vector<LossReport> reports;
    Rng order = Rng(tc.seed).stream("batch-order");
    auto t0 = std::chrono::steady_clock::now();
    for (int step = 0; step < tc.steps; ++step) {
        F loss_acc = F(0);
        for (int b = 0; b < tc.batch; ++b) {
            size_t start = size_t(order.next_below(splits.butler_train.size() - size_t(chars)));
            std::vector<int> ids =
                host.tokenizer.tokenize(splits.butler_train.substr(start, size_t(chars)));
            ids.insert(ids.begin(), CharTokenizer::kBot);
            auto [logits, trace] = host.forward_traced(ids);

            Tape<F> tape;
            auto heads = pred.forward_train(tape, trace.first_layer_out);
            if (tc.blockwise) {
                std::vector<Tensor<F>> qs, ks, qi, ki;
                for (int p = 0; p < P; ++p) {
                    int l = 1 + p / H, h = p % H;
                    qs.push_back(trace.q[size_t(trace.head_index(l, h))]);
                    ks.push_back(trace.k[size_t(trace.head_index(l, h))]);
                    qi.push_back(tape.value(heads.q_imp[size_t(p)]));
                    ki.push_back(tape.value(heads.k_imp[size_t(p)]));
                }
                F sample_loss = mse_logits_blockwise(qs, ks, qi, ki, tc.block_size, tc.domain);
                auto [gq, gk] = blockwise_grads(qs, ks, qi, ki, tc.block_size, tc.domain);
                loss_acc += sample_loss;
                std::vector<std::pair<Var<F>, Tensor<F>>> seeds;
                const F inv_b = F(1) / F(tc.batch);
                for (int p = 0; p < P; ++p) {
                    for (F& v : gq[size_t(p)].data) v *= inv_b;
                    for (F& v : gk[size_t(p)].data) v *= inv_b;
                    seeds.emplace_back(heads.q_imp[size_t(p)], std::move(gq[size_t(p)]));
                    seeds.emplace_back(heads.k_imp[size_t(p)], std::move(gk[size_t(p)]));
                }
                tape.backward_from(seeds);
            } else {
                // materialized path: build the MSE on the tape
                const int64_t Ln = int64_t(ids.size());
                const int64_t count = P * detail::domain_count(tc.domain, Ln);
                Var<F> total{};
                bool first = true;
                for (int p = 0; p < P; ++p) {
                    int l = 1 + p / H, h = p % H;
                    const auto& rows = trace.a_true[size_t(trace.head_index(l, h))];
                    Tensor<F> at({Ln, Ln});
                    for (int64_t i = 0; i < Ln; ++i)
                        for (int64_t j = 0; j < Ln; ++j) at.at(i, j) = rows[size_t(i)][size_t(j)];
                    Var<F> ap = tape.scale(
                        tape.matmul_nt(heads.q_imp[size_t(p)], heads.k_imp[size_t(p)]),
                        F(1) / std::sqrt(F(pred.cfg.d)));
                    Var<F> diff = tape.sub(ap, tape.constant(std::move(at)));
                    if (tc.domain == LossDomain::causal_only) {
                        Tensor<F> m({Ln, Ln});
                        for (int64_t i = 0; i < Ln; ++i)
                            for (int64_t j = 0; j <= i; ++j) m.at(i, j) = F(1);
                        diff = tape.hadamard(diff, tape.constant(std::move(m)));
                    }
                    Var<F> sq = tape.sum_all(tape.square(diff));
                    total = first ? sq : tape.add(total, sq);
                    first = false;
                }
                Var<F> loss = tape.scale(total, F(1) / F(count));
                loss_acc += tape.value(loss).at(0);
                tape.backward(tape.scale(loss, F(1) / F(tc.batch)));
            }
        }
        double mse = double(loss_acc) / tc.batch;
        if (!std::isfinite(mse))
            throw TrainAbortError("non-finite loss at step " + std::to_string(step) +
                                  ", batch seed " + std::to_string(order.key()));
        double gnorm = 0;
        for (auto* p : params)
            for (F g : p->grad.data) gnorm += double(g) * double(g);
        for (size_t i = 0; i < params.size(); ++i) adam_step(*params[i], states[i]);
        auto now = std::chrono::steady_clock::now();
        reports.push_back({step, mse, std::sqrt(gnorm),
                           std::chrono::duration<double, std::milli>(now - t0).count()});
    }
    return reports;
}

// -------- checkpoint format ------------------------------------------------------
//
// "BTLR" | u32 version | 32-byte sha256(config) | u64 seed | u64 step |
// u32 config length | config bytes | u32 record count |
// records: u16 name length | name | u8 rank | u64 dims... | f32 payload (LE)

inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u16(std::string& s, uint16_t v) {
    s.push_back(char(v & 0xff));
    s.push_back(char(v >> 8));
}
inline void put_u32(std::string& s, uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& s, uint64_t v) {
    for (int i = 0; i < 8; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& s, float f) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(s, bits);
}

struct Reader {
    const std::string& s;
    size_t pos = 0;
    std::string field;

    void need(size_t n, const char* what) {
        field = what;
        if (pos + n > s.size())
            throw FormatError(std::string("checkpoint truncated while reading ") + what);
    }
    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v = uint16_t(uint8_t(s[pos])) | uint16_t(uint8_t(s[pos + 1])) << 8;
        pos += 2;
        return v;
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(s[pos + size_t(i)])) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(s[pos + size_t(i)])) << (8 * i);
        pos += 8;
        return v;
    }
    std::string bytes(size_t n, const char* what) {
        need(n, what);
        std::string out = s.substr(pos, n);
        pos += n;
        return out;
    }
};

}  // namespace detail

struct Checkpoint {
    uint32_t version = kCheckpointVersion;
    std::string config_text;
    uint64_t seed = 0;
    uint64_t step = 0;
    std::vector<std::pair<std::string, Tensor<float>>> blobs;

    std::map<std::string, std::string> config_map() const {
        std::map<std::string, std::string> m;
        std::istringstream in(config_text);
        std::string line;
        while (std::getline(in, line)) {
            auto eq = line.find(" = ");
            if (eq == std::string::npos) continue;
            m[line.substr(0, eq)] = line.substr(eq + 3);
        }
        return m;
    }

    std::string config_digest_hex() const { return Sha256::hex_of(config_text); }
};

inline void atomic_write_file(const std::string& path, const std::string& bytes) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + tmp + "' for writing");
        out.write(bytes.data(), std::streamsize(bytes.size()));
        if (!out) throw IoError("short write to '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

inline std::string encode_checkpoint(const Checkpoint& c) {
    std::string out = "BTLR";
    detail::put_u32(out, c.version);
    auto digest = Sha256::hash(c.config_text);
    out.append(reinterpret_cast<const char*>(digest.data()), digest.size());
    detail::put_u64(out, c.seed);
    detail::put_u64(out, c.step);
    detail::put_u32(out, uint32_t(c.config_text.size()));
    out += c.config_text;
    detail::put_u32(out, uint32_t(c.blobs.size()));
    for (const auto& [name, t] : c.blobs) {
        detail::put_u16(out, uint16_t(name.size()));
        out += name;
        out.push_back(char(t.rank()));
        for (int64_t dsz : t.shape) detail::put_u64(out, uint64_t(dsz));
        for (float v : t.data) detail::put_f32(out, v);
    }
    return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
    detail::Reader r{bytes};
    if (r.bytes(4, "magic") != "BTLR") throw FormatError("bad magic, expected \"BTLR\"");
    Checkpoint c;
    c.version = r.u32("version");
    if (c.version != kCheckpointVersion)
        throw FormatError("unsupported version " + std::to_string(c.version));
    std::string digest = r.bytes(32, "config digest");
    c.seed = r.u64("seed");
    c.step = r.u64("step");
    uint32_t clen = r.u32("config length");
    c.config_text = r.bytes(clen, "config");
    auto computed = Sha256::hash(c.config_text);
    if (std::string(reinterpret_cast<const char*>(computed.data()), 32) != digest)
        throw FormatError("config digest mismatch");
    uint32_t count = r.u32("record count");
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t nlen = r.u16("record name length");
        std::string name = r.bytes(nlen, "record name");
        uint8_t rank = uint8_t(r.bytes(1, "record rank")[0]);
        std::vector<int64_t> shape;
        int64_t numel = 1;
        for (int k = 0; k < rank; ++k) {
            int64_t dsz = int64_t(r.u64("record dim"));
            shape.push_back(dsz);
            numel *= dsz;
        }
        r.need(size_t(numel) * 4, "record payload");
        Tensor<float> t(shape);
        for (int64_t k = 0; k < numel; ++k) {
            uint32_t bits = r.u32("record payload");
            float f;
            std::memcpy(&f, &bits, 4);
            t.data[size_t(k)] = f;
        }
        c.blobs.emplace_back(std::move(name), std::move(t));
    }
    if (r.pos != bytes.size()) throw FormatError("trailing bytes after records");
    return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
    atomic_write_file(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::string& path) {
    return decode_checkpoint(read_text_file(path));
}

// -------- host / predictor <-> checkpoint -----------------------------------------

inline std::string hex_encode(const std::string& raw) {
    static const char* k = "0123456789abcdef";
    std::string out;
    out.reserve(raw.size() * 2);
    for (unsigned char c : raw) {
        out.push_back(k[c >> 4]);
        out.push_back(k[c & 15]);
    }
    return out;
}

inline std::string hex_decode(const std::string& hexs) {
    auto nib = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        throw FormatError("bad hex digit");
    };
    if (hexs.size() % 2) throw FormatError("odd hex length");
    std::string out;
    out.reserve(hexs.size() / 2);
    for (size_t i = 0; i < hexs.size(); i += 2)
        out.push_back(char(nib(hexs[i]) * 16 + nib(hexs[i + 1])));
    return out;
}

inline std::string host_config_text(const HostConfig& cfg, const std::string& alphabet) {
    std::ostringstream os;
    os << "kind = host\n";
    os << "n_layers = " << cfg.n_layers << "\n";
    os << "n_heads = " << cfg.n_heads << "\n";
    os << "embed_dim = " << cfg.embed_dim << "\n";
    os << "head_dim = " << cfg.head_dim << "\n";
    os << "max_seq = " << cfg.max_seq << "\n";
    os << "vocab = " << cfg.vocab << "\n";
    os << "alphabet_hex = " << hex_encode(alphabet) << "\n";
    return os.str();
}

template <typename F>
Checkpoint host_to_checkpoint(const Host<F>& host, uint64_t seed, uint64_t step) {
    Checkpoint c;
    c.config_text = host_config_text(host.cfg, host.tokenizer.alphabet());
    c.seed = seed;
    c.step = step;
    for (const auto* p : host.parameters())
        c.blobs.emplace_back(p->name, p->value.template cast<float>());
    return c;
}

template <typename F>
Host<F> host_from_checkpoint(const Checkpoint& c) {
    auto m = c.config_map();
    if (m["kind"] != "host") throw FormatError("checkpoint kind is not host");
    HostConfig cfg;
    cfg.n_layers = std::stoi(m.at("n_layers"));
    cfg.n_heads = std::stoi(m.at("n_heads"));
    cfg.embed_dim = std::stoi(m.at("embed_dim"));
    cfg.head_dim = std::stoi(m.at("head_dim"));
    cfg.max_seq = std::stoi(m.at("max_seq"));
    CharTokenizer tok = CharTokenizer::from_alphabet(hex_decode(m.at("alphabet_hex")));
    Host<F> host(cfg, tok, Rng(0));
    auto params = host.parameters();
    if (params.size() != c.blobs.size())
        throw FormatError("record count " + std::to_string(c.blobs.size()) + " != expected " +
                          std::to_string(params.size()));
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& [name, t] = c.blobs[i];
        if (name != params[i]->name)
            throw FormatError("record '" + name + "' where '" + params[i]->name + "' expected");
        if (t.shape != params[i]->value.shape)
            throw FormatError("record '" + name + "' shape " + shape_str(t.shape) +
                              " != expected " + shape_str(params[i]->value.shape));
        params[i]->value = t.template cast<F>();
    }
    return host;
}

template <typename F>
std::string predictor_config_text(const Predictor<F>& pred, const std::string& host_digest_hex,
                                  const std::string& host_params_hex) {
    std::ostringstream os;
    os << "kind = butler\n";
    os << "e_red = " << pred.cfg.e_red << "\n";
    os << "d = " << pred.cfg.d << "\n";
    os << "h_p = " << pred.cfg.h_p << "\n";
    os << "w_qk = " << pred.cfg.qk_hidden(pred.host_cfg) << "\n";
    os << "target_ratio = " << pred.cfg.target_ratio << "\n";
    os << "host_config_digest = " << host_digest_hex << "\n";
    os << "host_params_sha = " << host_params_hex << "\n";
    return os.str();
}

template <typename F>
Checkpoint predictor_to_checkpoint(const Predictor<F>& pred, const Host<F>& host, uint64_t seed,
                                   uint64_t step) {
    Checkpoint c;
    std::string host_cfg_digest =
        Sha256::hex_of(host_config_text(host.cfg, host.tokenizer.alphabet()));
    c.config_text = predictor_config_text(pred, host_cfg_digest, params_sha(host.parameters()));
    c.seed = seed;
    c.step = step;
    for (const auto* p : pred.parameters())
        c.blobs.emplace_back(p->name, p->value.template cast<float>());
    return c;
}

template <typename F>
Predictor<F> predictor_from_checkpoint(const Checkpoint& c, const Host<F>& host) {
    auto m = c.config_map();
    if (m["kind"] != "butler") throw FormatError("checkpoint kind is not butler");
    std::string host_digest = Sha256::hex_of(host_config_text(host.cfg, host.tokenizer.alphabet()));
    if (m.at("host_config_digest") != host_digest)
        throw FormatError("host config digest mismatch: predictor was trained for a different "
                          "host configuration");
    PredictorConfig cfg;
    cfg.e_red = std::stoi(m.at("e_red"));
    cfg.d = std::stoi(m.at("d"));
    cfg.h_p = std::stoi(m.at("h_p"));
    cfg.w_qk = std::stoi(m.at("w_qk"));
    cfg.target_ratio = std::stod(m.at("target_ratio"));
    Predictor<F> pred(cfg, host.cfg, Rng(0));
    auto params = pred.parameters();
    if (params.size() != c.blobs.size())
        throw FormatError("record count " + std::to_string(c.blobs.size()) + " != expected " +
                          std::to_string(params.size()));
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& [name, t] = c.blobs[i];
        if (name != params[i]->name)
            throw FormatError("record '" + name + "' where '" + params[i]->name + "' expected");
        if (t.shape != params[i]->value.shape)
            throw FormatError("record '" + name + "' shape mismatch");
        params[i]->value = t.template cast<F>();
    }
    return pred;
}

}  // namespace butler
