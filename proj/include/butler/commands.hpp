#pragma once

#include <iostream>
#include <string>
#include <vector>

#include "butler/bench.hpp"
#include "butler/io.hpp"
#include "butler/simulate.hpp"

namespace butler::cli {

using F = float;

// -------- shared helpers ---------------------------------------------------------

inline Host<F> load_host(const std::string& path) {
    return host_from_checkpoint<F>(load_checkpoint(path));
}

inline Predictor<F> load_predictor(const std::string& path, const Host<F>& host) {
    return predictor_from_checkpoint<F>(load_checkpoint(path), host);
}

inline std::vector<int> tokens_with_bot(const CharTokenizer& tok, const std::string& text) {
    std::vector<int> ids = tok.tokenize(text);
    ids.insert(ids.begin(), CharTokenizer::kBot);
    return ids;
}

inline Json config_to_json(const std::map<std::string, std::string>& kv) {
    Json j = Json::object();
    for (const auto& [k, v] : kv) j[k] = v;
    return j;
}

// -------- train-host ---------------------------------------------------------------

struct TrainHostOpts {
    std::string corpus;
    std::string config;
    std::string out;
    uint64_t seed = 0;
};

inline int run_train_host(const TrainHostOpts& o) {
    std::string corpus = read_text_file(o.corpus);
    ConfigView cfg(o.config.empty() ? std::map<std::string, std::string>{}
                                    : parse_config_file(o.config));
    HostConfig hc;
    hc.n_layers = cfg.get_int("n_layers", 4);
    hc.n_heads = cfg.get_int("n_heads", 4);
    hc.embed_dim = cfg.get_int("embed_dim", 128);
    hc.head_dim = cfg.get_int("head_dim", 32);
    hc.max_seq = cfg.get_int("max_seq", 256);
    HostTrainConfig tc;
    tc.steps = cfg.get_int("steps", 5000);
    tc.batch = cfg.get_int("batch", 2);
    tc.seq_len = cfg.get_int("seq_len", 64);
    tc.lr = cfg.get_double("lr", 1e-3);
    tc.eval_windows = cfg.get_int("eval_windows", 8);
    tc.seed = cfg.get_u64("seed", o.seed);

    CharTokenizer tok = CharTokenizer::from_corpus(corpus);
    Host<F> host(hc, tok, Rng(tc.seed));
    HostTrainReport report = train_host(host, corpus, tc);
    save_checkpoint(o.out, host_to_checkpoint(host, tc.seed, uint64_t(tc.steps)));

    RunManifest man;
    man.command = "train-host";
    man.config = config_to_json(cfg.raw());
    man.config["resolved.n_layers"] = hc.n_layers;
    man.config["resolved.steps"] = tc.steps;
    man.config["resolved.seq_len"] = tc.seq_len;
    man.seeds["root"] = tc.seed;
    man.input_digests["corpus"] = file_sha256_hex(o.corpus);
    man.outputs = {o.out};
    man.write(o.out + ".manifest.json");

    Json j;
    j["initial_ppl"] = report.initial_ppl;
    j["final_ppl"] = report.final_ppl;
    j["steps"] = tc.steps;
    j["params"] = host.param_count();
    j["vocab"] = host.cfg.vocab;
    std::cout << j.dump() << "\n";
    return 0;
}

// -------- train-butler ----------------------------------------------------------------

struct TrainButlerOpts {
    std::string host;
    std::string corpus;
    std::string config;
    std::string out;
    uint64_t seed = 0;
};

inline int run_train_butler(const TrainButlerOpts& o) {
    Host<F> host = load_host(o.host);
    std::string corpus = read_text_file(o.corpus);
    ConfigView cfg(o.config.empty() ? std::map<std::string, std::string>{}
                                    : parse_config_file(o.config));
    double ratio = cfg.get_double("target_ratio", 0.011);
    PredictorConfig pc;
    if (cfg.get_int("e_red", 0) > 0) {
        pc.e_red = cfg.get_int("e_red", 16);
        pc.d = cfg.get_int("d", 8);
        pc.h_p = cfg.get_int("h_p", 2);
        pc.w_qk = cfg.get_int("w_qk", 0);
        pc.target_ratio = ratio;
    } else {
        pc = size_for_budget(host.cfg, host.param_count(), ratio);
    }
    TrainConfig tc;
    tc.steps = cfg.get_int("steps", 2000);
    tc.batch = cfg.get_int("batch", 2);
    tc.seq_len = cfg.get_int("seq_len", 64);
    tc.lr = cfg.get_double("lr", 3e-4);
    tc.block_size = cfg.get_int("block_size", 64);
    tc.seed = cfg.get_u64("seed", o.seed);
    tc.domain = loss_domain_from_string(cfg.get_str("loss_domain", "full"));
    tc.blockwise = cfg.get_int("blockwise", 1) != 0;

    Predictor<F> pred(pc, host.cfg, Rng(tc.seed));
    std::vector<LossReport> losses = train_predictor(host, pred, corpus, tc);
    save_checkpoint(o.out, predictor_to_checkpoint(pred, host, tc.seed, uint64_t(tc.steps)));

    RunManifest man;
    man.command = "train-butler";
    man.config = config_to_json(cfg.raw());
    man.config["resolved.e_red"] = pc.e_red;
    man.config["resolved.d"] = pc.d;
    man.config["resolved.h_p"] = pc.h_p;
    man.config["resolved.w_qk"] = pc.qk_hidden(host.cfg);
    man.seeds["root"] = tc.seed;
    man.input_digests["corpus"] = file_sha256_hex(o.corpus);
    man.input_digests["host"] = file_sha256_hex(o.host);
    man.outputs = {o.out};
    man.write(o.out + ".manifest.json");

    Json j;
    j["params"] = pred.param_count();
    j["ratio"] = pred.realized_ratio(host.param_count());
    j["first_loss"] = losses.empty() ? 0.0 : losses.front().mse;
    j["last_loss"] = losses.empty() ? 0.0 : losses.back().mse;
    std::cout << j.dump() << "\n";
    return 0;
}

// -------- eval-classify ------------------------------------------------------------------

struct EvalClassifyOpts {
    std::string host;
    std::string butler;
    std::string split;
    int seq_len = 64;
    int windows = 16;
    double fraction = 0.5;
    std::string out;  // optional JSON file
};

inline double classification_accuracy_on_text(const Host<F>& host, const Predictor<F>& pred,
                                              const std::string& text, int seq_len,
                                              int max_windows, double fraction) {
    const int chars = seq_len - 1;
    if (int(text.size()) < chars) throw DataError("split shorter than one window");
    double total = 0;
    int windows = 0;
    const int H = host.cfg.n_heads;
    for (size_t off = 0; off + size_t(chars) <= text.size() && windows < max_windows;
         off += size_t(chars), ++windows) {
        std::vector<int> ids = tokens_with_bot(host.tokenizer, text.substr(off, size_t(chars)));
        auto [logits, trace] = host.forward_traced(ids);
        auto imp = pred.predict_importance(trace.first_layer_out, true);
        const int64_t L = trace.len();
        std::vector<Tensor<F>> at;
        for (int l = 1; l < host.cfg.n_layers; ++l)
            for (int h = 0; h < H; ++h) {
                const auto& rows = trace.a_true[size_t(trace.head_index(l, h))];
                Tensor<F> m({L, L});
                for (int64_t i = 0; i < L; ++i)
                    for (int64_t j = 0; j < L; ++j) m.at(i, j) = rows[size_t(i)][size_t(j)];
                at.push_back(std::move(m));
            }
        total += topk_classification_accuracy(at, imp.a_pred, fraction);
    }
    return total / double(windows);
}

inline int run_eval_classify(const EvalClassifyOpts& o) {
    Host<F> host = load_host(o.host);
    Predictor<F> pred = load_predictor(o.butler, host);
    std::string text = read_text_file(o.split);
    double acc = classification_accuracy_on_text(host, pred, text, o.seq_len, o.windows,
                                                 o.fraction);
    Json j;
    j["accuracy"] = acc;
    j["fraction"] = o.fraction;
    j["seq_len"] = o.seq_len;
    j["windows"] = o.windows;
    std::cout << j.dump() << "\n";
    if (!o.out.empty()) {
        atomic_write_file(o.out, j.dump(2) + "\n");
        RunManifest man;
        man.command = "eval-classify";
        man.config["seq_len"] = o.seq_len;
        man.config["fraction"] = o.fraction;
        man.config["windows"] = o.windows;
        man.input_digests["host"] = file_sha256_hex(o.host);
        man.input_digests["butler"] = file_sha256_hex(o.butler);
        man.input_digests["split"] = file_sha256_hex(o.split);
        man.outputs = {o.out};
        man.write(o.out + ".manifest.json");
    }
    return 0;
}

// -------- bench -------------------------------------------------------------------------

struct BenchOpts {
    std::string host;
    std::string butler;  // optional unless policy == butler
    std::string policy = "oracle";
    double sparsity = 0.5;
    int samples = 100;
    uint64_t seed = 0;
    uint64_t pool_seed = 1234;
    std::string pools_file;  // optional JSON override
    std::string out = "bench_results.csv";
    int anchors = 4;
    int window = 0;
    int obs_window = 16;
    int page_size = 16;
    std::string pooling = "mean";
};

inline BenchPools pools_from_json_file(const std::string& path) {
    Json j = Json::parse(read_text_file(path), nullptr, false);
    if (j.is_discarded()) throw FormatError("pool override file is not valid JSON");
    BenchPools pools;
    for (const auto& item : j.at("locations")) pools.locations.push_back(item.get<std::string>());
    for (const auto& item : j.at("lead_prelude_pairs")) {
        pools.leads.push_back(item.at("lead").get<std::string>());
        pools.preludes.push_back(item.at("prelude").get<std::string>());
    }
    for (const auto& item : j.at("philosophical"))
        pools.philosophical.push_back(item.get<std::string>());
    for (const auto& item : j.at("culinary")) pools.culinary.push_back(item.get<std::string>());
    for (const auto& item : j.at("math")) pools.math.push_back(item.get<std::string>());
    if (pools.locations.empty() || pools.leads.empty() || pools.philosophical.empty() ||
        pools.culinary.empty() || pools.math.empty())
        throw FormatError("pool override file has an empty pool");
    return pools;
}

struct BenchRunResult {
    std::vector<uint64_t> sample_seeds;
    std::vector<Score> scores;
    double mean_accuracy = 0;
    double mean_coverage = 0;
};

// Walks each sample's prefix (stateful policies consume trace rows step by
// step), then greedily decodes exactly the location span and scores it.
inline BenchRunResult run_bench_samples(const Host<F>& host, const Predictor<F>* pred,
                                        PolicyKind kind, const PolicyConfig& pcfg,
                                        const BenchPools& pools, int samples, uint64_t seed) {
    BenchRunResult out;
    Rng seeder = Rng(seed).stream("bench-sample-seeds");
    for (int i = 0; i < samples; ++i) {
        uint64_t sample_seed = seeder.next_u64();
        BenchSample s = render_sample(pools, sample_seed, host.cfg.max_seq - 1);
        std::vector<int> prefix = tokens_with_bot(host.tokenizer, s.prefix);
        std::vector<int> expected = host.tokenizer.tokenize(s.location);
        PolicyConfig cfg = pcfg;
        cfg.seed = sample_seed;  // per-sample stream for the random policy
        std::vector<int> produced =
            greedy_continue(host, pred, kind, cfg, prefix, int(expected.size()));
        Score sc = score_prediction(expected, produced);
        out.sample_seeds.push_back(sample_seed);
        out.scores.push_back(sc);
        out.mean_accuracy += sc.accuracy;
        out.mean_coverage += sc.coverage;
    }
    if (samples > 0) {
        out.mean_accuracy /= samples;
        out.mean_coverage /= samples;
    }
    return out;
}

inline int run_bench(const BenchOpts& o) {
    Host<F> host = load_host(o.host);
    PolicyKind kind = policy_from_string(o.policy);
    std::optional<Predictor<F>> pred;
    if (!o.butler.empty()) pred = load_predictor(o.butler, host);
    if (policy_needs_predictor(kind) && !pred)
        throw ConfigError("policy 'butler' requires --butler <ckpt>");
    BenchPools pools =
        o.pools_file.empty() ? build_pools(o.pool_seed) : pools_from_json_file(o.pools_file);
    PolicyConfig pcfg;
    pcfg.sparsity = o.sparsity;
    pcfg.anchors = o.anchors;
    pcfg.window = o.window;
    pcfg.obs_window = o.obs_window;
    pcfg.page_size = o.page_size;
    pcfg.pooling = o.pooling == "max" ? Pooling::max : Pooling::mean;
    BenchRunResult res = run_bench_samples(host, pred ? &*pred : nullptr, kind, pcfg, pools,
                                           o.samples, o.seed);

    std::string csv = "sample_seed,policy,sparsity,accuracy,coverage\n";
    std::string jsonl;
    for (size_t i = 0; i < res.scores.size(); ++i) {
        csv += std::to_string(res.sample_seeds[i]) + "," + o.policy + "," +
               format_double(o.sparsity) + "," + std::to_string(res.scores[i].accuracy) + "," +
               format_double(res.scores[i].coverage) + "\n";
        Json j;
        j["sample_seed"] = res.sample_seeds[i];
        j["policy"] = o.policy;
        j["sparsity"] = o.sparsity;
        j["accuracy"] = res.scores[i].accuracy;
        j["coverage"] = res.scores[i].coverage;
        jsonl += j.dump() + "\n";
    }
    csv += "mean," + o.policy + "," + format_double(o.sparsity) + "," +
           format_double(res.mean_accuracy) + "," + format_double(res.mean_coverage) + "\n";
    atomic_write_file(o.out, csv);
    atomic_write_file(o.out + ".jsonl", jsonl);

    RunManifest man;
    man.command = "bench";
    man.config["policy"] = o.policy;
    man.config["sparsity"] = o.sparsity;
    man.config["samples"] = o.samples;
    man.config["anchors"] = o.anchors;
    man.config["page_size"] = o.page_size;
    man.config["obs_window"] = o.obs_window;
    man.config["pooling"] = o.pooling;
    man.seeds["bench"] = o.seed;
    man.seeds["pools"] = o.pool_seed;
    man.input_digests["host"] = file_sha256_hex(o.host);
    if (!o.butler.empty()) man.input_digests["butler"] = file_sha256_hex(o.butler);
    if (!o.pools_file.empty()) man.input_digests["pools"] = file_sha256_hex(o.pools_file);
    man.outputs = {o.out, o.out + ".jsonl"};
    man.write(o.out + ".manifest.json");

    Json j;
    j["accuracy"] = res.mean_accuracy;
    j["coverage"] = res.mean_coverage;
    j["samples"] = o.samples;
    std::cout << j.dump() << "\n";
    return 0;
}

// -------- simulate -------------------------------------------------------------------------

struct SimulateOpts {
    std::string host;
    std::string butler;
    std::string policy = "oracle";
    double sparsity = 0.5;
    std::string input;
    uint64_t seed = 0;
    int length = 0;  // 0 = as much of the input as fits
    std::string out = "sim_result.jsonl";
    int anchors = 4;
    int window = 0;
    int obs_window = 16;
    int page_size = 16;
    std::string pooling = "mean";
};

inline Json sim_result_to_json(const SimResult<F>& r) {
    Json j;
    j["policy"] = r.policy;
    j["sparsity"] = r.sparsity;
    j["net_sparsity"] = r.net_sparsity;
    j["ppl_masked"] = r.ppl_masked;
    j["ppl_dense"] = r.ppl_dense;
    j["seed"] = r.seed;
    j["length"] = r.length;
    return j;
}

inline int run_simulate(const SimulateOpts& o) {
    Host<F> host = load_host(o.host);
    PolicyKind kind = policy_from_string(o.policy);
    std::optional<Predictor<F>> pred;
    if (!o.butler.empty()) pred = load_predictor(o.butler, host);
    if (policy_needs_predictor(kind) && !pred)
        throw ConfigError("policy 'butler' requires --butler <ckpt>");
    std::string text = read_text_file(o.input);
    int max_chars = host.cfg.max_seq - 1;
    if (o.length > 0) max_chars = std::min(max_chars, o.length - 1);
    if (int(text.size()) > max_chars) text.resize(size_t(max_chars));
    std::vector<int> tokens = tokens_with_bot(host.tokenizer, text);

    PolicyConfig pcfg;
    pcfg.sparsity = o.sparsity;
    pcfg.anchors = o.anchors;
    pcfg.window = o.window;
    pcfg.obs_window = o.obs_window;
    pcfg.page_size = o.page_size;
    pcfg.pooling = o.pooling == "max" ? Pooling::max : Pooling::mean;
    pcfg.seed = o.seed;
    SimResult<F> res = simulate_decode(host, pred ? &*pred : nullptr, kind, pcfg, tokens, o.seed);

    Json j = sim_result_to_json(res);
    atomic_write_file(o.out, j.dump() + "\n");
    RunManifest man;
    man.command = "simulate";
    man.config["policy"] = o.policy;
    man.config["sparsity"] = o.sparsity;
    man.config["length"] = res.length;
    man.config["anchors"] = o.anchors;
    man.seeds["run"] = o.seed;
    man.input_digests["host"] = file_sha256_hex(o.host);
    if (!o.butler.empty()) man.input_digests["butler"] = file_sha256_hex(o.butler);
    man.input_digests["input"] = file_sha256_hex(o.input);
    man.outputs = {o.out};
    man.write(o.out + ".manifest.json");
    std::cout << j.dump() << "\n";
    return 0;
}

// -------- consensus -------------------------------------------------------------------------

struct ConsensusOpts {
    std::string host;
    std::string input;
    int seq_len = 64;
    int sequences = 16;
    std::string out;  // optional CSV matrix dump
};

inline int run_consensus(const ConsensusOpts& o) {
    Host<F> host = load_host(o.host);
    std::string text = read_text_file(o.input);
    const int chars = o.seq_len - 1;
    std::vector<AttentionTrace<F>> traces;
    for (size_t off = 0; off + size_t(chars) <= text.size() && int(traces.size()) < o.sequences;
         off += size_t(chars)) {
        std::vector<int> ids = tokens_with_bot(host.tokenizer, text.substr(off, size_t(chars)));
        auto [logits, trace] = host.forward_traced(ids);
        traces.push_back(std::move(trace));
    }
    if (traces.size() < 2) throw DataError("input yields fewer than 2 sequences");
    ConsensusMatrix cm = consensus_from_traces(traces);
    Json j;
    j["mean_consensus"] = cm.mean_upper;
    j["heads"] = cm.heads;
    j["sequences"] = traces.size();
    j["flagged_pairs"] = cm.flagged_pairs;
    std::cout << j.dump() << "\n";
    if (!o.out.empty()) {
        std::string csv;
        for (int i = 0; i < cm.heads; ++i) {
            for (int jx = 0; jx < cm.heads; ++jx)
                csv += (jx ? "," : "") + format_double(cm.at(i, jx));
            csv += "\n";
        }
        atomic_write_file(o.out, csv);
        RunManifest man;
        man.command = "consensus";
        man.config["seq_len"] = o.seq_len;
        man.config["sequences"] = int(traces.size());
        man.input_digests["host"] = file_sha256_hex(o.host);
        man.input_digests["input"] = file_sha256_hex(o.input);
        man.outputs = {o.out};
        man.write(o.out + ".manifest.json");
    }
    return 0;
}

// -------- report ----------------------------------------------------------------------------

struct ReportOpts {
    std::string glob;
    std::string out;
};

inline int run_report(const ReportOpts& o) {
    std::vector<std::string> files = glob_files(o.glob);
    if (files.empty()) throw DataError("no files match '" + o.glob + "'");
    std::vector<RunRecord> records = read_run_records(files);
    std::vector<SummaryRow> rows = aggregate_report(records);
    atomic_write_file(o.out, summary_to_csv(rows));
    RunManifest man;
    man.command = "report";
    man.config["glob"] = o.glob;
    for (const auto& f : files) man.input_digests[f] = file_sha256_hex(f);
    man.outputs = {o.out};
    man.write(o.out + ".manifest.json");
    std::cout << "{\"groups\":" << rows.size() << ",\"records\":" << records.size() << "}\n";
    return 0;
}

// -------- gen-corpus (utility) -----------------------------------------------------------------

struct GenCorpusOpts {
    std::string out;
    uint64_t pool_seed = 1234;
    uint64_t seed = 7;
    int samples = 1500;
};

inline int run_gen_corpus(const GenCorpusOpts& o) {
    BenchPools pools = build_pools(o.pool_seed);
    std::string corpus = build_corpus(pools, o.seed, o.samples);
    atomic_write_file(o.out, corpus);
    RunManifest man;
    man.command = "gen-corpus";
    man.config["samples"] = o.samples;
    man.seeds["pools"] = o.pool_seed;
    man.seeds["corpus"] = o.seed;
    man.outputs = {o.out};
    man.write(o.out + ".manifest.json");
    std::cout << "{\"chars\":" << corpus.size() << "}\n";
    return 0;
}

}  // namespace butler::cli
