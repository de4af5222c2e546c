// Command-line front end: training, evaluation, benchmarking, simulation,
// and report aggregation for the token-importance laboratory.

#include <CLI11.hpp>

#include "butler/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"token-importance prediction laboratory"};
    app.require_subcommand(1);

    butler::cli::TrainHostOpts th;
    auto* c_th = app.add_subcommand("train-host", "train the host transformer on a corpus");
    c_th->add_option("--corpus", th.corpus, "UTF-8 corpus file")->required();
    c_th->add_option("--config", th.config, "key = value config file");
    c_th->add_option("--out", th.out, "checkpoint output path")->required();
    c_th->add_option("--seed", th.seed, "root seed (config 'seed' wins if set)");

    butler::cli::TrainButlerOpts tb;
    auto* c_tb = app.add_subcommand("train-butler", "train the importance predictor");
    c_tb->add_option("--host", tb.host, "host checkpoint")->required();
    c_tb->add_option("--corpus", tb.corpus, "UTF-8 corpus file")->required();
    c_tb->add_option("--config", tb.config, "key = value config file");
    c_tb->add_option("--out", tb.out, "checkpoint output path")->required();
    c_tb->add_option("--seed", tb.seed, "root seed (config 'seed' wins if set)");

    butler::cli::EvalClassifyOpts ec;
    auto* c_ec = app.add_subcommand("eval-classify", "top-fraction token classification accuracy");
    c_ec->add_option("--host", ec.host, "host checkpoint")->required();
    c_ec->add_option("--butler", ec.butler, "predictor checkpoint")->required();
    c_ec->add_option("--split", ec.split, "held-out text file")->required();
    c_ec->add_option("--seq-len", ec.seq_len, "tokens per window");
    c_ec->add_option("--windows", ec.windows, "max windows");
    c_ec->add_option("--fraction", ec.fraction, "top fraction (default 0.5)");
    c_ec->add_option("--out", ec.out, "optional JSON output path");

    butler::cli::BenchOpts bo;
    auto* c_b = app.add_subcommand("bench", "co-reference retrieval benchmark");
    c_b->add_option("--host", bo.host, "host checkpoint")->required();
    c_b->add_option("--butler", bo.butler, "predictor checkpoint (for the butler policy)");
    c_b->add_option("--policy", bo.policy, "policy name")->required();
    c_b->add_option("--sparsity", bo.sparsity, "target sparsity in [0,1)")->required();
    c_b->add_option("--samples", bo.samples, "number of samples");
    c_b->add_option("--seed", bo.seed, "sample-seed stream root");
    c_b->add_option("--pool-seed", bo.pool_seed, "pool generation seed");
    c_b->add_option("--pools", bo.pools_file, "JSON pool override file");
    c_b->add_option("--out", bo.out, "CSV output path");
    c_b->add_option("--anchors", bo.anchors, "anchor token count");
    c_b->add_option("--window", bo.window, "streaming window (0 tracks the budget)");
    c_b->add_option("--obs-window", bo.obs_window, "snapkv observation window");
    c_b->add_option("--page-size", bo.page_size, "quest page size");
    c_b->add_option("--pooling", bo.pooling, "snapkv pooling: mean|max");

    butler::cli::SimulateOpts so;
    auto* c_s = app.add_subcommand("simulate", "token-by-token decode simulation");
    c_s->add_option("--host", so.host, "host checkpoint")->required();
    c_s->add_option("--butler", so.butler, "predictor checkpoint (for the butler policy)");
    c_s->add_option("--policy", so.policy, "policy name")->required();
    c_s->add_option("--sparsity", so.sparsity, "target sparsity in [0,1)")->required();
    c_s->add_option("--input", so.input, "text file to decode")->required();
    c_s->add_option("--seed", so.seed, "run seed");
    c_s->add_option("--length", so.length, "max tokens (0 = fit to context)");
    c_s->add_option("--out", so.out, "JSON-lines output path");
    c_s->add_option("--anchors", so.anchors, "anchor token count");
    c_s->add_option("--window", so.window, "streaming window (0 tracks the budget)");
    c_s->add_option("--obs-window", so.obs_window, "snapkv observation window");
    c_s->add_option("--page-size", so.page_size, "quest page size");
    c_s->add_option("--pooling", so.pooling, "snapkv pooling: mean|max");

    butler::cli::ConsensusOpts co;
    auto* c_c = app.add_subcommand("consensus", "cross-head consensus correlation");
    c_c->add_option("--host", co.host, "host checkpoint")->required();
    c_c->add_option("--input", co.input, "text file")->required();
    c_c->add_option("--seq-len", co.seq_len, "tokens per sequence");
    c_c->add_option("--sequences", co.sequences, "sequence count");
    c_c->add_option("--out", co.out, "optional CSV matrix path");

    butler::cli::ReportOpts ro;
    auto* c_r = app.add_subcommand("report", "aggregate run records into a summary CSV");
    c_r->add_option("--glob", ro.glob, "input pattern, e.g. 'runs/*.jsonl'")->required();
    c_r->add_option("--out", ro.out, "summary CSV path")->required();

    butler::cli::GenCorpusOpts go;
    auto* c_g = app.add_subcommand("gen-corpus", "generate a training corpus from the pools");
    c_g->add_option("--out", go.out, "corpus output path")->required();
    c_g->add_option("--pool-seed", go.pool_seed, "pool generation seed");
    c_g->add_option("--seed", go.seed, "sample stream seed");
    c_g->add_option("--samples", go.samples, "rendered sample count");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*c_th) return butler::cli::run_train_host(th);
        if (*c_tb) return butler::cli::run_train_butler(tb);
        if (*c_ec) return butler::cli::run_eval_classify(ec);
        if (*c_b) return butler::cli::run_bench(bo);
        if (*c_s) return butler::cli::run_simulate(so);
        if (*c_c) return butler::cli::run_consensus(co);
        if (*c_r) return butler::cli::run_report(ro);
        if (*c_g) return butler::cli::run_gen_corpus(go);
    } catch (const butler::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
