#pragma once

// Command-line pipeline: data generation, training, reranking, evaluation,
// latency benchmarking, and the candidate-order bias table.
//
// Configuration precedence: built-in defaults < --config file (flat
// key=value lines named after the long flags) < command-line flags. All
// randomness derives from the single --seed via named sub-seeds.

#include "calrank/datagen.hpp"
#include "calrank/evalkit.hpp"
#include "calrank/model.hpp"
#include "calrank/rerank.hpp"
#include "calrank/trainer.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace calrank {
namespace cli {

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream ss(s);
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

inline std::map<std::string, std::string> read_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    std::map<std::string, std::string> out;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        auto trim = [](std::string v) {
            auto b = v.find_first_not_of(" \t\r");
            auto e = v.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : v.substr(b, e - b + 1);
        };
        std::string t = trim(line);
        if (t.empty()) continue;
        auto eq = t.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config: line " + std::to_string(lineno) + " is not key=value");
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (key.empty()) throw std::runtime_error("config: empty key at line " + std::to_string(lineno));
        out[key] = value;
    }
    return out;
}

/// Applies config-file values as new defaults on every matching option
/// (flags keep the final word).
inline void apply_config(CLI::App* app, const std::map<std::string, std::string>& cfg) {
    for (auto* opt : app->get_options()) {
        auto name = opt->get_lnames().empty() ? std::string() : opt->get_lnames().front();
        auto it = cfg.find(name);
        if (it == cfg.end()) continue;
        if (opt->get_expected_min() == 0) { // toggle flags: true/false values
            if (it->second == "true" || it->second == "1") opt->default_str("true");
        } else {
            opt->default_str(it->second);
        }
        opt->force_callback();
    }
    for (auto* sub : app->get_subcommands({})) apply_config(sub, cfg);
}

struct CommonArgs {
    std::uint64_t seed = 42;
    unsigned threads = 0;
    std::string config_path;
};

// ---------------------------------------------------------------------------
// Subcommand payloads
// ---------------------------------------------------------------------------

struct GenArgs {
    std::string out_dir = ".";
    GenConfig gen;
    std::string overlap_weights = "0.55,0.15,0.15,0.15";
};

inline int run_gen(const CommonArgs& common, GenArgs& a) {
    a.gen.seed = common.seed;
    auto weights = split_list(a.overlap_weights);
    a.gen.overlap_weights.clear();
    for (const auto& w : weights) a.gen.overlap_weights.push_back(std::stod(w));
    a.gen.validate();
    auto data = generate(a.gen);
    std::filesystem::create_directories(a.out_dir);
    auto path = [&](const char* name) { return (std::filesystem::path(a.out_dir) / name).string(); };
    write_examples(path("train.jsonl"), data.train);
    write_examples(path("eval.jsonl"), data.eval);
    write_qrels(path("qrels.txt"), data.qrels);
    write_examples(path("bench.jsonl"), data.bench);
    std::cout << "gen: wrote " << data.train.size() << " train / " << data.eval.size() << " eval / "
              << data.bench.size() << " bench queries to " << a.out_dir << "\n";
    return 0;
}

struct TrainArgs {
    std::string data_path;
    std::string checkpoint_path;
    std::string report_path; // TrainLog JSONL
    int window_size = 20;
    int max_candidate_tokens = 16;
    int vocab_size = 2048;
    std::string precision = "f64";
    ModelConfig model;
    TrainConfig train;
    bool no_point_loss = false;
    bool no_calibration = false;
    bool no_in_batch = false;
    bool no_adaptive = false;
    std::string position_scheme = "rotary";
};

template <typename S>
int run_train_typed(const CommonArgs& common, TrainArgs& a) {
    auto dataset = read_examples(a.data_path);
    Vocab vocab = make_vocab(a.vocab_size, a.window_size);
    LayoutConfig lcfg = make_layout_config(vocab, a.window_size, a.max_candidate_tokens);

    a.model.vocab_size = a.vocab_size;
    a.model.position_scheme = position_scheme_from_string(a.position_scheme);
    a.model.seed = sub_seed(common.seed, "model-init");
    a.model.precision = a.precision;
    a.model.validate();

    a.train.seed = sub_seed(common.seed, "train-loop");
    a.train.threads = common.threads;
    a.train.loss.enable_point_loss = !a.no_point_loss;
    a.train.loss.enable_calibration = !a.no_calibration;
    a.train.loss.enable_in_batch = !a.no_in_batch;
    a.train.loss.enable_adaptive = !a.no_adaptive;
    a.train.checkpoint_path = a.checkpoint_path;
    a.train.log_path = a.report_path;
    a.train.validate();

    auto result = train<S>(a.train, a.model, lcfg, vocab, dataset);
    if (!result.log.empty()) {
        const auto& last = result.log.back();
        std::cout << "train: " << result.log.size() << " steps, final total " << last.total << " (list "
                  << last.list_loss << ", point " << last.point_loss << ", cal " << last.cal_loss << ")\n";
    }
    if (!a.checkpoint_path.empty()) std::cout << "train: checkpoint written to " << a.checkpoint_path << "\n";
    return 0;
}

inline int run_train(const CommonArgs& common, TrainArgs& a) {
    if (a.precision == "f32") return run_train_typed<float>(common, a);
    return run_train_typed<double>(common, a);
}

struct RerankArgs {
    std::string data_path;
    std::string checkpoint_path;
    std::string run_path;
    std::string strategy = "global_score";
    int stride = 10;
    int window_size = 0; // 0: checkpoint window
    bool use_point_scores = false;
    std::string tag = "calrank";
};

inline int run_rerank(const CommonArgs& common, RerankArgs& a) {
    auto ckpt = load_checkpoint<double>(a.checkpoint_path);
    Vocab vocab = make_vocab(ckpt.params.config.vocab_size, ckpt.layout_config.num_slots);
    LayoutConfig lcfg = ckpt.layout_config;
    if (a.window_size > 0) {
        if (a.window_size > ckpt.layout_config.num_slots)
            throw std::runtime_error("rerank: window-size exceeds the checkpoint's " +
                                     std::to_string(ckpt.layout_config.num_slots) + " identifier slots");
        lcfg.num_slots = a.window_size;
        lcfg.identifier_ids.resize(static_cast<std::size_t>(a.window_size));
    }
    auto dataset = read_examples(a.data_path);
    std::vector<RunRecord> records;
    int forwards = 0;
    for (const auto& e : dataset) {
        RerankRequest req;
        req.qid = e.qid;
        req.query = e.query;
        req.candidates = e.candidates;
        req.window_size = lcfg.num_slots;
        req.strategy = strategy_from_string(a.strategy);
        req.stride = a.stride;
        req.score_view = a.use_point_scores ? ScoreView::Point : ScoreView::List;
        req.threads = common.threads;
        auto res = rerank(ckpt.params, lcfg, vocab, req);
        forwards += res.forward_count;
        auto recs = to_run_records(e.qid, res, a.tag);
        records.insert(records.end(), recs.begin(), recs.end());
    }
    write_run(a.run_path, records);
    std::cout << "rerank: " << dataset.size() << " queries, " << forwards << " forward passes, run written to "
              << a.run_path << "\n";
    return 0;
}

struct EvalArgs {
    std::string run_path;
    std::string qrels_path;
    std::string report_path;
    int k = 10;
};

inline int run_eval(EvalArgs& a) {
    auto run = read_run(a.run_path);
    auto qrels = read_qrels(a.qrels_path);
    auto groups = group_run_by_query(run);
    double ndcg = mean_ndcg_at_k(run, qrels, a.k);
    std::cout << "eval: mean_ndcg@" << a.k << " " << ndcg << " over " << groups.size() << " queries\n";
    if (!a.report_path.empty()) {
        std::ofstream f(a.report_path);
        if (!f) throw std::runtime_error("eval: cannot open " + a.report_path);
        f << "metric,value,queries\n";
        f << "ndcg@" << a.k << "," << format_score(ndcg) << "," << groups.size() << "\n";
    }
    return 0;
}

struct BenchArgs {
    std::string data_path;
    std::string checkpoint_path;
    std::string report_path;
    std::string sizes = "100,200,400,800,1000";
    std::string strategies = "global_score,sliding_window";
    int stride = 10;
    int reps = 3;
};

inline int run_bench(const CommonArgs& common, BenchArgs& a) {
    auto ckpt = load_checkpoint<double>(a.checkpoint_path);
    Vocab vocab = make_vocab(ckpt.params.config.vocab_size, ckpt.layout_config.num_slots);
    auto dataset = read_examples(a.data_path);
    if (dataset.empty()) throw std::runtime_error("bench: no queries in " + a.data_path);
    std::vector<int> sizes;
    for (const auto& s : split_list(a.sizes)) sizes.push_back(std::stoi(s));
    std::vector<RerankStrategy> strategies;
    for (const auto& s : split_list(a.strategies)) strategies.push_back(strategy_from_string(s));
    const auto& e = dataset.front();
    auto rows = latency_bench(ckpt.params, ckpt.layout_config, vocab, e.query, e.candidates, sizes, strategies,
                              a.stride, a.reps, common.threads);
    write_bench_csv(a.report_path, rows);
    for (const auto& r : rows)
        std::cout << "bench: " << r.strategy << " |C|=" << r.num_candidates << " forwards=" << r.forwards
                  << " latency_ms=" << r.latency_ms << "\n";
    std::cout << "bench: table written to " << a.report_path << "\n";
    return 0;
}

struct BiasArgs {
    std::string data_path;
    std::string qrels_path;
    std::string checkpoint_path;
    std::string report_path;
    std::string modes = "original,reversed,random";
    int window_size = 0;
};

inline int run_bias(const CommonArgs& common, BiasArgs& a) {
    auto ckpt = load_checkpoint<double>(a.checkpoint_path);
    Vocab vocab = make_vocab(ckpt.params.config.vocab_size, ckpt.layout_config.num_slots);
    auto dataset = read_examples(a.data_path);
    auto qrels = read_qrels(a.qrels_path);
    std::vector<CandidateOrder> modes;
    for (const auto& m : split_list(a.modes)) {
        if (m == "original") modes.push_back(CandidateOrder::Original);
        else if (m == "reversed") modes.push_back(CandidateOrder::Reversed);
        else if (m == "random") modes.push_back(CandidateOrder::Random);
        else throw std::runtime_error("bias: unknown mode " + m);
    }
    auto report = position_bias_experiment(ckpt.params, ckpt.layout_config, vocab, dataset, qrels, modes,
                                           sub_seed(common.seed, "bias"), a.window_size, common.threads);
    write_bias_csv(a.report_path, report);
    for (const auto& m : report.modes)
        std::cout << "bias: " << m.mode << " mean_ndcg@10 " << m.mean_ndcg << " over " << m.queries
                  << " queries\n";
    std::cout << "bias: max rank disagreement " << report.max_rank_disagreement << ", table written to "
              << a.report_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

inline int dispatch(int argc, const char* const* argv) {
    CLI::App app{"calrank: listwise reranking with globally comparable scores"};
    app.require_subcommand(1);

    CommonArgs common;
    app.add_option("--seed", common.seed, "master seed; all randomness derives from it")
        ->capture_default_str();
    app.add_option("--threads", common.threads, "worker threads (0 = hardware)")->capture_default_str();
    app.add_option("--config", common.config_path, "flat key=value configuration file");

    GenArgs gen;
    auto* cgen = app.add_subcommand("gen", "generate synthetic training/eval/bench data");
    cgen->add_option("--out", gen.out_dir, "output directory")->capture_default_str();
    cgen->add_option("--vocab-size", gen.gen.vocab_size, "vocabulary size")->capture_default_str();
    cgen->add_option("--topic-pool", gen.gen.topic_pool, "words reserved as topics")->capture_default_str();
    cgen->add_option("--topics-per-query", gen.gen.topics_per_query, "topic words per query")
        ->capture_default_str();
    cgen->add_option("--overlap-weights", gen.overlap_weights, "P(overlap=0..T), comma separated")
        ->capture_default_str();
    cgen->add_option("--min-candidate-len", gen.gen.min_candidate_len, "min content words per candidate")
        ->capture_default_str();
    cgen->add_option("--max-candidate-len", gen.gen.max_candidate_len, "max content words per candidate")
        ->capture_default_str();
    cgen->add_option("--noise", gen.gen.label_noise, "adjacent-swap label noise rate")->capture_default_str();
    cgen->add_option("--noisy-fraction", gen.gen.noisy_fraction, "fraction flagged noisy with shuffled labels")
        ->capture_default_str();
    cgen->add_option("--window-size", gen.gen.num_slots, "candidates per training query (M)")
        ->capture_default_str();
    cgen->add_option("--train-queries", gen.gen.train_queries, "training queries")->capture_default_str();
    cgen->add_option("--eval-queries", gen.gen.eval_queries, "held-out queries")->capture_default_str();
    cgen->add_option("--eval-candidates", gen.gen.eval_candidates, "candidates per eval query (|C|)")
        ->capture_default_str();
    cgen->add_option("--bench-queries", gen.gen.bench_queries, "benchmark queries")->capture_default_str();
    cgen->add_option("--bench-candidates", gen.gen.bench_candidates, "candidates per benchmark query")
        ->capture_default_str();

    TrainArgs tr;
    auto* ctrain = app.add_subcommand("train", "train a reranker on example files");
    ctrain->add_option("--data", tr.data_path, "training examples (JSONL)")->required();
    ctrain->add_option("--checkpoint", tr.checkpoint_path, "checkpoint output path")->required();
    ctrain->add_option("--report", tr.report_path, "training log output (JSONL)");
    ctrain->add_option("--epochs", tr.train.epochs, "training epochs")->capture_default_str();
    ctrain->add_option("--batch-size", tr.train.batch_size, "queries per batch (Q)")->capture_default_str();
    ctrain->add_option("--lr", tr.train.learning_rate, "learning rate")->capture_default_str();
    ctrain->add_option("--tau", tr.train.loss.tau, "variance gate threshold")->capture_default_str();
    ctrain->add_option("--clip-norm", tr.train.clip_norm, "global gradient clip norm")->capture_default_str();
    ctrain->add_option("--weight-decay", tr.train.weight_decay, "decoupled weight decay")
        ->capture_default_str();
    ctrain->add_option("--window-size", tr.window_size, "candidates per listwise input (M)")
        ->capture_default_str();
    ctrain->add_option("--max-candidate-tokens", tr.max_candidate_tokens, "token cap per candidate block")
        ->capture_default_str();
    ctrain->add_option("--vocab-size", tr.vocab_size, "tokenizer vocabulary size")->capture_default_str();
    ctrain->add_option("--d-model", tr.model.d_model, "hidden width")->capture_default_str();
    ctrain->add_option("--n-layers", tr.model.n_layers, "transformer layers")->capture_default_str();
    ctrain->add_option("--n-heads", tr.model.n_heads, "attention heads")->capture_default_str();
    ctrain->add_option("--d-ff", tr.model.d_ff, "feed-forward width")->capture_default_str();
    ctrain->add_option("--max-position", tr.model.max_position, "maximum layout length")
        ->capture_default_str();
    ctrain->add_option("--dropout", tr.model.dropout, "dropout rate (training forward only)")
        ->capture_default_str();
    ctrain->add_option("--position-scheme", tr.position_scheme, "rotary or learned_absolute")
        ->capture_default_str();
    ctrain->add_option("--precision", tr.precision, "training precision: f64 or f32")->capture_default_str();
    ctrain->add_flag("--no-point-loss", tr.no_point_loss, "disable the point-view loss term");
    ctrain->add_flag("--no-calibration", tr.no_calibration, "disable the self-calibration term");
    ctrain->add_flag("--no-in-batch", tr.no_in_batch, "restrict calibration pairs to intra-query");
    ctrain->add_flag("--no-adaptive", tr.no_adaptive, "apply calibration at every step (ignore the gate)");
    ctrain->add_flag("--exclude-noisy", tr.train.exclude_noisy, "drop examples flagged noisy");

    RerankArgs rr;
    auto* crerank = app.add_subcommand("rerank", "rerank candidate lists with a trained checkpoint");
    crerank->add_option("--data", rr.data_path, "queries with candidates (JSONL)")->required();
    crerank->add_option("--checkpoint", rr.checkpoint_path, "model checkpoint")->required();
    crerank->add_option("--run", rr.run_path, "TREC run output path")->required();
    crerank->add_option("--strategy", rr.strategy, "global_score or sliding_window")->capture_default_str();
    crerank->add_option("--stride", rr.stride, "sliding window stride")->capture_default_str();
    crerank->add_option("--window-size", rr.window_size, "window size M (0 = checkpoint value)")
        ->capture_default_str();
    crerank->add_option("--tag", rr.tag, "run tag")->capture_default_str();
    crerank->add_flag("--use-point-scores", rr.use_point_scores, "rerank with point-view scores");

    EvalArgs ev;
    auto* ceval = app.add_subcommand("eval", "score a run file against qrels");
    ceval->add_option("--run", ev.run_path, "TREC run file")->required();
    ceval->add_option("--qrels", ev.qrels_path, "qrels file")->required();
    ceval->add_option("--report", ev.report_path, "CSV report path");
    ceval->add_option("-k,--k", ev.k, "NDCG cutoff")->capture_default_str();

    BenchArgs bn;
    auto* cbench = app.add_subcommand("bench", "latency and forward-count benchmark");
    cbench->add_option("--data", bn.data_path, "bench queries (JSONL)")->required();
    cbench->add_option("--checkpoint", bn.checkpoint_path, "model checkpoint")->required();
    cbench->add_option("--report", bn.report_path, "CSV output path")->required();
    cbench->add_option("--sizes", bn.sizes, "candidate-set sizes, ascending")->capture_default_str();
    cbench->add_option("--strategies", bn.strategies, "strategies to benchmark")->capture_default_str();
    cbench->add_option("--stride", bn.stride, "sliding window stride")->capture_default_str();
    cbench->add_option("--reps", bn.reps, "repetitions per point (median reported)")->capture_default_str();

    BiasArgs bi;
    auto* cbias = app.add_subcommand("bias", "candidate-order robustness table");
    cbias->add_option("--data", bi.data_path, "eval queries (JSONL)")->required();
    cbias->add_option("--qrels", bi.qrels_path, "qrels file")->required();
    cbias->add_option("--checkpoint", bi.checkpoint_path, "model checkpoint")->required();
    cbias->add_option("--report", bi.report_path, "CSV output path")->required();
    cbias->add_option("--modes", bi.modes, "candidate orders to evaluate")->capture_default_str();
    cbias->add_option("--window-size", bi.window_size, "window size M (0 = checkpoint value)")
        ->capture_default_str();

    // config file values become defaults before parsing (flags still win)
    for (int i = 1; i + 1 < argc; ++i) {
        if (std::string(argv[i]) == "--config") {
            try {
                apply_config(&app, read_config_file(argv[i + 1]));
            } catch (const std::exception& e) {
                std::cerr << "error: " << e.what() << "\n";
                return 2;
            }
            break;
        }
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (app.got_subcommand(cgen)) return run_gen(common, gen);
        if (app.got_subcommand(ctrain)) return run_train(common, tr);
        if (app.got_subcommand(crerank)) return run_rerank(common, rr);
        if (app.got_subcommand(ceval)) return run_eval(ev);
        if (app.got_subcommand(cbench)) return run_bench(common, bn);
        if (app.got_subcommand(cbias)) return run_bias(common, bi);
    } catch (const std::exception& e) {
        const char* stage = app.get_subcommands().empty() ? "calrank" : app.get_subcommands()[0]->get_name().c_str();
        std::cerr << stage << " failed: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

} // namespace cli
} // namespace calrank
