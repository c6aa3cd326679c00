#pragma once

// Global reranking: partition the candidate set into ceil(|C|/M) windows,
// score each window once, and sort by the globally comparable scores.
// A sliding-window baseline and a latency/forward-count benchmark sit
// alongside for the local-vs-global comparison, plus the candidate-order
// position-bias harness.

#include "calrank/datagen.hpp"
#include "calrank/evalkit.hpp"
#include "calrank/model.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace calrank {

enum class RerankStrategy { GlobalScore, SlidingWindow };
enum class ScoreView { List, Point };

inline std::string to_string(RerankStrategy s) {
    return s == RerankStrategy::GlobalScore ? "global_score" : "sliding_window";
}
inline RerankStrategy strategy_from_string(const std::string& s) {
    if (s == "global_score") return RerankStrategy::GlobalScore;
    if (s == "sliding_window") return RerankStrategy::SlidingWindow;
    throw std::invalid_argument("unknown strategy: " + s);
}

struct RerankRequest {
    std::string qid = "q";
    std::string query;
    std::vector<CandidateDoc> candidates;
    int window_size = 20; // M
    RerankStrategy strategy = RerankStrategy::GlobalScore;
    int stride = 10;      // sliding window only
    ScoreView score_view = ScoreView::List;
    unsigned threads = 0;

    void validate() const {
        if (candidates.empty()) throw std::invalid_argument("rerank: empty candidate list");
        if (window_size < 1) throw std::invalid_argument("rerank: window size must be >= 1");
        if (strategy == RerankStrategy::SlidingWindow && (stride < 1 || stride > window_size))
            throw std::invalid_argument("rerank: stride must lie in [1, window_size]");
    }
};

struct RerankResult {
    std::vector<std::string> ordered_ids;
    std::vector<double> scores; // aligned with ordered_ids
    int forward_count = 0;
    double latency_ms = 0.0;
};

namespace detail {

inline const std::string kPadText = "<null>"; // tokenizes to <unk>; padded scores are discarded

/// Score the given candidate indices as one window (padded to M slots).
/// Returns one score per real candidate in window order.
inline std::vector<double> score_window(const Parameters& params, const LayoutConfig& lcfg,
                                        const Vocab& vocab, const std::string& query,
                                        const std::vector<CandidateDoc>& candidates,
                                        const std::vector<std::size_t>& window, ScoreView view) {
    TokenizedExample ex;
    ex.query_tokens = tokenize(query, vocab);
    for (auto i : window) ex.candidate_tokens.push_back(tokenize(candidates[i].text, vocab));
    for (std::size_t k = window.size(); k < static_cast<std::size_t>(lcfg.num_slots); ++k)
        ex.candidate_tokens.push_back(tokenize(kPadText, vocab));
    NoGradGuard ng;
    auto bundle = forward(params, build_layout(ex, lcfg));
    const auto& s = view == ScoreView::List ? bundle.ls.values() : bundle.ps.values();
    return std::vector<double>(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(window.size()));
}

inline std::vector<std::vector<std::size_t>> partition_windows(std::size_t n, std::size_t m) {
    std::vector<std::vector<std::size_t>> windows;
    for (std::size_t start = 0; start < n; start += m) {
        std::vector<std::size_t> w;
        for (std::size_t i = start; i < std::min(n, start + m); ++i) w.push_back(i);
        windows.push_back(std::move(w));
    }
    return windows;
}

} // namespace detail

/// global_score strategy: one forward per window, every candidate scored
/// exactly once, result sorted by score descending with ties broken by the
/// original (retriever) order.
inline RerankResult score_all(const Parameters& params, const LayoutConfig& lcfg, const Vocab& vocab,
                              const RerankRequest& request) {
    request.validate();
    if (request.strategy != RerankStrategy::GlobalScore)
        throw std::invalid_argument("score_all: request strategy is not global_score");
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t n = request.candidates.size();
    auto windows = detail::partition_windows(n, static_cast<std::size_t>(request.window_size));

    std::vector<double> score(n);
    std::vector<std::exception_ptr> errors(windows.size());
    parallel_for(windows.size(), [&](std::size_t b, std::size_t e) {
        for (std::size_t w = b; w < e; ++w) {
            try {
                auto s = detail::score_window(params, lcfg, vocab, request.query, request.candidates,
                                              windows[w], request.score_view);
                for (std::size_t i = 0; i < windows[w].size(); ++i) score[windows[w][i]] = s[i];
            } catch (...) {
                errors[w] = std::current_exception();
            }
        }
    }, request.threads);
    for (std::size_t w = 0; w < errors.size(); ++w) {
        if (errors[w]) {
            try {
                std::rethrow_exception(errors[w]);
            } catch (const std::exception& e) {
                throw std::runtime_error("score_all: window " + std::to_string(w) + ": " + e.what());
            }
        }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });

    RerankResult out;
    for (auto i : order) {
        out.ordered_ids.push_back(request.candidates[i].docid);
        out.scores.push_back(score[i]);
    }
    out.forward_count = static_cast<int>(windows.size());
    out.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

/// Sliding-window baseline: back-to-front passes reorder the window's
/// candidates by their within-window scores, then the window shifts by
/// `stride`. Forward count: floor((|C|-M)/stride) + 1 for |C| > M, else 1.
/// Emitted scores are synthetic rank scores (the passes produce only an
/// order).
inline RerankResult sliding_window_rerank(const Parameters& params, const LayoutConfig& lcfg,
                                          const Vocab& vocab, const RerankRequest& request) {
    request.validate();
    if (request.strategy != RerankStrategy::SlidingWindow)
        throw std::invalid_argument("sliding_window_rerank: request strategy is not sliding_window");
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t n = request.candidates.size();
    const auto m = static_cast<std::size_t>(request.window_size);

    std::vector<std::size_t> working(n);
    std::iota(working.begin(), working.end(), 0);
    int forwards = 0;

    auto rerank_span = [&](std::size_t start, std::size_t len) {
        std::vector<std::size_t> window(working.begin() + static_cast<std::ptrdiff_t>(start),
                                        working.begin() + static_cast<std::ptrdiff_t>(start + len));
        auto s = detail::score_window(params, lcfg, vocab, request.query, request.candidates, window,
                                      request.score_view);
        ++forwards;
        std::vector<std::size_t> idx(window.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
        for (std::size_t i = 0; i < idx.size(); ++i)
            working[start + i] = window[idx[i]];
    };

    if (n <= m) {
        rerank_span(0, n);
    } else {
        const auto stride = static_cast<std::size_t>(request.stride);
        const std::size_t passes = (n - m) / stride + 1;
        for (std::size_t p = 0; p < passes; ++p) rerank_span(n - m - p * stride, m);
    }

    RerankResult out;
    for (std::size_t r = 0; r < working.size(); ++r) {
        out.ordered_ids.push_back(request.candidates[working[r]].docid);
        out.scores.push_back(static_cast<double>(n - r)); // rank-derived, non-increasing
    }
    out.forward_count = forwards;
    out.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

inline RerankResult rerank(const Parameters& params, const LayoutConfig& lcfg, const Vocab& vocab,
                           const RerankRequest& request) {
    return request.strategy == RerankStrategy::GlobalScore ? score_all(params, lcfg, vocab, request)
                                                           : sliding_window_rerank(params, lcfg, vocab, request);
}

inline std::vector<RunRecord> to_run_records(const std::string& qid, const RerankResult& result,
                                             const std::string& tag) {
    std::vector<RunRecord> out;
    for (std::size_t i = 0; i < result.ordered_ids.size(); ++i)
        out.push_back({qid, result.ordered_ids[i], static_cast<int>(i) + 1, result.scores[i], tag});
    return out;
}

// ---------------------------------------------------------------------------
// Latency / forward-count benchmark
// ---------------------------------------------------------------------------

struct BenchRow {
    std::string strategy;
    int num_candidates = 0;
    int forwards = 0;
    double latency_ms = 0.0;
};

/// Reranks the leading |C| candidates for each requested size and strategy;
/// latency is the median over `reps` repetitions.
inline std::vector<BenchRow> latency_bench(const Parameters& params, const LayoutConfig& lcfg,
                                           const Vocab& vocab, const std::string& query,
                                           const std::vector<CandidateDoc>& candidates,
                                           const std::vector<int>& sizes,
                                           const std::vector<RerankStrategy>& strategies, int stride = 10,
                                           int reps = 3, unsigned threads = 0) {
    for (std::size_t i = 1; i < sizes.size(); ++i)
        if (sizes[i] < sizes[i - 1]) throw std::invalid_argument("latency_bench: sizes must be ascending");
    if (reps < 1) throw std::invalid_argument("latency_bench: reps must be >= 1");
    std::vector<BenchRow> rows;
    for (auto strategy : strategies) {
        for (int size : sizes) {
            if (size < 1 || static_cast<std::size_t>(size) > candidates.size())
                throw std::invalid_argument("latency_bench: size " + std::to_string(size) +
                                            " exceeds candidate pool");
            RerankRequest req;
            req.query = query;
            req.candidates.assign(candidates.begin(), candidates.begin() + size);
            req.window_size = lcfg.num_slots;
            req.strategy = strategy;
            req.stride = stride;
            req.threads = threads;
            std::vector<double> lat;
            int forwards = 0;
            for (int r = 0; r < reps; ++r) {
                auto res = rerank(params, lcfg, vocab, req);
                lat.push_back(res.latency_ms);
                forwards = res.forward_count;
            }
            std::sort(lat.begin(), lat.end());
            rows.push_back({to_string(strategy), size, forwards, lat[lat.size() / 2]});
        }
    }
    return rows;
}

inline void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_bench_csv: cannot open " + path);
    f << "strategy,num_candidates,forwards,latency_ms\n";
    for (const auto& r : rows)
        f << r.strategy << "," << r.num_candidates << "," << r.forwards << "," << format_score(r.latency_ms)
          << "\n";
    if (!f.good()) throw std::runtime_error("write_bench_csv: write failed");
}

// ---------------------------------------------------------------------------
// Position-bias harness: rerank under original / reversed / random candidate
// orders and compare
// ---------------------------------------------------------------------------

enum class CandidateOrder { Original, Reversed, Random };

inline std::string to_string(CandidateOrder m) {
    switch (m) {
        case CandidateOrder::Original: return "original";
        case CandidateOrder::Reversed: return "reversed";
        default: return "random";
    }
}

struct BiasModeResult {
    std::string mode;
    double mean_ndcg = 0.0;
    int queries = 0;
    std::vector<std::vector<std::string>> orderings; // per query, ranked doc ids
};

struct BiasReport {
    std::vector<BiasModeResult> modes;
    /// Largest |rank(doc, mode a) - rank(doc, mode b)| over all queries,
    /// docs and mode pairs. Zero means every mode ranked every query
    /// identically.
    int max_rank_disagreement = 0;
};

inline BiasReport position_bias_experiment(const Parameters& params, const LayoutConfig& lcfg,
                                           const Vocab& vocab, const std::vector<RankingExample>& eval_set,
                                           const std::vector<QrelRecord>& qrels,
                                           const std::vector<CandidateOrder>& modes, std::uint64_t seed,
                                           int window_size = 0, unsigned threads = 0) {
    if (eval_set.empty()) throw std::invalid_argument("position_bias_experiment: empty eval set");
    BiasReport report;
    for (auto mode : modes) {
        BiasModeResult mr;
        mr.mode = to_string(mode);
        double acc = 0.0;
        for (std::size_t qi = 0; qi < eval_set.size(); ++qi) {
            const auto& e = eval_set[qi];
            RerankRequest req;
            req.qid = e.qid;
            req.query = e.query;
            req.candidates = e.candidates;
            if (mode == CandidateOrder::Reversed) {
                std::reverse(req.candidates.begin(), req.candidates.end());
            } else if (mode == CandidateOrder::Random) {
                Rng rng(sub_seed(seed, "bias/" + e.qid));
                rng.shuffle(req.candidates);
            }
            req.window_size = window_size > 0 ? window_size : lcfg.num_slots;
            req.threads = threads;
            auto res = score_all(params, lcfg, vocab, req);
            acc += ndcg_at_k(to_run_records(e.qid, res, "bias"), qrels_for_query(qrels, e.qid), 10);
            mr.orderings.push_back(res.ordered_ids);
        }
        mr.queries = static_cast<int>(eval_set.size());
        mr.mean_ndcg = acc / static_cast<double>(eval_set.size());
        report.modes.push_back(std::move(mr));
    }
    for (std::size_t a = 0; a < report.modes.size(); ++a) {
        for (std::size_t b = a + 1; b < report.modes.size(); ++b) {
            for (std::size_t q = 0; q < report.modes[a].orderings.size(); ++q) {
                const auto& oa = report.modes[a].orderings[q];
                const auto& ob = report.modes[b].orderings[q];
                std::unordered_map<std::string, int> rank_b;
                for (std::size_t i = 0; i < ob.size(); ++i) rank_b[ob[i]] = static_cast<int>(i);
                for (std::size_t i = 0; i < oa.size(); ++i) {
                    int d = std::abs(static_cast<int>(i) - rank_b.at(oa[i]));
                    report.max_rank_disagreement = std::max(report.max_rank_disagreement, d);
                }
            }
        }
    }
    return report;
}

inline void write_bias_csv(const std::string& path, const BiasReport& report) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_bias_csv: cannot open " + path);
    f << "mode,mean_ndcg@10,queries\n";
    for (const auto& m : report.modes)
        f << m.mode << "," << format_score(m.mean_ndcg) << "," << m.queries << "\n";
    if (!f.good()) throw std::runtime_error("write_bias_csv: write failed");
}

} // namespace calrank
