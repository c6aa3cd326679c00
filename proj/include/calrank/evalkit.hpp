#pragma once

// Ranking-quality metrics (NDCG@k, Kendall tau) and TREC-format run/qrels
// file I/O.
//
// NDCG uses linear gain rel_i / log2(i+1), matching the trec_eval ndcg_cut
// convention; queries without a positive judgment score 0 and are counted.
// Kendall tau is the tau-a variant over strict permutations.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace calrank {

struct QrelRecord {
    std::string qid;
    std::string docid;
    int relevance = 0;
};

struct RunRecord {
    std::string qid;
    std::string docid;
    int rank = 0; // 1-based
    double score = 0.0;
    std::string tag;
};

namespace detail {

inline void check_run_group(const std::vector<RunRecord>& run) {
    for (std::size_t i = 0; i < run.size(); ++i) {
        if (run[i].rank != static_cast<int>(i) + 1)
            throw std::invalid_argument("run for query " + run[i].qid + ": rank gap at position " +
                                        std::to_string(i + 1));
        if (i > 0 && run[i].score > run[i - 1].score)
            throw std::invalid_argument("run for query " + run[i].qid + ": scores increase at rank " +
                                        std::to_string(i + 1));
    }
}

} // namespace detail

/// NDCG@k for one query's run (ordered by rank) against its judgments.
/// Returns 0 when the query has no positive judgment.
inline double ndcg_at_k(const std::vector<RunRecord>& run, const std::vector<QrelRecord>& qrels, int k) {
    if (k < 1) throw std::invalid_argument("ndcg_at_k: k must be >= 1");
    detail::check_run_group(run);
    std::unordered_map<std::string, int> rel;
    std::vector<int> judged;
    for (const auto& q : qrels) {
        if (q.relevance < 0) throw std::invalid_argument("ndcg_at_k: negative relevance");
        rel[q.docid] = q.relevance;
        judged.push_back(q.relevance);
    }
    std::sort(judged.begin(), judged.end(), std::greater<int>());
    double idcg = 0.0;
    for (int i = 0; i < k && i < static_cast<int>(judged.size()); ++i)
        idcg += judged[static_cast<std::size_t>(i)] / std::log2(i + 2.0);
    if (idcg == 0.0) return 0.0;
    double dcg = 0.0;
    for (int i = 0; i < k && i < static_cast<int>(run.size()); ++i) {
        auto it = rel.find(run[static_cast<std::size_t>(i)].docid);
        if (it != rel.end()) dcg += it->second / std::log2(i + 2.0);
    }
    return dcg / idcg;
}

/// Kendall tau-a between two strict orders over the same id set:
/// (concordant - discordant) / C(n,2).
inline double kendall_tau(const std::vector<std::string>& order_a, const std::vector<std::string>& order_b) {
    const std::size_t n = order_a.size();
    if (n < 2) throw std::invalid_argument("kendall_tau: need at least two items");
    if (order_b.size() != n) throw std::invalid_argument("kendall_tau: size mismatch");
    std::unordered_map<std::string, std::size_t> pos_b;
    for (std::size_t i = 0; i < n; ++i)
        if (!pos_b.emplace(order_b[i], i).second)
            throw std::invalid_argument("kendall_tau: duplicate id in second order");
    std::vector<std::size_t> mapped;
    mapped.reserve(n);
    std::set<std::string> seen;
    for (const auto& id : order_a) {
        auto it = pos_b.find(id);
        if (it == pos_b.end() || !seen.insert(id).second)
            throw std::invalid_argument("kendall_tau: orders are not permutations of the same ids");
        mapped.push_back(it->second);
    }
    long long concordant = 0, discordant = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            (mapped[i] < mapped[j] ? concordant : discordant)++;
    return static_cast<double>(concordant - discordant) / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
}

// ---------------------------------------------------------------------------
// File formats:  qrels `qid 0 docid rel`,  run `qid Q0 docid rank score tag`
// ---------------------------------------------------------------------------

inline std::vector<QrelRecord> read_qrels(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("read_qrels: cannot open " + path);
    std::vector<QrelRecord> out;
    std::set<std::pair<std::string, std::string>> seen;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        QrelRecord r;
        std::string zero, extra;
        if (!(ss >> r.qid >> zero >> r.docid >> r.relevance) || (ss >> extra))
            throw std::runtime_error("read_qrels: malformed line " + std::to_string(lineno));
        if (r.relevance < 0)
            throw std::runtime_error("read_qrels: negative relevance at line " + std::to_string(lineno));
        if (!seen.insert({r.qid, r.docid}).second)
            throw std::runtime_error("read_qrels: duplicate (qid, docid) at line " + std::to_string(lineno));
        out.push_back(std::move(r));
    }
    return out;
}

inline void write_qrels(const std::string& path, const std::vector<QrelRecord>& records) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_qrels: cannot open " + path);
    for (const auto& r : records) {
        if (r.relevance < 0) throw std::invalid_argument("write_qrels: negative relevance");
        f << r.qid << " 0 " << r.docid << " " << r.relevance << "\n";
    }
    if (!f.good()) throw std::runtime_error("write_qrels: write failed");
}

inline std::string format_score(double score) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", score);
    return buf;
}

inline void write_run(const std::string& path, const std::vector<RunRecord>& records) {
    // validate per-query groups before touching the file
    std::map<std::string, std::vector<RunRecord>> grouped;
    for (const auto& r : records) grouped[r.qid].push_back(r);
    for (auto& [qid, group] : grouped) {
        std::sort(group.begin(), group.end(), [](const RunRecord& a, const RunRecord& b) { return a.rank < b.rank; });
        detail::check_run_group(group);
    }
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_run: cannot open " + path);
    for (const auto& r : records)
        f << r.qid << " Q0 " << r.docid << " " << r.rank << " " << format_score(r.score) << " " << r.tag << "\n";
    if (!f.good()) throw std::runtime_error("write_run: write failed");
}

inline std::vector<RunRecord> read_run(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("read_run: cannot open " + path);
    std::vector<RunRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        RunRecord r;
        std::string q0, extra;
        if (!(ss >> r.qid >> q0 >> r.docid >> r.rank >> r.score >> r.tag) || (ss >> extra))
            throw std::runtime_error("read_run: malformed line " + std::to_string(lineno));
        if (q0 != "Q0") throw std::runtime_error("read_run: expected Q0 at line " + std::to_string(lineno));
        if (r.rank < 1) throw std::runtime_error("read_run: bad rank at line " + std::to_string(lineno));
        out.push_back(std::move(r));
    }
    // group-level invariants
    std::map<std::string, std::vector<RunRecord>> grouped;
    for (const auto& r : out) grouped[r.qid].push_back(r);
    for (auto& [qid, group] : grouped) {
        std::sort(group.begin(), group.end(), [](const RunRecord& a, const RunRecord& b) { return a.rank < b.rank; });
        detail::check_run_group(group);
    }
    return out;
}

/// Group run records by query id, each group ordered by rank. Preserves
/// first-appearance query order.
inline std::vector<std::vector<RunRecord>> group_run_by_query(const std::vector<RunRecord>& records) {
    std::vector<std::vector<RunRecord>> out;
    std::unordered_map<std::string, std::size_t> index;
    for (const auto& r : records) {
        auto [it, fresh] = index.emplace(r.qid, out.size());
        if (fresh) out.emplace_back();
        out[it->second].push_back(r);
    }
    for (auto& group : out)
        std::sort(group.begin(), group.end(), [](const RunRecord& a, const RunRecord& b) { return a.rank < b.rank; });
    return out;
}

inline std::vector<QrelRecord> qrels_for_query(const std::vector<QrelRecord>& qrels, const std::string& qid) {
    std::vector<QrelRecord> out;
    for (const auto& q : qrels)
        if (q.qid == qid) out.push_back(q);
    return out;
}

/// Mean NDCG@k over the queries present in the run.
inline double mean_ndcg_at_k(const std::vector<RunRecord>& run, const std::vector<QrelRecord>& qrels, int k) {
    auto groups = group_run_by_query(run);
    if (groups.empty()) throw std::invalid_argument("mean_ndcg_at_k: empty run");
    double acc = 0.0;
    for (const auto& g : groups) acc += ndcg_at_k(g, qrels_for_query(qrels, g.front().qid), k);
    return acc / static_cast<double>(groups.size());
}

} // namespace calrank
