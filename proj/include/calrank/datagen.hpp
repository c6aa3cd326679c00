#pragma once

// Synthetic planted-relevance corpus generator and toy whitespace tokenizer.
//
// A query is a small set of topic words; each candidate carries a controlled
// number of the query's topics plus filler words from a disjoint pool, so
// the oracle relevance of a candidate is exactly its topic-overlap count.
// Permutation labels follow the oracle order with optional adjacent-swap
// noise, standing in for distilled ranking labels.

#include "calrank/evalkit.hpp"
#include "calrank/layout.hpp"
#include "calrank/losses.hpp"
#include "calrank/util.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace calrank {

// ---------------------------------------------------------------------------
// Toy tokenizer
// ---------------------------------------------------------------------------

struct Vocab {
    std::vector<std::string> id_to_token;
    std::unordered_map<std::string, TokenId> token_to_id;
    TokenId unk_id = 0;
    TokenId doc_end_id = 1;
    std::vector<TokenId> identifier_ids;
    std::vector<TokenId> instruction_ids;
    TokenId first_word_id = 0;

    int size() const { return static_cast<int>(id_to_token.size()); }
    int word_count() const { return size() - static_cast<int>(first_word_id); }
    std::string word(int index) const { return id_to_token[static_cast<std::size_t>(first_word_id + index)]; }
};

/// Deterministic vocabulary: <unk>, <doc_end>, M identifier slots, a fixed
/// four-word instruction, then plain words w0..wN up to vocab_size entries.
inline Vocab make_vocab(int vocab_size, int num_slots) {
    Vocab v;
    v.id_to_token.push_back("<unk>");
    v.id_to_token.push_back("<doc_end>");
    for (int k = 0; k < num_slots; ++k) {
        v.identifier_ids.push_back(static_cast<TokenId>(v.id_to_token.size()));
        v.id_to_token.push_back("<id_" + std::to_string(k + 1) + ">");
    }
    for (const char* w : {"rank", "candidates", "for", "query"}) {
        v.instruction_ids.push_back(static_cast<TokenId>(v.id_to_token.size()));
        v.id_to_token.push_back(w);
    }
    v.first_word_id = static_cast<TokenId>(v.id_to_token.size());
    if (vocab_size <= v.size() + 8)
        throw std::invalid_argument("make_vocab: vocab too small for " + std::to_string(num_slots) + " slots");
    int words = vocab_size - v.size();
    for (int i = 0; i < words; ++i) v.id_to_token.push_back("w" + std::to_string(i));
    for (std::size_t i = 0; i < v.id_to_token.size(); ++i)
        v.token_to_id[v.id_to_token[i]] = static_cast<TokenId>(i);
    return v;
}

/// Whitespace split + dictionary lookup; unknown words map to <unk>.
inline std::vector<TokenId> tokenize(const std::string& text, const Vocab& vocab) {
    std::vector<TokenId> out;
    std::istringstream ss(text);
    std::string tok;
    while (ss >> tok) {
        auto it = vocab.token_to_id.find(tok);
        out.push_back(it == vocab.token_to_id.end() ? vocab.unk_id : it->second);
    }
    return out;
}

inline std::string detokenize(const std::vector<TokenId>& ids, const Vocab& vocab) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= vocab.size()) throw std::out_of_range("detokenize: id out of range");
        if (i) out += ' ';
        out += vocab.id_to_token[static_cast<std::size_t>(ids[i])];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Examples
// ---------------------------------------------------------------------------

struct CandidateDoc {
    std::string docid;
    std::string text;
};

struct RankingExample {
    std::string qid;
    std::string query;
    std::vector<CandidateDoc> candidates;
    PermutationLabel permutation;                 // 1 = best
    std::optional<std::vector<int>> relevance;    // oracle grades, when known
    bool noisy = false;

    int slots() const { return static_cast<int>(candidates.size()); }
    void validate() const {
        if (candidates.empty()) throw std::invalid_argument("RankingExample " + qid + ": no candidates");
        if (permutation.slots() != slots())
            throw std::invalid_argument("RankingExample " + qid + ": permutation size mismatch");
        permutation.validate();
        if (relevance && static_cast<int>(relevance->size()) != slots())
            throw std::invalid_argument("RankingExample " + qid + ": relevance size mismatch");
    }
};

inline TokenizedExample tokenize_example(const RankingExample& e, const Vocab& vocab) {
    TokenizedExample out;
    out.query_tokens = tokenize(e.query, vocab);
    for (const auto& c : e.candidates) out.candidate_tokens.push_back(tokenize(c.text, vocab));
    return out;
}

inline LayoutConfig make_layout_config(const Vocab& vocab, int num_slots, int max_candidate_tokens = 16) {
    LayoutConfig c;
    c.instruction_template = vocab.instruction_ids;
    c.max_candidate_tokens = max_candidate_tokens;
    c.num_slots = num_slots;
    c.doc_end_id = vocab.doc_end_id;
    if (static_cast<int>(vocab.identifier_ids.size()) < num_slots)
        throw std::invalid_argument("make_layout_config: vocab has too few identifier slots");
    c.identifier_ids.assign(vocab.identifier_ids.begin(), vocab.identifier_ids.begin() + num_slots);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

struct GenConfig {
    int vocab_size = 2048;
    int topic_pool = 512;                  // leading words reserved as topics
    int topics_per_query = 3;
    std::vector<double> overlap_weights = {0.55, 0.15, 0.15, 0.15}; // P(overlap = 0..3)
    int min_candidate_len = 5;             // content words, <DOC_END> excluded
    int max_candidate_len = 9;
    double label_noise = 0.05;             // adjacent-swap probability
    double noisy_fraction = 0.0;           // fraction flagged noisy with shuffled labels
    int num_slots = 20;                    // M, candidates per training query
    int train_queries = 2000;
    int eval_queries = 200;
    int eval_candidates = 100;             // |C| per evaluation query
    int bench_queries = 1;
    int bench_candidates = 1000;
    std::uint64_t seed = 42;

    void validate() const {
        if (vocab_size < 32 || topic_pool < topics_per_query || topics_per_query < 1)
            throw std::invalid_argument("GenConfig: bad vocabulary/topic sizes");
        if (static_cast<int>(overlap_weights.size()) != topics_per_query + 1)
            throw std::invalid_argument("GenConfig: overlap_weights must have topics_per_query+1 entries");
        if (min_candidate_len < 1 || max_candidate_len < min_candidate_len)
            throw std::invalid_argument("GenConfig: bad candidate length range");
        if (label_noise < 0.0 || label_noise > 1.0 || noisy_fraction < 0.0 || noisy_fraction > 1.0)
            throw std::invalid_argument("GenConfig: noise rates must lie in [0,1]");
        if (num_slots < 1 || train_queries < 0 || eval_queries < 0 || eval_candidates < 1 ||
            bench_queries < 0 || bench_candidates < 1)
            throw std::invalid_argument("GenConfig: non-positive counts");
    }
};

struct GeneratedData {
    std::vector<RankingExample> train;
    std::vector<RankingExample> eval;
    std::vector<RankingExample> bench;
    std::vector<QrelRecord> qrels; // oracle judgments for the eval set
};

namespace detail {

inline int sample_categorical(Rng& rng, const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double r = rng.uniform01() * total;
    double c = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        c += weights[i];
        if (r < c) return static_cast<int>(i);
    }
    return static_cast<int>(weights.size()) - 1;
}

/// Oracle ranks: higher relevance first, ties broken by docid ascending.
inline std::vector<int> oracle_ranks(const std::vector<int>& relevance,
                                     const std::vector<CandidateDoc>& candidates) {
    std::vector<std::size_t> order(relevance.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (relevance[a] != relevance[b]) return relevance[a] > relevance[b];
        return candidates[a].docid < candidates[b].docid;
    });
    std::vector<int> ranks(relevance.size());
    for (std::size_t pos = 0; pos < order.size(); ++pos) ranks[order[pos]] = static_cast<int>(pos) + 1;
    return ranks;
}

inline RankingExample generate_example(Rng& rng, const GenConfig& cfg, const Vocab& vocab,
                                       const std::string& qid, int candidate_count, bool apply_noise) {
    RankingExample e;
    e.qid = qid;

    // distinct query topics
    std::vector<int> topics;
    while (static_cast<int>(topics.size()) < cfg.topics_per_query) {
        int t = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.topic_pool)));
        if (std::find(topics.begin(), topics.end(), t) == topics.end()) topics.push_back(t);
    }
    {
        std::string q;
        for (std::size_t i = 0; i < topics.size(); ++i) {
            if (i) q += ' ';
            q += vocab.word(topics[i]);
        }
        e.query = std::move(q);
    }

    const int filler_base = cfg.topic_pool;
    const int filler_count = vocab.word_count() - cfg.topic_pool;
    if (filler_count < 8) throw std::invalid_argument("generate: vocab too small for requested pools");

    std::vector<int> relevance;
    int digits = std::to_string(std::max(1, candidate_count - 1)).size() < 3
                     ? 3
                     : static_cast<int>(std::to_string(candidate_count - 1).size());
    for (int c = 0; c < candidate_count; ++c) {
        int overlap = std::min(sample_categorical(rng, cfg.overlap_weights), cfg.topics_per_query);
        int len = static_cast<int>(rng.range(cfg.min_candidate_len, cfg.max_candidate_len));
        if (len < overlap) len = overlap;
        std::vector<int> chosen(topics);
        rng.shuffle(chosen);
        chosen.resize(static_cast<std::size_t>(overlap));
        std::vector<std::string> words;
        for (int t : chosen) words.push_back(vocab.word(t));
        for (int i = overlap; i < len; ++i)
            words.push_back(vocab.word(filler_base + static_cast<int>(rng.below(static_cast<std::uint64_t>(filler_count)))));
        rng.shuffle(words);
        std::string text;
        for (std::size_t i = 0; i < words.size(); ++i) {
            if (i) text += ' ';
            text += words[i];
        }
        char buf[32];
        std::snprintf(buf, sizeof(buf), "d%0*d", digits, c);
        e.candidates.push_back({buf, std::move(text)});
        relevance.push_back(overlap);
    }

    auto ranks = oracle_ranks(relevance, e.candidates);
    if (apply_noise && cfg.label_noise > 0.0) {
        // one left-to-right pass of adjacent swaps over the ranked order
        std::vector<std::size_t> order(ranks.size());
        for (std::size_t i = 0; i < ranks.size(); ++i) order[static_cast<std::size_t>(ranks[i]) - 1] = i;
        for (std::size_t pos = 0; pos + 1 < order.size(); ++pos)
            if (rng.uniform01() < cfg.label_noise) std::swap(order[pos], order[pos + 1]);
        for (std::size_t pos = 0; pos < order.size(); ++pos) ranks[order[pos]] = static_cast<int>(pos) + 1;
    }
    e.permutation.ranks = std::move(ranks);
    e.relevance = std::move(relevance);

    if (apply_noise && cfg.noisy_fraction > 0.0 && rng.uniform01() < cfg.noisy_fraction) {
        e.noisy = true;
        std::vector<int> shuffled(e.permutation.ranks.size());
        for (std::size_t i = 0; i < shuffled.size(); ++i) shuffled[i] = static_cast<int>(i) + 1;
        rng.shuffle(shuffled);
        e.permutation.ranks = std::move(shuffled);
    }
    e.validate();
    return e;
}

} // namespace detail

/// Deterministic per seed: train set (M candidates each, noisy labels), eval
/// set (|C| candidates each, oracle labels) with oracle qrels, and a bench
/// set with large candidate lists.
inline GeneratedData generate(const GenConfig& cfg) {
    cfg.validate();
    Vocab vocab = make_vocab(cfg.vocab_size, cfg.num_slots);
    if (vocab.word_count() <= cfg.topic_pool + 8)
        throw std::invalid_argument("generate: vocab too small for requested pools");

    GeneratedData out;
    for (int i = 0; i < cfg.train_queries; ++i) {
        Rng rng(sub_seed(cfg.seed, "gen/train/" + std::to_string(i)));
        out.train.push_back(
            detail::generate_example(rng, cfg, vocab, "tq" + std::to_string(i), cfg.num_slots, true));
    }
    for (int i = 0; i < cfg.eval_queries; ++i) {
        Rng rng(sub_seed(cfg.seed, "gen/eval/" + std::to_string(i)));
        auto e = detail::generate_example(rng, cfg, vocab, "eq" + std::to_string(i), cfg.eval_candidates, false);
        for (int c = 0; c < e.slots(); ++c)
            out.qrels.push_back({e.qid, e.candidates[static_cast<std::size_t>(c)].docid,
                                 (*e.relevance)[static_cast<std::size_t>(c)]});
        out.eval.push_back(std::move(e));
    }
    for (int i = 0; i < cfg.bench_queries; ++i) {
        Rng rng(sub_seed(cfg.seed, "gen/bench/" + std::to_string(i)));
        out.bench.push_back(
            detail::generate_example(rng, cfg, vocab, "bq" + std::to_string(i), cfg.bench_candidates, false));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Line-delimited JSON example files
// ---------------------------------------------------------------------------

inline nlohmann::json example_to_json(const RankingExample& e) {
    nlohmann::json j;
    j["qid"] = e.qid;
    j["query"] = e.query;
    auto cands = nlohmann::json::array();
    for (const auto& c : e.candidates) cands.push_back({{"docid", c.docid}, {"text", c.text}});
    j["candidates"] = std::move(cands);
    j["permutation"] = e.permutation.ranks;
    if (e.relevance) j["relevance"] = *e.relevance;
    if (e.noisy) j["noisy"] = true;
    return j;
}

inline RankingExample example_from_json(const nlohmann::json& j) {
    RankingExample e;
    e.qid = j.at("qid").get<std::string>();
    e.query = j.at("query").get<std::string>();
    for (const auto& c : j.at("candidates"))
        e.candidates.push_back({c.at("docid").get<std::string>(), c.at("text").get<std::string>()});
    e.permutation.ranks = j.at("permutation").get<std::vector<int>>();
    if (j.contains("relevance")) e.relevance = j.at("relevance").get<std::vector<int>>();
    if (j.contains("noisy")) e.noisy = j.at("noisy").get<bool>();
    e.validate();
    return e;
}

inline void write_examples(const std::string& path, const std::vector<RankingExample>& examples) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_examples: cannot open " + path);
    for (const auto& e : examples) {
        e.validate();
        f << example_to_json(e).dump() << "\n";
    }
    if (!f.good()) throw std::runtime_error("write_examples: write failed");
}

inline std::vector<RankingExample> read_examples(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("read_examples: cannot open " + path);
    std::vector<RankingExample> out;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(example_from_json(nlohmann::json::parse(line)));
        } catch (const std::exception& e) {
            throw std::runtime_error("read_examples: line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

} // namespace calrank
