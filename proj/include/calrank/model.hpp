#pragma once

// Decoder-only transformer over a SequenceLayout with two scalar heads:
// list-view scores read at the identifier tokens and point-view scores read
// at the <DOC_END> tokens.
//
// Pre-norm blocks, rotary positions by default (angles taken from the
// layout's explicit per-token position indices), learned absolute positions
// selectable for ablation. All identifier tokens are embedded through one
// shared anchor row so that a score depends on which candidate the
// identifier is bound to, never on the slot it occupies.

#include "calrank/autodiff.hpp"
#include "calrank/layout.hpp"
#include "calrank/scores.hpp"
#include "calrank/util.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace calrank {

enum class PositionScheme { Rotary, LearnedAbsolute };

inline std::string to_string(PositionScheme s) {
    return s == PositionScheme::Rotary ? "rotary" : "learned_absolute";
}
inline PositionScheme position_scheme_from_string(const std::string& s) {
    if (s == "rotary") return PositionScheme::Rotary;
    if (s == "learned_absolute") return PositionScheme::LearnedAbsolute;
    throw std::invalid_argument("unknown position scheme: " + s);
}

struct ModelConfig {
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int d_ff = 256;
    int vocab_size = 2048;
    PositionScheme position_scheme = PositionScheme::Rotary;
    int max_position = 512;
    double dropout = 0.0;
    std::uint64_t seed = 42;
    std::string precision = "f64"; // f64 (default) or f32

    void validate() const {
        if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 2 || max_position < 1)
            throw std::invalid_argument("ModelConfig: non-positive dimension");
        if (d_model % n_heads != 0)
            throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
        if ((d_model / n_heads) % 2 != 0 && position_scheme == PositionScheme::Rotary)
            throw std::invalid_argument("ModelConfig: rotary needs an even head width");
        if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("ModelConfig: dropout out of range");
        if (precision != "f64" && precision != "f32")
            throw std::invalid_argument("ModelConfig: precision must be f64 or f32");
    }
};

template <typename S>
struct LayerParamsT {
    TensorT<S> ln1_gain, ln1_bias;
    TensorT<S> wq, bq, wk, bk, wv, bv, wo, bo;
    TensorT<S> ln2_gain, ln2_bias;
    TensorT<S> w1, b1, w2, b2;
};

template <typename S>
struct ParametersT {
    ModelConfig config;
    TensorT<S> token_embedding;              // [vocab, d]
    TensorT<S> position_embedding;           // [max_position, d], learned-absolute only
    std::vector<LayerParamsT<S>> layers;
    TensorT<S> final_gain, final_bias;
    TensorT<S> list_w, list_b;               // d -> 1 affine
    TensorT<S> point_w, point_b;             // d -> 1 affine, distinct parameters

    void for_each(const std::function<void(const std::string&, TensorT<S>&)>& fn) {
        fn("token_embedding", token_embedding);
        if (config.position_scheme == PositionScheme::LearnedAbsolute)
            fn("position_embedding", position_embedding);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            auto& L = layers[l];
            const std::string p = "layer" + std::to_string(l) + ".";
            fn(p + "ln1.gain", L.ln1_gain);
            fn(p + "ln1.bias", L.ln1_bias);
            fn(p + "attn.wq", L.wq);
            fn(p + "attn.bq", L.bq);
            fn(p + "attn.wk", L.wk);
            fn(p + "attn.bk", L.bk);
            fn(p + "attn.wv", L.wv);
            fn(p + "attn.bv", L.bv);
            fn(p + "attn.wo", L.wo);
            fn(p + "attn.bo", L.bo);
            fn(p + "ln2.gain", L.ln2_gain);
            fn(p + "ln2.bias", L.ln2_bias);
            fn(p + "ffn.w1", L.w1);
            fn(p + "ffn.b1", L.b1);
            fn(p + "ffn.w2", L.w2);
            fn(p + "ffn.b2", L.b2);
        }
        fn("final_ln.gain", final_gain);
        fn("final_ln.bias", final_bias);
        fn("list_head.w", list_w);
        fn("list_head.b", list_b);
        fn("point_head.w", point_w);
        fn("point_head.b", point_b);
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        for_each([&n](const std::string&, TensorT<S>& t) { n += t.numel(); });
        return n;
    }
};

using Parameters = ParametersT<double>;

/// Closed-form parameter count for a config (kept in sync with for_each):
///   V*d [+ maxpos*d if learned-absolute]
///   + n_layers * (4d + 4*(d^2+d) + 2*d*d_ff + d_ff + d)
///   + 2d + 2*(d+1)
inline std::size_t expected_parameter_count(const ModelConfig& c) {
    auto d = static_cast<std::size_t>(c.d_model);
    auto ff = static_cast<std::size_t>(c.d_ff);
    std::size_t n = static_cast<std::size_t>(c.vocab_size) * d;
    if (c.position_scheme == PositionScheme::LearnedAbsolute)
        n += static_cast<std::size_t>(c.max_position) * d;
    n += static_cast<std::size_t>(c.n_layers) * (4 * d + 4 * (d * d + d) + 2 * d * ff + ff + d);
    n += 2 * d;       // final layer norm
    n += 2 * (d + 1); // the two heads
    return n;
}

/// Deterministic initialisation: N(0, 0.02) weights, residual projections
/// (attn.wo, ffn.w2) scaled by 1/sqrt(2*n_layers), zero biases, unit norm
/// gains, zero-bias heads.
template <typename S = double>
ParametersT<S> init_params(const ModelConfig& config) {
    config.validate();
    Rng rng(sub_seed(config.seed, "init"));
    const auto d = static_cast<std::int64_t>(config.d_model);
    const auto ff = static_cast<std::int64_t>(config.d_ff);
    const double base_std = 0.02;
    const double resid_std = base_std / std::sqrt(2.0 * config.n_layers);

    auto normal = [&rng](std::vector<std::int64_t> shape, double sd) {
        std::size_t n = 1;
        for (auto x : shape) n *= static_cast<std::size_t>(x);
        std::vector<S> v(n);
        for (auto& x : v) x = static_cast<S>(rng.normal(0.0, sd));
        return TensorT<S>::from(std::move(shape), std::move(v), true);
    };
    auto fill = [](std::vector<std::int64_t> shape, S value) {
        std::size_t n = 1;
        for (auto x : shape) n *= static_cast<std::size_t>(x);
        return TensorT<S>::from(std::move(shape), std::vector<S>(n, value), true);
    };

    ParametersT<S> p;
    p.config = config;
    p.token_embedding = normal({config.vocab_size, d}, base_std);
    if (config.position_scheme == PositionScheme::LearnedAbsolute)
        p.position_embedding = normal({config.max_position, d}, base_std);
    for (int l = 0; l < config.n_layers; ++l) {
        LayerParamsT<S> L;
        L.ln1_gain = fill({d}, S(1));
        L.ln1_bias = fill({d}, S(0));
        L.wq = normal({d, d}, base_std);
        L.bq = fill({d}, S(0));
        L.wk = normal({d, d}, base_std);
        L.bk = fill({d}, S(0));
        L.wv = normal({d, d}, base_std);
        L.bv = fill({d}, S(0));
        L.wo = normal({d, d}, resid_std);
        L.bo = fill({d}, S(0));
        L.ln2_gain = fill({d}, S(1));
        L.ln2_bias = fill({d}, S(0));
        L.w1 = normal({d, ff}, base_std);
        L.b1 = fill({ff}, S(0));
        L.w2 = normal({ff, d}, resid_std);
        L.b2 = fill({d}, S(0));
        p.layers.push_back(std::move(L));
    }
    p.final_gain = fill({d}, S(1));
    p.final_bias = fill({d}, S(0));
    p.list_w = normal({d, 1}, base_std);
    p.list_b = fill({1}, S(0));
    p.point_w = normal({d, 1}, base_std);
    p.point_b = fill({1}, S(0));
    return p;
}

struct ForwardOptions {
    bool train_mode = false;       // enables dropout when config.dropout > 0
    std::uint64_t dropout_seed = 0;
};

template <typename S>
ScoreBundleT<S> forward(const ParametersT<S>& params, const SequenceLayout& layout,
                        const ForwardOptions& opts = {}) {
    const ModelConfig& cfg = params.config;
    const auto len = static_cast<std::int64_t>(layout.size());
    if (len == 0) throw std::invalid_argument("forward: empty layout");
    if (len > cfg.max_position)
        throw std::invalid_argument("forward: layout length " + std::to_string(len) +
                                    " exceeds max_position " + std::to_string(cfg.max_position));
    const int m = layout.slots();
    const auto d = static_cast<std::int64_t>(cfg.d_model);
    const auto hd = d / cfg.n_heads;
    const S ln_eps = static_cast<S>(1e-5);

    // All identifier slots share one anchor embedding row: slot identity must
    // not reach the scores.
    std::vector<std::int64_t> ids(layout.tokens.begin(), layout.tokens.end());
    const std::int64_t anchor = layout.tokens[static_cast<std::size_t>(layout.idx_id[0])];
    for (auto i : layout.idx_id) ids[static_cast<std::size_t>(i)] = anchor;
    for (auto t : ids)
        if (t < 0 || t >= cfg.vocab_size)
            throw std::out_of_range("forward: token id " + std::to_string(t) + " outside vocab");

    auto h = gather_rows(params.token_embedding, ids);
    if (cfg.position_scheme == PositionScheme::LearnedAbsolute)
        h = add(h, gather_rows(params.position_embedding, layout.positions));

    Rng drop_rng(opts.dropout_seed);
    const bool use_dropout = opts.train_mode && cfg.dropout > 0.0;
    auto maybe_dropout = [&](TensorT<S> x) {
        if (!use_dropout) return x;
        std::vector<S> mask(x.numel());
        const S keep_inv = static_cast<S>(1.0 / (1.0 - cfg.dropout));
        for (auto& v : mask) v = drop_rng.uniform01() < cfg.dropout ? S(0) : keep_inv;
        return mul(x, TensorT<S>::from(x.shape(), std::move(mask)));
    };

    const S attn_scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
    for (const auto& L : params.layers) {
        auto a = layer_norm_rows(h, L.ln1_gain, L.ln1_bias, ln_eps);
        auto q = add_rowvec(matmul(a, L.wq), L.bq);
        auto k = add_rowvec(matmul(a, L.wk), L.bk);
        auto v = add_rowvec(matmul(a, L.wv), L.bv);
        if (cfg.position_scheme == PositionScheme::Rotary) {
            q = rope(q, layout.positions, cfg.n_heads);
            k = rope(k, layout.positions, cfg.n_heads);
        }
        std::vector<TensorT<S>> heads;
        heads.reserve(static_cast<std::size_t>(cfg.n_heads));
        for (int head = 0; head < cfg.n_heads; ++head) {
            auto qh = slice(q, 0, len, head * hd, hd);
            auto kh = slice(k, 0, len, head * hd, hd);
            auto vh = slice(v, 0, len, head * hd, hd);
            auto energy = scale(matmul(qh, transpose(kh)), attn_scale);
            auto attn = masked_softmax_rows(energy, layout.permit);
            heads.push_back(matmul(attn, vh));
        }
        auto attn_out = add_rowvec(matmul(concat_cols(heads), L.wo), L.bo);
        h = add(h, maybe_dropout(attn_out));
        auto f = layer_norm_rows(h, L.ln2_gain, L.ln2_bias, ln_eps);
        auto ffn_out = add_rowvec(matmul(gelu(add_rowvec(matmul(f, L.w1), L.b1)), L.w2), L.b2);
        h = add(h, maybe_dropout(ffn_out));
    }
    auto hf = layer_norm_rows(h, params.final_gain, params.final_bias, ln_eps);

    ScoreBundleT<S> out;
    out.ls = reshape(add_rowvec(matmul(gather_rows(hf, layout.idx_id), params.list_w), params.list_b),
                     {static_cast<std::int64_t>(m)});
    out.ps = reshape(add_rowvec(matmul(gather_rows(hf, layout.idx_st), params.point_w), params.point_b),
                     {static_cast<std::int64_t>(m)});
    out.check();
    return out;
}

/// Scores a list of layouts; layouts are independent and processed
/// concurrently. Per-layout errors are reported with the layout index.
template <typename S>
std::vector<ScoreBundleT<S>> forward_batch(const ParametersT<S>& params,
                                           const std::vector<SequenceLayout>& layouts,
                                           const ForwardOptions& opts = {}, unsigned threads = 0) {
    std::vector<ScoreBundleT<S>> out(layouts.size());
    std::vector<std::exception_ptr> errors(layouts.size());
    parallel_for(layouts.size(), [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) {
            try {
                ForwardOptions o = opts;
                o.dropout_seed = splitmix64(opts.dropout_seed + i);
                out[i] = forward(params, layouts[i], o);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    }, threads);
    for (std::size_t i = 0; i < errors.size(); ++i) {
        if (errors[i]) {
            try {
                std::rethrow_exception(errors[i]);
            } catch (const std::exception& e) {
                throw std::runtime_error("forward_batch: layout " + std::to_string(i) + ": " + e.what());
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint container (versioned JSON, bit-exact round trip)
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return {{"d_model", c.d_model},       {"n_layers", c.n_layers},
            {"n_heads", c.n_heads},       {"d_ff", c.d_ff},
            {"vocab_size", c.vocab_size}, {"position_scheme", to_string(c.position_scheme)},
            {"max_position", c.max_position}, {"dropout", c.dropout},
            {"seed", c.seed},             {"precision", c.precision}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.position_scheme = position_scheme_from_string(j.at("position_scheme").get<std::string>());
    c.max_position = j.at("max_position").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.precision = j.at("precision").get<std::string>();
    return c;
}

inline nlohmann::json layout_config_to_json(const LayoutConfig& c) {
    return {{"instruction_template", c.instruction_template},
            {"max_candidate_tokens", c.max_candidate_tokens},
            {"num_slots", c.num_slots},
            {"doc_end_id", c.doc_end_id},
            {"identifier_ids", c.identifier_ids}};
}

inline LayoutConfig layout_config_from_json(const nlohmann::json& j) {
    LayoutConfig c;
    c.instruction_template = j.at("instruction_template").get<std::vector<TokenId>>();
    c.max_candidate_tokens = j.at("max_candidate_tokens").get<int>();
    c.num_slots = j.at("num_slots").get<int>();
    c.doc_end_id = j.at("doc_end_id").get<TokenId>();
    c.identifier_ids = j.at("identifier_ids").get<std::vector<TokenId>>();
    return c;
}

template <typename S>
void save_checkpoint(ParametersT<S>& params, const LayoutConfig& layout_config, const std::string& path) {
    nlohmann::json j;
    j["format_version"] = kCheckpointVersion;
    j["model_config"] = model_config_to_json(params.config);
    j["layout_config"] = layout_config_to_json(layout_config);
    nlohmann::json arrays = nlohmann::json::object();
    params.for_each([&arrays](const std::string& name, TensorT<S>& t) {
        nlohmann::json entry;
        entry["shape"] = t.shape();
        entry["data"] = std::vector<double>(t.values().begin(), t.values().end());
        arrays[name] = std::move(entry);
    });
    j["params"] = std::move(arrays);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    f << j.dump();
    if (!f.good()) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

template <typename S>
struct CheckpointT {
    ParametersT<S> params;
    LayoutConfig layout_config;
};

template <typename S = double>
CheckpointT<S> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
    nlohmann::json j = nlohmann::json::parse(f);
    if (j.at("format_version").get<int>() != kCheckpointVersion)
        throw std::runtime_error("load_checkpoint: unsupported format version");
    CheckpointT<S> out;
    ModelConfig cfg = model_config_from_json(j.at("model_config"));
    out.layout_config = layout_config_from_json(j.at("layout_config"));
    // Rebuild the parameter skeleton, then overwrite every named array.
    out.params = init_params<S>(cfg);
    const auto& arrays = j.at("params");
    out.params.for_each([&arrays](const std::string& name, TensorT<S>& t) {
        const auto& entry = arrays.at(name);
        auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
        auto data = entry.at("data").get<std::vector<double>>();
        if (shape != t.shape()) throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
        auto& dst = t.mutable_values();
        if (data.size() != dst.size()) throw std::runtime_error("load_checkpoint: size mismatch for " + name);
        for (std::size_t i = 0; i < data.size(); ++i) dst[i] = static_cast<S>(data[i]);
    });
    return out;
}

} // namespace calrank
