#pragma once

// Mini-batch training loop: deterministic shuffling, batched forward,
// combined objective, gradient clipping, decoupled-weight-decay
// adaptive-moment updates, gate telemetry and epoch checkpoints.

#include "calrank/datagen.hpp"
#include "calrank/losses.hpp"
#include "calrank/model.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace calrank {

struct TrainConfig {
    int epochs = 3;
    int batch_size = 8; // Q
    double learning_rate = 3e-4;
    LossConfig loss;    // tau and ablation flags
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    std::uint64_t seed = 42;
    unsigned threads = 0;
    bool exclude_noisy = false;
    std::string checkpoint_path; // written at each epoch end when non-empty
    std::string log_path;        // line-delimited JSON records when non-empty

    void validate() const {
        if (epochs < 1 || batch_size < 1) throw std::invalid_argument("TrainConfig: epochs/batch_size must be >= 1");
        if (learning_rate < 0.0 || clip_norm <= 0.0) throw std::invalid_argument("TrainConfig: bad optimiser values");
        if (loss.tau < 0.0) throw std::invalid_argument("TrainConfig: tau must be >= 0");
    }
};

struct TrainRecord {
    int step = 0;  // 1-based optimizer step index
    int epoch = 0; // 0-based
    double list_loss = 0.0;
    double point_loss = 0.0;
    double cal_loss = 0.0;
    double total = 0.0;
    double batch_variance = 0.0;
    bool gate_open = false;
    double grad_norm = 0.0;         // raw global norm before clipping
    double clipped_grad_norm = 0.0; // norm of the applied gradient
};

using TrainLog = std::vector<TrainRecord>;

inline nlohmann::json train_record_to_json(const TrainRecord& r) {
    return {{"step", r.step},
            {"epoch", r.epoch},
            {"list_loss", r.list_loss},
            {"point_loss", r.point_loss},
            {"cal_loss", r.cal_loss},
            {"total", r.total},
            {"batch_variance", r.batch_variance},
            {"gate_open", r.gate_open},
            {"grad_norm", r.grad_norm},
            {"clipped_grad_norm", r.clipped_grad_norm}};
}

/// Deterministic epoch batching: shuffle by seed, split into batches of at
/// most Q, keep the final partial batch. Every example must carry the same
/// candidate count (pass expected_slots, or -1 to take the first example's).
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<RankingExample>& dataset, int q,
                                                          std::uint64_t seed, int expected_slots = -1) {
    if (dataset.empty()) throw std::invalid_argument("make_batches: empty dataset");
    if (q < 1) throw std::invalid_argument("make_batches: batch size must be >= 1");
    int m = expected_slots > 0 ? expected_slots : dataset.front().slots();
    for (const auto& e : dataset)
        if (e.slots() != m)
            throw std::invalid_argument("make_batches: example " + e.qid + " has " + std::to_string(e.slots()) +
                                        " candidates, expected " + std::to_string(m));
    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(q)) {
        std::vector<std::size_t> batch;
        for (std::size_t i = start; i < std::min(order.size(), start + static_cast<std::size_t>(q)); ++i)
            batch.push_back(order[i]);
        batches.push_back(std::move(batch));
    }
    return batches;
}

struct AdamState {
    std::vector<std::vector<double>> m, v;
    long long t = 0;
};

namespace detail {

template <typename S>
std::vector<TensorT<S>*> parameter_list(ParametersT<S>& params) {
    std::vector<TensorT<S>*> list;
    params.for_each([&list](const std::string&, TensorT<S>& t) { list.push_back(&t); });
    return list;
}

template <typename S>
void init_adam(AdamState& state, std::vector<TensorT<S>*>& plist) {
    state.m.clear();
    state.v.clear();
    for (auto* p : plist) {
        state.m.emplace_back(p->numel(), 0.0);
        state.v.emplace_back(p->numel(), 0.0);
    }
    state.t = 0;
}

} // namespace detail

/// One optimizer step over a prepared batch of layouts and labels.
/// Returns the step telemetry; parameters and optimizer state are updated
/// in place.
template <typename S>
TrainRecord training_step(ParametersT<S>& params, AdamState& opt, const std::vector<SequenceLayout>& layouts,
                          const std::vector<PermutationLabel>& labels, const TrainConfig& cfg, int step_index,
                          int epoch) {
    if (layouts.size() != labels.size() || layouts.empty())
        throw std::invalid_argument("training_step: layout/label mismatch");
    auto plist = detail::parameter_list(params);
    if (opt.m.size() != plist.size()) detail::init_adam(opt, plist);

    ForwardOptions fwd;
    fwd.train_mode = true;
    fwd.dropout_seed = sub_seed(cfg.seed, "dropout/" + std::to_string(step_index));
    auto bundles = forward_batch(params, layouts, fwd, cfg.threads);

    BatchScoresT<S> batch;
    batch.bundles = std::move(bundles);
    batch.labels = labels;
    auto final = final_loss(batch, cfg.loss);

    TrainRecord rec;
    rec.step = step_index;
    rec.epoch = epoch;
    rec.list_loss = static_cast<double>(final.list_component);
    rec.point_loss = static_cast<double>(final.point_component);
    rec.cal_loss = static_cast<double>(final.cal_component);
    rec.total = static_cast<double>(final.total.value());
    rec.batch_variance = static_cast<double>(final.variance);
    rec.gate_open = final.gate_open;
    if (!std::isfinite(rec.total))
        throw std::runtime_error("training_step: non-finite loss at step " + std::to_string(step_index) +
                                 " (list " + std::to_string(rec.list_loss) + ", point " +
                                 std::to_string(rec.point_loss) + ", cal " + std::to_string(rec.cal_loss) + ")");

    for (auto* p : plist) p->zero_grad();
    final.total.backward();

    double norm_sq = 0.0;
    for (auto* p : plist) {
        if (!p->has_grad()) continue;
        for (S g : p->grad()) norm_sq += static_cast<double>(g) * static_cast<double>(g);
    }
    rec.grad_norm = std::sqrt(norm_sq);
    const double clip_scale = rec.grad_norm > cfg.clip_norm ? cfg.clip_norm / rec.grad_norm : 1.0;
    rec.clipped_grad_norm = rec.grad_norm * clip_scale;

    opt.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.t));
    for (std::size_t pi = 0; pi < plist.size(); ++pi) {
        auto* p = plist[pi];
        auto& data = p->mutable_values();
        auto& m = opt.m[pi];
        auto& v = opt.v[pi];
        const bool has_grad = p->has_grad();
        for (std::size_t i = 0; i < data.size(); ++i) {
            double g = has_grad ? static_cast<double>(p->grad()[i]) * clip_scale : 0.0;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps);
            data[i] = static_cast<S>(static_cast<double>(data[i]) -
                                     cfg.learning_rate * (update + cfg.weight_decay * static_cast<double>(data[i])));
        }
    }
    return rec;
}

template <typename S>
struct TrainOutputT {
    ParametersT<S> params;
    TrainLog log;
};

/// Full training run. Deterministic for a given (dataset, configs, seed).
template <typename S = double>
TrainOutputT<S> train(const TrainConfig& cfg, const ModelConfig& model_cfg, const LayoutConfig& lcfg,
                      const Vocab& vocab, const std::vector<RankingExample>& dataset) {
    cfg.validate();
    model_cfg.validate();
    std::vector<RankingExample> data;
    for (const auto& e : dataset)
        if (!cfg.exclude_noisy || !e.noisy) data.push_back(e);
    if (data.empty()) throw std::invalid_argument("train: empty dataset");
    for (const auto& e : data)
        if (e.slots() != lcfg.num_slots)
            throw std::invalid_argument("train: example " + e.qid + " has " + std::to_string(e.slots()) +
                                        " candidates, layout expects " + std::to_string(lcfg.num_slots));

    std::vector<SequenceLayout> layouts;
    layouts.reserve(data.size());
    for (const auto& e : data) layouts.push_back(build_layout(tokenize_example(e, vocab), lcfg));

    TrainOutputT<S> out;
    out.params = init_params<S>(model_cfg);
    AdamState opt;

    std::ofstream log_file;
    if (!cfg.log_path.empty()) {
        log_file.open(cfg.log_path);
        if (!log_file) throw std::runtime_error("train: cannot open log " + cfg.log_path);
    }

    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto batches = make_batches(data, cfg.batch_size, sub_seed(cfg.seed, "shuffle/" + std::to_string(epoch)),
                                    lcfg.num_slots);
        for (const auto& batch : batches) {
            std::vector<SequenceLayout> batch_layouts;
            std::vector<PermutationLabel> batch_labels;
            for (auto i : batch) {
                batch_layouts.push_back(layouts[i]);
                batch_labels.push_back(data[i].permutation);
            }
            auto rec = training_step(out.params, opt, batch_layouts, batch_labels, cfg, ++step, epoch);
            if (log_file.is_open()) log_file << train_record_to_json(rec).dump() << "\n";
            out.log.push_back(rec);
        }
        if (!cfg.checkpoint_path.empty()) save_checkpoint(out.params, lcfg, cfg.checkpoint_path);
    }
    return out;
}

inline TrainLog read_train_log(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("read_train_log: cannot open " + path);
    TrainLog log;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        TrainRecord r;
        r.step = j.at("step").get<int>();
        r.epoch = j.at("epoch").get<int>();
        r.list_loss = j.at("list_loss").get<double>();
        r.point_loss = j.at("point_loss").get<double>();
        r.cal_loss = j.at("cal_loss").get<double>();
        r.total = j.at("total").get<double>();
        r.batch_variance = j.at("batch_variance").get<double>();
        r.gate_open = j.at("gate_open").get<bool>();
        r.grad_norm = j.at("grad_norm").get<double>();
        r.clipped_grad_norm = j.at("clipped_grad_norm").get<double>();
        log.push_back(r);
    }
    return log;
}

} // namespace calrank
