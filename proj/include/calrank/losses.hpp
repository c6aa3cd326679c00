#pragma once

// Training objective: list-view and point-view RankNet losses, the
// self-calibration loss with in-batch sampling, the variance gate, and
// their combination.
//
// Pairwise orientation: when index i is preferred over index j the pair
// contributes log(1 + exp(s_j - s_i)), i.e. the loss shrinks as the
// preferred score grows. Every pair term is evaluated through
// softplus(x) = max(x,0) + log1p(exp(-|x|)).

#include "calrank/autodiff.hpp"
#include "calrank/scores.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace calrank {

/// Ranks r over M candidates: a permutation of 1..M, 1 = best.
struct PermutationLabel {
    std::vector<int> ranks;

    int slots() const { return static_cast<int>(ranks.size()); }
    void validate() const {
        const int m = slots();
        if (m < 1) throw std::invalid_argument("PermutationLabel: empty");
        std::vector<bool> seen(static_cast<std::size_t>(m), false);
        for (int r : ranks) {
            if (r < 1 || r > m || seen[static_cast<std::size_t>(r - 1)])
                throw std::invalid_argument("PermutationLabel: not a permutation of 1.." + std::to_string(m));
            seen[static_cast<std::size_t>(r - 1)] = true;
        }
    }
};

template <typename S>
struct BatchScoresT {
    std::vector<ScoreBundleT<S>> bundles;
    std::vector<PermutationLabel> labels;

    int queries() const { return static_cast<int>(bundles.size()); }
    int slots() const { return bundles.empty() ? 0 : bundles.front().slots(); }
    void check() const {
        if (bundles.empty()) throw std::invalid_argument("BatchScores: empty batch");
        if (labels.size() != bundles.size())
            throw std::invalid_argument("BatchScores: bundle/label count mismatch");
        int m = bundles.front().slots();
        for (std::size_t q = 0; q < bundles.size(); ++q) {
            if (bundles[q].slots() != m)
                throw std::invalid_argument("BatchScores: inconsistent M at query " + std::to_string(q));
            if (labels[q].slots() != m)
                throw std::invalid_argument("BatchScores: label size mismatch at query " + std::to_string(q));
        }
    }
};

using BatchScores = BatchScoresT<double>;

namespace detail {

// sum over ordered pairs of weight[i][j] * softplus(s_j - s_i)
template <typename S>
TensorT<S> weighted_pair_loss(const TensorT<S>& s, const std::vector<S>& weight) {
    const auto n = static_cast<std::int64_t>(s.numel());
    if (weight.size() != static_cast<std::size_t>(n * n))
        throw std::invalid_argument("weighted_pair_loss: weight size mismatch");
    auto col = reshape(s, {n, 1});
    auto row = reshape(s, {1, n});
    auto ones_col = TensorT<S>::from({n, 1}, std::vector<S>(static_cast<std::size_t>(n), S(1)));
    auto ones_row = TensorT<S>::from({1, n}, std::vector<S>(static_cast<std::size_t>(n), S(1)));
    auto sj = matmul(ones_col, row);  // sj[i][j] = s_j
    auto si = matmul(col, ones_row);  // si[i][j] = s_i
    auto terms = softplus(sub(sj, si));
    auto w = TensorT<S>::from({n, n}, std::vector<S>(weight));
    return sum_all(mul(terms, w));
}

template <typename S>
std::vector<S> rank_pair_weights(const PermutationLabel& label) {
    label.validate();
    const std::size_t m = label.ranks.size();
    std::vector<S> w(m * m, S(0));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j)
            if (label.ranks[i] < label.ranks[j]) w[i * m + j] = S(1);
    return w;
}

// indicator ps_i > ps_j (strict: ties contribute nothing)
template <typename S>
std::vector<S> point_pair_weights(const std::vector<S>& ps) {
    const std::size_t m = ps.size();
    std::vector<S> w(m * m, S(0));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j)
            if (ps[i] > ps[j]) w[i * m + j] = S(1);
    return w;
}

} // namespace detail

/// List-view RankNet over all M(M-1)/2 preference pairs of the permutation.
template <typename S>
TensorT<S> list_loss(const TensorT<S>& ls, const PermutationLabel& label) {
    if (static_cast<int>(ls.numel()) != label.slots())
        throw std::invalid_argument("list_loss: score/label length mismatch");
    return detail::weighted_pair_loss(ls, detail::rank_pair_weights<S>(label));
}

/// Point-view RankNet; identical pair rule with ps in place of ls.
template <typename S>
TensorT<S> point_loss(const TensorT<S>& ps, const PermutationLabel& label) {
    if (static_cast<int>(ps.numel()) != label.slots())
        throw std::invalid_argument("point_loss: score/label length mismatch");
    return detail::weighted_pair_loss(ps, detail::rank_pair_weights<S>(label));
}

/// Self-calibration: point-view scores act as a detached label ordering for
/// the list-view scores. Gradients flow to ls only.
template <typename S>
TensorT<S> cal_loss(const TensorT<S>& ls, const std::vector<S>& ps_values) {
    if (ls.numel() != ps_values.size())
        throw std::invalid_argument("cal_loss: score length mismatch");
    return detail::weighted_pair_loss(ls, detail::point_pair_weights(ps_values));
}

template <typename S>
TensorT<S> cal_loss(const TensorT<S>& ls, const TensorT<S>& ps) {
    return cal_loss(ls, ps.values()); // ps enters as values: detached by construction
}

/// In-batch self-calibration: the cal_loss pair rule over all M*Q flattened
/// (ls, ps) pairs, intra-query pairs included.
template <typename S>
TensorT<S> cal_ib_loss(const BatchScoresT<S>& batch) {
    batch.check();
    std::vector<TensorT<S>> ls_parts;
    std::vector<S> ps_flat;
    for (const auto& b : batch.bundles) {
        ls_parts.push_back(b.ls);
        ps_flat.insert(ps_flat.end(), b.ps.values().begin(), b.ps.values().end());
    }
    auto ls_all = concat(ls_parts);
    return detail::weighted_pair_loss(ls_all, detail::point_pair_weights(ps_flat));
}

/// Mean over queries of the population variance of that query's ps values.
template <typename S>
S batch_variance(const BatchScoresT<S>& batch) {
    batch.check();
    S acc = S(0);
    for (const auto& b : batch.bundles) {
        const auto& ps = b.ps.values();
        S mu = S(0);
        for (S v : ps) mu += v;
        mu /= static_cast<S>(ps.size());
        S var = S(0);
        for (S v : ps) var += (v - mu) * (v - mu);
        acc += var / static_cast<S>(ps.size());
    }
    return acc / static_cast<S>(batch.bundles.size());
}

/// Variance-gated in-batch calibration: exactly zero (with zero gradient)
/// unless the batch's average point-score variance strictly exceeds tau.
template <typename S>
TensorT<S> cal_adaib_loss(const BatchScoresT<S>& batch, S tau) {
    if (tau < S(0)) throw std::invalid_argument("cal_adaib_loss: tau must be >= 0");
    if (batch_variance(batch) > tau) return cal_ib_loss(batch);
    return TensorT<S>::scalar(S(0));
}

struct LossConfig {
    double tau = 10.0;
    bool enable_point_loss = true;
    bool enable_calibration = true;
    bool enable_in_batch = true;
    bool enable_adaptive = true;
};

template <typename S>
struct FinalLossT {
    TensorT<S> total;
    S list_component{};
    S point_component{};
    S cal_component{};
    S variance{};
    bool gate_open = false;
};

/// Final objective: sum of per-query list and point losses plus the gated
/// calibration term, with components switchable for ablations.
template <typename S>
FinalLossT<S> final_loss(const BatchScoresT<S>& batch, const LossConfig& config) {
    batch.check();
    FinalLossT<S> out;
    out.variance = batch_variance(batch);

    std::vector<TensorT<S>> terms;
    TensorT<S> list_sum, point_sum, cal_sum;
    for (int q = 0; q < batch.queries(); ++q) {
        auto lq = list_loss(batch.bundles[static_cast<std::size_t>(q)].ls,
                            batch.labels[static_cast<std::size_t>(q)]);
        list_sum = q == 0 ? lq : add(list_sum, lq);
    }
    out.list_component = list_sum.value();
    terms.push_back(list_sum);

    if (config.enable_point_loss) {
        for (int q = 0; q < batch.queries(); ++q) {
            auto pq = point_loss(batch.bundles[static_cast<std::size_t>(q)].ps,
                                 batch.labels[static_cast<std::size_t>(q)]);
            point_sum = q == 0 ? pq : add(point_sum, pq);
        }
        out.point_component = point_sum.value();
        terms.push_back(point_sum);
    }

    if (config.enable_calibration) {
        out.gate_open = !config.enable_adaptive || out.variance > static_cast<S>(config.tau);
        if (out.gate_open) {
            if (config.enable_in_batch) {
                cal_sum = cal_ib_loss(batch);
            } else {
                for (int q = 0; q < batch.queries(); ++q) {
                    auto cq = cal_loss(batch.bundles[static_cast<std::size_t>(q)].ls,
                                       batch.bundles[static_cast<std::size_t>(q)].ps);
                    cal_sum = q == 0 ? cq : add(cal_sum, cq);
                }
            }
            out.cal_component = cal_sum.value();
            terms.push_back(cal_sum);
        }
    }

    out.total = terms.size() == 1 ? terms[0] : add(terms[0], terms[1]);
    for (std::size_t i = 2; i < terms.size(); ++i) out.total = add(out.total, terms[i]);
    return out;
}

} // namespace calrank
