#pragma once

// Score containers shared by the model and the training objective.

#include "calrank/autodiff.hpp"

#include <stdexcept>
#include <vector>

namespace calrank {

/// One layout's scores: list-view (read at identifier tokens) and
/// point-view (read at <DOC_END> tokens), each of length M. The tensors
/// stay connected to the forward graph during training.
template <typename S>
struct ScoreBundleT {
    TensorT<S> ls;
    TensorT<S> ps;

    int slots() const { return static_cast<int>(ls.numel()); }
    void check() const {
        if (!ls.defined() || !ps.defined() || ls.numel() != ps.numel())
            throw std::invalid_argument("ScoreBundle: ls/ps length mismatch");
        for (S v : ls.values())
            if (!std::isfinite(static_cast<double>(v))) throw std::domain_error("ScoreBundle: non-finite ls");
        for (S v : ps.values())
            if (!std::isfinite(static_cast<double>(v))) throw std::domain_error("ScoreBundle: non-finite ps");
    }
};

using ScoreBundle = ScoreBundleT<double>;

} // namespace calrank
