#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation and a
// finite-difference verification harness.
//
// Tensors are cheap handles onto shared nodes. Ops are pure: they never
// mutate inputs and record the backward graph only while gradient tracking
// is enabled (see NoGradGuard) and some input requires gradients. Backprop
// state for one loss evaluation lives on the calling thread; concurrent
// forward passes over disjoint outputs are safe.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace calrank {

inline thread_local bool g_grad_enabled = true;

/// RAII scope that disables graph recording (inference / numeric probes).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
    ~NoGradGuard() { g_grad_enabled = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename S>
class TensorT {
    struct Node {
        std::vector<std::int64_t> shape;
        std::vector<S> data;
        std::vector<S> grad;                // allocated lazily, same length as data
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backfn;  // accumulates this->grad into parents
    };

public:
    using Scalar = S;

    TensorT() = default;

    static TensorT from(std::vector<std::int64_t> shape, std::vector<S> data, bool requires_grad = false) {
        std::size_t numel = 1;
        for (auto d : shape) {
            if (d < 0) throw std::invalid_argument("tensor: negative dimension");
            numel *= static_cast<std::size_t>(d);
        }
        if (numel != data.size()) throw std::invalid_argument("tensor: shape/data size mismatch");
        TensorT t;
        t.node_ = std::make_shared<Node>();
        t.node_->shape = std::move(shape);
        t.node_->data = std::move(data);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static TensorT zeros(std::vector<std::int64_t> shape, bool requires_grad = false) {
        std::size_t numel = 1;
        for (auto d : shape) numel *= static_cast<std::size_t>(d);
        return from(std::move(shape), std::vector<S>(numel, S(0)), requires_grad);
    }

    static TensorT scalar(S v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    static TensorT vec(std::vector<S> data, bool requires_grad = false) {
        auto n = static_cast<std::int64_t>(data.size());
        return from({n}, std::move(data), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::int64_t>& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->data.size(); }
    std::int64_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }

    const std::vector<S>& values() const { return node_->data; }
    std::vector<S>& mutable_values() { return node_->data; }
    S value() const {
        if (numel() != 1) throw std::logic_error("tensor: value() on non-scalar");
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<S>& grad() const {
        if (node_->grad.empty()) throw std::logic_error("tensor: gradient not populated");
        return node_->grad;
    }
    void zero_grad() { if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), S(0)); }

    bool same_node(const TensorT& o) const { return node_ == o.node_; }

    /// Reverse-mode accumulation from a scalar loss into every
    /// requires_grad leaf reachable through recorded ops. Repeated calls
    /// without zero_grad accumulate.
    void backward() const {
        if (!node_) throw std::logic_error("backward: undefined tensor");
        if (numel() != 1) throw std::invalid_argument("backward: loss must be a scalar");
        // Iterative topological order over the recorded graph.
        std::vector<Node*> topo;
        std::unordered_set<Node*> seen;
        std::vector<std::pair<Node*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                Node* p = n->parents[next++].get();
                if (seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                topo.push_back(n);
                stack.pop_back();
            }
        }
        ensure_grad(*node_);
        node_->grad[0] += S(1);
        for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
            Node* n = *it;
            if (n->backfn && !n->grad.empty()) n->backfn(*n);
        }
    }

    // --- escape hatches used by op implementations ---
    static void ensure_grad(Node& n) {
        if (n.grad.empty()) n.grad.assign(n.data.size(), S(0));
    }
    std::shared_ptr<Node> node() const { return node_; }

    template <typename... Parents>
    static TensorT make_op(std::vector<std::int64_t> shape, std::vector<S> data,
                           std::function<void(Node&)> backfn, const Parents&... parents) {
        TensorT out = from(std::move(shape), std::move(data), false);
        bool track = g_grad_enabled && (... || parents.requires_grad());
        if (track) {
            out.node_->requires_grad = true;
            (out.node_->parents.push_back(parents.node_), ...);
            out.node_->backfn = std::move(backfn);
        }
        return out;
    }

    static TensorT make_op_n(std::vector<std::int64_t> shape, std::vector<S> data,
                             std::function<void(Node&)> backfn, const std::vector<TensorT>& parents) {
        TensorT out = from(std::move(shape), std::move(data), false);
        bool track = g_grad_enabled &&
                     std::any_of(parents.begin(), parents.end(), [](const TensorT& p) { return p.requires_grad(); });
        if (track) {
            out.node_->requires_grad = true;
            for (const auto& p : parents) out.node_->parents.push_back(p.node_);
            out.node_->backfn = std::move(backfn);
        }
        return out;
    }

private:
    std::shared_ptr<Node> node_;
};

using Tensor = TensorT<double>;

namespace detail {

template <typename S>
void check_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
    if (a.shape() != b.shape()) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

template <typename S>
void accum(std::vector<S>& dst, const std::vector<S>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural primitives
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    auto an = a.node(); auto bn = b.node();
    return TensorT<S>::make_op(a.shape(), std::move(out),
        [an, bn](auto& n) {
            if (an->requires_grad) { TensorT<S>::ensure_grad(*an); detail::accum(an->grad, n.grad); }
            if (bn->requires_grad) { TensorT<S>::ensure_grad(*bn); detail::accum(bn->grad, n.grad); }
        }, a, b);
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    auto an = a.node(); auto bn = b.node();
    return TensorT<S>::make_op(a.shape(), std::move(out),
        [an, bn](auto& n) {
            if (an->requires_grad) { TensorT<S>::ensure_grad(*an); detail::accum(an->grad, n.grad); }
            if (bn->requires_grad) {
                TensorT<S>::ensure_grad(*bn);
                for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] -= n.grad[i];
            }
        }, a, b);
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    auto an = a.node(); auto bn = b.node();
    return TensorT<S>::make_op(a.shape(), std::move(out),
        [an, bn](auto& n) {
            if (an->requires_grad) {
                TensorT<S>::ensure_grad(*an);
                for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                TensorT<S>::ensure_grad(*bn);
                for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i] * an->data[i];
            }
        }, a, b);
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S c) {
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    auto an = a.node();
    return TensorT<S>::make_op(a.shape(), std::move(out),
        [an, c](auto& n) {
            if (!an->requires_grad) return;
            TensorT<S>::ensure_grad(*an);
            for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * c;
        }, a);
}

template <typename S>
TensorT<S> exp(const TensorT<S>& a) {
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
    auto an = a.node();
    return TensorT<S>::make_op(a.shape(), std::move(out),
        [an](auto& n) {
            if (!an->requires_grad) return;
            TensorT<S>::ensure_grad(*an);
            for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * n.data[i];
        }, a);
}

template <typename S>
TensorT<S> log(const TensorT<S>& a) {
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (av[i] <= S(0)) throw std::domain_error("log: non-positive input");
        out[i] = std::log(av[i]);
    }
    auto an = a.node();
    return TensorT<S>::make_op(a.shape(), std::move(out),
        [an](auto& n) {
            if (!an->requires_grad) return;
            TensorT<S>::ensure_grad(*an);
            for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] / an->data[i];
        }, a);
}

/// softplus(x) = log(1 + exp(x)), evaluated as max(x,0) + log1p(exp(-|x|)).
template <typename S>
TensorT<S> softplus(const TensorT<S>& a) {
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        S x = av[i];
        out[i] = std::max(x, S(0)) + std::log1p(std::exp(-std::abs(x)));
    }
    auto an = a.node();
    return TensorT<S>::make_op(a.shape(), std::move(out),
        [an](auto& n) {
            if (!an->requires_grad) return;
            TensorT<S>::ensure_grad(*an);
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                S x = an->data[i];
                S sig = x >= S(0) ? S(1) / (S(1) + std::exp(-x))
                                  : std::exp(x) / (S(1) + std::exp(x));
                an->grad[i] += n.grad[i] * sig;
            }
        }, a);
}

/// Exact GELU: x * Phi(x) with the Gaussian CDF.
template <typename S>
TensorT<S> gelu(const TensorT<S>& a) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    std::vector<S> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        double x = static_cast<double>(av[i]);
        out[i] = static_cast<S>(x * 0.5 * (1.0 + std::erf(x * inv_sqrt2)));
    }
    auto an = a.node();
    return TensorT<S>::make_op(a.shape(), std::move(out),
        [an](auto& n) {
            if (!an->requires_grad) return;
            TensorT<S>::ensure_grad(*an);
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                double x = static_cast<double>(an->data[i]);
                double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                double dens = inv_sqrt2pi * std::exp(-0.5 * x * x);
                an->grad[i] += n.grad[i] * static_cast<S>(phi + x * dens);
            }
        }, a);
}

template <typename S>
TensorT<S> sum_all(const TensorT<S>& a) {
    S s = std::accumulate(a.values().begin(), a.values().end(), S(0));
    auto an = a.node();
    return TensorT<S>::make_op({1}, {s},
        [an](auto& n) {
            if (!an->requires_grad) return;
            TensorT<S>::ensure_grad(*an);
            for (auto& g : an->grad) g += n.grad[0];
        }, a);
}

template <typename S>
TensorT<S> mean_all(const TensorT<S>& a) {
    if (a.numel() == 0) throw std::invalid_argument("mean_all: empty tensor");
    S inv = S(1) / static_cast<S>(a.numel());
    S s = std::accumulate(a.values().begin(), a.values().end(), S(0)) * inv;
    auto an = a.node();
    return TensorT<S>::make_op({1}, {s},
        [an, inv](auto& n) {
            if (!an->requires_grad) return;
            TensorT<S>::ensure_grad(*an);
            for (auto& g : an->grad) g += n.grad[0] * inv;
        }, a);
}

/// Population variance over all entries.
template <typename S>
TensorT<S> var_all(const TensorT<S>& a) {
    if (a.numel() == 0) throw std::invalid_argument("var_all: empty tensor");
    const auto& av = a.values();
    S inv = S(1) / static_cast<S>(av.size());
    S mu = std::accumulate(av.begin(), av.end(), S(0)) * inv;
    S v = S(0);
    for (S x : av) v += (x - mu) * (x - mu);
    v *= inv;
    auto an = a.node();
    return TensorT<S>::make_op({1}, {v},
        [an, inv, mu](auto& n) {
            if (!an->requires_grad) return;
            TensorT<S>::ensure_grad(*an);
            for (std::size_t i = 0; i < an->grad.size(); ++i)
                an->grad[i] += n.grad[0] * S(2) * inv * (an->data[i] - mu);
        }, a);
}

// ---------------------------------------------------------------------------
// Matrix primitives (2-D tensors, row-major)
// ---------------------------------------------------------------------------

namespace detail {

template <typename S>
void matmul_raw(const S* a, const S* b, S* c, std::size_t n, std::size_t k, std::size_t m) {
    // c[n,m] += a[n,k] * b[k,m], c must be zero-initialised; ikj order for locality
    for (std::size_t i = 0; i < n; ++i) {
        const S* arow = a + i * k;
        S* crow = c + i * m;
        for (std::size_t kk = 0; kk < k; ++kk) {
            S av = arow[kk];
            if (av == S(0)) continue;
            const S* brow = b + kk * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[n,m] += a[n,k] * b[m,k]^T  (b given row-major as [m,k])
template <typename S>
void matmul_nt_raw(const S* a, const S* b, S* c, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const S* arow = a + i * k;
        S* crow = c + i * m;
        for (std::size_t j = 0; j < m; ++j) {
            const S* brow = b + j * k;
            S s = S(0);
            for (std::size_t kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
            crow[j] += s;
        }
    }
}

// c[k,m] += a[n,k]^T * b[n,m]
template <typename S>
void matmul_tn_raw(const S* a, const S* b, S* c, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const S* arow = a + i * k;
        const S* brow = b + i * m;
        for (std::size_t kk = 0; kk < k; ++kk) {
            S av = arow[kk];
            if (av == S(0)) continue;
            S* crow = c + kk * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

} // namespace detail

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul: expects 2-D tensors");
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    if (static_cast<std::size_t>(b.dim(0)) != k) throw std::invalid_argument("matmul: inner dimension mismatch");
    std::vector<S> out(n * m, S(0));
    detail::matmul_raw(a.values().data(), b.values().data(), out.data(), n, k, m);
    auto an = a.node(); auto bn = b.node();
    return TensorT<S>::make_op({static_cast<std::int64_t>(n), static_cast<std::int64_t>(m)}, std::move(out),
        [an, bn, n, k, m](auto& node) {
            if (an->requires_grad) {
                TensorT<S>::ensure_grad(*an);
                detail::matmul_nt_raw(node.grad.data(), bn->data.data(), an->grad.data(), n, m, k);
            }
            if (bn->requires_grad) {
                TensorT<S>::ensure_grad(*bn);
                detail::matmul_tn_raw(an->data.data(), node.grad.data(), bn->grad.data(), n, k, m);
            }
        }, a, b);
}

template <typename S>
TensorT<S> transpose(const TensorT<S>& a) {
    if (a.rank() != 2) throw std::invalid_argument("transpose: expects a 2-D tensor");
    const std::size_t n = a.dim(0), m = a.dim(1);
    std::vector<S> out(n * m);
    const auto& av = a.values();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[j * n + i] = av[i * m + j];
    auto an = a.node();
    return TensorT<S>::make_op({static_cast<std::int64_t>(m), static_cast<std::int64_t>(n)}, std::move(out),
        [an, n, m](auto& node) {
            if (!an->requires_grad) return;
            TensorT<S>::ensure_grad(*an);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) an->grad[i * m + j] += node.grad[j * n + i];
        }, a);
}

/// Row gather: rows of `table` selected by `indices` (embedding lookup).
template <typename S>
TensorT<S> gather_rows(const TensorT<S>& table, const std::vector<std::int64_t>& indices) {
    if (table.rank() != 2) throw std::invalid_argument("gather_rows: table must be 2-D");
    const std::size_t rows = table.dim(0), width = table.dim(1);
    std::vector<S> out(indices.size() * width);
    const auto& tv = table.values();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        auto r = indices[i];
        if (r < 0 || static_cast<std::size_t>(r) >= rows)
            throw std::out_of_range("gather_rows: index " + std::to_string(r) + " out of range");
        std::copy_n(tv.data() + static_cast<std::size_t>(r) * width, width, out.data() + i * width);
    }
    auto tn = table.node();
    return TensorT<S>::make_op({static_cast<std::int64_t>(indices.size()), static_cast<std::int64_t>(width)},
        std::move(out),
        [tn, indices, width](auto& node) {
            if (!tn->requires_grad) return;
            TensorT<S>::ensure_grad(*tn);
            for (std::size_t i = 0; i < indices.size(); ++i) {
                S* dst = tn->grad.data() + static_cast<std::size_t>(indices[i]) * width;
                const S* src = node.grad.data() + i * width;
                for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
            }
        }, table);
}

/// Concatenate along axis 0. All inputs must share trailing dimensions.
template <typename S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    auto tail = parts[0].shape();
    tail.erase(tail.begin());
    std::int64_t total = 0;
    for (const auto& p : parts) {
        auto t = p.shape();
        if (t.empty()) throw std::invalid_argument("concat: zero-rank input");
        std::int64_t lead = t[0];
        t.erase(t.begin());
        if (t != tail) throw std::invalid_argument("concat: trailing shape mismatch");
        total += lead;
    }
    std::vector<S> out;
    out.reserve(parts[0].numel() * parts.size());
    std::vector<std::size_t> sizes;
    sizes.reserve(parts.size());
    for (const auto& p : parts) {
        out.insert(out.end(), p.values().begin(), p.values().end());
        sizes.push_back(p.numel());
    }
    auto shape = parts[0].shape();
    shape[0] = total;
    auto nodes = [&] {
        std::vector<decltype(parts[0].node())> v;
        for (const auto& p : parts) v.push_back(p.node());
        return v;
    }();
    return TensorT<S>::make_op_n(std::move(shape), std::move(out),
        [nodes, sizes](auto& node) {
            std::size_t off = 0;
            for (std::size_t p = 0; p < nodes.size(); ++p) {
                if (nodes[p]->requires_grad) {
                    TensorT<S>::ensure_grad(*nodes[p]);
                    for (std::size_t i = 0; i < sizes[p]; ++i) nodes[p]->grad[i] += node.grad[off + i];
                }
                off += sizes[p];
            }
        }, parts);
}

/// Concatenate 2-D tensors along axis 1 (equal row counts).
template <typename S>
TensorT<S> concat_cols(const std::vector<TensorT<S>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const std::int64_t rows = parts[0].dim(0);
    std::int64_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != rows) throw std::invalid_argument("concat_cols: row count mismatch");
        total += p.dim(1);
    }
    std::vector<S> out(static_cast<std::size_t>(rows * total));
    std::vector<std::int64_t> widths;
    std::int64_t off = 0;
    for (const auto& p : parts) {
        const std::int64_t w = p.dim(1);
        widths.push_back(w);
        const auto& pv = p.values();
        for (std::int64_t i = 0; i < rows; ++i)
            std::copy_n(pv.data() + i * w, w, out.data() + i * total + off);
        off += w;
    }
    auto nodes = [&] {
        std::vector<decltype(parts[0].node())> v;
        for (const auto& p : parts) v.push_back(p.node());
        return v;
    }();
    return TensorT<S>::make_op_n({rows, total}, std::move(out),
        [nodes, widths, rows, total](auto& node) {
            std::int64_t off2 = 0;
            for (std::size_t p = 0; p < nodes.size(); ++p) {
                const std::int64_t w = widths[p];
                if (nodes[p]->requires_grad) {
                    TensorT<S>::ensure_grad(*nodes[p]);
                    for (std::int64_t i = 0; i < rows; ++i) {
                        const S* src = node.grad.data() + i * total + off2;
                        S* dst = nodes[p]->grad.data() + i * w;
                        for (std::int64_t j = 0; j < w; ++j) dst[j] += src[j];
                    }
                }
                off2 += w;
            }
        }, parts);
}

/// 2-D block slice: rows [r0, r0+nr), cols [c0, c0+nc).
template <typename S>
TensorT<S> slice(const TensorT<S>& a, std::int64_t r0, std::int64_t nr, std::int64_t c0, std::int64_t nc) {
    if (a.rank() != 2) throw std::invalid_argument("slice: expects a 2-D tensor");
    const std::int64_t rows = a.dim(0), cols = a.dim(1);
    if (r0 < 0 || nr < 0 || r0 + nr > rows || c0 < 0 || nc < 0 || c0 + nc > cols)
        throw std::out_of_range("slice: window out of range");
    std::vector<S> out(static_cast<std::size_t>(nr * nc));
    const auto& av = a.values();
    for (std::int64_t i = 0; i < nr; ++i)
        std::copy_n(av.data() + (r0 + i) * cols + c0, nc, out.data() + i * nc);
    auto an = a.node();
    return TensorT<S>::make_op({nr, nc}, std::move(out),
        [an, r0, c0, nr, nc, cols](auto& node) {
            if (!an->requires_grad) return;
            TensorT<S>::ensure_grad(*an);
            for (std::int64_t i = 0; i < nr; ++i) {
                const S* src = node.grad.data() + i * nc;
                S* dst = an->grad.data() + (r0 + i) * cols + c0;
                for (std::int64_t j = 0; j < nc; ++j) dst[j] += src[j];
            }
        }, a);
}

/// 1-D slice: entries [i0, i0+n).
template <typename S>
TensorT<S> slice(const TensorT<S>& a, std::int64_t i0, std::int64_t n) {
    if (a.rank() != 1) throw std::invalid_argument("slice1d: expects a 1-D tensor");
    const std::int64_t len = a.dim(0);
    if (i0 < 0 || n < 0 || i0 + n > len) throw std::out_of_range("slice1d: window out of range");
    std::vector<S> out(a.values().begin() + i0, a.values().begin() + i0 + n);
    auto an = a.node();
    return TensorT<S>::make_op({n}, std::move(out),
        [an, i0, n](auto& node) {
            if (!an->requires_grad) return;
            TensorT<S>::ensure_grad(*an);
            for (std::int64_t i = 0; i < n; ++i) an->grad[i0 + i] += node.grad[i];
        }, a);
}

/// Metadata reshape (copies data; numel must match).
template <typename S>
TensorT<S> reshape(const TensorT<S>& a, std::vector<std::int64_t> shape) {
    std::size_t numel = 1;
    for (auto d : shape) numel *= static_cast<std::size_t>(d);
    if (numel != a.numel()) throw std::invalid_argument("reshape: numel mismatch");
    auto an = a.node();
    return TensorT<S>::make_op(std::move(shape), a.values(),
        [an](auto& node) {
            if (!an->requires_grad) return;
            TensorT<S>::ensure_grad(*an);
            detail::accum(an->grad, node.grad);
        }, a);
}

/// Add a row vector b[d] to every row of x[n,d].
template <typename S>
TensorT<S> add_rowvec(const TensorT<S>& x, const TensorT<S>& b) {
    if (x.rank() != 2 || b.rank() != 1 || x.dim(1) != b.dim(0))
        throw std::invalid_argument("add_rowvec: shape mismatch");
    const std::size_t n = x.dim(0), d = x.dim(1);
    std::vector<S> out(x.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] += bv[j];
    auto xn = x.node(); auto bn = b.node();
    return TensorT<S>::make_op(x.shape(), std::move(out),
        [xn, bn, n, d](auto& node) {
            if (xn->requires_grad) { TensorT<S>::ensure_grad(*xn); detail::accum(xn->grad, node.grad); }
            if (bn->requires_grad) {
                TensorT<S>::ensure_grad(*bn);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j) bn->grad[j] += node.grad[i * d + j];
            }
        }, x, b);
}

// ---------------------------------------------------------------------------
// Masked softmax and layer normalisation
// ---------------------------------------------------------------------------

namespace detail {

// One softmax row over permitted entries; forbidden outputs are exactly zero.
template <typename S>
void masked_softmax_row(const S* logits, const std::uint8_t* permit, S* out, std::size_t n) {
    S mx = -std::numeric_limits<S>::infinity();
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
        if (permit[i]) { any = true; mx = std::max(mx, logits[i]); }
    }
    if (!any) throw std::domain_error("masked_softmax: empty attention row");
    S denom = S(0);
    for (std::size_t i = 0; i < n; ++i) {
        if (permit[i]) { out[i] = std::exp(logits[i] - mx); denom += out[i]; }
        else out[i] = S(0);
    }
    for (std::size_t i = 0; i < n; ++i) if (permit[i]) out[i] /= denom;
}

template <typename S>
void masked_softmax_row_backward(const S* y, const S* dy, const std::uint8_t* permit, S* dx, std::size_t n) {
    S dot = S(0);
    for (std::size_t i = 0; i < n; ++i) if (permit[i]) dot += y[i] * dy[i];
    for (std::size_t i = 0; i < n; ++i)
        if (permit[i]) dx[i] += y[i] * (dy[i] - dot);
}

} // namespace detail

/// Softmax over the permitted entries of a vector; forbidden entries are
/// exactly zero and excluded from the normalisation. Throws on an
/// all-forbidden row.
template <typename S>
TensorT<S> masked_softmax(const TensorT<S>& logits, const std::vector<std::uint8_t>& permit) {
    if (logits.rank() != 1) throw std::invalid_argument("masked_softmax: expects a 1-D tensor");
    const std::size_t n = logits.numel();
    if (permit.size() != n) throw std::invalid_argument("masked_softmax: permit size mismatch");
    std::vector<S> out(n);
    detail::masked_softmax_row(logits.values().data(), permit.data(), out.data(), n);
    auto ln = logits.node();
    return TensorT<S>::make_op(logits.shape(), std::move(out),
        [ln, permit, n](auto& node) {
            if (!ln->requires_grad) return;
            TensorT<S>::ensure_grad(*ln);
            detail::masked_softmax_row_backward(node.data.data(), node.grad.data(), permit.data(),
                                                ln->grad.data(), n);
        }, logits);
}

/// Row-wise masked softmax for square attention matrices; permit is the
/// row-major [n*n] permission matrix.
template <typename S>
TensorT<S> masked_softmax_rows(const TensorT<S>& logits, const std::vector<std::uint8_t>& permit) {
    if (logits.rank() != 2) throw std::invalid_argument("masked_softmax_rows: expects a 2-D tensor");
    const std::size_t n = logits.dim(0), m = logits.dim(1);
    if (permit.size() != n * m) throw std::invalid_argument("masked_softmax_rows: permit size mismatch");
    std::vector<S> out(n * m);
    for (std::size_t i = 0; i < n; ++i)
        detail::masked_softmax_row(logits.values().data() + i * m, permit.data() + i * m, out.data() + i * m, m);
    auto ln = logits.node();
    return TensorT<S>::make_op(logits.shape(), std::move(out),
        [ln, permit, n, m](auto& node) {
            if (!ln->requires_grad) return;
            TensorT<S>::ensure_grad(*ln);
            for (std::size_t i = 0; i < n; ++i)
                detail::masked_softmax_row_backward(node.data.data() + i * m, node.grad.data() + i * m,
                                                    permit.data() + i * m, ln->grad.data() + i * m, m);
        }, logits);
}

namespace detail {

template <typename S>
struct LnRowStats { S mean, inv_std; };

template <typename S>
LnRowStats<S> layer_norm_row(const S* x, const S* g, const S* b, S* y, std::size_t n, S eps) {
    S mu = S(0);
    for (std::size_t i = 0; i < n; ++i) mu += x[i];
    mu /= static_cast<S>(n);
    S var = S(0);
    for (std::size_t i = 0; i < n; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= static_cast<S>(n);
    S inv = S(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) y[i] = g[i] * (x[i] - mu) * inv + b[i];
    return {mu, inv};
}

template <typename S>
void layer_norm_row_backward(const S* x, const S* g, const S* dy, LnRowStats<S> st,
                             S* dx, S* dg, S* db, std::size_t n) {
    // dx = inv*(gh - mean(gh) - xhat*mean(gh*xhat)), gh = dy .* g
    S mean_gh = S(0), mean_ghx = S(0);
    for (std::size_t i = 0; i < n; ++i) {
        S xh = (x[i] - st.mean) * st.inv_std;
        S gh = dy[i] * g[i];
        mean_gh += gh;
        mean_ghx += gh * xh;
    }
    mean_gh /= static_cast<S>(n);
    mean_ghx /= static_cast<S>(n);
    for (std::size_t i = 0; i < n; ++i) {
        S xh = (x[i] - st.mean) * st.inv_std;
        S gh = dy[i] * g[i];
        if (dx) dx[i] += st.inv_std * (gh - mean_gh - xh * mean_ghx);
        if (dg) dg[i] += dy[i] * xh;
        if (db) db[i] += dy[i];
    }
}

} // namespace detail

/// y = gain .* (x - mean) / sqrt(var + eps) + bias, statistics over the
/// whole vector (population variance).
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gain, const TensorT<S>& bias, S eps) {
    if (x.rank() != 1) throw std::invalid_argument("layer_norm: expects a 1-D tensor");
    detail::check_same_shape(x, gain, "layer_norm");
    detail::check_same_shape(x, bias, "layer_norm");
    const std::size_t n = x.numel();
    if (n == 0) throw std::invalid_argument("layer_norm: empty input");
    std::vector<S> out(n);
    auto st = detail::layer_norm_row(x.values().data(), gain.values().data(), bias.values().data(),
                                     out.data(), n, eps);
    auto xn = x.node(); auto gn = gain.node(); auto bn = bias.node();
    return TensorT<S>::make_op(x.shape(), std::move(out),
        [xn, gn, bn, st, n](auto& node) {
            if (xn->requires_grad) TensorT<S>::ensure_grad(*xn);
            if (gn->requires_grad) TensorT<S>::ensure_grad(*gn);
            if (bn->requires_grad) TensorT<S>::ensure_grad(*bn);
            detail::layer_norm_row_backward(xn->data.data(), gn->data.data(), node.grad.data(), st,
                                            xn->requires_grad ? xn->grad.data() : nullptr,
                                            gn->requires_grad ? gn->grad.data() : nullptr,
                                            bn->requires_grad ? bn->grad.data() : nullptr, n);
        }, x, gain, bias);
}

/// Row-wise layer norm for [n,d] tensors with shared gain/bias of size d.
template <typename S>
TensorT<S> layer_norm_rows(const TensorT<S>& x, const TensorT<S>& gain, const TensorT<S>& bias, S eps) {
    if (x.rank() != 2 || gain.rank() != 1 || bias.rank() != 1 || x.dim(1) != gain.dim(0) || x.dim(1) != bias.dim(0))
        throw std::invalid_argument("layer_norm_rows: shape mismatch");
    const std::size_t n = x.dim(0), d = x.dim(1);
    std::vector<S> out(n * d);
    std::vector<detail::LnRowStats<S>> stats(n);
    for (std::size_t i = 0; i < n; ++i)
        stats[i] = detail::layer_norm_row(x.values().data() + i * d, gain.values().data(),
                                          bias.values().data(), out.data() + i * d, d, eps);
    auto xn = x.node(); auto gn = gain.node(); auto bn = bias.node();
    return TensorT<S>::make_op(x.shape(), std::move(out),
        [xn, gn, bn, stats, n, d](auto& node) {
            if (xn->requires_grad) TensorT<S>::ensure_grad(*xn);
            if (gn->requires_grad) TensorT<S>::ensure_grad(*gn);
            if (bn->requires_grad) TensorT<S>::ensure_grad(*bn);
            for (std::size_t i = 0; i < n; ++i)
                detail::layer_norm_row_backward(xn->data.data() + i * d, gn->data.data(),
                                                node.grad.data() + i * d, stats[i],
                                                xn->requires_grad ? xn->grad.data() + i * d : nullptr,
                                                gn->requires_grad ? gn->grad.data() : nullptr,
                                                bn->requires_grad ? bn->grad.data() : nullptr, d);
        }, x, gain, bias);
}

/// Rotary position encoding applied in-place per attention head: row i is
/// rotated pairwise by angles positions[i] * base^(-2j/head_dim).
template <typename S>
TensorT<S> rope(const TensorT<S>& x, const std::vector<std::int64_t>& positions, int n_heads,
                double base = 10000.0) {
    if (x.rank() != 2) throw std::invalid_argument("rope: expects a 2-D tensor");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (positions.size() != n) throw std::invalid_argument("rope: positions size mismatch");
    if (n_heads <= 0 || d % static_cast<std::size_t>(n_heads) != 0)
        throw std::invalid_argument("rope: width not divisible by heads");
    const std::size_t hd = d / static_cast<std::size_t>(n_heads);
    if (hd % 2 != 0) throw std::invalid_argument("rope: head width must be even");
    std::vector<S> out(x.values());
    std::vector<double> freqs(hd / 2);
    for (std::size_t j = 0; j < hd / 2; ++j)
        freqs[j] = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(hd));
    for (std::size_t i = 0; i < n; ++i) {
        double p = static_cast<double>(positions[i]);
        for (std::size_t h = 0; h < static_cast<std::size_t>(n_heads); ++h) {
            S* row = out.data() + i * d + h * hd;
            for (std::size_t j = 0; j < hd / 2; ++j) {
                double th = p * freqs[j];
                S c = static_cast<S>(std::cos(th)), s = static_cast<S>(std::sin(th));
                S e = row[2 * j], o = row[2 * j + 1];
                row[2 * j] = e * c - o * s;
                row[2 * j + 1] = e * s + o * c;
            }
        }
    }
    auto xn = x.node();
    return TensorT<S>::make_op(x.shape(), std::move(out),
        [xn, positions, n_heads, freqs, n, d, hd](auto& node) {
            if (!xn->requires_grad) return;
            TensorT<S>::ensure_grad(*xn);
            for (std::size_t i = 0; i < n; ++i) {
                double p = static_cast<double>(positions[i]);
                for (std::size_t h = 0; h < static_cast<std::size_t>(n_heads); ++h) {
                    const S* gr = node.grad.data() + i * d + h * hd;
                    S* dst = xn->grad.data() + i * d + h * hd;
                    for (std::size_t j = 0; j < hd / 2; ++j) {
                        double th = p * freqs[j];
                        S c = static_cast<S>(std::cos(th)), s = static_cast<S>(std::sin(th));
                        S ge = gr[2 * j], go = gr[2 * j + 1];
                        dst[2 * j] += ge * c + go * s;   // inverse rotation
                        dst[2 * j + 1] += -ge * s + go * c;
                    }
                }
            }
        }, x);
}

/// Spec-surface alias: run reverse-mode accumulation from a scalar loss.
template <typename S>
void backprop(const TensorT<S>& loss) {
    loss.backward();
}

// ---------------------------------------------------------------------------
// Verification harness
// ---------------------------------------------------------------------------

/// Maximum relative error between the analytic gradient of f at x and
/// central finite differences with the given step:
///   max_k |analytic_k - central_k| / (|analytic_k| + |central_k| + 1e-12).
/// f must return a scalar tensor. Throws if f evaluates non-finite,
/// naming the coordinate being probed (-1 for the base point).
template <typename S>
double finite_diff_check(const std::function<TensorT<S>(const TensorT<S>&)>& f, TensorT<S> x, double step) {
    TensorT<S> probe = TensorT<S>::from(x.shape(), x.values(), true);
    TensorT<S> y = f(probe);
    if (y.numel() != 1) throw std::invalid_argument("finite_diff_check: f must return a scalar");
    if (!std::isfinite(static_cast<double>(y.value())))
        throw std::domain_error("finite_diff_check: non-finite value at coordinate -1 (base point)");
    std::vector<S> analytic(probe.numel(), S(0));
    y.backward();
    if (probe.has_grad()) analytic = probe.grad();

    NoGradGuard ng;
    double max_rel = 0.0;
    auto& xv = probe.mutable_values();
    for (std::size_t k = 0; k < xv.size(); ++k) {
        const S orig = xv[k];
        xv[k] = orig + static_cast<S>(step);
        double fp = static_cast<double>(f(probe).value());
        xv[k] = orig - static_cast<S>(step);
        double fm = static_cast<double>(f(probe).value());
        xv[k] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::domain_error("finite_diff_check: non-finite value at coordinate " + std::to_string(k));
        double central = (fp - fm) / (2.0 * step);
        double a = static_cast<double>(analytic[k]);
        double rel = std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-12);
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

} // namespace calrank
