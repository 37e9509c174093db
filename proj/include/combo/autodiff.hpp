#pragma once

// Reverse-mode automatic differentiation on a dynamically built graph.
//
// Var<T> is a cheap handle to a graph node. Ops allocate a node, record
// parents and a backward closure, and Var::backward() replays closures in
// reverse creation order. All summations run in a fixed serial order, so
// repeated runs are bit-identical.
//
// Instantiated with T=float for training and T=double for the
// gradient-check oracles.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <vector>

#include "combo/tensor.hpp"

namespace combo::ad {

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool is_leaf = false;
    std::uint64_t order = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != value.size()) {
            grad.shape = value.shape;
            grad.data.assign(value.size(), T(0));
        }
    }
};

inline std::uint64_t next_node_order() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

template <class T>
class Var {
public:
    Var() = default;

    static Var leaf(Tensor<T> value, bool requires_grad = true) {
        Var v;
        v.node_ = std::make_shared<Node<T>>();
        v.node_->value = std::move(value);
        v.node_->requires_grad = requires_grad;
        v.node_->is_leaf = true;
        v.node_->order = next_node_order();
        return v;
    }

    static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

    bool defined() const { return node_ != nullptr; }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& value_mut() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }
    std::shared_ptr<Node<T>> node() const { return node_; }

    T scalar() const {
        if (node_->value.size() != 1) throw std::logic_error("scalar() on non-scalar var");
        return node_->value.data[0];
    }

    void zero_grad() { if (node_) { node_->grad.data.assign(node_->grad.data.size(), T(0)); } }

    // Backpropagate from this scalar node.
    void backward() {
        if (node_->value.size() != 1) throw std::logic_error("backward() requires a scalar root");
        std::vector<Node<T>*> topo;
        collect(node_.get(), topo);
        std::sort(topo.begin(), topo.end(),
                  [](const Node<T>* a, const Node<T>* b) { return a->order > b->order; });
        node_->ensure_grad();
        node_->grad.data[0] = T(1);
        for (Node<T>* n : topo) {
            if (!n->requires_grad || !n->backward_fn) continue;
            n->backward_fn(*n);
        }
    }

    static Var make_op(Tensor<T> value, std::vector<Var> parents,
                       std::function<void(Node<T>&)> backward_fn) {
        Var v;
        v.node_ = std::make_shared<Node<T>>();
        v.node_->value = std::move(value);
        bool rg = false;
        for (const auto& p : parents) {
            rg = rg || p.requires_grad();
            v.node_->parents.push_back(p.node_);
        }
        v.node_->requires_grad = rg;
        if (rg) v.node_->backward_fn = std::move(backward_fn);
        v.node_->order = next_node_order();
        return v;
    }

private:
    static void collect(Node<T>* root, std::vector<Node<T>*>& topo) {
        // Iterative DFS; dedupe by pointer via the visited flag in `order` sign
        // trick is fragile, use a local set keyed on pointer.
        std::vector<Node<T>*> stack{root};
        std::vector<Node<T>*> seen;
        auto visited = [&](Node<T>* n) {
            return std::find(seen.begin(), seen.end(), n) != seen.end();
        };
        while (!stack.empty()) {
            Node<T>* n = stack.back();
            stack.pop_back();
            if (!n->requires_grad || visited(n)) continue;
            seen.push_back(n);
            topo.push_back(n);
            n->ensure_grad();
            for (auto& p : n->parents) stack.push_back(p.get());
        }
    }

    std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <class T>
Tensor<T>& pgrad(Node<T>& n, std::size_t i) {
    n.parents[i]->ensure_grad();
    return n.parents[i]->grad;
}

template <class T>
bool pneeds(const Node<T>& n, std::size_t i) {
    return n.parents[i]->requires_grad;
}

template <class T>
const Tensor<T>& pval(const Node<T>& n, std::size_t i) {
    return n.parents[i]->value;
}

inline void check(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

}  // namespace detail

// ---------------------------------------------------------------- arithmetic

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    detail::check(a.value().same_shape(b.value()), "add: shape mismatch");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
    return Var<T>::make_op(std::move(out), {a, b}, [](Node<T>& n) {
        for (std::size_t k = 0; k < 2; ++k) {
            if (!detail::pneeds(n, k)) continue;
            auto& g = detail::pgrad(n, k);
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += n.grad.data[i];
        }
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    detail::check(a.value().same_shape(b.value()), "sub: shape mismatch");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.value().data[i];
    return Var<T>::make_op(std::move(out), {a, b}, [](Node<T>& n) {
        if (detail::pneeds(n, 0)) {
            auto& g = detail::pgrad(n, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += n.grad.data[i];
        }
        if (detail::pneeds(n, 1)) {
            auto& g = detail::pgrad(n, 1);
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] -= n.grad.data[i];
        }
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    detail::check(a.value().same_shape(b.value()), "mul: shape mismatch");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
    return Var<T>::make_op(std::move(out), {a, b}, [](Node<T>& n) {
        if (detail::pneeds(n, 0)) {
            auto& g = detail::pgrad(n, 0);
            const auto& bv = detail::pval(n, 1);
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += n.grad.data[i] * bv.data[i];
        }
        if (detail::pneeds(n, 1)) {
            auto& g = detail::pgrad(n, 1);
            const auto& av = detail::pval(n, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += n.grad.data[i] * av.data[i];
        }
    });
}

template <class T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
    detail::check(a.value().same_shape(b.value()), "div: shape mismatch");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] /= b.value().data[i];
    return Var<T>::make_op(std::move(out), {a, b}, [](Node<T>& n) {
        const auto& av = detail::pval(n, 0);
        const auto& bv = detail::pval(n, 1);
        if (detail::pneeds(n, 0)) {
            auto& g = detail::pgrad(n, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += n.grad.data[i] / bv.data[i];
        }
        if (detail::pneeds(n, 1)) {
            auto& g = detail::pgrad(n, 1);
            for (std::size_t i = 0; i < g.size(); ++i)
                g.data[i] -= n.grad.data[i] * av.data[i] / (bv.data[i] * bv.data[i]);
        }
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
    Tensor<T> out = a.value();
    for (auto& x : out.data) x *= c;
    return Var<T>::make_op(std::move(out), {a}, [c](Node<T>& n) {
        if (!detail::pneeds(n, 0)) return;
        auto& g = detail::pgrad(n, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += c * n.grad.data[i];
    });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T c) {
    Tensor<T> out = a.value();
    for (auto& x : out.data) x += c;
    return Var<T>::make_op(std::move(out), {a}, [](Node<T>& n) {
        if (!detail::pneeds(n, 0)) return;
        auto& g = detail::pgrad(n, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += n.grad.data[i];
    });
}

// a[m,n] + v[n] broadcast over rows.
template <class T>
Var<T> add_rowvec(const Var<T>& a, const Var<T>& v) {
    detail::check(a.value().rank() == 2 && v.value().rank() == 1 &&
                      a.value().cols() == v.value().dim(0),
                  "add_rowvec: shape mismatch");
    Tensor<T> out = a.value();
    std::size_t m = out.rows(), n = out.cols();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) += v.value().data[j];
    return Var<T>::make_op(std::move(out), {a, v}, [m, n](Node<T>& node) {
        if (detail::pneeds(node, 0)) {
            auto& g = detail::pgrad(node, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += node.grad.data[i];
        }
        if (detail::pneeds(node, 1)) {
            auto& g = detail::pgrad(node, 1);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) g.data[j] += node.grad.data[i * n + j];
        }
    });
}

// Row i of a[m,n] scaled by w[i]; w is a plain (non-differentiated) vector.
template <class T>
Var<T> scale_rows(const Var<T>& a, Tensor<T> w) {
    detail::check(a.value().rank() == 2 && w.rank() == 1 && a.value().rows() == w.dim(0),
                  "scale_rows: shape mismatch");
    Tensor<T> out = a.value();
    std::size_t m = out.rows(), n = out.cols();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) *= w.data[i];
    return Var<T>::make_op(std::move(out), {a}, [m, n, w = std::move(w)](Node<T>& node) {
        if (!detail::pneeds(node, 0)) return;
        auto& g = detail::pgrad(node, 0);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g.data[i * n + j] += node.grad.data[i * n + j] * w.data[i];
    });
}

// ------------------------------------------------------------------- linalg

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    detail::check(a.value().rank() == 2 && b.value().rank() == 2 &&
                      a.value().cols() == b.value().rows(),
                  "matmul: shape mismatch");
    std::size_t m = a.value().rows(), k = a.value().cols(), n = b.value().cols();
    Tensor<T> out({m, n});
    gemm_nn_acc(a.value().data.data(), b.value().data.data(), out.data.data(), m, k, n);
    return Var<T>::make_op(std::move(out), {a, b}, [m, k, n](Node<T>& node) {
        const auto& av = detail::pval(node, 0);
        const auto& bv = detail::pval(node, 1);
        if (detail::pneeds(node, 0)) {  // dA = dC * B^T
            auto& g = detail::pgrad(node, 0);
            gemm_nt_acc(node.grad.data.data(), bv.data.data(), g.data.data(), m, n, k);
        }
        if (detail::pneeds(node, 1)) {  // dB = A^T * dC
            auto& g = detail::pgrad(node, 1);
            gemm_tn_acc(av.data.data(), node.grad.data.data(), g.data.data(), m, k, n);
        }
    });
}

// a[m,k] * b[n,k]^T -> [m,n]
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
    detail::check(a.value().rank() == 2 && b.value().rank() == 2 &&
                      a.value().cols() == b.value().cols(),
                  "matmul_nt: shape mismatch");
    std::size_t m = a.value().rows(), k = a.value().cols(), n = b.value().rows();
    Tensor<T> out({m, n});
    gemm_nt_acc(a.value().data.data(), b.value().data.data(), out.data.data(), m, k, n);
    return Var<T>::make_op(std::move(out), {a, b}, [m, k, n](Node<T>& node) {
        const auto& av = detail::pval(node, 0);
        const auto& bv = detail::pval(node, 1);
        if (detail::pneeds(node, 0)) {  // dA = dC * B
            auto& g = detail::pgrad(node, 0);
            gemm_nn_acc(node.grad.data.data(), bv.data.data(), g.data.data(), m, n, k);
        }
        if (detail::pneeds(node, 1)) {  // dB = dC^T * A
            auto& g = detail::pgrad(node, 1);
            gemm_tn_acc(node.grad.data.data(), av.data.data(), g.data.data(), m, n, k);
        }
    });
}

// ---------------------------------------------------------------- nonlinear

template <class T>
Var<T> gelu(const Var<T>& a) {
    Tensor<T> out = a.value();
    for (auto& x : out.data) {
        T u = x;
        x = T(0.5) * u * (T(1) + std::erf(u * T(0.7071067811865476)));
    }
    return Var<T>::make_op(std::move(out), {a}, [](Node<T>& n) {
        if (!detail::pneeds(n, 0)) return;
        auto& g = detail::pgrad(n, 0);
        const auto& av = detail::pval(n, 0);
        for (std::size_t i = 0; i < g.size(); ++i) {
            T u = av.data[i];
            T cdf = T(0.5) * (T(1) + std::erf(u * T(0.7071067811865476)));
            T pdf = T(0.3989422804014327) * std::exp(T(-0.5) * u * u);
            g.data[i] += n.grad.data[i] * (cdf + u * pdf);
        }
    });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
    Tensor<T> out = a.value();
    for (auto& x : out.data) {
        x = (x >= T(0)) ? T(1) / (T(1) + std::exp(-x))
                        : std::exp(x) / (T(1) + std::exp(x));
    }
    Tensor<T> saved = out;
    return Var<T>::make_op(std::move(out), {a}, [saved = std::move(saved)](Node<T>& n) {
        if (!detail::pneeds(n, 0)) return;
        auto& g = detail::pgrad(n, 0);
        for (std::size_t i = 0; i < g.size(); ++i) {
            T s = saved.data[i];
            g.data[i] += n.grad.data[i] * s * (T(1) - s);
        }
    });
}

// Row-wise softmax. Entries equal to -inf are treated as masked and map to
// exactly zero probability. A fully masked row is an error.
template <class T>
Var<T> softmax_rows(const Var<T>& a) {
    detail::check(a.value().rank() == 2, "softmax_rows: want 2-D");
    std::size_t m = a.value().rows(), n = a.value().cols();
    Tensor<T> out({m, n});
    const T neg_inf = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < m; ++i) {
        T mx = neg_inf;
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, a.value().at(i, j));
        if (mx == neg_inf) throw std::domain_error("softmax: empty support");
        T sum = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            T z = a.value().at(i, j);
            T e = (z == neg_inf) ? T(0) : std::exp(z - mx);
            out.at(i, j) = e;
            sum += e;
        }
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= sum;
    }
    Tensor<T> saved = out;
    return Var<T>::make_op(std::move(out), {a}, [m, n, saved = std::move(saved)](Node<T>& node) {
        if (!detail::pneeds(node, 0)) return;
        auto& g = detail::pgrad(node, 0);
        for (std::size_t i = 0; i < m; ++i) {
            T dot = T(0);
            for (std::size_t j = 0; j < n; ++j)
                dot += node.grad.data[i * n + j] * saved.data[i * n + j];
            for (std::size_t j = 0; j < n; ++j) {
                T y = saved.data[i * n + j];
                g.data[i * n + j] += y * (node.grad.data[i * n + j] - dot);
            }
        }
    });
}

// Row-wise log-softmax with the same -inf masking convention (masked entries
// produce -inf log-probability and zero gradient).
template <class T>
Var<T> log_softmax_rows(const Var<T>& a) {
    detail::check(a.value().rank() == 2, "log_softmax_rows: want 2-D");
    std::size_t m = a.value().rows(), n = a.value().cols();
    Tensor<T> out({m, n});
    Tensor<T> probs({m, n});
    const T neg_inf = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < m; ++i) {
        T mx = neg_inf;
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, a.value().at(i, j));
        if (mx == neg_inf) throw std::domain_error("softmax: empty support");
        T sum = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            T z = a.value().at(i, j);
            T e = (z == neg_inf) ? T(0) : std::exp(z - mx);
            probs.at(i, j) = e;
            sum += e;
        }
        T lse = mx + std::log(sum);
        for (std::size_t j = 0; j < n; ++j) {
            T z = a.value().at(i, j);
            out.at(i, j) = (z == neg_inf) ? neg_inf : z - lse;
            probs.at(i, j) /= sum;
        }
    }
    return Var<T>::make_op(std::move(out), {a}, [m, n, probs = std::move(probs)](Node<T>& node) {
        if (!detail::pneeds(node, 0)) return;
        auto& g = detail::pgrad(node, 0);
        for (std::size_t i = 0; i < m; ++i) {
            T gsum = T(0);
            for (std::size_t j = 0; j < n; ++j) gsum += node.grad.data[i * n + j];
            for (std::size_t j = 0; j < n; ++j) {
                T p = probs.data[i * n + j];
                g.data[i * n + j] += node.grad.data[i * n + j] - gsum * p;
            }
        }
    });
}

template <class T>
Var<T> layer_norm_rows(const Var<T>& a, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
    detail::check(a.value().rank() == 2 && gamma.value().rank() == 1 && beta.value().rank() == 1 &&
                      gamma.value().dim(0) == a.value().cols() &&
                      beta.value().dim(0) == a.value().cols(),
                  "layer_norm: shape mismatch");
    std::size_t m = a.value().rows(), n = a.value().cols();
    Tensor<T> out({m, n});
    Tensor<T> xhat({m, n});
    Tensor<T> inv_std({m});
    for (std::size_t i = 0; i < m; ++i) {
        T mean = T(0);
        for (std::size_t j = 0; j < n; ++j) mean += a.value().at(i, j);
        mean /= T(n);
        T var = T(0);
        for (std::size_t j = 0; j < n; ++j) {
            T d = a.value().at(i, j) - mean;
            var += d * d;
        }
        var /= T(n);
        T is = T(1) / std::sqrt(var + eps);
        inv_std.data[i] = is;
        for (std::size_t j = 0; j < n; ++j) {
            T xh = (a.value().at(i, j) - mean) * is;
            xhat.at(i, j) = xh;
            out.at(i, j) = xh * gamma.value().data[j] + beta.value().data[j];
        }
    }
    return Var<T>::make_op(
        std::move(out), {a, gamma, beta},
        [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& node) {
            const auto& gv = detail::pval(node, 1);
            for (std::size_t i = 0; i < m; ++i) {
                const T* dy = node.grad.data.data() + i * n;
                const T* xh = xhat.data.data() + i * n;
                if (detail::pneeds(node, 0)) {
                    auto& gx = detail::pgrad(node, 0);
                    T sum_dyg = T(0), sum_dyg_xh = T(0);
                    for (std::size_t j = 0; j < n; ++j) {
                        T dyg = dy[j] * gv.data[j];
                        sum_dyg += dyg;
                        sum_dyg_xh += dyg * xh[j];
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                        T dyg = dy[j] * gv.data[j];
                        gx.data[i * n + j] +=
                            inv_std.data[i] * (dyg - sum_dyg / T(n) - xh[j] * sum_dyg_xh / T(n));
                    }
                }
                if (detail::pneeds(node, 1)) {
                    auto& gg = detail::pgrad(node, 1);
                    for (std::size_t j = 0; j < n; ++j) gg.data[j] += dy[j] * xh[j];
                }
                if (detail::pneeds(node, 2)) {
                    auto& gb = detail::pgrad(node, 2);
                    for (std::size_t j = 0; j < n; ++j) gb.data[j] += dy[j];
                }
            }
        });
}

// max(a, c) elementwise against a constant; gradient passes where a > c.
template <class T>
Var<T> clamp_min(const Var<T>& a, T c) {
    Tensor<T> out = a.value();
    for (auto& x : out.data) x = std::max(x, c);
    return Var<T>::make_op(std::move(out), {a}, [c](Node<T>& n) {
        if (!detail::pneeds(n, 0)) return;
        auto& g = detail::pgrad(n, 0);
        const auto& av = detail::pval(n, 0);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (av.data[i] > c) g.data[i] += n.grad.data[i];
    });
}

// -------------------------------------------------------- reductions, index

template <class T>
Var<T> sum(const Var<T>& a) {
    T s = T(0);
    for (const T& x : a.value().data) s += x;
    return Var<T>::make_op(Tensor<T>::scalar(s), {a}, [](Node<T>& n) {
        if (!detail::pneeds(n, 0)) return;
        auto& g = detail::pgrad(n, 0);
        for (auto& x : g.data) x += n.grad.data[0];
    });
}

template <class T>
Var<T> mean(const Var<T>& a) {
    std::size_t cnt = a.value().size();
    T s = T(0);
    for (const T& x : a.value().data) s += x;
    s /= T(cnt);
    return Var<T>::make_op(Tensor<T>::scalar(s), {a}, [cnt](Node<T>& n) {
        if (!detail::pneeds(n, 0)) return;
        auto& g = detail::pgrad(n, 0);
        T d = n.grad.data[0] / T(cnt);
        for (auto& x : g.data) x += d;
    });
}

template <class T>
Var<T> rowsum(const Var<T>& a) {
    detail::check(a.value().rank() == 2, "rowsum: want 2-D");
    std::size_t m = a.value().rows(), n = a.value().cols();
    Tensor<T> out({m});
    for (std::size_t i = 0; i < m; ++i) {
        T s = T(0);
        for (std::size_t j = 0; j < n; ++j) s += a.value().at(i, j);
        out.data[i] = s;
    }
    return Var<T>::make_op(std::move(out), {a}, [m, n](Node<T>& node) {
        if (!detail::pneeds(node, 0)) return;
        auto& g = detail::pgrad(node, 0);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g.data[i * n + j] += node.grad.data[i];
    });
}

template <class T>
Var<T> pick_per_row(const Var<T>& a, std::vector<std::size_t> idx) {
    detail::check(a.value().rank() == 2 && idx.size() == a.value().rows(),
                  "pick_per_row: shape mismatch");
    std::size_t m = a.value().rows(), n = a.value().cols();
    Tensor<T> out({m});
    for (std::size_t i = 0; i < m; ++i) out.data[i] = a.value().at(i, idx[i]);
    return Var<T>::make_op(std::move(out), {a}, [n, idx = std::move(idx)](Node<T>& node) {
        if (!detail::pneeds(node, 0)) return;
        auto& g = detail::pgrad(node, 0);
        for (std::size_t i = 0; i < idx.size(); ++i)
            g.data[i * n + idx[i]] += node.grad.data[i];
    });
}

template <class T>
Var<T> gather_rows(const Var<T>& a, std::vector<std::size_t> idx) {
    detail::check(a.value().rank() == 2, "gather_rows: want 2-D");
    std::size_t n = a.value().cols();
    Tensor<T> out({idx.size(), n});
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) = a.value().at(idx[i], j);
    return Var<T>::make_op(std::move(out), {a}, [n, idx = std::move(idx)](Node<T>& node) {
        if (!detail::pneeds(node, 0)) return;
        auto& g = detail::pgrad(node, 0);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < n; ++j)
                g.data[idx[i] * n + j] += node.grad.data[i * n + j];
    });
}

// Copy of `base` with rows idx[i] replaced by rows[i]. Gradient flows to the
// kept rows of `base` and to `rows` for the replaced ones.
template <class T>
Var<T> scatter_rows_replace(const Var<T>& base, std::vector<std::size_t> idx, const Var<T>& rows) {
    detail::check(base.value().rank() == 2 && rows.value().rank() == 2 &&
                      rows.value().rows() == idx.size() &&
                      rows.value().cols() == base.value().cols(),
                  "scatter_rows_replace: shape mismatch");
    std::size_t n = base.value().cols();
    Tensor<T> out = base.value();
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(idx[i], j) = rows.value().at(i, j);
    return Var<T>::make_op(std::move(out), {base, rows}, [n, idx = std::move(idx)](Node<T>& node) {
        std::vector<bool> replaced(node.value.rows(), false);
        for (std::size_t i : idx) replaced[i] = true;
        if (detail::pneeds(node, 0)) {
            auto& g = detail::pgrad(node, 0);
            for (std::size_t r = 0; r < node.value.rows(); ++r) {
                if (replaced[r]) continue;
                for (std::size_t j = 0; j < n; ++j)
                    g.data[r * n + j] += node.grad.data[r * n + j];
            }
        }
        if (detail::pneeds(node, 1)) {
            auto& g = detail::pgrad(node, 1);
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t j = 0; j < n; ++j)
                    g.data[i * n + j] += node.grad.data[idx[i] * n + j];
        }
    });
}

// Set inactive columns to -inf (softmax masking). Gradient flows only through
// active columns.
template <class T>
Var<T> mask_channels(const Var<T>& a, std::vector<bool> active) {
    detail::check(a.value().rank() == 2 && active.size() == a.value().cols(),
                  "mask_channels: shape mismatch");
    std::size_t m = a.value().rows(), n = a.value().cols();
    const T neg_inf = -std::numeric_limits<T>::infinity();
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (!active[j]) out.at(i, j) = neg_inf;
    return Var<T>::make_op(std::move(out), {a}, [m, n, active = std::move(active)](Node<T>& node) {
        if (!detail::pneeds(node, 0)) return;
        auto& g = detail::pgrad(node, 0);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (active[j]) g.data[i * n + j] += node.grad.data[i * n + j];
    });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
    detail::check(a.value().rank() == 2, "transpose: want 2-D");
    std::size_t m = a.value().rows(), n = a.value().cols();
    Tensor<T> out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.value().at(i, j);
    return Var<T>::make_op(std::move(out), {a}, [m, n](Node<T>& node) {
        if (!detail::pneeds(node, 0)) return;
        auto& g = detail::pgrad(node, 0);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g.data[i * n + j] += node.grad.at(j, i);
    });
}

template <class T>
Var<T> reshape(const Var<T>& a, std::vector<std::size_t> new_shape) {
    detail::check(Tensor<T>::count(new_shape) == a.value().size(), "reshape: size mismatch");
    Tensor<T> out(new_shape, a.value().data);
    return Var<T>::make_op(std::move(out), {a}, [](Node<T>& n) {
        if (!detail::pneeds(n, 0)) return;
        auto& g = detail::pgrad(n, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += n.grad.data[i];
    });
}

// ---------------------------------------------------------------- structured

// Binary cross-entropy with logits against a constant target mask, mean over
// elements. Stable formulation: max(z,0) - z*m + log1p(exp(-|z|)).
template <class T>
Var<T> bce_with_logits_mean(const Var<T>& logits, Tensor<T> target) {
    detail::check(logits.value().size() == target.size(), "bce: size mismatch");
    std::size_t cnt = target.size();
    T acc = T(0);
    for (std::size_t i = 0; i < cnt; ++i) {
        T z = logits.value().data[i];
        T m = target.data[i];
        acc += std::max(z, T(0)) - z * m + std::log1p(std::exp(-std::abs(z)));
    }
    acc /= T(cnt);
    return Var<T>::make_op(Tensor<T>::scalar(acc), {logits},
                           [cnt, target = std::move(target)](Node<T>& n) {
        if (!detail::pneeds(n, 0)) return;
        auto& g = detail::pgrad(n, 0);
        const auto& zv = detail::pval(n, 0);
        T d = n.grad.data[0] / T(cnt);
        for (std::size_t i = 0; i < cnt; ++i) {
            T z = zv.data[i];
            T s = (z >= T(0)) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
            g.data[i] += d * (s - target.data[i]);
        }
    });
}

// 2-D convolution, single image: x[C,H,W], w[K,C,kh,kw], b[K] -> [K,Ho,Wo].
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride,
              std::size_t pad) {
    detail::check(x.value().rank() == 3 && w.value().rank() == 4 && b.value().rank() == 1,
                  "conv2d: rank mismatch");
    std::size_t C = x.value().dim(0), H = x.value().dim(1), W = x.value().dim(2);
    std::size_t K = w.value().dim(0), kh = w.value().dim(2), kw = w.value().dim(3);
    detail::check(w.value().dim(1) == C && b.value().dim(0) == K, "conv2d: channel mismatch");
    std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
    std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
    Tensor<T> out({K, Ho, Wo});
    const auto& xv = x.value();
    const auto& wv = w.value();
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t oh = 0; oh < Ho; ++oh) {
            for (std::size_t ow = 0; ow < Wo; ++ow) {
                T acc = b.value().data[k];
                for (std::size_t c = 0; c < C; ++c) {
                    for (std::size_t i = 0; i < kh; ++i) {
                        std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + i) -
                                            static_cast<std::ptrdiff_t>(pad);
                        if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                        for (std::size_t j = 0; j < kw; ++j) {
                            std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + j) -
                                                static_cast<std::ptrdiff_t>(pad);
                            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                            acc += xv.at3(c, ih, iw) * wv.data[((k * C + c) * kh + i) * kw + j];
                        }
                    }
                }
                out.at3(k, oh, ow) = acc;
            }
        }
    }
    return Var<T>::make_op(std::move(out), {x, w, b},
                           [C, H, W, K, kh, kw, Ho, Wo, stride, pad](Node<T>& node) {
        const auto& xv = detail::pval(node, 0);
        const auto& wv = detail::pval(node, 1);
        bool need_x = detail::pneeds(node, 0);
        bool need_w = detail::pneeds(node, 1);
        bool need_b = detail::pneeds(node, 2);
        for (std::size_t k = 0; k < K; ++k) {
            for (std::size_t oh = 0; oh < Ho; ++oh) {
                for (std::size_t ow = 0; ow < Wo; ++ow) {
                    T dy = node.grad.at3(k, oh, ow);
                    if (dy == T(0)) continue;
                    if (need_b) detail::pgrad(node, 2).data[k] += dy;
                    for (std::size_t c = 0; c < C; ++c) {
                        for (std::size_t i = 0; i < kh; ++i) {
                            std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + i) -
                                                static_cast<std::ptrdiff_t>(pad);
                            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                            for (std::size_t j = 0; j < kw; ++j) {
                                std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + j) -
                                                    static_cast<std::ptrdiff_t>(pad);
                                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                                std::size_t widx = ((k * C + c) * kh + i) * kw + j;
                                if (need_x)
                                    detail::pgrad(node, 0).at3(c, ih, iw) += dy * wv.data[widx];
                                if (need_w)
                                    detail::pgrad(node, 1).data[widx] += dy * xv.at3(c, ih, iw);
                            }
                        }
                    }
                }
            }
        }
    });
}

// Bilinear upsample x[C,h,w] to [C,H,W] (align_corners=false convention).
template <class T>
Var<T> bilinear_upsample(const Var<T>& x, std::size_t H, std::size_t W) {
    detail::check(x.value().rank() == 3, "bilinear_upsample: want 3-D");
    std::size_t C = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
    struct Tap {
        std::size_t lo, hi;
        T frac;
    };
    auto make_taps = [](std::size_t out_n, std::size_t in_n) {
        std::vector<Tap> taps(out_n);
        T scale_f = static_cast<T>(in_n) / static_cast<T>(out_n);
        for (std::size_t o = 0; o < out_n; ++o) {
            T src = (static_cast<T>(o) + T(0.5)) * scale_f - T(0.5);
            if (src < T(0)) src = T(0);
            std::size_t lo = static_cast<std::size_t>(src);
            if (lo >= in_n - 1) {
                taps[o] = {in_n - 1, in_n - 1, T(0)};
            } else {
                taps[o] = {lo, lo + 1, src - static_cast<T>(lo)};
            }
        }
        return taps;
    };
    std::vector<Tap> ty = make_taps(H, h), tx = make_taps(W, w);
    Tensor<T> out({C, H, W});
    const auto& xv = x.value();
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t oy = 0; oy < H; ++oy)
            for (std::size_t ox = 0; ox < W; ++ox) {
                const Tap& a = ty[oy];
                const Tap& b = tx[ox];
                T v00 = xv.at3(c, a.lo, b.lo), v01 = xv.at3(c, a.lo, b.hi);
                T v10 = xv.at3(c, a.hi, b.lo), v11 = xv.at3(c, a.hi, b.hi);
                T top = v00 + (v01 - v00) * b.frac;
                T bot = v10 + (v11 - v10) * b.frac;
                out.at3(c, oy, ox) = top + (bot - top) * a.frac;
            }
    return Var<T>::make_op(std::move(out), {x},
                           [C, H, W, ty = std::move(ty), tx = std::move(tx)](Node<T>& node) {
        if (!detail::pneeds(node, 0)) return;
        auto& g = detail::pgrad(node, 0);
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t oy = 0; oy < H; ++oy)
                for (std::size_t ox = 0; ox < W; ++ox) {
                    T dy = node.grad.at3(c, oy, ox);
                    if (dy == T(0)) continue;
                    const auto& a = ty[oy];
                    const auto& b = tx[ox];
                    T wy0 = T(1) - a.frac, wy1 = a.frac;
                    T wx0 = T(1) - b.frac, wx1 = b.frac;
                    g.at3(c, a.lo, b.lo) += dy * wy0 * wx0;
                    g.at3(c, a.lo, b.hi) += dy * wy0 * wx1;
                    g.at3(c, a.hi, b.lo) += dy * wy1 * wx0;
                    g.at3(c, a.hi, b.hi) += dy * wy1 * wx1;
                }
    });
}

}  // namespace combo::ad
