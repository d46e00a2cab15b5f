#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "peftforge/common.hpp"
#include "peftforge/rng.hpp"

namespace peft {

template <typename T>
struct TensorNode;

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

/// Per-backward-pass gradient flow. Kept separate from the persistent grad
/// buffers so that repeated backward() calls accumulate grads additively.
template <typename T>
class GradFlow {
  public:
    std::vector<T>& of(TensorNode<T>* n);
    std::vector<T>* find(TensorNode<T>* n);

  private:
    // unique_ptr keeps buffers address-stable across rehashes; backward
    // closures hold references to two buffers at once.
    std::unordered_map<TensorNode<T>*, std::unique_ptr<std::vector<T>>> slots_;
};

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // allocated on first accumulation when requires_grad
    bool requires_grad = false;
    bool grad_accumulated = false;
    std::vector<NodePtr<T>> parents;
    std::function<void(const std::vector<T>&, GradFlow<T>&)> backward_fn;
};

template <typename T>
std::vector<T>& GradFlow<T>::of(TensorNode<T>* n) {
    auto& slot = slots_[n];
    if (!slot) slot = std::make_unique<std::vector<T>>(n->data.size(), T(0));
    return *slot;
}

template <typename T>
std::vector<T>* GradFlow<T>::find(TensorNode<T>* n) {
    auto it = slots_.find(n);
    return it == slots_.end() ? nullptr : it->second.get();
}

/// Dense n-dimensional array with reverse-mode autodiff. Copies are shallow
/// (shared storage); ops record a graph whenever an input requires grad.
template <typename T>
class Tensor {
  public:
    using scalar_type = T;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), T(0), requires_grad);
    }

    static Tensor filled(Shape shape, T value, bool requires_grad = false) {
        check_shape(shape);
        auto n = std::make_shared<TensorNode<T>>();
        n->data.assign(static_cast<std::size_t>(shape_numel(shape)), value);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
        check_shape(shape);
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        auto n = std::make_shared<TensorNode<T>>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t size() const { return static_cast<std::int64_t>(node_->data.size()); }

    std::vector<T>& data() { return node_->data; }
    const std::vector<T>& data() const { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }

    /// Toggles grad tracking on a leaf. Used by parameter freezing.
    void set_requires_grad(bool value) {
        if (value && node_->backward_fn) {
            throw ContractError("set_requires_grad is only valid on leaf tensors");
        }
        node_->requires_grad = value;
        if (!value) {
            node_->grad.clear();
            node_->grad_accumulated = false;
        }
    }

    const std::vector<T>& grad() const {
        if (!node_->requires_grad) {
            throw ContractError("grad() on a tensor that does not require grad");
        }
        if (node_->grad.size() != node_->data.size()) {
            node_->grad.assign(node_->data.size(), T(0));
        }
        return node_->grad;
    }

    bool has_grad() const { return node_->grad_accumulated; }

    void zero_grad() {
        node_->grad.assign(node_->data.size(), T(0));
        node_->grad_accumulated = false;
    }

    T item() const {
        if (size() != 1) {
            throw ContractError("item() requires a tensor of size 1, got shape " +
                                shape_str(shape()));
        }
        return node_->data[0];
    }

    /// Reverse-mode sweep from a scalar. Grads of every participating tensor
    /// with requires_grad accumulate; calling twice without zero_grad doubles them.
    void backward() const {
        if (!node_ || size() != 1) {
            throw ContractError("backward() requires a scalar loss tensor");
        }
        if (!node_->requires_grad) {
            throw ContractError("backward() on a graph with no grad-tracked inputs");
        }
        std::vector<TensorNode<T>*> order = topo_order();
        GradFlow<T> flow;
        flow.of(node_.get())[0] = T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            TensorNode<T>* n = *it;
            std::vector<T>* g = flow.find(n);
            if (!g) continue;
            if (n->requires_grad) {
                if (n->grad.size() != n->data.size()) n->grad.assign(n->data.size(), T(0));
                for (std::size_t i = 0; i < g->size(); ++i) n->grad[i] += (*g)[i];
                n->grad_accumulated = true;
            }
            if (n->backward_fn) n->backward_fn(*g, flow);
        }
    }

    /// Fresh leaf with copied values and no graph history.
    Tensor clone_detached(bool requires_grad = false) const {
        return from_data(shape(), data(), requires_grad);
    }

    NodePtr<T> node() const { return node_; }

    static Tensor wrap(NodePtr<T> n) { return Tensor(std::move(n)); }

  private:
    explicit Tensor(NodePtr<T> n) : node_(std::move(n)) {}

    static void check_shape(const Shape& shape) {
        if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
        for (int d : shape) {
            if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
        }
    }

    std::vector<TensorNode<T>*> topo_order() const {
        std::vector<TensorNode<T>*> order;
        std::unordered_set<TensorNode<T>*> seen;
        struct Frame {
            TensorNode<T>* n;
            std::size_t next;
        };
        std::vector<Frame> stack;
        stack.push_back({node_.get(), 0});
        seen.insert(node_.get());
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next < f.n->parents.size()) {
                TensorNode<T>* p = f.n->parents[f.next++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                order.push_back(f.n);
                stack.pop_back();
            }
        }
        return order;
    }

    NodePtr<T> node_;
};

namespace detail {

template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> data, std::vector<NodePtr<T>> parents,
                  std::function<void(const std::vector<T>&, GradFlow<T>&)> backward_fn) {
    auto out = Tensor<T>::from_data(std::move(shape), std::move(data), false);
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    if (rg) {
        auto n = out.node();
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return out;
}

// Broadcast of b onto a: either b has a single element, or b's shape is a
// suffix of a's shape (row-major, so the suffix block repeats contiguously).
template <typename T>
std::int64_t broadcast_inner(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (b.size() == 1) return 1;
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (bs.size() <= as.size() &&
        std::equal(bs.begin(), bs.end(), as.end() - static_cast<std::ptrdiff_t>(bs.size()))) {
        return b.size();
    }
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(bs) + " onto " +
                     shape_str(as));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / broadcast arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    const std::int64_t inner = detail::broadcast_inner(a, b, "add");
    const std::int64_t n = a.size();
    std::vector<T> out(static_cast<std::size_t>(n));
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = pa[i] + pb[i % inner];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<T>(
        a.shape(), std::move(out), {an, bn}, [an, bn, inner, n](const std::vector<T>& g, GradFlow<T>& flow) {
            if (an->requires_grad) {
                auto& ga = flow.of(an.get());
                for (std::int64_t i = 0; i < n; ++i) ga[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
            }
            if (bn->requires_grad) {
                auto& gb = flow.of(bn.get());
                for (std::int64_t i = 0; i < n; ++i) gb[static_cast<std::size_t>(i % inner)] += g[static_cast<std::size_t>(i)];
            }
        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    const std::int64_t inner = detail::broadcast_inner(a, b, "mul");
    const std::int64_t n = a.size();
    std::vector<T> out(static_cast<std::size_t>(n));
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = pa[i] * pb[i % inner];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<T>(
        a.shape(), std::move(out), {an, bn}, [an, bn, inner, n](const std::vector<T>& g, GradFlow<T>& flow) {
            if (an->requires_grad) {
                auto& ga = flow.of(an.get());
                const T* pbv = bn->data.data();
                for (std::int64_t i = 0; i < n; ++i) {
                    ga[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)] * pbv[i % inner];
                }
            }
            if (bn->requires_grad) {
                auto& gb = flow.of(bn.get());
                const T* pav = an->data.data();
                for (std::int64_t i = 0; i < n; ++i) {
                    gb[static_cast<std::size_t>(i % inner)] += g[static_cast<std::size_t>(i)] * pav[i];
                }
            }
        });
}

/// Multiply by a plain (non-differentiable) constant.
template <typename T>
Tensor<T> scale_const(const Tensor<T>& x, T c) {
    const std::int64_t n = x.size();
    std::vector<T> out(static_cast<std::size_t>(n));
    const T* px = x.data().data();
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = px[i] * c;
    auto xn = x.node();
    return detail::make_op<T>(x.shape(), std::move(out), {xn},
                              [xn, c, n](const std::vector<T>& g, GradFlow<T>& flow) {
                                  if (!xn->requires_grad) return;
                                  auto& gx = flow.of(xn.get());
                                  for (std::int64_t i = 0; i < n; ++i) {
                                      gx[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)] * c;
                                  }
                              });
}

/// Per-leading-index scaling by a constant vector (stochastic-depth masks).
/// x is [b, ...]; factors has length b.
template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, const std::vector<T>& factors) {
    if (x.dim(0) != static_cast<int>(factors.size())) {
        throw ShapeError("scale_rows: factor count " + std::to_string(factors.size()) +
                         " does not match leading dimension of " + shape_str(x.shape()));
    }
    const std::int64_t n = x.size();
    const std::int64_t stride = n / x.dim(0);
    std::vector<T> out(static_cast<std::size_t>(n));
    const T* px = x.data().data();
    for (std::int64_t i = 0; i < n; ++i) {
        out[static_cast<std::size_t>(i)] = px[i] * factors[static_cast<std::size_t>(i / stride)];
    }
    auto xn = x.node();
    return detail::make_op<T>(
        x.shape(), std::move(out), {xn},
        [xn, factors, stride, n](const std::vector<T>& g, GradFlow<T>& flow) {
            if (!xn->requires_grad) return;
            auto& gx = flow.of(xn.get());
            for (std::int64_t i = 0; i < n; ++i) {
                gx[static_cast<std::size_t>(i)] +=
                    g[static_cast<std::size_t>(i)] * factors[static_cast<std::size_t>(i / stride)];
            }
        });
}

/// Elementwise multiply by a constant mask (dropout).
template <typename T>
Tensor<T> mask_mul(const Tensor<T>& x, const std::vector<T>& mask) {
    if (static_cast<std::int64_t>(mask.size()) != x.size()) {
        throw ShapeError("mask_mul: mask length does not match tensor " + shape_str(x.shape()));
    }
    const std::int64_t n = x.size();
    std::vector<T> out(static_cast<std::size_t>(n));
    const T* px = x.data().data();
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = px[i] * mask[static_cast<std::size_t>(i)];
    auto xn = x.node();
    return detail::make_op<T>(x.shape(), std::move(out), {xn},
                              [xn, mask, n](const std::vector<T>& g, GradFlow<T>& flow) {
                                  if (!xn->requires_grad) return;
                                  auto& gx = flow.of(xn.get());
                                  for (std::int64_t i = 0; i < n; ++i) {
                                      gx[static_cast<std::size_t>(i)] +=
                                          g[static_cast<std::size_t>(i)] * mask[static_cast<std::size_t>(i)];
                                  }
                              });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// a: [..., p, q] (any number of leading dims), b: [q, r] -> [..., p, r].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const std::int64_t q = b.dim(0);
    const std::int64_t r = b.dim(1);
    const std::int64_t rows = a.size() / q;
    std::vector<T> out(static_cast<std::size_t>(rows * r), T(0));
    {
        const T* pa = a.data().data();
        const T* pb = b.data().data();
        T* po = out.data();
        for (std::int64_t i = 0; i < rows; ++i) {
            const T* arow = pa + i * q;
            T* orow = po + i * r;
            for (std::int64_t k = 0; k < q; ++k) {
                const T av = arow[k];
                const T* brow = pb + k * r;
                for (std::int64_t j = 0; j < r; ++j) orow[j] += av * brow[j];
            }
        }
    }
    Shape out_shape = a.shape();
    out_shape.back() = static_cast<int>(r);
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<T>(
        std::move(out_shape), std::move(out), {an, bn},
        [an, bn, rows, q, r](const std::vector<T>& g, GradFlow<T>& flow) {
            if (an->requires_grad) {
                auto& ga = flow.of(an.get());
                const T* pb = bn->data.data();
                for (std::int64_t i = 0; i < rows; ++i) {
                    const T* grow = g.data() + i * r;
                    T* garow = ga.data() + i * q;
                    for (std::int64_t k = 0; k < q; ++k) {
                        const T* brow = pb + k * r;
                        T acc = T(0);
                        for (std::int64_t j = 0; j < r; ++j) acc += grow[j] * brow[j];
                        garow[k] += acc;
                    }
                }
            }
            if (bn->requires_grad) {
                auto& gb = flow.of(bn.get());
                const T* pa = an->data.data();
                for (std::int64_t i = 0; i < rows; ++i) {
                    const T* arow = pa + i * q;
                    const T* grow = g.data() + i * r;
                    for (std::int64_t k = 0; k < q; ++k) {
                        const T av = arow[k];
                        T* gbrow = gb.data() + k * r;
                        for (std::int64_t j = 0; j < r; ++j) gbrow[j] += av * grow[j];
                    }
                }
            }
        });
}

/// Batched product: a [B, p, q] x b [B, q, r] -> [B, p, r].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
        throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const std::int64_t B = a.dim(0), p = a.dim(1), q = a.dim(2), r = b.dim(2);
    std::vector<T> out(static_cast<std::size_t>(B * p * r), T(0));
    {
        const T* pa = a.data().data();
        const T* pb = b.data().data();
        T* po = out.data();
        for (std::int64_t s = 0; s < B; ++s) {
            const T* am = pa + s * p * q;
            const T* bm = pb + s * q * r;
            T* om = po + s * p * r;
            for (std::int64_t i = 0; i < p; ++i) {
                for (std::int64_t k = 0; k < q; ++k) {
                    const T av = am[i * q + k];
                    const T* brow = bm + k * r;
                    T* orow = om + i * r;
                    for (std::int64_t j = 0; j < r; ++j) orow[j] += av * brow[j];
                }
            }
        }
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<T>(
        {static_cast<int>(B), static_cast<int>(p), static_cast<int>(r)}, std::move(out), {an, bn},
        [an, bn, B, p, q, r](const std::vector<T>& g, GradFlow<T>& flow) {
            if (an->requires_grad) {
                auto& ga = flow.of(an.get());
                const T* pb = bn->data.data();
                for (std::int64_t s = 0; s < B; ++s) {
                    const T* gm = g.data() + s * p * r;
                    const T* bm = pb + s * q * r;
                    T* gam = ga.data() + s * p * q;
                    for (std::int64_t i = 0; i < p; ++i) {
                        for (std::int64_t k = 0; k < q; ++k) {
                            const T* brow = bm + k * r;
                            const T* grow = gm + i * r;
                            T acc = T(0);
                            for (std::int64_t j = 0; j < r; ++j) acc += grow[j] * brow[j];
                            gam[i * q + k] += acc;
                        }
                    }
                }
            }
            if (bn->requires_grad) {
                auto& gb = flow.of(bn.get());
                const T* pa = an->data.data();
                for (std::int64_t s = 0; s < B; ++s) {
                    const T* am = pa + s * p * q;
                    const T* gm = g.data() + s * p * r;
                    T* gbm = gb.data() + s * q * r;
                    for (std::int64_t i = 0; i < p; ++i) {
                        for (std::int64_t k = 0; k < q; ++k) {
                            const T av = am[i * q + k];
                            const T* grow = gm + i * r;
                            T* gbrow = gbm + k * r;
                            for (std::int64_t j = 0; j < r; ++j) gbrow[j] += av * grow[j];
                        }
                    }
                }
            }
        });
}

/// Swap the last two dimensions.
template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
    if (x.rank() < 2) throw ShapeError("transpose_last2 requires rank >= 2, got " + shape_str(x.shape()));
    const std::int64_t p = x.dim(x.rank() - 2);
    const std::int64_t q = x.dim(x.rank() - 1);
    const std::int64_t batches = x.size() / (p * q);
    std::vector<T> out(static_cast<std::size_t>(x.size()));
    const T* px = x.data().data();
    for (std::int64_t s = 0; s < batches; ++s) {
        const T* xm = px + s * p * q;
        T* om = out.data() + s * p * q;
        for (std::int64_t i = 0; i < p; ++i) {
            for (std::int64_t j = 0; j < q; ++j) om[j * p + i] = xm[i * q + j];
        }
    }
    Shape out_shape = x.shape();
    std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
    auto xn = x.node();
    return detail::make_op<T>(std::move(out_shape), std::move(out), {xn},
                              [xn, batches, p, q](const std::vector<T>& g, GradFlow<T>& flow) {
                                  if (!xn->requires_grad) return;
                                  auto& gx = flow.of(xn.get());
                                  for (std::int64_t s = 0; s < batches; ++s) {
                                      const T* gm = g.data() + s * p * q;
                                      T* gxm = gx.data() + s * p * q;
                                      for (std::int64_t i = 0; i < p; ++i) {
                                          for (std::int64_t j = 0; j < q; ++j) gxm[i * q + j] += gm[j * p + i];
                                      }
                                  }
                              });
}

// ---------------------------------------------------------------------------
// Head bookkeeping and token selection
// ---------------------------------------------------------------------------

/// [b, n, d] -> [b*heads, n, d/heads]; batch-major, head-minor ordering.
template <typename T>
Tensor<T> heads_split(const Tensor<T>& x, int heads) {
    if (x.rank() != 3 || x.dim(2) % heads != 0) {
        throw ShapeError("heads_split: shape " + shape_str(x.shape()) + " not divisible into " +
                         std::to_string(heads) + " heads");
    }
    const std::int64_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    const std::int64_t dh = d / heads;
    std::vector<T> out(static_cast<std::size_t>(x.size()));
    const T* px = x.data().data();
    for (std::int64_t bi = 0; bi < b; ++bi) {
        for (std::int64_t m = 0; m < heads; ++m) {
            for (std::int64_t t = 0; t < n; ++t) {
                const T* src = px + (bi * n + t) * d + m * dh;
                T* dst = out.data() + (((bi * heads + m) * n) + t) * dh;
                std::copy(src, src + dh, dst);
            }
        }
    }
    auto xn = x.node();
    const int M = heads;
    return detail::make_op<T>(
        {static_cast<int>(b * heads), static_cast<int>(n), static_cast<int>(dh)}, std::move(out), {xn},
        [xn, b, n, d, dh, M](const std::vector<T>& g, GradFlow<T>& flow) {
            if (!xn->requires_grad) return;
            auto& gx = flow.of(xn.get());
            for (std::int64_t bi = 0; bi < b; ++bi) {
                for (std::int64_t m = 0; m < M; ++m) {
                    for (std::int64_t t = 0; t < n; ++t) {
                        const T* src = g.data() + (((bi * M + m) * n) + t) * dh;
                        T* dst = gx.data() + (bi * n + t) * d + m * dh;
                        for (std::int64_t k = 0; k < dh; ++k) dst[k] += src[k];
                    }
                }
            }
        });
}

/// Inverse of heads_split: [b*heads, n, dh] -> [b, n, heads*dh].
template <typename T>
Tensor<T> heads_merge(const Tensor<T>& x, int heads) {
    if (x.rank() != 3 || x.dim(0) % heads != 0) {
        throw ShapeError("heads_merge: shape " + shape_str(x.shape()) + " not divisible into " +
                         std::to_string(heads) + " heads");
    }
    const std::int64_t b = x.dim(0) / heads, n = x.dim(1), dh = x.dim(2);
    const std::int64_t d = dh * heads;
    std::vector<T> out(static_cast<std::size_t>(x.size()));
    const T* px = x.data().data();
    for (std::int64_t bi = 0; bi < b; ++bi) {
        for (std::int64_t m = 0; m < heads; ++m) {
            for (std::int64_t t = 0; t < n; ++t) {
                const T* src = px + (((bi * heads + m) * n) + t) * dh;
                T* dst = out.data() + (bi * n + t) * d + m * dh;
                std::copy(src, src + dh, dst);
            }
        }
    }
    auto xn = x.node();
    const int M = heads;
    return detail::make_op<T>(
        {static_cast<int>(b), static_cast<int>(n), static_cast<int>(d)}, std::move(out), {xn},
        [xn, b, n, d, dh, M](const std::vector<T>& g, GradFlow<T>& flow) {
            if (!xn->requires_grad) return;
            auto& gx = flow.of(xn.get());
            for (std::int64_t bi = 0; bi < b; ++bi) {
                for (std::int64_t m = 0; m < M; ++m) {
                    for (std::int64_t t = 0; t < n; ++t) {
                        const T* src = g.data() + (bi * n + t) * d + m * dh;
                        T* dst = gx.data() + (((bi * M + m) * n) + t) * dh;
                        for (std::int64_t k = 0; k < dh; ++k) dst[k] += src[k];
                    }
                }
            }
        });
}

/// Prepend one learned token to every sequence: [b, n, d] + [d] -> [b, n+1, d].
template <typename T>
Tensor<T> prepend_token(const Tensor<T>& x, const Tensor<T>& token) {
    if (x.rank() != 3 || token.rank() != 1 || token.dim(0) != x.dim(2)) {
        throw ShapeError("prepend_token: shapes " + shape_str(x.shape()) + " and " +
                         shape_str(token.shape()) + " are incompatible");
    }
    const std::int64_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    std::vector<T> out(static_cast<std::size_t>(b * (n + 1) * d));
    const T* px = x.data().data();
    const T* pt = token.data().data();
    for (std::int64_t bi = 0; bi < b; ++bi) {
        T* dst = out.data() + bi * (n + 1) * d;
        std::copy(pt, pt + d, dst);
        std::copy(px + bi * n * d, px + (bi + 1) * n * d, dst + d);
    }
    auto xn = x.node();
    auto tn = token.node();
    return detail::make_op<T>(
        {static_cast<int>(b), static_cast<int>(n + 1), static_cast<int>(d)}, std::move(out), {xn, tn},
        [xn, tn, b, n, d](const std::vector<T>& g, GradFlow<T>& flow) {
            if (tn->requires_grad) {
                auto& gt = flow.of(tn.get());
                for (std::int64_t bi = 0; bi < b; ++bi) {
                    const T* src = g.data() + bi * (n + 1) * d;
                    for (std::int64_t k = 0; k < d; ++k) gt[static_cast<std::size_t>(k)] += src[k];
                }
            }
            if (xn->requires_grad) {
                auto& gx = flow.of(xn.get());
                for (std::int64_t bi = 0; bi < b; ++bi) {
                    const T* src = g.data() + bi * (n + 1) * d + d;
                    T* dst = gx.data() + bi * n * d;
                    for (std::int64_t k = 0; k < n * d; ++k) dst[k] += src[k];
                }
            }
        });
}

/// Select one token from every sequence: [b, n, d] -> [b, d].
template <typename T>
Tensor<T> select_token(const Tensor<T>& x, int index) {
    if (x.rank() != 3 || index < 0 || index >= x.dim(1)) {
        throw ShapeError("select_token: index " + std::to_string(index) + " out of range for " +
                         shape_str(x.shape()));
    }
    const std::int64_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
    std::vector<T> out(static_cast<std::size_t>(b * d));
    const T* px = x.data().data();
    for (std::int64_t bi = 0; bi < b; ++bi) {
        const T* src = px + (bi * n + index) * d;
        std::copy(src, src + d, out.data() + bi * d);
    }
    auto xn = x.node();
    return detail::make_op<T>({static_cast<int>(b), static_cast<int>(d)}, std::move(out), {xn},
                              [xn, b, n, d, index](const std::vector<T>& g, GradFlow<T>& flow) {
                                  if (!xn->requires_grad) return;
                                  auto& gx = flow.of(xn.get());
                                  for (std::int64_t bi = 0; bi < b; ++bi) {
                                      const T* src = g.data() + bi * d;
                                      T* dst = gx.data() + (bi * n + index) * d;
                                      for (std::int64_t k = 0; k < d; ++k) dst[k] += src[k];
                                  }
                              });
}

/// Cut [b, 3, H, W] images into non-overlapping patches, flattened
/// channel-major: [b, (H/p)*(W/p), 3*p*p].
template <typename T>
Tensor<T> extract_patches(const Tensor<T>& images, int patch) {
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) % patch != 0 ||
        images.dim(3) % patch != 0) {
        throw ShapeError("extract_patches: shape " + shape_str(images.shape()) +
                         " is not [b, 3, H, W] with H, W divisible by " + std::to_string(patch));
    }
    const std::int64_t b = images.dim(0), C = 3, H = images.dim(2), W = images.dim(3);
    const std::int64_t ph = H / patch, pw = W / patch;
    const std::int64_t np = ph * pw, pd = C * patch * patch;
    std::vector<T> out(static_cast<std::size_t>(b * np * pd));
    const T* px = images.data().data();
    for (std::int64_t bi = 0; bi < b; ++bi) {
        for (std::int64_t py = 0; py < ph; ++py) {
            for (std::int64_t px_ = 0; px_ < pw; ++px_) {
                T* dst = out.data() + (bi * np + py * pw + px_) * pd;
                for (std::int64_t c = 0; c < C; ++c) {
                    for (std::int64_t iy = 0; iy < patch; ++iy) {
                        const T* src = px + ((bi * C + c) * H + py * patch + iy) * W + px_ * patch;
                        std::copy(src, src + patch, dst + (c * patch + iy) * patch);
                    }
                }
            }
        }
    }
    auto xn = images.node();
    const int p = patch;
    return detail::make_op<T>(
        {static_cast<int>(b), static_cast<int>(np), static_cast<int>(pd)}, std::move(out), {xn},
        [xn, b, C, H, W, ph, pw, np, pd, p](const std::vector<T>& g, GradFlow<T>& flow) {
            if (!xn->requires_grad) return;
            auto& gx = flow.of(xn.get());
            for (std::int64_t bi = 0; bi < b; ++bi) {
                for (std::int64_t py = 0; py < ph; ++py) {
                    for (std::int64_t px_ = 0; px_ < pw; ++px_) {
                        const T* src = g.data() + (bi * np + py * pw + px_) * pd;
                        for (std::int64_t c = 0; c < C; ++c) {
                            for (std::int64_t iy = 0; iy < p; ++iy) {
                                T* dst = gx.data() + ((bi * C + c) * H + py * p + iy) * W + px_ * p;
                                const T* s = src + (c * p + iy) * p;
                                for (std::int64_t ix = 0; ix < p; ++ix) dst[ix] += s[ix];
                            }
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Nonlinearities, normalization, loss
// ---------------------------------------------------------------------------

template <typename T>
T gelu_scalar(T x) {
    return x * T(0.5) * (T(1) + std::erf(x / T(1.4142135623730951)));
}

/// Exact GELU, x * Phi(x) via the error function.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    const std::int64_t n = x.size();
    std::vector<T> out(static_cast<std::size_t>(n));
    const T* px = x.data().data();
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = gelu_scalar(px[i]);
    auto xn = x.node();
    return detail::make_op<T>(
        x.shape(), std::move(out), {xn}, [xn, n](const std::vector<T>& g, GradFlow<T>& flow) {
            if (!xn->requires_grad) return;
            auto& gx = flow.of(xn.get());
            const T inv_sqrt2 = T(0.7071067811865475);
            const T inv_sqrt2pi = T(0.3989422804014327);
            const T* px = xn->data.data();
            for (std::int64_t i = 0; i < n; ++i) {
                const T v = px[i];
                const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
                const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
                gx[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)] * (cdf + v * pdf);
            }
        });
}

/// Numerically stabilized softmax over the last dimension.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
    const std::int64_t L = x.dim(x.rank() - 1);
    const std::int64_t rows = x.size() / L;
    std::vector<T> out(static_cast<std::size_t>(x.size()));
    const T* px = x.data().data();
    for (std::int64_t i = 0; i < rows; ++i) {
        const T* row = px + i * L;
        T* orow = out.data() + i * L;
        T m = row[0];
        for (std::int64_t j = 1; j < L; ++j) m = std::max(m, row[j]);
        T sum = T(0);
        for (std::int64_t j = 0; j < L; ++j) {
            orow[j] = std::exp(row[j] - m);
            sum += orow[j];
        }
        const T inv = T(1) / sum;
        for (std::int64_t j = 0; j < L; ++j) orow[j] *= inv;
    }
    auto xn = x.node();
    std::vector<T> y = out;  // captured for the backward pass
    return detail::make_op<T>(
        x.shape(), std::move(out), {xn},
        [xn, y = std::move(y), rows, L](const std::vector<T>& g, GradFlow<T>& flow) {
            if (!xn->requires_grad) return;
            auto& gx = flow.of(xn.get());
            for (std::int64_t i = 0; i < rows; ++i) {
                const T* yrow = y.data() + i * L;
                const T* grow = g.data() + i * L;
                T dot = T(0);
                for (std::int64_t j = 0; j < L; ++j) dot += grow[j] * yrow[j];
                T* gxrow = gx.data() + i * L;
                for (std::int64_t j = 0; j < L; ++j) gxrow[j] += yrow[j] * (grow[j] - dot);
            }
        });
}

/// Per-token layer normalization with population variance, then gamma*x + beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-6)) {
    const std::int64_t d = x.dim(x.rank() - 1);
    if (gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != d || beta.dim(0) != d) {
        throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match feature dim of " +
                         shape_str(x.shape()));
    }
    if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
    const std::int64_t rows = x.size() / d;
    std::vector<T> out(static_cast<std::size_t>(x.size()));
    std::vector<T> xhat(static_cast<std::size_t>(x.size()));
    std::vector<T> inv_std(static_cast<std::size_t>(rows));
    const T* px = x.data().data();
    const T* pg = gamma.data().data();
    const T* pb = beta.data().data();
    for (std::int64_t i = 0; i < rows; ++i) {
        const T* row = px + i * d;
        T mean = T(0);
        for (std::int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= T(d);
        T var = T(0);
        for (std::int64_t j = 0; j < d; ++j) {
            const T c = row[j] - mean;
            var += c * c;
        }
        var /= T(d);
        const T w = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(i)] = w;
        T* xh = xhat.data() + i * d;
        T* orow = out.data() + i * d;
        for (std::int64_t j = 0; j < d; ++j) {
            xh[j] = (row[j] - mean) * w;
            orow[j] = pg[j] * xh[j] + pb[j];
        }
    }
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return detail::make_op<T>(
        x.shape(), std::move(out), {xn, gn, bn},
        [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
         d](const std::vector<T>& g, GradFlow<T>& flow) {
            if (bn->requires_grad) {
                auto& gb = flow.of(bn.get());
                for (std::int64_t i = 0; i < rows; ++i) {
                    const T* grow = g.data() + i * d;
                    for (std::int64_t j = 0; j < d; ++j) gb[static_cast<std::size_t>(j)] += grow[j];
                }
            }
            if (gn->requires_grad) {
                auto& gg = flow.of(gn.get());
                for (std::int64_t i = 0; i < rows; ++i) {
                    const T* grow = g.data() + i * d;
                    const T* xh = xhat.data() + i * d;
                    for (std::int64_t j = 0; j < d; ++j) gg[static_cast<std::size_t>(j)] += grow[j] * xh[j];
                }
            }
            if (xn->requires_grad) {
                auto& gx = flow.of(xn.get());
                const T* pg = gn->data.data();
                for (std::int64_t i = 0; i < rows; ++i) {
                    const T* grow = g.data() + i * d;
                    const T* xh = xhat.data() + i * d;
                    T mean_gy = T(0), mean_gyx = T(0);
                    for (std::int64_t j = 0; j < d; ++j) {
                        const T gy = grow[j] * pg[j];
                        mean_gy += gy;
                        mean_gyx += gy * xh[j];
                    }
                    mean_gy /= T(d);
                    mean_gyx /= T(d);
                    const T w = inv_std[static_cast<std::size_t>(i)];
                    T* gxrow = gx.data() + i * d;
                    for (std::int64_t j = 0; j < d; ++j) {
                        const T gy = grow[j] * pg[j];
                        gxrow[j] += (gy - mean_gy - xh[j] * mean_gyx) * w;
                    }
                }
            }
        });
}

/// Mean negative log-softmax at the true class over a batch of logits [b, c].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2 || logits.dim(0) != static_cast<int>(labels.size())) {
        throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
    }
    const std::int64_t b = logits.dim(0), c = logits.dim(1);
    for (std::int64_t i = 0; i < b; ++i) {
        if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= c) {
            throw std::out_of_range("cross_entropy: label " +
                                    std::to_string(labels[static_cast<std::size_t>(i)]) +
                                    " out of range [0, " + std::to_string(c) + ") at row " +
                                    std::to_string(i));
        }
    }
    std::vector<T> probs(static_cast<std::size_t>(b * c));
    const T* px = logits.data().data();
    T loss = T(0);
    for (std::int64_t i = 0; i < b; ++i) {
        const T* row = px + i * c;
        T m = row[0];
        for (std::int64_t j = 1; j < c; ++j) m = std::max(m, row[j]);
        T sum = T(0);
        T* prow = probs.data() + i * c;
        for (std::int64_t j = 0; j < c; ++j) {
            prow[j] = std::exp(row[j] - m);
            sum += prow[j];
        }
        const T inv = T(1) / sum;
        for (std::int64_t j = 0; j < c; ++j) prow[j] *= inv;
        loss += m + std::log(sum) - row[labels[static_cast<std::size_t>(i)]];
    }
    loss /= T(b);
    auto xn = logits.node();
    return detail::make_op<T>(
        {1}, {loss}, {xn},
        [xn, probs = std::move(probs), labels, b, c](const std::vector<T>& g, GradFlow<T>& flow) {
            if (!xn->requires_grad) return;
            auto& gx = flow.of(xn.get());
            const T scale = g[0] / T(b);
            for (std::int64_t i = 0; i < b; ++i) {
                const T* prow = probs.data() + i * c;
                T* gxrow = gx.data() + i * c;
                for (std::int64_t j = 0; j < c; ++j) gxrow[j] += prow[j] * scale;
                gxrow[labels[static_cast<std::size_t>(i)]] -= scale;
            }
        });
}

/// Sum of all elements -> scalar.
template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T total = T(0);
    for (const T v : x.data()) total += v;
    auto xn = x.node();
    const std::int64_t n = x.size();
    return detail::make_op<T>({1}, {total}, {xn},
                              [xn, n](const std::vector<T>& g, GradFlow<T>& flow) {
                                  if (!xn->requires_grad) return;
                                  auto& gx = flow.of(xn.get());
                                  for (std::int64_t i = 0; i < n; ++i) gx[static_cast<std::size_t>(i)] += g[0];
                              });
}

/// Copy with a [1, ...] leading dimension added.
template <typename T>
Tensor<T> unsqueeze0(const Tensor<T>& x) {
    Shape s = x.shape();
    s.insert(s.begin(), 1);
    auto xn = x.node();
    const std::int64_t n = x.size();
    return detail::make_op<T>(std::move(s), x.data(), {xn},
                              [xn, n](const std::vector<T>& g, GradFlow<T>& flow) {
                                  if (!xn->requires_grad) return;
                                  auto& gx = flow.of(xn.get());
                                  for (std::int64_t i = 0; i < n; ++i) gx[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
                              });
}

/// Copy with a leading dimension of 1 removed.
template <typename T>
Tensor<T> squeeze0(const Tensor<T>& x) {
    if (x.rank() < 2 || x.dim(0) != 1) {
        throw ShapeError("squeeze0: leading dimension of " + shape_str(x.shape()) + " is not 1");
    }
    Shape s(x.shape().begin() + 1, x.shape().end());
    auto xn = x.node();
    const std::int64_t n = x.size();
    return detail::make_op<T>(std::move(s), x.data(), {xn},
                              [xn, n](const std::vector<T>& g, GradFlow<T>& flow) {
                                  if (!xn->requires_grad) return;
                                  auto& gx = flow.of(xn.get());
                                  for (std::int64_t i = 0; i < n; ++i) gx[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(i)];
                              });
}

// ---------------------------------------------------------------------------
// Random sampling into tensors
// ---------------------------------------------------------------------------

/// Zero-mean normal with std sigma, rejection-resampled until |w| <= bound.
template <typename T>
Tensor<T> sample_truncated_normal(Rng& rng, double sigma, double bound, Shape shape,
                                  bool requires_grad = false) {
    if (!(sigma > 0) || !(bound > 0)) {
        throw ContractError("sample_truncated_normal: sigma and bound must be positive");
    }
    auto t = Tensor<T>::zeros(std::move(shape), requires_grad);
    for (T& v : t.data()) {
        double x = rng.normal(sigma);
        while (std::abs(x) > bound) x = rng.normal(sigma);
        v = static_cast<T>(x);
    }
    return t;
}

/// Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], the rectifier-gain
/// convention inherited by the common framework default.
template <typename T>
Tensor<T> sample_kaiming_uniform(Rng& rng, int fan_in, Shape shape, bool requires_grad = false) {
    if (fan_in < 1) throw ContractError("sample_kaiming_uniform: fan_in must be >= 1");
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    auto t = Tensor<T>::zeros(std::move(shape), requires_grad);
    for (T& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
}

}  // namespace peft
