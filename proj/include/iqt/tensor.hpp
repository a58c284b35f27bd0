// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors with reverse-mode automatic differentiation.
//
// A Tensor<T> is a cheap handle to a node in an implicit computation graph.
// Forward ops produce new nodes; each node that needs a gradient keeps
// shared ownership of its parents and a closure that pushes its gradient
// back into them. backward() on a scalar loss walks the graph once in
// reverse topological order. Graphs are single-owner and single-threaded;
// nodes are immutable after creation except for gradient accumulation.
//
// T is float for training and double for finite-difference verification.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

// Forward results must stay finite on finite inputs. The check costs a full
// pass over every op output, so it is compiled out of release builds.
#ifndef IQT_CHECK_FINITE
#ifdef NDEBUG
#define IQT_CHECK_FINITE 0
#else
#define IQT_CHECK_FINITE 1
#endif
#endif

namespace iqt {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    out += "]";
    return out;
}

template <typename T>
inline void check_finite(const std::vector<T>& v, const char* op) {
#if IQT_CHECK_FINITE
    for (T x : v) {
        if (!std::isfinite(static_cast<double>(x)))
            throw std::runtime_error(std::string(op) + ": produced a non-finite value");
    }
#else
    (void)v;
    (void)op;
#endif
}

template <typename T>
class Tensor {
public:
    struct Node {
        Shape shape;
        std::vector<T> value;
        std::vector<T> grad; // sized lazily during backward
        bool requires_grad = false;
        const char* op = "leaf";
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward_fn;
    };
    using NodePtr = std::shared_ptr<Node>;

    Tensor() = default;
    explicit Tensor(NodePtr n) : n_(std::move(n)) {}

    static Tensor constant(Shape shape, std::vector<T> value) {
        return Tensor(make_node(std::move(shape), std::move(value), false));
    }

    static Tensor param(Shape shape, std::vector<T> value) {
        return Tensor(make_node(std::move(shape), std::move(value), true));
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return Tensor(make_node({1}, {v}, requires_grad));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::size_t n = checked_numel(shape);
        return Tensor(make_node(std::move(shape), std::vector<T>(n, T(0)), requires_grad));
    }

    static Tensor full(Shape shape, T v, bool requires_grad = false) {
        std::size_t n = checked_numel(shape);
        return Tensor(make_node(std::move(shape), std::vector<T>(n, v), requires_grad));
    }

    bool defined() const { return n_ != nullptr; }
    std::size_t rank() const { return node()->shape.size(); }
    std::size_t dim(std::size_t i) const { return node()->shape.at(i); }
    std::size_t size() const { return node()->value.size(); }
    bool requires_grad() const { return node()->requires_grad; }

    // Accessors copy when the handle is a temporary; a reference into an
    // expiring node would dangle.
    const Shape& shape() const& { return node()->shape; }
    Shape shape() && { return node()->shape; }
    const std::vector<T>& value() const& { return node()->value; }
    std::vector<T> value() && { return node()->value; }

    // Leaf values may be rewritten between forward passes (optimizer updates,
    // checkpoint restore). Mutating an op output would corrupt saved state.
    std::vector<T>& mutable_value() {
        if (!node()->parents.empty() || node()->backward_fn)
            throw std::logic_error("Tensor: only leaf values may be mutated");
        return node()->value;
    }

    T item() const {
        if (size() != 1)
            throw std::invalid_argument("Tensor::item: tensor has " + std::to_string(size()) + " elements");
        return node()->value[0];
    }

    bool has_grad() const { return !node()->grad.empty(); }

    const std::vector<T>& grad() const& {
        if (node()->grad.empty())
            throw std::logic_error("Tensor::grad: no gradient accumulated (run backward first)");
        return node()->grad;
    }
    std::vector<T> grad() && {
        if (node()->grad.empty())
            throw std::logic_error("Tensor::grad: no gradient accumulated (run backward first)");
        return node()->grad;
    }

    void zero_grad() {
        if (!node()->grad.empty())
            std::fill(node()->grad.begin(), node()->grad.end(), T(0));
    }

    // Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    // reachable node with requires_grad set.
    void backward() const {
        Node* root = node().get();
        if (root->value.size() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(root->shape));

        // Post-order DFS: parents land before children, so the reverse walk
        // visits every node before any of its parents.
        std::vector<Node*> order;
        std::unordered_set<Node*> visited;
        struct Frame {
            Node* n;
            std::size_t next;
        };
        std::vector<Frame> stack;
        stack.push_back({root, 0});
        visited.insert(root);
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next < f.n->parents.size()) {
                Node* p = f.n->parents[f.next++].get();
                if (visited.insert(p).second) stack.push_back({p, 0});
            } else {
                order.push_back(f.n);
                stack.pop_back();
            }
        }

        grad_buf(*root)[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* nd = *it;
            if (nd->backward_fn && !nd->grad.empty()) nd->backward_fn(*nd);
        }
    }

    const NodePtr& node() const {
        if (!n_) throw std::logic_error("Tensor: use of empty handle");
        return n_;
    }

    static std::vector<T>& grad_buf(Node& n) {
        if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
        return n.grad;
    }

    static NodePtr make_node(Shape shape, std::vector<T> value, bool requires_grad) {
        std::size_t n = checked_numel(shape);
        if (n != value.size())
            throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " expects " + std::to_string(n) +
                                        " values, got " + std::to_string(value.size()));
        auto node = std::make_shared<Node>();
        node->shape = std::move(shape);
        node->value = std::move(value);
        node->requires_grad = requires_grad;
        return node;
    }

private:
    static std::size_t checked_numel(const Shape& shape) {
        if (shape.empty()) throw std::invalid_argument("Tensor: rank-0 shapes are not supported");
        for (std::size_t d : shape) {
            if (d == 0) throw std::invalid_argument("Tensor: extents must be positive, got " + shape_str(shape));
        }
        return numel(shape);
    }

    NodePtr n_;
};

namespace detail {

// Shared op construction: wires parents and the backward closure only when a
// gradient can actually flow, so pure-inference graphs stay flat.
template <typename T>
Tensor<T> make_op(const char* op, Shape shape, std::vector<T> value, std::vector<Tensor<T>> inputs,
                  std::function<void(typename Tensor<T>::Node&)> backward_fn) {
    check_finite(value, op);
    auto node = Tensor<T>::make_node(std::move(shape), std::move(value), false);
    node->op = op;
    bool needs_grad = false;
    for (const auto& in : inputs) needs_grad = needs_grad || in.node()->requires_grad;
    if (needs_grad) {
        node->requires_grad = true;
        node->parents.reserve(inputs.size());
        for (const auto& in : inputs) node->parents.push_back(in.node());
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor<T>(node);
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch: " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& t, std::size_t rank) {
    if (t.rank() != rank)
        throw std::invalid_argument(std::string(op) + ": expected rank-" + std::to_string(rank) + " tensor, got " +
                                    shape_str(t.shape()));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("add", a, b);
    std::vector<T> out(a.size());
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    auto pa = a.node();
    auto pb = b.node();
    return detail::make_op<T>("add", a.shape(), std::move(out), {a, b}, [pa, pb](typename Tensor<T>::Node& self) {
        if (pa->requires_grad) {
            auto& g = Tensor<T>::grad_buf(*pa);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            auto& g = Tensor<T>::grad_buf(*pb);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("sub", a, b);
    std::vector<T> out(a.size());
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    auto pa = a.node();
    auto pb = b.node();
    return detail::make_op<T>("sub", a.shape(), std::move(out), {a, b}, [pa, pb](typename Tensor<T>::Node& self) {
        if (pa->requires_grad) {
            auto& g = Tensor<T>::grad_buf(*pa);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            auto& g = Tensor<T>::grad_buf(*pb);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("mul", a, b);
    std::vector<T> out(a.size());
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    auto pa = a.node();
    auto pb = b.node();
    return detail::make_op<T>("mul", a.shape(), std::move(out), {a, b}, [pa, pb](typename Tensor<T>::Node& self) {
        if (pa->requires_grad) {
            auto& g = Tensor<T>::grad_buf(*pa);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            auto& g = Tensor<T>::grad_buf(*pb);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
        }
    });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    std::vector<T> out(a.size());
    const auto& av = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
    auto pa = a.node();
    return detail::make_op<T>("add_scalar", a.shape(), std::move(out), {a}, [pa](typename Tensor<T>::Node& self) {
        if (!pa->requires_grad) return;
        auto& g = Tensor<T>::grad_buf(*pa);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
    std::vector<T> out(a.size());
    const auto& av = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    auto pa = a.node();
    return detail::make_op<T>("mul_scalar", a.shape(), std::move(out), {a}, [pa, c](typename Tensor<T>::Node& self) {
        if (!pa->requires_grad) return;
        auto& g = Tensor<T>::grad_buf(*pa);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    const auto& av = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
    auto pa = a.node();
    return detail::make_op<T>("relu", a.shape(), std::move(out), {a}, [pa](typename Tensor<T>::Node& self) {
        if (!pa->requires_grad) return;
        auto& g = Tensor<T>::grad_buf(*pa);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (pa->value[i] > T(0)) g[i] += self.grad[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Matrix ops (rank-2)

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_rank("matmul", a, 2);
    detail::require_rank("matmul", b, 2);
    const std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), p = b.dim(1);
    if (k != k2)
        throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    std::vector<T> out(m * p, T(0));
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T aik = av[i * k + kk];
            const T* brow = bv.data() + kk * p;
            T* orow = out.data() + i * p;
            for (std::size_t j = 0; j < p; ++j) orow[j] += aik * brow[j];
        }
    }
    auto pa = a.node();
    auto pb = b.node();
    return detail::make_op<T>(
        "matmul", {m, p}, std::move(out), {a, b}, [pa, pb, m, k, p](typename Tensor<T>::Node& self) {
            if (pa->requires_grad) {
                // dA = dC * B^T
                auto& g = Tensor<T>::grad_buf(*pa);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        T acc = T(0);
                        const T* grow = self.grad.data() + i * p;
                        const T* brow = pb->value.data() + kk * p;
                        for (std::size_t j = 0; j < p; ++j) acc += grow[j] * brow[j];
                        g[i * k + kk] += acc;
                    }
                }
            }
            if (pb->requires_grad) {
                // dB = A^T * dC
                auto& g = Tensor<T>::grad_buf(*pb);
                for (std::size_t i = 0; i < m; ++i) {
                    const T* arow = pa->value.data() + i * k;
                    const T* grow = self.grad.data() + i * p;
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const T aik = arow[kk];
                        T* gb = g.data() + kk * p;
                        for (std::size_t j = 0; j < p; ++j) gb[j] += aik * grow[j];
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    detail::require_rank("transpose", a, 2);
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<T> out(m * n);
    const auto& av = a.value();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
    auto pa = a.node();
    return detail::make_op<T>("transpose", {n, m}, std::move(out), {a}, [pa, m, n](typename Tensor<T>::Node& self) {
        if (!pa->requires_grad) return;
        auto& g = Tensor<T>::grad_buf(*pa);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
    });
}

// Broadcast a length-C bias across the rows of an R x C matrix.
template <typename T>
Tensor<T> add_rowwise(const Tensor<T>& a, const Tensor<T>& bias) {
    detail::require_rank("add_rowwise", a, 2);
    detail::require_rank("add_rowwise", bias, 1);
    const std::size_t r = a.dim(0), c = a.dim(1);
    if (bias.dim(0) != c)
        throw std::invalid_argument("add_rowwise: bias " + shape_str(bias.shape()) + " does not match columns of " +
                                    shape_str(a.shape()));
    std::vector<T> out(r * c);
    const auto& av = a.value();
    const auto& bv = bias.value();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = av[i * c + j] + bv[j];
    auto pa = a.node();
    auto pb = bias.node();
    return detail::make_op<T>("add_rowwise", a.shape(), std::move(out), {a, bias},
                              [pa, pb, r, c](typename Tensor<T>::Node& self) {
                                  if (pa->requires_grad) {
                                      auto& g = Tensor<T>::grad_buf(*pa);
                                      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  }
                                  if (pb->requires_grad) {
                                      auto& g = Tensor<T>::grad_buf(*pb);
                                      for (std::size_t i = 0; i < r; ++i)
                                          for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
                                  }
                              });
}

// ---------------------------------------------------------------------------
// Slicing and concatenation (rank-2)

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t r0, std::size_t r1) {
    detail::require_rank("slice_rows", a, 2);
    const std::size_t r = a.dim(0), c = a.dim(1);
    if (r0 >= r1 || r1 > r)
        throw std::invalid_argument("slice_rows: invalid range [" + std::to_string(r0) + ", " + std::to_string(r1) +
                                    ") for " + shape_str(a.shape()));
    std::vector<T> out(a.value().begin() + static_cast<std::ptrdiff_t>(r0 * c),
                       a.value().begin() + static_cast<std::ptrdiff_t>(r1 * c));
    auto pa = a.node();
    return detail::make_op<T>("slice_rows", {r1 - r0, c}, std::move(out), {a},
                              [pa, r0, c](typename Tensor<T>::Node& self) {
                                  if (!pa->requires_grad) return;
                                  auto& g = Tensor<T>::grad_buf(*pa);
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) g[r0 * c + i] += self.grad[i];
                              });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t c0, std::size_t c1) {
    detail::require_rank("slice_cols", a, 2);
    const std::size_t r = a.dim(0), c = a.dim(1);
    if (c0 >= c1 || c1 > c)
        throw std::invalid_argument("slice_cols: invalid range [" + std::to_string(c0) + ", " + std::to_string(c1) +
                                    ") for " + shape_str(a.shape()));
    const std::size_t w = c1 - c0;
    std::vector<T> out(r * w);
    const auto& av = a.value();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = av[i * c + c0 + j];
    auto pa = a.node();
    return detail::make_op<T>("slice_cols", {r, w}, std::move(out), {a},
                              [pa, r, c, c0, w](typename Tensor<T>::Node& self) {
                                  if (!pa->requires_grad) return;
                                  auto& g = Tensor<T>::grad_buf(*pa);
                                  for (std::size_t i = 0; i < r; ++i)
                                      for (std::size_t j = 0; j < w; ++j) g[i * c + c0 + j] += self.grad[i * w + j];
                              });
}

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_rank("concat_rows", a, 2);
    detail::require_rank("concat_rows", b, 2);
    if (a.dim(1) != b.dim(1))
        throw std::invalid_argument("concat_rows: column mismatch: " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    const std::size_t ra = a.dim(0), rb = b.dim(0), c = a.dim(1);
    std::vector<T> out;
    out.reserve((ra + rb) * c);
    out.insert(out.end(), a.value().begin(), a.value().end());
    out.insert(out.end(), b.value().begin(), b.value().end());
    auto pa = a.node();
    auto pb = b.node();
    return detail::make_op<T>("concat_rows", {ra + rb, c}, std::move(out), {a, b},
                              [pa, pb, ra, c](typename Tensor<T>::Node& self) {
                                  if (pa->requires_grad) {
                                      auto& g = Tensor<T>::grad_buf(*pa);
                                      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  }
                                  if (pb->requires_grad) {
                                      auto& g = Tensor<T>::grad_buf(*pb);
                                      const std::size_t off = ra * c;
                                      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
                                  }
                              });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    const std::size_t r = parts[0].dim(0);
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require_rank("concat_cols", p, 2);
        if (p.dim(0) != r)
            throw std::invalid_argument("concat_cols: row mismatch: " + shape_str(parts[0].shape()) + " vs " +
                                        shape_str(p.shape()));
        total += p.dim(1);
    }
    std::vector<T> out(r * total);
    std::size_t col = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(1);
        const auto& pv = p.value();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j) out[i * total + col + j] = pv[i * w + j];
        col += w;
    }
    std::vector<typename Tensor<T>::NodePtr> nodes;
    nodes.reserve(parts.size());
    for (const auto& p : parts) nodes.push_back(p.node());
    return detail::make_op<T>("concat_cols", {r, total}, std::move(out), parts,
                              [nodes, r, total](typename Tensor<T>::Node& self) {
                                  std::size_t col = 0;
                                  for (const auto& pn : nodes) {
                                      const std::size_t w = pn->shape[1];
                                      if (pn->requires_grad) {
                                          auto& g = Tensor<T>::grad_buf(*pn);
                                          for (std::size_t i = 0; i < r; ++i)
                                              for (std::size_t j = 0; j < w; ++j)
                                                  g[i * w + j] += self.grad[i * total + col + j];
                                      }
                                      col += w;
                                  }
                              });
}

// ---------------------------------------------------------------------------
// Softmax, layer norm, reductions

// Numerically stable softmax along `axis`: each line is shifted by its max
// before exponentiation. Lines sum to 1.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
    if (axis >= a.rank())
        throw std::invalid_argument("softmax: axis " + std::to_string(axis) + " out of range for " +
                                    shape_str(a.shape()));
    const Shape& sh = a.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];
    for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
    const std::size_t n = sh[axis];

    std::vector<T> out(a.size());
    const auto& av = a.value();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < inner; ++j) {
            const std::size_t base = o * n * inner + j;
            T mx = av[base];
            for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, av[base + i * inner]);
            T sum = T(0);
            for (std::size_t i = 0; i < n; ++i) {
                T e = std::exp(av[base + i * inner] - mx);
                out[base + i * inner] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (std::size_t i = 0; i < n; ++i) out[base + i * inner] *= inv;
        }
    }
    auto pa = a.node();
    return detail::make_op<T>("softmax", a.shape(), std::move(out), {a},
                              [pa, outer, inner, n](typename Tensor<T>::Node& self) {
                                  if (!pa->requires_grad) return;
                                  // dx_i = y_i * (dy_i - sum_k dy_k y_k), per line
                                  auto& g = Tensor<T>::grad_buf(*pa);
                                  for (std::size_t o = 0; o < outer; ++o) {
                                      for (std::size_t j = 0; j < inner; ++j) {
                                          const std::size_t base = o * n * inner + j;
                                          T dot = T(0);
                                          for (std::size_t i = 0; i < n; ++i) {
                                              const std::size_t idx = base + i * inner;
                                              dot += self.grad[idx] * self.value[idx];
                                          }
                                          for (std::size_t i = 0; i < n; ++i) {
                                              const std::size_t idx = base + i * inner;
                                              g[idx] += self.value[idx] * (self.grad[idx] - dot);
                                          }
                                      }
                                  }
                              });
}

// Normalizes the last axis to zero mean / unit variance, then rescales with
// gamma and shifts with beta (both length D).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-6)) {
    detail::require_rank("layer_norm", gamma, 1);
    detail::require_rank("layer_norm", beta, 1);
    if (eps <= T(0)) throw std::invalid_argument("layer_norm: eps must be positive");
    const std::size_t d = x.shape().back();
    if (gamma.dim(0) != d || beta.dim(0) != d)
        throw std::invalid_argument("layer_norm: gamma/beta length must match last axis of " + shape_str(x.shape()));
    const std::size_t rows = x.size() / d;

    std::vector<T> out(x.size());
    std::vector<T> xhat(x.size());
    std::vector<T> inv_std(rows);
    const auto& xv = x.value();
    const auto& gv = gamma.value();
    const auto& bv = beta.value();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * d;
        T mean = T(0);
        for (std::size_t i = 0; i < d; ++i) mean += row[i];
        mean /= static_cast<T>(d);
        T var = T(0);
        for (std::size_t i = 0; i < d; ++i) {
            const T dx = row[i] - mean;
            var += dx * dx;
        }
        var /= static_cast<T>(d);
        const T inv = T(1) / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (std::size_t i = 0; i < d; ++i) {
            const T xh = (row[i] - mean) * inv;
            xhat[r * d + i] = xh;
            out[r * d + i] = gv[i] * xh + bv[i];
        }
    }
    auto px = x.node();
    auto pg = gamma.node();
    auto pb = beta.node();
    return detail::make_op<T>(
        "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
        [px, pg, pb, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](typename Tensor<T>::Node& self) {
            if (px->requires_grad) {
                auto& g = Tensor<T>::grad_buf(*px);
                for (std::size_t r = 0; r < rows; ++r) {
                    T m1 = T(0), m2 = T(0);
                    for (std::size_t i = 0; i < d; ++i) {
                        const T gi = self.grad[r * d + i] * pg->value[i];
                        m1 += gi;
                        m2 += gi * xhat[r * d + i];
                    }
                    m1 /= static_cast<T>(d);
                    m2 /= static_cast<T>(d);
                    for (std::size_t i = 0; i < d; ++i) {
                        const T gi = self.grad[r * d + i] * pg->value[i];
                        g[r * d + i] += (gi - m1 - xhat[r * d + i] * m2) * inv_std[r];
                    }
                }
            }
            if (pg->requires_grad) {
                auto& g = Tensor<T>::grad_buf(*pg);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t i = 0; i < d; ++i) g[i] += self.grad[r * d + i] * xhat[r * d + i];
            }
            if (pb->requires_grad) {
                auto& g = Tensor<T>::grad_buf(*pb);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t i = 0; i < d; ++i) g[i] += self.grad[r * d + i];
            }
        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T acc = T(0);
    for (T v : a.value()) acc += v;
    auto pa = a.node();
    return detail::make_op<T>("sum", {1}, {acc}, {a}, [pa](typename Tensor<T>::Node& self) {
        if (!pa->requires_grad) return;
        auto& g = Tensor<T>::grad_buf(*pa);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    T acc = T(0);
    for (T v : a.value()) acc += v;
    const T scale = T(1) / static_cast<T>(a.size());
    auto pa = a.node();
    return detail::make_op<T>("mean", {1}, {acc * scale}, {a}, [pa, scale](typename Tensor<T>::Node& self) {
        if (!pa->requires_grad) return;
        auto& g = Tensor<T>::grad_buf(*pa);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * scale;
    });
}

} // namespace iqt
