#pragma once

// Dense-tensor engine with define-by-run reverse-mode autodiff.
// Rank 0..2 is all the model needs; every operation records a node whose
// closure pushes gradients into its parents. Graphs are built per forward
// call and never reused across steps.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "sre/errors.hpp"
#include "sre/rng.hpp"

namespace sre {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

inline long shape_numel(const Shape& s) {
    long n = 1;
    for (int d : s) n *= d;
    return n;
}

template <class R>
struct Node {
    Shape shape;
    std::vector<R> value;
    std::vector<R> grad;  // allocated on first accumulation, same length as value
    bool requires_grad = false;
    bool degenerate = false;  // set by cosine ops on zero-norm input
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this->grad, accumulates into parents' grad.
    std::function<void(Node&)> backprop;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), R(0));
    }
};

template <class R>
using NodePtr = std::shared_ptr<Node<R>>;

template <class R>
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(NodePtr<R> n) : n_(std::move(n)) {}

    static Tensor zeros(Shape shape) { return full(std::move(shape), R(0)); }
    static Tensor ones(Shape shape) { return full(std::move(shape), R(1)); }

    static Tensor full(Shape shape, R v) {
        auto n = std::make_shared<Node<R>>();
        n->value.assign(static_cast<size_t>(shape_numel(shape)), v);
        n->shape = std::move(shape);
        return Tensor(n);
    }

    static Tensor from(Shape shape, std::vector<R> values) {
        if (static_cast<long>(values.size()) != shape_numel(shape))
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        auto n = std::make_shared<Node<R>>();
        n->shape = std::move(shape);
        n->value = std::move(values);
        return Tensor(n);
    }

    static Tensor scalar(R v) { return full({}, v); }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
        auto t = zeros(std::move(shape));
        for (auto& x : t.node()->value) x = static_cast<R>(rng.normal(0.0, stddev));
        return t;
    }

    const Shape& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape.at(static_cast<size_t>(i)); }
    long numel() const { return static_cast<long>(n_->value.size()); }
    bool defined() const { return n_ != nullptr; }

    const std::vector<R>& values() const { return n_->value; }
    std::vector<R>& values() { return n_->value; }
    R item() const {
        if (n_->value.size() != 1)
            throw ShapeError("item() on non-scalar tensor " + shape_str(n_->shape));
        return n_->value[0];
    }
    R at(int i) const { return n_->value[static_cast<size_t>(i)]; }
    R at(int i, int j) const {
        return n_->value[static_cast<size_t>(i) * static_cast<size_t>(n_->shape[1]) +
                         static_cast<size_t>(j)];
    }
    void set(int i, R v) { n_->value[static_cast<size_t>(i)] = v; }
    void set(int i, int j, R v) {
        n_->value[static_cast<size_t>(i) * static_cast<size_t>(n_->shape[1]) +
                  static_cast<size_t>(j)] = v;
    }

    bool requires_grad() const { return n_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        n_->requires_grad = b;
        return *this;
    }
    std::vector<R>& grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    void zero_grad() { n_->grad.assign(n_->value.size(), R(0)); }
    bool degenerate() const { return n_->degenerate; }

    // Value copy detached from any graph.
    Tensor clone_detached() const {
        auto n = std::make_shared<Node<R>>();
        n->shape = n_->shape;
        n->value = n_->value;
        return Tensor(n);
    }

    NodePtr<R>& node() { return n_; }
    const NodePtr<R>& node() const { return n_; }

  private:
    NodePtr<R> n_;
};

namespace detail {

template <class R>
NodePtr<R> make_op(Shape shape, const char* op, std::vector<NodePtr<R>> parents,
                   std::function<void(Node<R>&)> backprop) {
    auto n = std::make_shared<Node<R>>();
    n->value.assign(static_cast<size_t>(shape_numel(shape)), R(0));
    n->shape = std::move(shape);
    n->op = op;
    bool rg = false;
    for (auto& p : parents) rg = rg || p->requires_grad;
    n->requires_grad = rg;
    if (rg) {
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
    }
    return n;
}

template <class R>
void require_same_shape(const Tensor<R>& a, const Tensor<R>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// ComputeGraph: topological ordering of the nodes reachable from a scalar
// root through grad-requiring edges. Parents appear before dependents.
// ---------------------------------------------------------------------------

template <class R>
struct ComputeGraph {
    std::vector<NodePtr<R>> order;
    NodePtr<R> root;
};

template <class R>
ComputeGraph<R> build_graph(const Tensor<R>& root) {
    ComputeGraph<R> g;
    g.root = root.node();
    if (!g.root->requires_grad) return g;
    std::unordered_set<const Node<R>*> visited;
    struct Frame {
        NodePtr<R> node;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({g.root, 0});
    visited.insert(g.root.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            NodePtr<R> p = f.node->parents[f.next_parent++];
            if (p->requires_grad && !visited.count(p.get())) {
                visited.insert(p.get());
                stack.push_back({p, 0});
            }
        } else {
            g.order.push_back(f.node);
            stack.pop_back();
        }
    }
    return g;
}

// Seeds d(root)/d(root) = 1 and pushes gradients in reverse topological
// order. Interior grads are freshly zeroed; leaf grads accumulate so that
// gradient accumulation across minibatches works.
template <class R>
void backward(const Tensor<R>& root) {
    if (root.numel() != 1)
        throw ShapeError("backward: root must be scalar, got " + shape_str(root.shape()));
    if (!root.node()->requires_grad) return;
    ComputeGraph<R> g = build_graph(root);
    for (auto& n : g.order) {
        if (n->backprop) n->grad.assign(n->value.size(), R(0));  // interior node
        else n->ensure_grad();                                   // leaf: keep accumulator
    }
    g.root->grad[0] = R(1);
    for (auto it = g.order.rbegin(); it != g.order.rend(); ++it) {
        Node<R>& n = **it;
        if (n.backprop) n.backprop(n);
    }
}

// ---------------------------------------------------------------------------
// Elementwise and arithmetic ops
// ---------------------------------------------------------------------------

template <class R>
Tensor<R> add(const Tensor<R>& a, const Tensor<R>& b) {
    detail::require_same_shape(a, b, "add");
    auto n = detail::make_op<R>(a.shape(), "add", {a.node(), b.node()},
                                [](Node<R>& self) {
                                    for (auto& p : self.parents) p->ensure_grad();
                                    auto& ga = self.parents[0]->grad;
                                    auto& gb = self.parents[1]->grad;
                                    for (size_t i = 0; i < self.grad.size(); ++i) {
                                        ga[i] += self.grad[i];
                                        gb[i] += self.grad[i];
                                    }
                                });
    for (size_t i = 0; i < n->value.size(); ++i)
        n->value[i] = a.values()[i] + b.values()[i];
    return Tensor<R>(n);
}

template <class R>
Tensor<R> sub(const Tensor<R>& a, const Tensor<R>& b) {
    detail::require_same_shape(a, b, "sub");
    auto n = detail::make_op<R>(a.shape(), "sub", {a.node(), b.node()},
                                [](Node<R>& self) {
                                    for (auto& p : self.parents) p->ensure_grad();
                                    auto& ga = self.parents[0]->grad;
                                    auto& gb = self.parents[1]->grad;
                                    for (size_t i = 0; i < self.grad.size(); ++i) {
                                        ga[i] += self.grad[i];
                                        gb[i] -= self.grad[i];
                                    }
                                });
    for (size_t i = 0; i < n->value.size(); ++i)
        n->value[i] = a.values()[i] - b.values()[i];
    return Tensor<R>(n);
}

template <class R>
Tensor<R> mul(const Tensor<R>& a, const Tensor<R>& b) {
    detail::require_same_shape(a, b, "mul");
    auto n = detail::make_op<R>(a.shape(), "mul", {a.node(), b.node()},
                                [](Node<R>& self) {
                                    for (auto& p : self.parents) p->ensure_grad();
                                    auto& ga = self.parents[0]->grad;
                                    auto& gb = self.parents[1]->grad;
                                    const auto& va = self.parents[0]->value;
                                    const auto& vb = self.parents[1]->value;
                                    for (size_t i = 0; i < self.grad.size(); ++i) {
                                        ga[i] += self.grad[i] * vb[i];
                                        gb[i] += self.grad[i] * va[i];
                                    }
                                });
    for (size_t i = 0; i < n->value.size(); ++i)
        n->value[i] = a.values()[i] * b.values()[i];
    return Tensor<R>(n);
}

template <class R>
Tensor<R> scale(const Tensor<R>& a, R c) {
    auto n = detail::make_op<R>(a.shape(), "scale", {a.node()},
                                [c](Node<R>& self) {
                                    self.parents[0]->ensure_grad();
                                    auto& ga = self.parents[0]->grad;
                                    for (size_t i = 0; i < self.grad.size(); ++i)
                                        ga[i] += self.grad[i] * c;
                                });
    for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = a.values()[i] * c;
    return Tensor<R>(n);
}

template <class R>
Tensor<R> neg(const Tensor<R>& a) {
    return scale(a, R(-1));
}

// a - s broadcast, s scalar node
template <class R>
Tensor<R> sub_broadcast(const Tensor<R>& a, const Tensor<R>& s) {
    if (s.numel() != 1)
        throw ShapeError("sub_broadcast: scalar expected, got " + shape_str(s.shape()));
    auto n = detail::make_op<R>(a.shape(), "sub_broadcast", {a.node(), s.node()},
                                [](Node<R>& self) {
                                    for (auto& p : self.parents) p->ensure_grad();
                                    auto& ga = self.parents[0]->grad;
                                    auto& gs = self.parents[1]->grad;
                                    for (size_t i = 0; i < self.grad.size(); ++i) {
                                        ga[i] += self.grad[i];
                                        gs[0] -= self.grad[i];
                                    }
                                });
    R sv = s.values()[0];
    for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = a.values()[i] - sv;
    return Tensor<R>(n);
}

template <class R>
Tensor<R> sum(const Tensor<R>& a) {
    auto n = detail::make_op<R>(Shape{}, "sum", {a.node()},
                                [](Node<R>& self) {
                                    self.parents[0]->ensure_grad();
                                    auto& ga = self.parents[0]->grad;
                                    for (auto& g : ga) g += self.grad[0];
                                });
    R acc = R(0);
    for (R v : a.values()) acc += v;
    n->value[0] = acc;
    return Tensor<R>(n);
}

template <class R>
Tensor<R> mean(const Tensor<R>& a) {
    if (a.numel() == 0) throw ShapeError("mean: empty tensor");
    R inv = R(1) / static_cast<R>(a.numel());
    auto n = detail::make_op<R>(Shape{}, "mean", {a.node()},
                                [inv](Node<R>& self) {
                                    self.parents[0]->ensure_grad();
                                    auto& ga = self.parents[0]->grad;
                                    for (auto& g : ga) g += self.grad[0] * inv;
                                });
    R acc = R(0);
    for (R v : a.values()) acc += v;
    n->value[0] = acc * inv;
    return Tensor<R>(n);
}

template <class R>
Tensor<R> exp_elem(const Tensor<R>& a) {
    auto n = detail::make_op<R>(a.shape(), "exp", {a.node()},
                                [](Node<R>& self) {
                                    self.parents[0]->ensure_grad();
                                    auto& ga = self.parents[0]->grad;
                                    for (size_t i = 0; i < self.grad.size(); ++i)
                                        ga[i] += self.grad[i] * self.value[i];
                                });
    for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = std::exp(a.values()[i]);
    return Tensor<R>(n);
}

// a * s with s a scalar node
template <class R>
Tensor<R> mul_broadcast_scalar(const Tensor<R>& a, const Tensor<R>& s) {
    if (s.numel() != 1)
        throw ShapeError("mul_broadcast_scalar: scalar expected, got " + shape_str(s.shape()));
    auto n = detail::make_op<R>(a.shape(), "mul_broadcast_scalar", {a.node(), s.node()},
                                [](Node<R>& self) {
                                    for (auto& p : self.parents) p->ensure_grad();
                                    auto& ga = self.parents[0]->grad;
                                    auto& gs = self.parents[1]->grad;
                                    const auto& va = self.parents[0]->value;
                                    R sv = self.parents[1]->value[0];
                                    for (size_t i = 0; i < self.grad.size(); ++i) {
                                        ga[i] += self.grad[i] * sv;
                                        gs[0] += self.grad[i] * va[i];
                                    }
                                });
    R sv = s.values()[0];
    for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = a.values()[i] * sv;
    return Tensor<R>(n);
}

template <class R>
Tensor<R> gelu(const Tensor<R>& a) {
    auto n = detail::make_op<R>(
        a.shape(), "gelu", {a.node()}, [](Node<R>& self) {
            self.parents[0]->ensure_grad();
            auto& ga = self.parents[0]->grad;
            const auto& x = self.parents[0]->value;
            const R k = R(0.7978845608028654);  // sqrt(2/pi)
            for (size_t i = 0; i < self.grad.size(); ++i) {
                R xi = x[i];
                R u = k * (xi + R(0.044715) * xi * xi * xi);
                R t = std::tanh(u);
                R du = k * (R(1) + R(3) * R(0.044715) * xi * xi);
                R d = R(0.5) * (R(1) + t) + R(0.5) * xi * (R(1) - t * t) * du;
                ga[i] += self.grad[i] * d;
            }
        });
    const R k = R(0.7978845608028654);
    for (size_t i = 0; i < n->value.size(); ++i) {
        R xi = a.values()[i];
        n->value[i] = R(0.5) * xi * (R(1) + std::tanh(k * (xi + R(0.044715) * xi * xi * xi)));
    }
    return Tensor<R>(n);
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

namespace detail {

// c[m x n] += a[m x k] * b[k x n]
template <class R>
void gemm_acc(const R* a, const R* b, R* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const R* arow = a + static_cast<size_t>(i) * k;
        R* crow = c + static_cast<size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            R av = arow[kk];
            const R* brow = b + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m x n] += a[m x k] * b[n x k]^T
template <class R>
void gemm_nt_acc(const R* a, const R* b, R* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const R* arow = a + static_cast<size_t>(i) * k;
        R* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const R* brow = b + static_cast<size_t>(j) * k;
            R acc = R(0);
            for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] += acc;
        }
    }
}

// c[m x n] += a[k x m]^T * b[k x n]
template <class R>
void gemm_tn_acc(const R* a, const R* b, R* c, int m, int k, int n) {
    for (int kk = 0; kk < k; ++kk) {
        const R* arow = a + static_cast<size_t>(kk) * m;
        const R* brow = b + static_cast<size_t>(kk) * n;
        for (int i = 0; i < m; ++i) {
            R av = arow[i];
            R* crow = c + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

template <class R>
Tensor<R> matmul(const Tensor<R>& a, const Tensor<R>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    int m = a.dim(0), k = a.dim(1), nn = b.dim(1);
    auto n = detail::make_op<R>(
        Shape{m, nn}, "matmul", {a.node(), b.node()}, [m, k, nn](Node<R>& self) {
            for (auto& p : self.parents) p->ensure_grad();
            // dA += dC * B^T ; dB += A^T * dC
            detail::gemm_nt_acc(self.grad.data(), self.parents[1]->value.data(),
                                self.parents[0]->grad.data(), m, nn, k);
            detail::gemm_tn_acc(self.parents[0]->value.data(), self.grad.data(),
                                self.parents[1]->grad.data(), k, m, nn);
        });
    detail::gemm_acc(a.values().data(), b.values().data(), n->value.data(), m, k, nn);
    return Tensor<R>(n);
}

// a[m x k] * b[n x k]^T, fused so attention scores skip a transpose copy
template <class R>
Tensor<R> matmul_nt(const Tensor<R>& a, const Tensor<R>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(1))
        throw ShapeError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    int m = a.dim(0), k = a.dim(1), nn = b.dim(0);
    auto n = detail::make_op<R>(
        Shape{m, nn}, "matmul_nt", {a.node(), b.node()}, [m, k, nn](Node<R>& self) {
            for (auto& p : self.parents) p->ensure_grad();
            // dA += dC * B ; dB += dC^T * A
            detail::gemm_acc(self.grad.data(), self.parents[1]->value.data(),
                             self.parents[0]->grad.data(), m, nn, k);
            detail::gemm_tn_acc(self.grad.data(), self.parents[0]->value.data(),
                                self.parents[1]->grad.data(), nn, m, k);
        });
    detail::gemm_nt_acc(a.values().data(), b.values().data(), n->value.data(), m, k, nn);
    return Tensor<R>(n);
}

template <class R>
Tensor<R> transpose(const Tensor<R>& a) {
    if (a.shape().size() != 2)
        throw ShapeError("transpose: rank-2 tensor expected, got " + shape_str(a.shape()));
    int m = a.dim(0), k = a.dim(1);
    auto n = detail::make_op<R>(Shape{k, m}, "transpose", {a.node()},
                                [m, k](Node<R>& self) {
                                    self.parents[0]->ensure_grad();
                                    auto& ga = self.parents[0]->grad;
                                    for (int i = 0; i < k; ++i)
                                        for (int j = 0; j < m; ++j)
                                            ga[static_cast<size_t>(j) * k + i] +=
                                                self.grad[static_cast<size_t>(i) * m + j];
                                });
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j)
            n->value[static_cast<size_t>(j) * m + i] = a.values()[static_cast<size_t>(i) * k + j];
    return Tensor<R>(n);
}

// X[L x d] + b[d] broadcast over rows
template <class R>
Tensor<R> add_bias_row(const Tensor<R>& x, const Tensor<R>& b) {
    if (x.shape().size() != 2 || b.shape().size() != 1 || x.dim(1) != b.dim(0))
        throw ShapeError("add_bias_row: incompatible shapes " + shape_str(x.shape()) + " and " +
                         shape_str(b.shape()));
    int L = x.dim(0), d = x.dim(1);
    auto n = detail::make_op<R>(x.shape(), "add_bias_row", {x.node(), b.node()},
                                [L, d](Node<R>& self) {
                                    for (auto& p : self.parents) p->ensure_grad();
                                    auto& gx = self.parents[0]->grad;
                                    auto& gb = self.parents[1]->grad;
                                    for (int i = 0; i < L; ++i)
                                        for (int j = 0; j < d; ++j) {
                                            R g = self.grad[static_cast<size_t>(i) * d + j];
                                            gx[static_cast<size_t>(i) * d + j] += g;
                                            gb[static_cast<size_t>(j)] += g;
                                        }
                                });
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < d; ++j)
            n->value[static_cast<size_t>(i) * d + j] =
                x.values()[static_cast<size_t>(i) * d + j] + b.values()[static_cast<size_t>(j)];
    return Tensor<R>(n);
}

// M[L] broadcast across columns: out_ij = m_i * x_ij
template <class R>
Tensor<R> scale_rows(const Tensor<R>& x, const Tensor<R>& m) {
    if (x.shape().size() != 2 || m.shape().size() != 1 || x.dim(0) != m.dim(0))
        throw ShapeError("scale_rows: incompatible shapes " + shape_str(x.shape()) + " and " +
                         shape_str(m.shape()));
    int L = x.dim(0), d = x.dim(1);
    auto n = detail::make_op<R>(x.shape(), "scale_rows", {x.node(), m.node()},
                                [L, d](Node<R>& self) {
                                    for (auto& p : self.parents) p->ensure_grad();
                                    auto& gx = self.parents[0]->grad;
                                    auto& gm = self.parents[1]->grad;
                                    const auto& vx = self.parents[0]->value;
                                    const auto& vm = self.parents[1]->value;
                                    for (int i = 0; i < L; ++i) {
                                        R mi = vm[static_cast<size_t>(i)];
                                        R acc = R(0);
                                        for (int j = 0; j < d; ++j) {
                                            size_t idx = static_cast<size_t>(i) * d + j;
                                            gx[idx] += self.grad[idx] * mi;
                                            acc += self.grad[idx] * vx[idx];
                                        }
                                        gm[static_cast<size_t>(i)] += acc;
                                    }
                                });
    for (int i = 0; i < L; ++i) {
        R mi = m.values()[static_cast<size_t>(i)];
        for (int j = 0; j < d; ++j) {
            size_t idx = static_cast<size_t>(i) * d + j;
            n->value[idx] = x.values()[idx] * mi;
        }
    }
    return Tensor<R>(n);
}

// ---------------------------------------------------------------------------
// Slicing / assembly
// ---------------------------------------------------------------------------

template <class R>
Tensor<R> slice_rows(const Tensor<R>& a, int r0, int r1) {
    if (a.shape().size() != 2 || r0 < 0 || r1 > a.dim(0) || r0 >= r1)
        throw ShapeError("slice_rows: bad range on " + shape_str(a.shape()));
    int d = a.dim(1);
    auto n = detail::make_op<R>(Shape{r1 - r0, d}, "slice_rows", {a.node()},
                                [r0, d](Node<R>& self) {
                                    self.parents[0]->ensure_grad();
                                    auto& ga = self.parents[0]->grad;
                                    size_t off = static_cast<size_t>(r0) * d;
                                    for (size_t i = 0; i < self.grad.size(); ++i)
                                        ga[off + i] += self.grad[i];
                                });
    size_t off = static_cast<size_t>(r0) * d;
    for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = a.values()[off + i];
    return Tensor<R>(n);
}

// Row extracted as a rank-1 tensor.
template <class R>
Tensor<R> row(const Tensor<R>& a, int r) {
    if (a.shape().size() != 2 || r < 0 || r >= a.dim(0))
        throw ShapeError("row: index out of range on " + shape_str(a.shape()));
    int d = a.dim(1);
    auto n = detail::make_op<R>(Shape{d}, "row", {a.node()},
                                [r, d](Node<R>& self) {
                                    self.parents[0]->ensure_grad();
                                    auto& ga = self.parents[0]->grad;
                                    size_t off = static_cast<size_t>(r) * d;
                                    for (int j = 0; j < d; ++j) ga[off + j] += self.grad[j];
                                });
    size_t off = static_cast<size_t>(r) * d;
    for (int j = 0; j < d; ++j) n->value[static_cast<size_t>(j)] = a.values()[off + j];
    return Tensor<R>(n);
}

template <class R>
Tensor<R> slice_cols(const Tensor<R>& a, int c0, int c1) {
    if (a.shape().size() != 2 || c0 < 0 || c1 > a.dim(1) || c0 >= c1)
        throw ShapeError("slice_cols: bad range on " + shape_str(a.shape()));
    int L = a.dim(0), d = a.dim(1), w = c1 - c0;
    auto n = detail::make_op<R>(Shape{L, w}, "slice_cols", {a.node()},
                                [L, d, c0, w](Node<R>& self) {
                                    self.parents[0]->ensure_grad();
                                    auto& ga = self.parents[0]->grad;
                                    for (int i = 0; i < L; ++i)
                                        for (int j = 0; j < w; ++j)
                                            ga[static_cast<size_t>(i) * d + c0 + j] +=
                                                self.grad[static_cast<size_t>(i) * w + j];
                                });
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < w; ++j)
            n->value[static_cast<size_t>(i) * w + j] = a.values()[static_cast<size_t>(i) * d + c0 + j];
    return Tensor<R>(n);
}

template <class R>
Tensor<R> concat_rows(const Tensor<R>& a, const Tensor<R>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(1))
        throw ShapeError("concat_rows: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    int d = a.dim(1);
    auto n = detail::make_op<R>(Shape{a.dim(0) + b.dim(0), d}, "concat_rows",
                                {a.node(), b.node()},
                                [](Node<R>& self) {
                                    for (auto& p : self.parents) p->ensure_grad();
                                    auto& ga = self.parents[0]->grad;
                                    auto& gb = self.parents[1]->grad;
                                    for (size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
                                    for (size_t i = 0; i < gb.size(); ++i)
                                        gb[i] += self.grad[ga.size() + i];
                                });
    std::copy(a.values().begin(), a.values().end(), n->value.begin());
    std::copy(b.values().begin(), b.values().end(),
              n->value.begin() + static_cast<long>(a.values().size()));
    return Tensor<R>(n);
}

template <class R>
Tensor<R> concat_cols(const std::vector<Tensor<R>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty input");
    int L = parts[0].dim(0);
    int total = 0;
    std::vector<NodePtr<R>> parents;
    std::vector<int> widths;
    for (const auto& p : parts) {
        if (p.shape().size() != 2 || p.dim(0) != L)
            throw ShapeError("concat_cols: incompatible shapes " + shape_str(parts[0].shape()) +
                             " and " + shape_str(p.shape()));
        widths.push_back(p.dim(1));
        total += p.dim(1);
        parents.push_back(p.node());
    }
    auto n = detail::make_op<R>(Shape{L, total}, "concat_cols", std::move(parents),
                                [L, total, widths](Node<R>& self) {
                                    int off = 0;
                                    for (size_t pi = 0; pi < self.parents.size(); ++pi) {
                                        auto& p = self.parents[pi];
                                        p->ensure_grad();
                                        int w = widths[pi];
                                        for (int i = 0; i < L; ++i)
                                            for (int j = 0; j < w; ++j)
                                                p->grad[static_cast<size_t>(i) * w + j] +=
                                                    self.grad[static_cast<size_t>(i) * total + off + j];
                                        off += w;
                                    }
                                });
    int off = 0;
    for (const auto& p : parts) {
        int w = p.dim(1);
        for (int i = 0; i < L; ++i)
            for (int j = 0; j < w; ++j)
                n->value[static_cast<size_t>(i) * total + off + j] =
                    p.values()[static_cast<size_t>(i) * w + j];
        off += w;
    }
    return Tensor<R>(n);
}

// Assembles scalars (or rank-1 pieces of equal length 1) into a vector.
template <class R>
Tensor<R> stack(const std::vector<Tensor<R>>& scalars) {
    if (scalars.empty()) throw ShapeError("stack: empty input");
    std::vector<NodePtr<R>> parents;
    for (const auto& s : scalars) {
        if (s.numel() != 1) throw ShapeError("stack: scalar expected, got " + shape_str(s.shape()));
        parents.push_back(s.node());
    }
    int n_out = static_cast<int>(scalars.size());
    auto n = detail::make_op<R>(Shape{n_out}, "stack", std::move(parents),
                                [](Node<R>& self) {
                                    for (size_t i = 0; i < self.parents.size(); ++i) {
                                        self.parents[i]->ensure_grad();
                                        self.parents[i]->grad[0] += self.grad[i];
                                    }
                                });
    for (size_t i = 0; i < scalars.size(); ++i) n->value[i] = scalars[i].values()[0];
    return Tensor<R>(n);
}

template <class R>
Tensor<R> element(const Tensor<R>& a, int i) {
    if (i < 0 || i >= a.numel())
        throw ShapeError("element: index out of range on " + shape_str(a.shape()));
    auto n = detail::make_op<R>(Shape{}, "element", {a.node()},
                                [i](Node<R>& self) {
                                    self.parents[0]->ensure_grad();
                                    self.parents[0]->grad[static_cast<size_t>(i)] += self.grad[0];
                                });
    n->value[0] = a.values()[static_cast<size_t>(i)];
    return Tensor<R>(n);
}

// ---------------------------------------------------------------------------
// Normalization / softmax / losses
// ---------------------------------------------------------------------------

// Row-wise softmax with max-subtraction. axis must name the last dimension
// (rank-1 tensors are treated as a single row).
template <class R>
Tensor<R> softmax(const Tensor<R>& a, int axis = -1) {
    int rank = static_cast<int>(a.shape().size());
    if (axis < 0) axis += rank;
    if (rank == 0 || axis != rank - 1)
        throw ShapeError("softmax: axis must be the last dimension of " + shape_str(a.shape()));
    for (R v : a.values())
        if (std::isnan(v)) throw NumericError("softmax: NaN input");
    int cols = a.dim(rank - 1);
    int rows = static_cast<int>(a.numel() / cols);
    auto n = detail::make_op<R>(
        a.shape(), "softmax", {a.node()}, [rows, cols](Node<R>& self) {
            self.parents[0]->ensure_grad();
            auto& ga = self.parents[0]->grad;
            for (int r = 0; r < rows; ++r) {
                const R* y = self.value.data() + static_cast<size_t>(r) * cols;
                const R* dy = self.grad.data() + static_cast<size_t>(r) * cols;
                R dot = R(0);
                for (int j = 0; j < cols; ++j) dot += dy[j] * y[j];
                R* gx = ga.data() + static_cast<size_t>(r) * cols;
                for (int j = 0; j < cols; ++j) gx[j] += y[j] * (dy[j] - dot);
            }
        });
    for (int r = 0; r < rows; ++r) {
        const R* x = a.values().data() + static_cast<size_t>(r) * cols;
        R* y = n->value.data() + static_cast<size_t>(r) * cols;
        R mx = x[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        R denom = R(0);
        for (int j = 0; j < cols; ++j) {
            y[j] = std::exp(x[j] - mx);
            denom += y[j];
        }
        for (int j = 0; j < cols; ++j) y[j] /= denom;
    }
    return Tensor<R>(n);
}

// Row-wise layer normalization with affine parameters.
template <class R>
Tensor<R> layer_norm(const Tensor<R>& x, const Tensor<R>& gamma, const Tensor<R>& beta,
                     R eps = R(1e-5)) {
    int rank = static_cast<int>(x.shape().size());
    int d = x.dim(rank - 1);
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d})
        throw ShapeError("layer_norm: affine params must be [" + std::to_string(d) + "], got " +
                         shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
    int rows = static_cast<int>(x.numel() / d);
    auto n = detail::make_op<R>(
        x.shape(), "layer_norm", {x.node(), gamma.node(), beta.node()},
        [rows, d, eps](Node<R>& self) {
            for (auto& p : self.parents) p->ensure_grad();
            const auto& vx = self.parents[0]->value;
            const auto& vg = self.parents[1]->value;
            auto& gx = self.parents[0]->grad;
            auto& gg = self.parents[1]->grad;
            auto& gb = self.parents[2]->grad;
            for (int r = 0; r < rows; ++r) {
                const R* xr = vx.data() + static_cast<size_t>(r) * d;
                const R* dy = self.grad.data() + static_cast<size_t>(r) * d;
                R m = R(0);
                for (int j = 0; j < d; ++j) m += xr[j];
                m /= static_cast<R>(d);
                R var = R(0);
                for (int j = 0; j < d; ++j) var += (xr[j] - m) * (xr[j] - m);
                var /= static_cast<R>(d);
                R inv = R(1) / std::sqrt(var + eps);
                // dL/dxhat_j = dy_j * gamma_j
                R sum_dxh = R(0), sum_dxh_xh = R(0);
                for (int j = 0; j < d; ++j) {
                    R xh = (xr[j] - m) * inv;
                    R dxh = dy[j] * vg[j];
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xh;
                    gg[j] += dy[j] * xh;
                    gb[j] += dy[j];
                }
                R* gxr = gx.data() + static_cast<size_t>(r) * d;
                for (int j = 0; j < d; ++j) {
                    R xh = (xr[j] - m) * inv;
                    R dxh = dy[j] * vg[j];
                    gxr[j] += inv * (dxh - sum_dxh / static_cast<R>(d) -
                                     xh * sum_dxh_xh / static_cast<R>(d));
                }
            }
        });
    for (int r = 0; r < rows; ++r) {
        const R* xr = x.values().data() + static_cast<size_t>(r) * d;
        R* y = n->value.data() + static_cast<size_t>(r) * d;
        R m = R(0);
        for (int j = 0; j < d; ++j) m += xr[j];
        m /= static_cast<R>(d);
        R var = R(0);
        for (int j = 0; j < d; ++j) var += (xr[j] - m) * (xr[j] - m);
        var /= static_cast<R>(d);
        R inv = R(1) / std::sqrt(var + eps);
        for (int j = 0; j < d; ++j)
            y[j] = (xr[j] - m) * inv * gamma.values()[static_cast<size_t>(j)] +
                   beta.values()[static_cast<size_t>(j)];
    }
    return Tensor<R>(n);
}

// Rows rescaled to unit L2 norm; zero rows pass through unchanged.
template <class R>
Tensor<R> l2_normalize_rows(const Tensor<R>& x) {
    int rank = static_cast<int>(x.shape().size());
    int d = x.dim(rank - 1);
    int rows = static_cast<int>(x.numel() / d);
    auto n = detail::make_op<R>(
        x.shape(), "l2_normalize_rows", {x.node()}, [rows, d](Node<R>& self) {
            self.parents[0]->ensure_grad();
            const auto& vx = self.parents[0]->value;
            auto& gx = self.parents[0]->grad;
            for (int r = 0; r < rows; ++r) {
                const R* xr = vx.data() + static_cast<size_t>(r) * d;
                const R* y = self.value.data() + static_cast<size_t>(r) * d;
                const R* dy = self.grad.data() + static_cast<size_t>(r) * d;
                R norm = R(0);
                for (int j = 0; j < d; ++j) norm += xr[j] * xr[j];
                norm = std::sqrt(norm);
                if (norm < R(1e-12)) continue;
                R dot = R(0);
                for (int j = 0; j < d; ++j) dot += dy[j] * y[j];
                R* gxr = gx.data() + static_cast<size_t>(r) * d;
                for (int j = 0; j < d; ++j) gxr[j] += (dy[j] - y[j] * dot) / norm;
            }
        });
    for (int r = 0; r < rows; ++r) {
        const R* xr = x.values().data() + static_cast<size_t>(r) * d;
        R* y = n->value.data() + static_cast<size_t>(r) * d;
        R norm = R(0);
        for (int j = 0; j < d; ++j) norm += xr[j] * xr[j];
        norm = std::sqrt(norm);
        if (norm < R(1e-12)) {
            for (int j = 0; j < d; ++j) y[j] = xr[j];
        } else {
            for (int j = 0; j < d; ++j) y[j] = xr[j] / norm;
        }
    }
    return Tensor<R>(n);
}

// ---------------------------------------------------------------------------
// Cosine similarity
// ---------------------------------------------------------------------------

// <a,b> / (|a| |b|). Either norm below 1e-12 yields 0 with the degenerate
// flag set (fully masked token sequences can occur early in training).
template <class R>
Tensor<R> cosine_similarity(const Tensor<R>& a, const Tensor<R>& b) {
    detail::require_same_shape(a, b, "cosine_similarity");
    long d = a.numel();
    auto n = detail::make_op<R>(
        Shape{}, "cosine_similarity", {a.node(), b.node()}, [d](Node<R>& self) {
            if (self.degenerate) return;  // zero gradient at the defined 0
            for (auto& p : self.parents) p->ensure_grad();
            const auto& va = self.parents[0]->value;
            const auto& vb = self.parents[1]->value;
            R na = R(0), nb = R(0), dot = R(0);
            for (long i = 0; i < d; ++i) {
                na += va[i] * va[i];
                nb += vb[i] * vb[i];
                dot += va[i] * vb[i];
            }
            na = std::sqrt(na);
            nb = std::sqrt(nb);
            R c = dot / (na * nb);
            R g = self.grad[0];
            auto& ga = self.parents[0]->grad;
            auto& gb = self.parents[1]->grad;
            for (long i = 0; i < d; ++i) {
                ga[i] += g * (vb[i] / (na * nb) - c * va[i] / (na * na));
                gb[i] += g * (va[i] / (na * nb) - c * vb[i] / (nb * nb));
            }
        });
    R na = R(0), nb = R(0), dot = R(0);
    for (long i = 0; i < d; ++i) {
        na += a.values()[i] * a.values()[i];
        nb += b.values()[i] * b.values()[i];
        dot += a.values()[i] * b.values()[i];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na < R(1e-12) || nb < R(1e-12)) {
        n->value[0] = R(0);
        n->degenerate = true;
    } else {
        n->value[0] = dot / (na * nb);
    }
    return Tensor<R>(n);
}

// Per-row cosine against a shared vector: M_l = cos(z_l, s). Zero-norm rows
// (or a zero-norm s) produce 0 entries with the degenerate flag.
template <class R>
Tensor<R> cosine_rows(const Tensor<R>& z, const Tensor<R>& s) {
    if (z.shape().size() != 2 || s.shape().size() != 1 || z.dim(1) != s.dim(0))
        throw ShapeError("cosine_rows: incompatible shapes " + shape_str(z.shape()) + " and " +
                         shape_str(s.shape()));
    int L = z.dim(0), d = z.dim(1);
    auto n = detail::make_op<R>(
        Shape{L}, "cosine_rows", {z.node(), s.node()}, [L, d](Node<R>& self) {
            for (auto& p : self.parents) p->ensure_grad();
            const auto& vz = self.parents[0]->value;
            const auto& vs = self.parents[1]->value;
            auto& gz = self.parents[0]->grad;
            auto& gs = self.parents[1]->grad;
            R ns = R(0);
            for (int j = 0; j < d; ++j) ns += vs[j] * vs[j];
            ns = std::sqrt(ns);
            if (ns < R(1e-12)) return;
            for (int i = 0; i < L; ++i) {
                const R* zr = vz.data() + static_cast<size_t>(i) * d;
                R nz = R(0), dot = R(0);
                for (int j = 0; j < d; ++j) {
                    nz += zr[j] * zr[j];
                    dot += zr[j] * vs[j];
                }
                nz = std::sqrt(nz);
                if (nz < R(1e-12)) continue;
                R c = dot / (nz * ns);
                R g = self.grad[static_cast<size_t>(i)];
                R* gzr = gz.data() + static_cast<size_t>(i) * d;
                for (int j = 0; j < d; ++j) {
                    gzr[j] += g * (vs[j] / (nz * ns) - c * zr[j] / (nz * nz));
                    gs[j] += g * (zr[j] / (nz * ns) - c * vs[j] / (ns * ns));
                }
            }
        });
    R ns = R(0);
    for (int j = 0; j < d; ++j) ns += s.values()[j] * s.values()[j];
    ns = std::sqrt(ns);
    for (int i = 0; i < L; ++i) {
        const R* zr = z.values().data() + static_cast<size_t>(i) * d;
        R nz = R(0), dot = R(0);
        for (int j = 0; j < d; ++j) {
            nz += zr[j] * zr[j];
            dot += zr[j] * s.values()[j];
        }
        nz = std::sqrt(nz);
        if (nz < R(1e-12) || ns < R(1e-12)) {
            n->value[static_cast<size_t>(i)] = R(0);
            n->degenerate = true;
        } else {
            n->value[static_cast<size_t>(i)] = dot / (nz * ns);
        }
    }
    return Tensor<R>(n);
}

// ---------------------------------------------------------------------------
// Classification loss head
// ---------------------------------------------------------------------------

struct NllInfo {
    bool clamped = false;
    double prob = 0.0;
};

// -log p(target | logits) with p computed by softmax. p is clamped at `floor`
// before the log; the clamped branch has zero gradient. `info`, when given,
// reports the pre-clamp probability.
template <class R>
Tensor<R> nll_loss(const Tensor<R>& logits, int target, R floor = R(1e-12),
                   NllInfo* info = nullptr) {
    if (logits.shape().size() != 1)
        throw ShapeError("nll_loss: rank-1 logits expected, got " + shape_str(logits.shape()));
    if (target < 0 || target >= logits.dim(0))
        throw LabelError("nll_loss: target " + std::to_string(target) + " outside " +
                         shape_str(logits.shape()));
    int c = logits.dim(0);
    auto n = detail::make_op<R>(
        Shape{}, "nll_loss", {logits.node()}, [c, target, floor](Node<R>& self) {
            const auto& x = self.parents[0]->value;
            R mx = x[0];
            for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
            R denom = R(0);
            for (int j = 0; j < c; ++j) denom += std::exp(x[j] - mx);
            R p = std::exp(x[static_cast<size_t>(target)] - mx) / denom;
            if (p < floor) return;  // clamped: zero gradient
            self.parents[0]->ensure_grad();
            auto& gx = self.parents[0]->grad;
            R g = self.grad[0];
            for (int j = 0; j < c; ++j) {
                R pj = std::exp(x[static_cast<size_t>(j)] - mx) / denom;
                gx[static_cast<size_t>(j)] += g * (pj - (j == target ? R(1) : R(0)));
            }
        });
    const auto& x = logits.values();
    R mx = x[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    R denom = R(0);
    for (int j = 0; j < c; ++j) denom += std::exp(x[j] - mx);
    R p = std::exp(x[static_cast<size_t>(target)] - mx) / denom;
    bool clamped = p < floor;
    n->value[0] = -std::log(clamped ? floor : p);
    if (info) {
        info->clamped = clamped;
        info->prob = static_cast<double>(p);
    }
    return Tensor<R>(n);
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// f must rebuild its graph on every call (define-by-run). 64-bit only.
inline double grad_check(const std::function<Tensor<double>()>& f,
                         const std::vector<Tensor<double>*>& params, double h = 1e-5) {
    for (auto* p : params) p->zero_grad();
    Tensor<double> root = f();
    backward(root);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto* p : params) analytic.push_back(p->grad());

    double max_err = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<double>& p = *params[pi];
        for (long i = 0; i < p.numel(); ++i) {
            double orig = p.values()[static_cast<size_t>(i)];
            p.values()[static_cast<size_t>(i)] = orig + h;
            double fp = f().item();
            p.values()[static_cast<size_t>(i)] = orig - h;
            double fm = f().item();
            p.values()[static_cast<size_t>(i)] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("grad_check: non-finite f at perturbed point");
            double fd = (fp - fm) / (2.0 * h);
            double a = analytic[pi][static_cast<size_t>(i)];
            double err = std::abs(a - fd) / std::max(1.0, std::abs(a));
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

// Same check restricted to chosen coordinates of each parameter
// (params[i] -> coords[i]); used for sampled checks over large tensors.
inline double grad_check_coords(const std::function<Tensor<double>()>& f,
                                const std::vector<Tensor<double>*>& params,
                                const std::vector<std::vector<long>>& coords, double h = 1e-5) {
    for (auto* p : params) p->zero_grad();
    Tensor<double> root = f();
    backward(root);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto* p : params) analytic.push_back(p->grad());

    double max_err = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<double>& p = *params[pi];
        for (long i : coords[pi]) {
            double orig = p.values()[static_cast<size_t>(i)];
            p.values()[static_cast<size_t>(i)] = orig + h;
            double fp = f().item();
            p.values()[static_cast<size_t>(i)] = orig - h;
            double fm = f().item();
            p.values()[static_cast<size_t>(i)] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("grad_check: non-finite f at perturbed point");
            double fd = (fp - fm) / (2.0 * h);
            double a = analytic[pi][static_cast<size_t>(i)];
            double err = std::abs(a - fd) / std::max(1.0, std::abs(a));
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

}  // namespace sre
