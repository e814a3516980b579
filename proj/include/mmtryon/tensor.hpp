#pragma once

// Reverse-mode autodiff over dense row-major tensors, templated on the
// scalar type: float for training runs, double for finite-difference
// verification. Matrix products go through Eigen; everything else is
// straightforward loops sized for desk-scale models.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "mmtryon/errors.hpp"
#include "mmtryon/rng.hpp"

namespace mmtryon {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
    return r + "]";
}

// --------------------------------------------------------------------------
// grad mode (thread local)
// --------------------------------------------------------------------------

struct GradMode {
    static bool& enabled() {
        thread_local bool on = true;
        return on;
    }
};

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(GradMode::enabled()) { GradMode::enabled() = false; }
    ~NoGradGuard() { GradMode::enabled() = prev; }
};

// --------------------------------------------------------------------------
// tensor node
// --------------------------------------------------------------------------

template <class S>
struct TensorNode {
    Shape shape;
    std::vector<S> v;
    std::vector<S> g;  // empty until touched by backward
    bool requires_grad = false;  // leaf parameter flag
    bool needs_grad = false;     // part of an active graph
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;
    const char* op = "";

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    void ensure_grad() {
        if (g.size() != v.size()) g.assign(v.size(), S(0));
    }
};

template <class S>
class Tensor {
public:
    Tensor() : n_(nullptr) {}
    explicit Tensor(Shape shape, S fill = S(0)) : n_(std::make_shared<TensorNode<S>>()) {
        n_->shape = std::move(shape);
        n_->v.assign(static_cast<size_t>(shape_numel(n_->shape)), fill);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), S(0)); }
    static Tensor full(Shape shape, S value) { return Tensor(std::move(shape), value); }
    static Tensor from_data(Shape shape, std::vector<S> data) {
        Tensor t;
        t.n_ = std::make_shared<TensorNode<S>>();
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw std::invalid_argument("from_data: shape/data size mismatch");
        t.n_->shape = std::move(shape);
        t.n_->v = std::move(data);
        return t;
    }
    static Tensor randn(Shape shape, RandomStream& rs, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (auto& x : t.n_->v) x = static_cast<S>(rs.normal() * stddev);
        return t;
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int64_t dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(n_->shape.size()); }
    int64_t numel() const { return n_ ? n_->numel() : 0; }

    S* data() { return n_->v.data(); }
    const S* data() const { return n_->v.data(); }
    std::vector<S>& values() { return n_->v; }
    const std::vector<S>& values() const { return n_->v; }
    S item() const {
        if (numel() != 1) throw std::invalid_argument("item(): tensor is not scalar");
        return n_->v[0];
    }

    Tensor& set_requires_grad(bool b = true) {
        n_->requires_grad = b;
        n_->needs_grad = b;
        return *this;
    }
    bool requires_grad() const { return n_->requires_grad; }
    bool needs_grad() const { return n_ && n_->needs_grad; }

    const std::vector<S>& grad() const { return n_->g; }
    std::vector<S>& grad_mut() {
        n_->ensure_grad();
        return n_->g;
    }
    void zero_grad() {
        if (!n_->g.empty()) std::fill(n_->g.begin(), n_->g.end(), S(0));
    }

    // Value copy detached from any graph.
    Tensor detached() const {
        Tensor t;
        t.n_ = std::make_shared<TensorNode<S>>();
        t.n_->shape = n_->shape;
        t.n_->v = n_->v;
        return t;
    }

    bool all_finite() const {
        for (S x : n_->v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    std::shared_ptr<TensorNode<S>> node() const { return n_; }

    // Scalar-root backward pass.
    void backward() {
        if (numel() != 1) throw std::invalid_argument("backward(): root must be scalar");
        // children-first topological order via iterative post-order DFS
        std::vector<TensorNode<S>*> order;
        std::unordered_set<TensorNode<S>*> seen;
        struct Frame {
            TensorNode<S>* node;
            size_t next;
        };
        std::vector<Frame> stack{{n_.get(), 0}};
        seen.insert(n_.get());
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next < f.node->parents.size()) {
                TensorNode<S>* p = f.node->parents[f.next++].get();
                if (p->needs_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                order.push_back(f.node);
                stack.pop_back();
            }
        }
        n_->ensure_grad();
        n_->g[0] = S(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            TensorNode<S>* node = *it;
            if (node->backward_fn && !node->g.empty()) node->backward_fn(*node);
        }
    }

private:
    std::shared_ptr<TensorNode<S>> n_;
};

// --------------------------------------------------------------------------
// op plumbing
// --------------------------------------------------------------------------

namespace detail {

template <class S>
inline bool trace_active(std::initializer_list<const Tensor<S>*> inputs) {
    if (!GradMode::enabled()) return false;
    for (const Tensor<S>* t : inputs)
        if ((*t).needs_grad()) return true;
    return false;
}

template <class S>
inline void wire(Tensor<S>& out, std::initializer_list<const Tensor<S>*> inputs,
                 const char* op, std::function<void(TensorNode<S>&)> fn) {
    auto node = out.node();
    node->op = op;
    node->needs_grad = true;
    for (const Tensor<S>* t : inputs) node->parents.push_back(t->node());
    node->backward_fn = std::move(fn);
}

template <class S>
using EigenMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<EigenMat<S>>;
template <class S>
using CMatMap = Eigen::Map<const EigenMat<S>>;

}  // namespace detail

#define MMT_CHECK_ARG(cond, msg) \
    do { \
        if (!(cond)) throw std::invalid_argument(msg); \
    } while (0)

// --------------------------------------------------------------------------
// elementwise
// --------------------------------------------------------------------------

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    MMT_CHECK_ARG(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<S> out(a.shape());
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] + pb[i];
    if (detail::trace_active<S>({&a, &b})) {
        auto an = a.node(), bn = b.node();
        detail::wire<S>(out, {&a, &b}, "add", [an, bn](TensorNode<S>& self) {
            if (an->needs_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < self.g.size(); ++i) an->g[i] += self.g[i];
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < self.g.size(); ++i) bn->g[i] += self.g[i];
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    MMT_CHECK_ARG(a.shape() == b.shape(), "sub: shape mismatch");
    Tensor<S> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (detail::trace_active<S>({&a, &b})) {
        auto an = a.node(), bn = b.node();
        detail::wire<S>(out, {&a, &b}, "sub", [an, bn](TensorNode<S>& self) {
            if (an->needs_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < self.g.size(); ++i) an->g[i] += self.g[i];
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < self.g.size(); ++i) bn->g[i] -= self.g[i];
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    MMT_CHECK_ARG(a.shape() == b.shape(), "mul: shape mismatch");
    Tensor<S> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (detail::trace_active<S>({&a, &b})) {
        auto an = a.node(), bn = b.node();
        detail::wire<S>(out, {&a, &b}, "mul", [an, bn](TensorNode<S>& self) {
            if (an->needs_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < self.g.size(); ++i) an->g[i] += self.g[i] * bn->v[i];
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < self.g.size(); ++i) bn->g[i] += self.g[i] * an->v[i];
            }
        });
    }
    return out;
}

// elementwise product with a constant (no gradient into the constant)
template <class S>
Tensor<S> mul_const(const Tensor<S>& a, const std::vector<S>& c) {
    MMT_CHECK_ARG(static_cast<int64_t>(c.size()) == a.numel(), "mul_const: size mismatch");
    Tensor<S> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * c[i];
    if (detail::trace_active<S>({&a})) {
        auto an = a.node();
        auto cc = c;
        detail::wire<S>(out, {&a}, "mul_const", [an, cc](TensorNode<S>& self) {
            an->ensure_grad();
            for (size_t i = 0; i < self.g.size(); ++i) an->g[i] += self.g[i] * cc[i];
        });
    }
    return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
    Tensor<S> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * c;
    if (detail::trace_active<S>({&a})) {
        auto an = a.node();
        detail::wire<S>(out, {&a}, "scale", [an, c](TensorNode<S>& self) {
            an->ensure_grad();
            for (size_t i = 0; i < self.g.size(); ++i) an->g[i] += self.g[i] * c;
        });
    }
    return out;
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& a) {
    Tensor<S> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i)
        out.data()[i] = S(1) / (S(1) + std::exp(-a.data()[i]));
    if (detail::trace_active<S>({&a})) {
        auto an = a.node(), on = out.node();
        detail::wire<S>(out, {&a}, "sigmoid", [an, on](TensorNode<S>& self) {
            an->ensure_grad();
            for (size_t i = 0; i < self.g.size(); ++i) {
                S y = on->v[i];
                an->g[i] += self.g[i] * y * (S(1) - y);
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> silu(const Tensor<S>& a) {
    Tensor<S> out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) {
        S x = a.data()[i];
        out.data()[i] = x / (S(1) + std::exp(-x));
    }
    if (detail::trace_active<S>({&a})) {
        auto an = a.node();
        detail::wire<S>(out, {&a}, "silu", [an](TensorNode<S>& self) {
            an->ensure_grad();
            for (size_t i = 0; i < self.g.size(); ++i) {
                S x = an->v[i];
                S s = S(1) / (S(1) + std::exp(-x));
                an->g[i] += self.g[i] * (s + x * s * (S(1) - s));
            }
        });
    }
    return out;
}

// --------------------------------------------------------------------------
// matmul / linear
// --------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    MMT_CHECK_ARG(a.ndim() == 2 && b.ndim() == 2, "matmul: expects 2-D tensors");
    MMT_CHECK_ARG(a.dim(1) == b.dim(0), "matmul: inner dim mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<S> out(Shape{m, n});
    detail::CMatMap<S> A(a.data(), m, k), B(b.data(), k, n);
    detail::MatMap<S> O(out.data(), m, n);
    O.noalias() = A * B;
    if (detail::trace_active<S>({&a, &b})) {
        auto an = a.node(), bn = b.node();
        detail::wire<S>(out, {&a, &b}, "matmul", [an, bn, m, k, n](TensorNode<S>& self) {
            detail::CMatMap<S> G(self.g.data(), m, n);
            if (an->needs_grad) {
                an->ensure_grad();
                detail::CMatMap<S> B(bn->v.data(), k, n);
                detail::MatMap<S> GA(an->g.data(), m, k);
                GA.noalias() += G * B.transpose();
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                detail::CMatMap<S> A(an->v.data(), m, k);
                detail::MatMap<S> GB(bn->g.data(), k, n);
                GB.noalias() += A.transpose() * G;
            }
        });
    }
    return out;
}

// x [m, n] + b [n] broadcast over rows
template <class S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& b) {
    MMT_CHECK_ARG(x.ndim() == 2 && b.ndim() == 1 && x.dim(1) == b.dim(0), "add_rowvec: shape mismatch");
    int64_t m = x.dim(0), n = x.dim(1);
    Tensor<S> out(x.shape());
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out.data()[i * n + j] = x.data()[i * n + j] + b.data()[j];
    if (detail::trace_active<S>({&x, &b})) {
        auto xn = x.node(), bn = b.node();
        detail::wire<S>(out, {&x, &b}, "add_rowvec", [xn, bn, m, n](TensorNode<S>& self) {
            if (xn->needs_grad) {
                xn->ensure_grad();
                for (size_t i = 0; i < self.g.size(); ++i) xn->g[i] += self.g[i];
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < n; ++j) bn->g[j] += self.g[i * n + j];
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
    return add_rowvec(matmul(x, w), b);
}

// --------------------------------------------------------------------------
// shape ops
// --------------------------------------------------------------------------

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
    MMT_CHECK_ARG(shape_numel(shape) == a.numel(), "reshape: numel mismatch");
    Tensor<S> out = Tensor<S>::from_data(std::move(shape), a.values());
    if (detail::trace_active<S>({&a})) {
        auto an = a.node();
        detail::wire<S>(out, {&a}, "reshape", [an](TensorNode<S>& self) {
            an->ensure_grad();
            for (size_t i = 0; i < self.g.size(); ++i) an->g[i] += self.g[i];
        });
    }
    return out;
}

// [m, n] -> [n, m]
template <class S>
Tensor<S> transpose2d(const Tensor<S>& a) {
    MMT_CHECK_ARG(a.ndim() == 2, "transpose2d: expects 2-D");
    int64_t m = a.dim(0), n = a.dim(1);
    Tensor<S> out(Shape{n, m});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
    if (detail::trace_active<S>({&a})) {
        auto an = a.node();
        detail::wire<S>(out, {&a}, "transpose2d", [an, m, n](TensorNode<S>& self) {
            an->ensure_grad();
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) an->g[i * n + j] += self.g[j * m + i];
        });
    }
    return out;
}

// concat along axis 0; all trailing dims must match
template <class S>
Tensor<S> concat0(const std::vector<Tensor<S>>& parts) {
    MMT_CHECK_ARG(!parts.empty(), "concat0: empty input");
    Shape shape = parts[0].shape();
    int64_t rows = 0;
    int64_t rest = shape_numel(shape) / shape[0];
    for (const auto& p : parts) {
        MMT_CHECK_ARG(p.ndim() == static_cast<int>(shape.size()), "concat0: rank mismatch");
        for (size_t d = 1; d < shape.size(); ++d)
            MMT_CHECK_ARG(p.shape()[d] == shape[d], "concat0: trailing dim mismatch");
        rows += p.dim(0);
    }
    shape[0] = rows;
    Tensor<S> out(shape);
    int64_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.numel(), out.data() + off);
        off += p.numel();
    }
    bool active = false;
    for (const auto& p : parts)
        if (GradMode::enabled() && p.needs_grad()) active = true;
    if (active) {
        std::vector<std::shared_ptr<TensorNode<S>>> nodes;
        for (const auto& p : parts) nodes.push_back(p.node());
        auto node = out.node();
        node->op = "concat0";
        node->needs_grad = true;
        for (auto& n : nodes) node->parents.push_back(n);
        node->backward_fn = [nodes](TensorNode<S>& self) {
            int64_t off = 0;
            for (auto& n : nodes) {
                int64_t cnt = n->numel();
                if (n->needs_grad) {
                    n->ensure_grad();
                    for (int64_t i = 0; i < cnt; ++i) n->g[i] += self.g[off + i];
                }
                off += cnt;
            }
        };
        (void)rest;
    }
    return out;
}

// rows [r0, r1) along axis 0
template <class S>
Tensor<S> slice0(const Tensor<S>& a, int64_t r0, int64_t r1) {
    MMT_CHECK_ARG(0 <= r0 && r0 < r1 && r1 <= a.dim(0), "slice0: bad range");
    Shape shape = a.shape();
    int64_t rest = a.numel() / shape[0];
    shape[0] = r1 - r0;
    Tensor<S> out(shape);
    std::copy(a.data() + r0 * rest, a.data() + r1 * rest, out.data());
    if (detail::trace_active<S>({&a})) {
        auto an = a.node();
        detail::wire<S>(out, {&a}, "slice0", [an, r0, rest](TensorNode<S>& self) {
            an->ensure_grad();
            for (size_t i = 0; i < self.g.size(); ++i) an->g[static_cast<size_t>(r0 * rest) + i] += self.g[i];
        });
    }
    return out;
}

// columns [c0, c1) of a 2-D tensor
template <class S>
Tensor<S> slice_cols(const Tensor<S>& a, int64_t c0, int64_t c1) {
    MMT_CHECK_ARG(a.ndim() == 2 && 0 <= c0 && c0 < c1 && c1 <= a.dim(1), "slice_cols: bad range");
    int64_t m = a.dim(0), n = a.dim(1), w = c1 - c0;
    Tensor<S> out(Shape{m, w});
    for (int64_t i = 0; i < m; ++i)
        std::copy(a.data() + i * n + c0, a.data() + i * n + c1, out.data() + i * w);
    if (detail::trace_active<S>({&a})) {
        auto an = a.node();
        detail::wire<S>(out, {&a}, "slice_cols", [an, m, n, c0, w](TensorNode<S>& self) {
            an->ensure_grad();
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < w; ++j) an->g[i * n + c0 + j] += self.g[i * w + j];
        });
    }
    return out;
}

// concat 2-D tensors along columns; all row counts must match
template <class S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
    MMT_CHECK_ARG(!parts.empty(), "concat_cols: empty input");
    int64_t m = parts[0].dim(0);
    int64_t n = 0;
    for (const auto& p : parts) {
        MMT_CHECK_ARG(p.ndim() == 2 && p.dim(0) == m, "concat_cols: row mismatch");
        n += p.dim(1);
    }
    Tensor<S> out(Shape{m, n});
    int64_t c = 0;
    for (const auto& p : parts) {
        int64_t w = p.dim(1);
        for (int64_t i = 0; i < m; ++i)
            std::copy(p.data() + i * w, p.data() + (i + 1) * w, out.data() + i * n + c);
        c += w;
    }
    bool active = false;
    for (const auto& p : parts)
        if (GradMode::enabled() && p.needs_grad()) active = true;
    if (active) {
        std::vector<std::shared_ptr<TensorNode<S>>> nodes;
        std::vector<int64_t> widths;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            widths.push_back(p.dim(1));
        }
        auto node = out.node();
        node->op = "concat_cols";
        node->needs_grad = true;
        for (auto& nn : nodes) node->parents.push_back(nn);
        node->backward_fn = [nodes, widths, m, n](TensorNode<S>& self) {
            int64_t c = 0;
            for (size_t k = 0; k < nodes.size(); ++k) {
                int64_t w = widths[k];
                if (nodes[k]->needs_grad) {
                    nodes[k]->ensure_grad();
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t j = 0; j < w; ++j) nodes[k]->g[i * w + j] += self.g[i * n + c + j];
                }
                c += w;
            }
        };
    }
    return out;
}

// --------------------------------------------------------------------------
// softmax / norms / reductions
// --------------------------------------------------------------------------

// row-wise softmax over the last dim of a 2-D tensor
template <class S>
Tensor<S> softmax_rows(const Tensor<S>& a) {
    MMT_CHECK_ARG(a.ndim() == 2, "softmax_rows: expects 2-D");
    int64_t m = a.dim(0), n = a.dim(1);
    Tensor<S> out(a.shape());
    for (int64_t i = 0; i < m; ++i) {
        const S* r = a.data() + i * n;
        S* o = out.data() + i * n;
        S mx = r[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, r[j]);
        S sum = S(0);
        for (int64_t j = 0; j < n; ++j) {
            o[j] = std::exp(r[j] - mx);
            sum += o[j];
        }
        for (int64_t j = 0; j < n; ++j) o[j] /= sum;
    }
    if (detail::trace_active<S>({&a})) {
        auto an = a.node(), on = out.node();
        detail::wire<S>(out, {&a}, "softmax", [an, on, m, n](TensorNode<S>& self) {
            an->ensure_grad();
            for (int64_t i = 0; i < m; ++i) {
                const S* y = on->v.data() + i * n;
                const S* gy = self.g.data() + i * n;
                S dot = S(0);
                for (int64_t j = 0; j < n; ++j) dot += gy[j] * y[j];
                for (int64_t j = 0; j < n; ++j) an->g[i * n + j] += y[j] * (gy[j] - dot);
            }
        });
    }
    return out;
}

// LayerNorm over the last dim of a 2-D tensor, learned gamma/beta [n]
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps = S(1e-5)) {
    MMT_CHECK_ARG(x.ndim() == 2 && gamma.ndim() == 1 && beta.ndim() == 1, "layer_norm: bad shapes");
    int64_t m = x.dim(0), n = x.dim(1);
    MMT_CHECK_ARG(gamma.dim(0) == n && beta.dim(0) == n, "layer_norm: gamma/beta dim mismatch");
    Tensor<S> out(x.shape());
    std::vector<S> mean(m), rstd(m);
    for (int64_t i = 0; i < m; ++i) {
        const S* r = x.data() + i * n;
        S mu = S(0);
        for (int64_t j = 0; j < n; ++j) mu += r[j];
        mu /= S(n);
        S var = S(0);
        for (int64_t j = 0; j < n; ++j) var += (r[j] - mu) * (r[j] - mu);
        var /= S(n);
        S rs = S(1) / std::sqrt(var + eps);
        mean[i] = mu;
        rstd[i] = rs;
        S* o = out.data() + i * n;
        for (int64_t j = 0; j < n; ++j) o[j] = (r[j] - mu) * rs * gamma.data()[j] + beta.data()[j];
    }
    if (detail::trace_active<S>({&x, &gamma, &beta})) {
        auto xn = x.node(), gn = gamma.node(), bn = beta.node();
        detail::wire<S>(out, {&x, &gamma, &beta}, "layer_norm",
                        [xn, gn, bn, mean, rstd, m, n](TensorNode<S>& self) {
                            for (int64_t i = 0; i < m; ++i) {
                                const S* xr = xn->v.data() + i * n;
                                const S* gy = self.g.data() + i * n;
                                S mu = mean[i], rs = rstd[i];
                                if (gn->needs_grad) {
                                    gn->ensure_grad();
                                    for (int64_t j = 0; j < n; ++j) gn->g[j] += gy[j] * (xr[j] - mu) * rs;
                                }
                                if (bn->needs_grad) {
                                    bn->ensure_grad();
                                    for (int64_t j = 0; j < n; ++j) bn->g[j] += gy[j];
                                }
                                if (xn->needs_grad) {
                                    xn->ensure_grad();
                                    // dL/dx for normalized affine transform
                                    S sum_gyg = S(0), sum_gyg_xhat = S(0);
                                    for (int64_t j = 0; j < n; ++j) {
                                        S gyg = gy[j] * gn->v[j];
                                        S xhat = (xr[j] - mu) * rs;
                                        sum_gyg += gyg;
                                        sum_gyg_xhat += gyg * xhat;
                                    }
                                    for (int64_t j = 0; j < n; ++j) {
                                        S gyg = gy[j] * gn->v[j];
                                        S xhat = (xr[j] - mu) * rs;
                                        xn->g[i * n + j] += rs * (gyg - (sum_gyg + xhat * sum_gyg_xhat) / S(n));
                                    }
                                }
                            }
                        });
    }
    return out;
}

// GroupNorm over [C, H, W] with learned per-channel gamma/beta
template <class S>
Tensor<S> group_norm(const Tensor<S>& x, int groups, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = S(1e-5)) {
    MMT_CHECK_ARG(x.ndim() == 3, "group_norm: expects [C,H,W]");
    int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    MMT_CHECK_ARG(C % groups == 0, "group_norm: channels not divisible by groups");
    MMT_CHECK_ARG(gamma.dim(0) == C && beta.dim(0) == C, "group_norm: gamma/beta dim mismatch");
    int64_t cg = C / groups, hw = H * W, gsize = cg * hw;
    Tensor<S> out(x.shape());
    std::vector<S> mean(groups), rstd(groups);
    for (int g = 0; g < groups; ++g) {
        const S* base = x.data() + g * gsize;
        S mu = S(0);
        for (int64_t i = 0; i < gsize; ++i) mu += base[i];
        mu /= S(gsize);
        S var = S(0);
        for (int64_t i = 0; i < gsize; ++i) var += (base[i] - mu) * (base[i] - mu);
        var /= S(gsize);
        S rs = S(1) / std::sqrt(var + eps);
        mean[g] = mu;
        rstd[g] = rs;
        for (int64_t c = 0; c < cg; ++c) {
            int64_t ch = g * cg + c;
            S ga = gamma.data()[ch], be = beta.data()[ch];
            const S* xr = x.data() + ch * hw;
            S* o = out.data() + ch * hw;
            for (int64_t i = 0; i < hw; ++i) o[i] = (xr[i] - mu) * rs * ga + be;
        }
    }
    if (detail::trace_active<S>({&x, &gamma, &beta})) {
        auto xn = x.node(), gn = gamma.node(), bn = beta.node();
        detail::wire<S>(out, {&x, &gamma, &beta}, "group_norm",
                        [xn, gn, bn, mean, rstd, groups, cg, hw, gsize](TensorNode<S>& self) {
                            for (int g = 0; g < groups; ++g) {
                                S mu = mean[g], rs = rstd[g];
                                if (gn->needs_grad || bn->needs_grad) {
                                    if (gn->needs_grad) gn->ensure_grad();
                                    if (bn->needs_grad) bn->ensure_grad();
                                    for (int64_t c = 0; c < cg; ++c) {
                                        int64_t ch = g * cg + c;
                                        const S* xr = xn->v.data() + ch * hw;
                                        const S* gy = self.g.data() + ch * hw;
                                        for (int64_t i = 0; i < hw; ++i) {
                                            if (gn->needs_grad) gn->g[ch] += gy[i] * (xr[i] - mu) * rs;
                                            if (bn->needs_grad) bn->g[ch] += gy[i];
                                        }
                                    }
                                }
                                if (xn->needs_grad) {
                                    xn->ensure_grad();
                                    S sum_gyg = S(0), sum_gyg_xhat = S(0);
                                    for (int64_t c = 0; c < cg; ++c) {
                                        int64_t ch = g * cg + c;
                                        const S* xr = xn->v.data() + ch * hw;
                                        const S* gy = self.g.data() + ch * hw;
                                        S ga = gn->v[ch];
                                        for (int64_t i = 0; i < hw; ++i) {
                                            S gyg = gy[i] * ga;
                                            sum_gyg += gyg;
                                            sum_gyg_xhat += gyg * (xr[i] - mu) * rs;
                                        }
                                    }
                                    for (int64_t c = 0; c < cg; ++c) {
                                        int64_t ch = g * cg + c;
                                        const S* xr = xn->v.data() + ch * hw;
                                        const S* gy = self.g.data() + ch * hw;
                                        S ga = gn->v[ch];
                                        for (int64_t i = 0; i < hw; ++i) {
                                            S gyg = gy[i] * ga;
                                            S xhat = (xr[i] - mu) * rs;
                                            xn->g[ch * hw + i] +=
                                                rs * (gyg - (sum_gyg + xhat * sum_gyg_xhat) / S(gsize));
                                        }
                                    }
                                }
                            }
                        });
    }
    return out;
}

template <class S>
Tensor<S> mean_all(const Tensor<S>& a) {
    Tensor<S> out(Shape{1});
    S acc = S(0);
    for (int64_t i = 0; i < a.numel(); ++i) acc += a.data()[i];
    out.data()[0] = acc / S(a.numel());
    if (detail::trace_active<S>({&a})) {
        auto an = a.node();
        int64_t n = a.numel();
        detail::wire<S>(out, {&a}, "mean_all", [an, n](TensorNode<S>& self) {
            an->ensure_grad();
            S k = self.g[0] / S(n);
            for (int64_t i = 0; i < n; ++i) an->g[i] += k;
        });
    }
    return out;
}

template <class S>
Tensor<S> sum_all(const Tensor<S>& a) {
    Tensor<S> out(Shape{1});
    S acc = S(0);
    for (int64_t i = 0; i < a.numel(); ++i) acc += a.data()[i];
    out.data()[0] = acc;
    if (detail::trace_active<S>({&a})) {
        auto an = a.node();
        int64_t n = a.numel();
        detail::wire<S>(out, {&a}, "sum_all", [an, n](TensorNode<S>& self) {
            an->ensure_grad();
            for (int64_t i = 0; i < n; ++i) an->g[i] += self.g[0];
        });
    }
    return out;
}

// mean squared error, averaged over every element
template <class S>
Tensor<S> mse_loss(const Tensor<S>& pred, const Tensor<S>& target) {
    MMT_CHECK_ARG(pred.shape() == target.shape(), "mse_loss: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    Tensor<S> out(Shape{1});
    int64_t n = pred.numel();
    S acc = S(0);
    for (int64_t i = 0; i < n; ++i) {
        S d = pred.data()[i] - target.data()[i];
        acc += d * d;
    }
    out.data()[0] = acc / S(n);
    if (detail::trace_active<S>({&pred, &target})) {
        auto pn = pred.node(), tn = target.node();
        detail::wire<S>(out, {&pred, &target}, "mse", [pn, tn, n](TensorNode<S>& self) {
            S k = self.g[0] * S(2) / S(n);
            if (pn->needs_grad) {
                pn->ensure_grad();
                for (int64_t i = 0; i < n; ++i) pn->g[i] += k * (pn->v[i] - tn->v[i]);
            }
            if (tn->needs_grad) {
                tn->ensure_grad();
                for (int64_t i = 0; i < n; ++i) tn->g[i] -= k * (pn->v[i] - tn->v[i]);
            }
        });
    }
    return out;
}

// --------------------------------------------------------------------------
// embedding lookup
// --------------------------------------------------------------------------

template <class S>
Tensor<S> embedding(const Tensor<S>& table, const std::vector<int>& ids) {
    MMT_CHECK_ARG(table.ndim() == 2, "embedding: table must be [V,D]");
    int64_t V = table.dim(0), D = table.dim(1);
    int64_t L = static_cast<int64_t>(ids.size());
    Tensor<S> out(Shape{L, D});
    for (int64_t i = 0; i < L; ++i) {
        MMT_CHECK_ARG(ids[i] >= 0 && ids[i] < V, "embedding: id out of range");
        std::copy(table.data() + ids[i] * D, table.data() + (ids[i] + 1) * D, out.data() + i * D);
    }
    if (detail::trace_active<S>({&table})) {
        auto tn = table.node();
        auto idc = ids;
        detail::wire<S>(out, {&table}, "embedding", [tn, idc, D](TensorNode<S>& self) {
            tn->ensure_grad();
            for (size_t i = 0; i < idc.size(); ++i)
                for (int64_t j = 0; j < D; ++j) tn->g[idc[i] * D + j] += self.g[i * D + j];
        });
    }
    return out;
}

// --------------------------------------------------------------------------
// conv / resampling over [C, H, W]
// --------------------------------------------------------------------------

namespace detail {

template <class S>
void im2col(const S* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t Ho, int64_t Wo, S* cols) {
    // cols layout: [C*kh*kw, Ho*Wo]
    for (int64_t c = 0; c < C; ++c)
        for (int64_t ki = 0; ki < kh; ++ki)
            for (int64_t kj = 0; kj < kw; ++kj) {
                S* row = cols + ((c * kh + ki) * kw + kj) * Ho * Wo;
                for (int64_t oi = 0; oi < Ho; ++oi) {
                    int64_t ii = oi * stride + ki - pad;
                    for (int64_t oj = 0; oj < Wo; ++oj) {
                        int64_t jj = oj * stride + kj - pad;
                        row[oi * Wo + oj] = (ii >= 0 && ii < H && jj >= 0 && jj < W)
                                                ? x[(c * H + ii) * W + jj]
                                                : S(0);
                    }
                }
            }
}

template <class S>
void col2im_accum(const S* cols, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                  int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, S* gx) {
    for (int64_t c = 0; c < C; ++c)
        for (int64_t ki = 0; ki < kh; ++ki)
            for (int64_t kj = 0; kj < kw; ++kj) {
                const S* row = cols + ((c * kh + ki) * kw + kj) * Ho * Wo;
                for (int64_t oi = 0; oi < Ho; ++oi) {
                    int64_t ii = oi * stride + ki - pad;
                    if (ii < 0 || ii >= H) continue;
                    for (int64_t oj = 0; oj < Wo; ++oj) {
                        int64_t jj = oj * stride + kj - pad;
                        if (jj < 0 || jj >= W) continue;
                        gx[(c * H + ii) * W + jj] += row[oi * Wo + oj];
                    }
                }
            }
}

}  // namespace detail

// x [Cin,H,W], w [Cout,Cin,kh,kw], b [Cout]
template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int64_t stride = 1,
                 int64_t pad = 0) {
    MMT_CHECK_ARG(x.ndim() == 3 && w.ndim() == 4, "conv2d: bad ranks");
    int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    int64_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    MMT_CHECK_ARG(w.dim(1) == C, "conv2d: channel mismatch");
    MMT_CHECK_ARG(b.ndim() == 1 && b.dim(0) == Cout, "conv2d: bias mismatch");
    int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    int64_t Wo = (W + 2 * pad - kw) / stride + 1;
    MMT_CHECK_ARG(Ho >= 1 && Wo >= 1, "conv2d: empty output");
    int64_t K = C * kh * kw, P = Ho * Wo;
    std::vector<S> cols(static_cast<size_t>(K * P));
    detail::im2col(x.data(), C, H, W, kh, kw, stride, pad, Ho, Wo, cols.data());
    Tensor<S> out(Shape{Cout, Ho, Wo});
    detail::CMatMap<S> Wm(w.data(), Cout, K), Cm(cols.data(), K, P);
    detail::MatMap<S> Om(out.data(), Cout, P);
    Om.noalias() = Wm * Cm;
    for (int64_t co = 0; co < Cout; ++co) {
        S bias = b.data()[co];
        S* o = out.data() + co * P;
        for (int64_t i = 0; i < P; ++i) o[i] += bias;
    }
    if (detail::trace_active<S>({&x, &w, &b})) {
        auto xn = x.node(), wn = w.node(), bn = b.node();
        auto saved_cols = std::make_shared<std::vector<S>>(std::move(cols));
        detail::wire<S>(out, {&x, &w, &b}, "conv2d",
                        [xn, wn, bn, saved_cols, C, H, W, kh, kw, stride, pad, Ho, Wo, Cout, K,
                         P](TensorNode<S>& self) {
                            detail::CMatMap<S> G(self.g.data(), Cout, P);
                            if (bn->needs_grad) {
                                bn->ensure_grad();
                                for (int64_t co = 0; co < Cout; ++co) {
                                    S acc = S(0);
                                    const S* gr = self.g.data() + co * P;
                                    for (int64_t i = 0; i < P; ++i) acc += gr[i];
                                    bn->g[co] += acc;
                                }
                            }
                            if (wn->needs_grad) {
                                wn->ensure_grad();
                                detail::CMatMap<S> Cm(saved_cols->data(), K, P);
                                detail::MatMap<S> GW(wn->g.data(), Cout, K);
                                GW.noalias() += G * Cm.transpose();
                            }
                            if (xn->needs_grad) {
                                xn->ensure_grad();
                                std::vector<S> gcols(static_cast<size_t>(K * P));
                                detail::CMatMap<S> Wm(wn->v.data(), Cout, K);
                                detail::MatMap<S> GC(gcols.data(), K, P);
                                GC.noalias() = Wm.transpose() * G;
                                detail::col2im_accum(gcols.data(), C, H, W, kh, kw, stride, pad, Ho,
                                                     Wo, xn->g.data());
                            }
                        });
    }
    return out;
}

// x [C,H,W] + t [C] broadcast over spatial dims
template <class S>
Tensor<S> add_channel_bias(const Tensor<S>& x, const Tensor<S>& t) {
    MMT_CHECK_ARG(x.ndim() == 3 && t.ndim() == 1 && t.dim(0) == x.dim(0), "add_channel_bias: shape mismatch");
    int64_t C = x.dim(0), hw = x.dim(1) * x.dim(2);
    Tensor<S> out(x.shape());
    for (int64_t c = 0; c < C; ++c) {
        S bias = t.data()[c];
        for (int64_t i = 0; i < hw; ++i) out.data()[c * hw + i] = x.data()[c * hw + i] + bias;
    }
    if (detail::trace_active<S>({&x, &t})) {
        auto xn = x.node(), tn = t.node();
        detail::wire<S>(out, {&x, &t}, "add_channel_bias", [xn, tn, C, hw](TensorNode<S>& self) {
            if (xn->needs_grad) {
                xn->ensure_grad();
                for (size_t i = 0; i < self.g.size(); ++i) xn->g[i] += self.g[i];
            }
            if (tn->needs_grad) {
                tn->ensure_grad();
                for (int64_t c = 0; c < C; ++c) {
                    S acc = S(0);
                    for (int64_t i = 0; i < hw; ++i) acc += self.g[c * hw + i];
                    tn->g[c] += acc;
                }
            }
        });
    }
    return out;
}

// nearest-neighbor 2x upsample of [C,H,W]
template <class S>
Tensor<S> upsample_nearest2(const Tensor<S>& x) {
    MMT_CHECK_ARG(x.ndim() == 3, "upsample_nearest2: expects [C,H,W]");
    int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    Tensor<S> out(Shape{C, H * 2, W * 2});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < H; ++i)
            for (int64_t j = 0; j < W; ++j) {
                S v = x.data()[(c * H + i) * W + j];
                S* o = out.data() + (c * 2 * H + 2 * i) * 2 * W + 2 * j;
                o[0] = v;
                o[1] = v;
                o[2 * W] = v;
                o[2 * W + 1] = v;
            }
    if (detail::trace_active<S>({&x})) {
        auto xn = x.node();
        detail::wire<S>(out, {&x}, "upsample_nearest2", [xn, C, H, W](TensorNode<S>& self) {
            xn->ensure_grad();
            for (int64_t c = 0; c < C; ++c)
                for (int64_t i = 0; i < H; ++i)
                    for (int64_t j = 0; j < W; ++j) {
                        const S* gr = self.g.data() + (c * 2 * H + 2 * i) * 2 * W + 2 * j;
                        xn->g[(c * H + i) * W + j] += gr[0] + gr[1] + gr[2 * W] + gr[2 * W + 1];
                    }
        });
    }
    return out;
}

// [C,H,W] -> [H*W, C] token layout
template <class S>
Tensor<S> chw_to_tokens(const Tensor<S>& x) {
    MMT_CHECK_ARG(x.ndim() == 3, "chw_to_tokens: expects [C,H,W]");
    int64_t C = x.dim(0), hw = x.dim(1) * x.dim(2);
    Tensor<S> out(Shape{hw, C});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t i = 0; i < hw; ++i) out.data()[i * C + c] = x.data()[c * hw + i];
    if (detail::trace_active<S>({&x})) {
        auto xn = x.node();
        detail::wire<S>(out, {&x}, "chw_to_tokens", [xn, C, hw](TensorNode<S>& self) {
            xn->ensure_grad();
            for (int64_t c = 0; c < C; ++c)
                for (int64_t i = 0; i < hw; ++i) xn->g[c * hw + i] += self.g[i * C + c];
        });
    }
    return out;
}

// [H*W, C] -> [C, H, W]
template <class S>
Tensor<S> tokens_to_chw(const Tensor<S>& x, int64_t H, int64_t W) {
    MMT_CHECK_ARG(x.ndim() == 2 && x.dim(0) == H * W, "tokens_to_chw: shape mismatch");
    int64_t C = x.dim(1), hw = H * W;
    Tensor<S> out(Shape{C, H, W});
    for (int64_t i = 0; i < hw; ++i)
        for (int64_t c = 0; c < C; ++c) out.data()[c * hw + i] = x.data()[i * C + c];
    if (detail::trace_active<S>({&x})) {
        auto xn = x.node();
        detail::wire<S>(out, {&x}, "tokens_to_chw", [xn, C, hw](TensorNode<S>& self) {
            xn->ensure_grad();
            for (int64_t i = 0; i < hw; ++i)
                for (int64_t c = 0; c < C; ++c) xn->g[i * C + c] += self.g[c * hw + i];
        });
    }
    return out;
}

#undef MMT_CHECK_ARG

}  // namespace mmtryon
