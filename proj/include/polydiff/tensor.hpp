#pragma once

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

#include "polydiff/rng.hpp"

// Reverse-mode autodiff over dense row-major tensors. Tensors are cheap
// handles onto graph nodes; ops are free functions that record a backward
// closure. Scalars are shape {1}. Broadcasting is restricted to a trailing
// suffix (the rhs shape must be a suffix of the lhs shape), which is the
// "leading batch dimension" form everything here needs.

namespace polydiff {

using Shape = std::vector<int>;

inline int64_t numel_of(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        r += std::to_string(s[i]);
        if (i + 1 < s.size()) r += ",";
    }
    return r + "]";
}

template <typename S>
struct TensorNode;

template <typename S>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode<S>> n) : node_(std::move(n)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, S value, bool requires_grad = false);
    static Tensor from_data(const Shape& shape, std::vector<S> data, bool requires_grad = false);
    static Tensor scalar(S v, bool requires_grad = false) { return from_data({1}, {v}, requires_grad); }
    static Tensor randn(const Shape& shape, Rng& rng, S stddev = S(1), bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    TensorNode<S>& node() const { return *node_; }
    std::shared_ptr<TensorNode<S>> ptr() const { return node_; }

    const Shape& shape() const;
    int64_t numel() const;
    const std::vector<S>& data() const;
    std::vector<S>& data();
    bool requires_grad() const;
    const std::vector<S>& grad() const;
    bool has_grad() const;
    void zero_grad();

    S item() const;

    // data-only copy, detached from the graph
    Tensor detach_copy(bool requires_grad = false) const;

    void backward() const;

private:
    std::shared_ptr<TensorNode<S>> node_;
};

template <typename S>
struct TensorNode {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // empty until first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<Tensor<S>> parents;
    std::function<void(TensorNode<S>&)> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), S(0));
    }
};

namespace detail {

// forward-time guard: ops that can produce non-finite values call this so
// failures carry the op name instead of surfacing later as garbage
template <typename S>
inline void check_finite(const TensorNode<S>& n) {
    for (S v : n.data) {
        if (!std::isfinite(static_cast<double>(v)))
            throw std::runtime_error(std::string("non-finite value produced by op '") + n.op + "'");
    }
}

template <typename S>
inline std::shared_ptr<TensorNode<S>> make_node(Shape shape, const char* op,
                                                std::vector<Tensor<S>> parents) {
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = std::move(shape);
    n->data.assign(static_cast<size_t>(numel_of(n->shape)), S(0));
    n->op = op;
    for (auto& p : parents) {
        if (p.requires_grad()) n->requires_grad = true;
    }
    n->parents = std::move(parents);
    return n;
}

// rhs must be a suffix of lhs: returns the product of the leading lhs dims
inline int64_t suffix_batch(const Shape& a, const Shape& b, const char* op) {
    if (b.size() > a.size())
        throw std::invalid_argument(std::string(op) + ": rhs rank exceeds lhs rank " + shape_str(a) +
                                    " vs " + shape_str(b));
    size_t off = a.size() - b.size();
    for (size_t i = 0; i < b.size(); ++i) {
        if (a[off + i] != b[i])
            throw std::invalid_argument(std::string(op) + ": shape " + shape_str(b) +
                                        " is not a suffix of " + shape_str(a));
    }
    int64_t batch = 1;
    for (size_t i = 0; i < off; ++i) batch *= a[i];
    return batch;
}

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using EMap = Eigen::Map<EMat<S>>;
template <typename S>
using ECMap = Eigen::Map<const EMat<S>>;

}  // namespace detail

template <typename S>
Tensor<S> Tensor<S>::zeros(const Shape& shape, bool requires_grad) {
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = shape;
    n->data.assign(static_cast<size_t>(numel_of(shape)), S(0));
    n->requires_grad = requires_grad;
    return Tensor(n);
}

template <typename S>
Tensor<S> Tensor<S>::full(const Shape& shape, S value, bool requires_grad) {
    auto t = zeros(shape, requires_grad);
    std::fill(t.node().data.begin(), t.node().data.end(), value);
    return t;
}

template <typename S>
Tensor<S> Tensor<S>::from_data(const Shape& shape, std::vector<S> data, bool requires_grad) {
    if (static_cast<int64_t>(data.size()) != numel_of(shape))
        throw std::invalid_argument("from_data: " + std::to_string(data.size()) +
                                    " values for shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = shape;
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

template <typename S>
Tensor<S> Tensor<S>::randn(const Shape& shape, Rng& rng, S stddev, bool requires_grad) {
    auto t = zeros(shape, requires_grad);
    for (auto& v : t.node().data) v = static_cast<S>(rng.normal() * static_cast<double>(stddev));
    return t;
}

template <typename S>
const Shape& Tensor<S>::shape() const { return node_->shape; }
template <typename S>
int64_t Tensor<S>::numel() const { return node_->numel(); }
template <typename S>
const std::vector<S>& Tensor<S>::data() const { return node_->data; }
template <typename S>
std::vector<S>& Tensor<S>::data() { return node_->data; }
template <typename S>
bool Tensor<S>::requires_grad() const { return node_->requires_grad; }
template <typename S>
const std::vector<S>& Tensor<S>::grad() const {
    if (node_->grad.empty()) throw std::runtime_error("grad not populated (run backward first)");
    return node_->grad;
}
template <typename S>
bool Tensor<S>::has_grad() const { return !node_->grad.empty(); }
template <typename S>
void Tensor<S>::zero_grad() { node_->grad.clear(); }

template <typename S>
S Tensor<S>::item() const {
    if (numel() != 1) throw std::invalid_argument("item: tensor is not scalar, shape " + shape_str(shape()));
    return node_->data[0];
}

template <typename S>
Tensor<S> Tensor<S>::detach_copy(bool requires_grad) const {
    return from_data(shape(), node_->data, requires_grad);
}

template <typename S>
void Tensor<S>::backward() const {
    TensorNode<S>* root = node_.get();
    if (root->numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(root->shape));
    if (!std::isfinite(static_cast<double>(root->data[0])))
        throw std::runtime_error(std::string("backward: loss is non-finite (op '") + root->op + "')");

    // iterative post-order topological sort
    std::vector<TensorNode<S>*> order;
    std::unordered_set<TensorNode<S>*> seen;
    std::vector<std::pair<TensorNode<S>*, size_t>> stack;
    stack.push_back({root, 0});
    seen.insert(root);
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            TensorNode<S>* p = n->parents[idx].ptr().get();
            ++idx;
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    // interior grads are scratch from any previous backward; leaves accumulate
    for (auto* n : order)
        if (n->backward_fn) n->grad.clear();

    root->ensure_grad();
    root->grad[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode<S>* n = *it;
        if (!n->backward_fn) continue;
        for (S g : n->grad) {
            if (!std::isfinite(static_cast<double>(g)))
                throw std::runtime_error(std::string("backward: non-finite gradient at op '") + n->op + "'");
        }
        n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// ops

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    int64_t bn = b.numel();
    int64_t batch = bn == 1 ? a.numel() : detail::suffix_batch(a.shape(), b.shape(), "add");
    auto n = detail::make_node<S>(a.shape(), "add", {a, b});
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    S* po = n->data.data();
    for (int64_t k = 0; k < batch; ++k)
        for (int64_t i = 0; i < bn; ++i) po[k * bn + i] = pa[k * bn + i] + pb[i];
    if (n->requires_grad) {
        n->backward_fn = [batch, bn](TensorNode<S>& o) {
            auto& a = o.parents[0].node();
            auto& b = o.parents[1].node();
            if (a.requires_grad) {
                a.ensure_grad();
                for (size_t i = 0; i < o.grad.size(); ++i) a.grad[i] += o.grad[i];
            }
            if (b.requires_grad) {
                b.ensure_grad();
                for (int64_t k = 0; k < batch; ++k)
                    for (int64_t i = 0; i < bn; ++i) b.grad[i] += o.grad[k * bn + i];
            }
        };
    }
    return Tensor<S>(n);
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    int64_t bn = b.numel();
    int64_t batch = bn == 1 ? a.numel() : detail::suffix_batch(a.shape(), b.shape(), "mul");
    auto n = detail::make_node<S>(a.shape(), "mul", {a, b});
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    S* po = n->data.data();
    for (int64_t k = 0; k < batch; ++k)
        for (int64_t i = 0; i < bn; ++i) po[k * bn + i] = pa[k * bn + i] * pb[i];
    if (n->requires_grad) {
        n->backward_fn = [batch, bn](TensorNode<S>& o) {
            auto& a = o.parents[0].node();
            auto& b = o.parents[1].node();
            if (a.requires_grad) {
                a.ensure_grad();
                const S* pb = b.data.data();
                for (int64_t k = 0; k < batch; ++k)
                    for (int64_t i = 0; i < bn; ++i) a.grad[k * bn + i] += o.grad[k * bn + i] * pb[i];
            }
            if (b.requires_grad) {
                b.ensure_grad();
                const S* pa = a.data.data();
                for (int64_t k = 0; k < batch; ++k)
                    for (int64_t i = 0; i < bn; ++i) b.grad[i] += o.grad[k * bn + i] * pa[k * bn + i];
            }
        };
    }
    return Tensor<S>(n);
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto n = detail::make_node<S>(a.shape(), "sub", {a, b});
    for (size_t i = 0; i < n->data.size(); ++i) n->data[i] = a.data()[i] - b.data()[i];
    if (n->requires_grad) {
        n->backward_fn = [](TensorNode<S>& o) {
            auto& a = o.parents[0].node();
            auto& b = o.parents[1].node();
            if (a.requires_grad) {
                a.ensure_grad();
                for (size_t i = 0; i < o.grad.size(); ++i) a.grad[i] += o.grad[i];
            }
            if (b.requires_grad) {
                b.ensure_grad();
                for (size_t i = 0; i < o.grad.size(); ++i) b.grad[i] -= o.grad[i];
            }
        };
    }
    return Tensor<S>(n);
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, double s) {
    auto n = detail::make_node<S>(a.shape(), "scale", {a});
    for (size_t i = 0; i < n->data.size(); ++i) n->data[i] = static_cast<S>(a.data()[i] * s);
    if (n->requires_grad) {
        n->backward_fn = [s](TensorNode<S>& o) {
            auto& a = o.parents[0].node();
            a.ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) a.grad[i] += static_cast<S>(o.grad[i] * s);
        };
    }
    return Tensor<S>(n);
}

// a [.., M, K] x b [K, N] or [.., K, N] with matching leading dims
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2) throw std::invalid_argument("matmul: operands must have rank >= 2");
    int64_t M = sa[sa.size() - 2], K = sa[sa.size() - 1];
    int64_t Kb = sb[sb.size() - 2], N = sb[sb.size() - 1];
    if (K != Kb)
        throw std::invalid_argument("matmul: inner dims differ, " + shape_str(sa) + " x " + shape_str(sb));
    bool batched_b = sb.size() > 2;
    int64_t batch = 1;
    for (size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];
    if (batched_b) {
        int64_t batch_b = 1;
        for (size_t i = 0; i + 2 < sb.size(); ++i) batch_b *= sb[i];
        if (batch_b != batch)
            throw std::invalid_argument("matmul: batch dims differ, " + shape_str(sa) + " x " + shape_str(sb));
    }
    Shape out = sa;
    out.back() = static_cast<int>(N);
    auto n = detail::make_node<S>(out, "matmul", {a, b});
    {
        const S* pa = a.data().data();
        const S* pb = b.data().data();
        S* po = n->data.data();
        for (int64_t k = 0; k < batch; ++k) {
            detail::ECMap<S> A(pa + k * M * K, M, K);
            detail::ECMap<S> B(pb + (batched_b ? k * K * N : 0), K, N);
            detail::EMap<S> O(po + k * M * N, M, N);
            O.noalias() = A * B;
        }
    }
    if (n->requires_grad) {
        n->backward_fn = [batch, batched_b, M, K, N](TensorNode<S>& o) {
            auto& a = o.parents[0].node();
            auto& b = o.parents[1].node();
            if (a.requires_grad) {
                a.ensure_grad();
                for (int64_t k = 0; k < batch; ++k) {
                    detail::ECMap<S> G(o.grad.data() + k * M * N, M, N);
                    detail::ECMap<S> B(b.data.data() + (batched_b ? k * K * N : 0), K, N);
                    detail::EMap<S> GA(a.grad.data() + k * M * K, M, K);
                    GA.noalias() += G * B.transpose();
                }
            }
            if (b.requires_grad) {
                b.ensure_grad();
                for (int64_t k = 0; k < batch; ++k) {
                    detail::ECMap<S> G(o.grad.data() + k * M * N, M, N);
                    detail::ECMap<S> A(a.data.data() + k * M * K, M, K);
                    detail::EMap<S> GB(b.grad.data() + (batched_b ? k * K * N : 0), K, N);
                    GB.noalias() += A.transpose() * G;
                }
            }
        };
    }
    return Tensor<S>(n);
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, const Shape& shape) {
    if (numel_of(shape) != a.numel())
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    auto n = detail::make_node<S>(shape, "reshape", {a});
    n->data = a.data();
    if (n->requires_grad) {
        n->backward_fn = [](TensorNode<S>& o) {
            auto& a = o.parents[0].node();
            a.ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) a.grad[i] += o.grad[i];
        };
    }
    return Tensor<S>(n);
}

namespace detail {

inline std::vector<int64_t> row_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

// flat index map realizing an axis permutation: out[i] = in[perm_map[i]]
inline std::vector<int64_t> permute_map(const Shape& in, const std::vector<int>& axes, Shape& out) {
    out.resize(in.size());
    for (size_t i = 0; i < axes.size(); ++i) out[i] = in[axes[i]];
    auto ist = row_strides(in);
    auto ost = row_strides(out);
    std::vector<int64_t> map(static_cast<size_t>(numel_of(out)));
    std::vector<int64_t> idx(out.size(), 0);
    for (int64_t flat = 0; flat < static_cast<int64_t>(map.size()); ++flat) {
        int64_t src = 0;
        for (size_t d = 0; d < out.size(); ++d) src += idx[d] * ist[axes[d]];
        map[flat] = src;
        for (int d = static_cast<int>(out.size()) - 1; d >= 0; --d) {
            if (++idx[d] < out[d]) break;
            idx[d] = 0;
        }
    }
    return map;
}

}  // namespace detail

template <typename S>
Tensor<S> permute(const Tensor<S>& a, const std::vector<int>& axes) {
    if (axes.size() != a.shape().size()) throw std::invalid_argument("permute: axes rank mismatch");
    Shape out;
    auto map = detail::permute_map(a.shape(), axes, out);
    auto n = detail::make_node<S>(out, "permute", {a});
    for (size_t i = 0; i < map.size(); ++i) n->data[i] = a.data()[map[i]];
    if (n->requires_grad) {
        auto m = std::make_shared<std::vector<int64_t>>(std::move(map));
        n->backward_fn = [m](TensorNode<S>& o) {
            auto& a = o.parents[0].node();
            a.ensure_grad();
            for (size_t i = 0; i < m->size(); ++i) a.grad[(*m)[i]] += o.grad[i];
        };
    }
    return Tensor<S>(n);
}

// swap the last two axes
template <typename S>
Tensor<S> transpose_last2(const Tensor<S>& a) {
    std::vector<int> axes(a.shape().size());
    std::iota(axes.begin(), axes.end(), 0);
    std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
    return permute(a, axes);
}

template <typename S>
Tensor<S> slice(const Tensor<S>& a, int axis, int start, int len) {
    const Shape& s = a.shape();
    if (axis < 0 || axis >= static_cast<int>(s.size())) throw std::invalid_argument("slice: bad axis");
    if (start < 0 || len <= 0 || start + len > s[axis])
        throw std::invalid_argument("slice: range [" + std::to_string(start) + "," +
                                    std::to_string(start + len) + ") out of bounds for axis size " +
                                    std::to_string(s[axis]));
    Shape out = s;
    out[axis] = len;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    auto n = detail::make_node<S>(out, "slice", {a});
    const S* pa = a.data().data();
    S* po = n->data.data();
    for (int64_t k = 0; k < outer; ++k)
        std::copy(pa + (k * s[axis] + start) * inner, pa + (k * s[axis] + start + len) * inner,
                  po + k * len * inner);
    if (n->requires_grad) {
        int ax_sz = s[axis];
        n->backward_fn = [outer, inner, ax_sz, start, len](TensorNode<S>& o) {
            auto& a = o.parents[0].node();
            a.ensure_grad();
            for (int64_t k = 0; k < outer; ++k)
                for (int64_t i = 0; i < len * inner; ++i)
                    a.grad[(k * ax_sz + start) * inner + i] += o.grad[k * len * inner + i];
        };
    }
    return Tensor<S>(n);
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    Shape out = s0;
    int total = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != s0.size()) throw std::invalid_argument("concat: rank mismatch");
        for (size_t i = 0; i < s.size(); ++i)
            if (static_cast<int>(i) != axis && s[i] != s0[i])
                throw std::invalid_argument("concat: shape mismatch off axis");
        total += s[axis];
    }
    out[axis] = total;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s0[i];
    for (size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
    auto n = detail::make_node<S>(out, "concat", parts);
    S* po = n->data.data();
    int64_t off = 0;
    for (const auto& p : parts) {
        int64_t len = p.shape()[axis];
        const S* pp = p.data().data();
        for (int64_t k = 0; k < outer; ++k)
            std::copy(pp + k * len * inner, pp + (k + 1) * len * inner,
                      po + (k * total + off) * inner);
        off += len;
    }
    if (n->requires_grad) {
        n->backward_fn = [outer, inner, total](TensorNode<S>& o) {
            int64_t off = 0;
            for (auto& ph : o.parents) {
                auto& p = ph.node();
                int64_t len = p.numel() / (outer * inner);
                if (p.requires_grad) {
                    p.ensure_grad();
                    for (int64_t k = 0; k < outer; ++k)
                        for (int64_t i = 0; i < len * inner; ++i)
                            p.grad[k * len * inner + i] += o.grad[(k * total + off) * inner + i];
                }
                off += len;
            }
        };
    }
    return Tensor<S>(n);
}

template <typename S>
Tensor<S> softmax_lastdim(const Tensor<S>& a) {
    const Shape& s = a.shape();
    int64_t D = s.back();
    int64_t rows = a.numel() / D;
    auto n = detail::make_node<S>(s, "softmax", {a});
    const S* pa = a.data().data();
    S* po = n->data.data();
    for (int64_t r = 0; r < rows; ++r) {
        const S* x = pa + r * D;
        S* y = po + r * D;
        S mx = x[0];
        for (int64_t i = 1; i < D; ++i) mx = std::max(mx, x[i]);
        double denom = 0;
        for (int64_t i = 0; i < D; ++i) {
            double e = std::exp(static_cast<double>(x[i] - mx));
            y[i] = static_cast<S>(e);
            denom += e;
        }
        double inv = 1.0 / denom;
        for (int64_t i = 0; i < D; ++i) y[i] = static_cast<S>(y[i] * inv);
    }
    detail::check_finite(*n);
    if (n->requires_grad) {
        n->backward_fn = [rows, D](TensorNode<S>& o) {
            auto& a = o.parents[0].node();
            a.ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const S* y = o.data.data() + r * D;
                const S* g = o.grad.data() + r * D;
                double dot = 0;
                for (int64_t i = 0; i < D; ++i) dot += static_cast<double>(g[i]) * y[i];
                S* ga = a.grad.data() + r * D;
                for (int64_t i = 0; i < D; ++i)
                    ga[i] += static_cast<S>(y[i] * (static_cast<double>(g[i]) - dot));
            }
        };
    }
    return Tensor<S>(n);
}

// layer norm over the last dim with affine params gamma/beta of shape [D]
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     double eps = 1e-5) {
    const Shape& s = x.shape();
    int64_t D = s.back();
    if (gamma.numel() != D || beta.numel() != D)
        throw std::invalid_argument("layer_norm: gamma/beta must have size of last dim");
    int64_t rows = x.numel() / D;
    auto n = detail::make_node<S>(s, "layer_norm", {x, gamma, beta});
    auto xhat = std::make_shared<std::vector<S>>(x.numel());
    auto rstd = std::make_shared<std::vector<S>>(rows);
    {
        const S* px = x.data().data();
        const S* pg = gamma.data().data();
        const S* pb = beta.data().data();
        S* po = n->data.data();
        for (int64_t r = 0; r < rows; ++r) {
            const S* xr = px + r * D;
            double mean = 0;
            for (int64_t i = 0; i < D; ++i) mean += xr[i];
            mean /= D;
            double var = 0;
            for (int64_t i = 0; i < D; ++i) {
                double d = xr[i] - mean;
                var += d * d;
            }
            var /= D;
            double rs = 1.0 / std::sqrt(var + eps);
            (*rstd)[r] = static_cast<S>(rs);
            for (int64_t i = 0; i < D; ++i) {
                S xh = static_cast<S>((xr[i] - mean) * rs);
                (*xhat)[r * D + i] = xh;
                po[r * D + i] = xh * pg[i] + pb[i];
            }
        }
    }
    if (n->requires_grad) {
        n->backward_fn = [rows, D, xhat, rstd](TensorNode<S>& o) {
            auto& x = o.parents[0].node();
            auto& gamma = o.parents[1].node();
            auto& beta = o.parents[2].node();
            const S* pg = gamma.data.data();
            if (gamma.requires_grad) gamma.ensure_grad();
            if (beta.requires_grad) beta.ensure_grad();
            if (x.requires_grad) x.ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const S* g = o.grad.data() + r * D;
                const S* xh = xhat->data() + r * D;
                if (gamma.requires_grad || beta.requires_grad) {
                    for (int64_t i = 0; i < D; ++i) {
                        if (gamma.requires_grad) gamma.grad[i] += g[i] * xh[i];
                        if (beta.requires_grad) beta.grad[i] += g[i];
                    }
                }
                if (x.requires_grad) {
                    double m1 = 0, m2 = 0;
                    for (int64_t i = 0; i < D; ++i) {
                        double gg = static_cast<double>(g[i]) * pg[i];
                        m1 += gg;
                        m2 += gg * xh[i];
                    }
                    m1 /= D;
                    m2 /= D;
                    double rs = (*rstd)[r];
                    S* gx = x.grad.data() + r * D;
                    for (int64_t i = 0; i < D; ++i) {
                        double gg = static_cast<double>(g[i]) * pg[i];
                        gx[i] += static_cast<S>((gg - m1 - xh[i] * m2) * rs);
                    }
                }
            }
        };
    }
    return Tensor<S>(n);
}

template <typename S>
Tensor<S> exp_op(const Tensor<S>& a) {
    auto n = detail::make_node<S>(a.shape(), "exp", {a});
    for (size_t i = 0; i < n->data.size(); ++i)
        n->data[i] = static_cast<S>(std::exp(static_cast<double>(a.data()[i])));
    detail::check_finite(*n);
    if (n->requires_grad) {
        n->backward_fn = [](TensorNode<S>& o) {
            auto& a = o.parents[0].node();
            a.ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) a.grad[i] += o.grad[i] * o.data[i];
        };
    }
    return Tensor<S>(n);
}

template <typename S>
Tensor<S> silu(const Tensor<S>& a) {
    auto n = detail::make_node<S>(a.shape(), "silu", {a});
    for (size_t i = 0; i < n->data.size(); ++i) {
        double x = a.data()[i];
        n->data[i] = static_cast<S>(x / (1.0 + std::exp(-x)));
    }
    if (n->requires_grad) {
        n->backward_fn = [](TensorNode<S>& o) {
            auto& a = o.parents[0].node();
            a.ensure_grad();
            for (size_t i = 0; i < o.grad.size(); ++i) {
                double x = a.data[i];
                double sig = 1.0 / (1.0 + std::exp(-x));
                a.grad[i] += static_cast<S>(o.grad[i] * sig * (1.0 + x * (1.0 - sig)));
            }
        };
    }
    return Tensor<S>(n);
}

// rows of `ids` select rows of `table` [V, D] -> [L, D]
template <typename S>
Tensor<S> embedding(const Tensor<S>& table, const std::vector<int>& ids) {
    const Shape& s = table.shape();
    if (s.size() != 2) throw std::invalid_argument("embedding: table must be [V, D]");
    int V = s[0], D = s[1];
    for (int id : ids)
        if (id < 0 || id >= V)
            throw std::out_of_range("embedding: id " + std::to_string(id) + " outside vocab of " +
                                    std::to_string(V));
    auto n = detail::make_node<S>({static_cast<int>(ids.size()), D}, "embedding", {table});
    for (size_t j = 0; j < ids.size(); ++j)
        std::copy(table.data().begin() + static_cast<int64_t>(ids[j]) * D,
                  table.data().begin() + static_cast<int64_t>(ids[j] + 1) * D,
                  n->data.begin() + static_cast<int64_t>(j) * D);
    if (n->requires_grad) {
        auto idc = std::make_shared<std::vector<int>>(ids);
        n->backward_fn = [idc, D](TensorNode<S>& o) {
            auto& t = o.parents[0].node();
            t.ensure_grad();
            for (size_t j = 0; j < idc->size(); ++j)
                for (int i = 0; i < D; ++i)
                    t.grad[static_cast<int64_t>((*idc)[j]) * D + i] += o.grad[j * D + i];
        };
    }
    return Tensor<S>(n);
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& a) {
    auto n = detail::make_node<S>({1}, "sum", {a});
    double acc = 0;
    for (S v : a.data()) acc += v;
    n->data[0] = static_cast<S>(acc);
    if (n->requires_grad) {
        n->backward_fn = [](TensorNode<S>& o) {
            auto& a = o.parents[0].node();
            a.ensure_grad();
            S g = o.grad[0];
            for (auto& v : a.grad) v += g;
        };
    }
    return Tensor<S>(n);
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& a) {
    auto n = detail::make_node<S>({1}, "mean", {a});
    double acc = 0;
    for (S v : a.data()) acc += v;
    n->data[0] = static_cast<S>(acc / a.numel());
    if (n->requires_grad) {
        double inv = 1.0 / a.numel();
        n->backward_fn = [inv](TensorNode<S>& o) {
            auto& a = o.parents[0].node();
            a.ensure_grad();
            S g = static_cast<S>(o.grad[0] * inv);
            for (auto& v : a.grad) v += g;
        };
    }
    return Tensor<S>(n);
}

template <typename S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("mse: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto n = detail::make_node<S>({1}, "mse", {a, b});
    double acc = 0;
    for (size_t i = 0; i < a.data().size(); ++i) {
        double d = static_cast<double>(a.data()[i]) - b.data()[i];
        acc += d * d;
    }
    n->data[0] = static_cast<S>(acc / a.numel());
    detail::check_finite(*n);
    if (n->requires_grad) {
        double inv = 2.0 / a.numel();
        n->backward_fn = [inv](TensorNode<S>& o) {
            auto& a = o.parents[0].node();
            auto& b = o.parents[1].node();
            S g = o.grad[0];
            if (a.requires_grad) a.ensure_grad();
            if (b.requires_grad) b.ensure_grad();
            for (size_t i = 0; i < a.data.size(); ++i) {
                S d = static_cast<S>((a.data[i] - b.data[i]) * inv * g);
                if (a.requires_grad) a.grad[i] += d;
                if (b.requires_grad) b.grad[i] -= d;
            }
        };
    }
    return Tensor<S>(n);
}

// mean cross entropy of logits [N, C] against integer targets
template <typename S>
Tensor<S> cross_entropy_logits(const Tensor<S>& logits, const std::vector<int>& targets) {
    const Shape& s = logits.shape();
    if (s.size() != 2) throw std::invalid_argument("cross_entropy: logits must be [N, C]");
    int64_t N = s[0], C = s[1];
    if (static_cast<int64_t>(targets.size()) != N)
        throw std::invalid_argument("cross_entropy: target count mismatch");
    auto n = detail::make_node<S>({1}, "cross_entropy", {logits});
    auto probs = std::make_shared<std::vector<S>>(logits.numel());
    double loss = 0;
    const S* pl = logits.data().data();
    for (int64_t r = 0; r < N; ++r) {
        if (targets[r] < 0 || targets[r] >= C) throw std::out_of_range("cross_entropy: target out of range");
        const S* x = pl + r * C;
        S mx = x[0];
        for (int64_t i = 1; i < C; ++i) mx = std::max(mx, x[i]);
        double denom = 0;
        for (int64_t i = 0; i < C; ++i) denom += std::exp(static_cast<double>(x[i] - mx));
        double logz = std::log(denom) + mx;
        loss += logz - x[targets[r]];
        for (int64_t i = 0; i < C; ++i)
            (*probs)[r * C + i] = static_cast<S>(std::exp(static_cast<double>(x[i]) - logz));
    }
    n->data[0] = static_cast<S>(loss / N);
    detail::check_finite(*n);
    if (n->requires_grad) {
        auto tg = std::make_shared<std::vector<int>>(targets);
        n->backward_fn = [probs, tg, N, C](TensorNode<S>& o) {
            auto& l = o.parents[0].node();
            l.ensure_grad();
            S g = static_cast<S>(o.grad[0] / N);
            for (int64_t r = 0; r < N; ++r)
                for (int64_t i = 0; i < C; ++i)
                    l.grad[r * C + i] += g * ((*probs)[r * C + i] - (i == (*tg)[r] ? S(1) : S(0)));
        };
    }
    return Tensor<S>(n);
}

// L2-normalize each row (last dim)
template <typename S>
Tensor<S> l2_normalize_rows(const Tensor<S>& a, double eps = 1e-12) {
    const Shape& s = a.shape();
    int64_t D = s.back();
    int64_t rows = a.numel() / D;
    auto n = detail::make_node<S>(s, "l2_normalize", {a});
    auto rnorm = std::make_shared<std::vector<double>>(rows);
    const S* pa = a.data().data();
    S* po = n->data.data();
    for (int64_t r = 0; r < rows; ++r) {
        double ss = 0;
        for (int64_t i = 0; i < D; ++i) ss += static_cast<double>(pa[r * D + i]) * pa[r * D + i];
        double inv = 1.0 / std::sqrt(ss + eps);
        (*rnorm)[r] = inv;
        for (int64_t i = 0; i < D; ++i) po[r * D + i] = static_cast<S>(pa[r * D + i] * inv);
    }
    if (n->requires_grad) {
        n->backward_fn = [rows, D, rnorm](TensorNode<S>& o) {
            auto& a = o.parents[0].node();
            a.ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const S* y = o.data.data() + r * D;
                const S* g = o.grad.data() + r * D;
                double dot = 0;
                for (int64_t i = 0; i < D; ++i) dot += static_cast<double>(g[i]) * y[i];
                double inv = (*rnorm)[r];
                S* ga = a.grad.data() + r * D;
                for (int64_t i = 0; i < D; ++i)
                    ga[i] += static_cast<S>((static_cast<double>(g[i]) - dot * y[i]) * inv);
            }
        };
    }
    return Tensor<S>(n);
}

// [H, W, C] -> [H/p * W/p, p*p*C] or [B, H, W, C] -> [B, hw, p*p*C]
template <typename S>
Tensor<S> im2patches(const Tensor<S>& img, int p) {
    const Shape& s = img.shape();
    bool batched = s.size() == 4;
    if (s.size() != 3 && s.size() != 4) throw std::invalid_argument("im2patches: need [H,W,C] or [B,H,W,C]");
    int B = batched ? s[0] : 1;
    int H = s[batched ? 1 : 0], W = s[batched ? 2 : 1], C = s[batched ? 3 : 2];
    if (H % p != 0 || W % p != 0)
        throw std::invalid_argument("im2patches: image side " + std::to_string(H) + "x" + std::to_string(W) +
                                    " not divisible by patch " + std::to_string(p));
    int gh = H / p, gw = W / p;
    Shape out = batched ? Shape{B, gh * gw, p * p * C} : Shape{gh * gw, p * p * C};
    auto n = detail::make_node<S>(out, "im2patches", {img});
    const S* pi = img.data().data();
    S* po = n->data.data();
    int64_t per_b = static_cast<int64_t>(H) * W * C;
    for (int b = 0; b < B; ++b)
        for (int gy = 0; gy < gh; ++gy)
            for (int gx = 0; gx < gw; ++gx)
                for (int y = 0; y < p; ++y)
                    std::copy(pi + b * per_b + ((gy * p + y) * W + gx * p) * C,
                              pi + b * per_b + ((gy * p + y) * W + gx * p + p) * C,
                              po + ((static_cast<int64_t>(b) * gh * gw + gy * gw + gx) * p + y) * p * C);
    if (n->requires_grad) {
        n->backward_fn = [B, gh, gw, p, W, C, per_b](TensorNode<S>& o) {
            auto& img = o.parents[0].node();
            img.ensure_grad();
            for (int b = 0; b < B; ++b)
                for (int gy = 0; gy < gh; ++gy)
                    for (int gx = 0; gx < gw; ++gx)
                        for (int y = 0; y < p; ++y)
                            for (int i = 0; i < p * C; ++i)
                                img.grad[b * per_b + ((gy * p + y) * W + gx * p) * C + i] +=
                                    o.grad[((static_cast<int64_t>(b) * gh * gw + gy * gw + gx) * p + y) * p * C + i];
        };
    }
    return Tensor<S>(n);
}

// inverse of im2patches
template <typename S>
Tensor<S> patches2im(const Tensor<S>& patches, int p, int H, int W, int C) {
    const Shape& s = patches.shape();
    bool batched = s.size() == 3;
    if (s.size() != 2 && s.size() != 3) throw std::invalid_argument("patches2im: need [N,D] or [B,N,D]");
    int B = batched ? s[0] : 1;
    int N = s[batched ? 1 : 0], D = s[batched ? 2 : 1];
    int gh = H / p, gw = W / p;
    if (N != gh * gw || D != p * p * C || H % p != 0 || W % p != 0)
        throw std::invalid_argument("patches2im: geometry mismatch");
    Shape out = batched ? Shape{B, H, W, C} : Shape{H, W, C};
    auto n = detail::make_node<S>(out, "patches2im", {patches});
    const S* pp = patches.data().data();
    S* po = n->data.data();
    int64_t per_b = static_cast<int64_t>(H) * W * C;
    for (int b = 0; b < B; ++b)
        for (int gy = 0; gy < gh; ++gy)
            for (int gx = 0; gx < gw; ++gx)
                for (int y = 0; y < p; ++y)
                    std::copy(pp + ((static_cast<int64_t>(b) * N + gy * gw + gx) * p + y) * p * C,
                              pp + ((static_cast<int64_t>(b) * N + gy * gw + gx) * p + y + 1) * p * C,
                              po + b * per_b + ((gy * p + y) * W + gx * p) * C);
    if (n->requires_grad) {
        n->backward_fn = [B, gh, gw, p, W, C, N, per_b](TensorNode<S>& o) {
            auto& pt = o.parents[0].node();
            pt.ensure_grad();
            for (int b = 0; b < B; ++b)
                for (int gy = 0; gy < gh; ++gy)
                    for (int gx = 0; gx < gw; ++gx)
                        for (int y = 0; y < p; ++y)
                            for (int i = 0; i < p * C; ++i)
                                pt.grad[((static_cast<int64_t>(b) * N + gy * gw + gx) * p + y) * p * C + i] +=
                                    o.grad[b * per_b + ((gy * p + y) * W + gx * p) * C + i];
        };
    }
    return Tensor<S>(n);
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace polydiff
