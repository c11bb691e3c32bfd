#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "wsf/tensor.hpp"

namespace wsf {

// ---------------------------------------------------------------------------
// Define-by-run reverse-mode automatic differentiation over float32 tensors.
// Ops record parents and a backward closure only when some input requires
// gradients, so inference-style evaluation builds no graph and frees
// intermediates as soon as handles go out of scope.
// ---------------------------------------------------------------------------

namespace detail {
inline std::atomic<uint64_t>& node_stamp_counter() {
    static std::atomic<uint64_t> c{0};
    return c;
}
} // namespace detail

struct Node {
    Tensor val;
    Tensor grad; // lazily sized on first accumulation
    bool requires_grad = false;
    uint64_t stamp = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> back;
};

/// Accumulate `delta` into `g`, reducing broadcast axes so the result has
/// shape `target`. Used by broadcasting binary ops during backprop.
inline void accumulate_reduced(Tensor& g, const Tensor& delta, const std::vector<int>& target) {
    if (g.empty()) g = Tensor::zeros(target);
    const int tr = g.rows(), tc = g.cols();
    const int dr = delta.rows(), dc = delta.cols();
    if (tr == dr && tc == dc) {
        for (int64_t i = 0; i < delta.numel(); ++i) g[i] += delta[i];
        return;
    }
    // Reduce rows and/or columns that were broadcast (size 1 in target).
    for (int i = 0; i < dr; ++i)
        for (int j = 0; j < dc; ++j) g.at(tr == 1 ? 0 : i, tc == 1 ? 0 : j) += delta.at(i, j);
}

class Var {
public:
    Var() = default;

    /// Trainable leaf: participates in backward(), grad is retained.
    static Var param(Tensor value) {
        Var v;
        v.node_ = std::make_shared<Node>();
        v.node_->val = std::move(value);
        v.node_->requires_grad = true;
        v.node_->stamp = detail::node_stamp_counter().fetch_add(1, std::memory_order_relaxed);
        return v;
    }

    /// Constant leaf: no gradient tracking.
    static Var constant(Tensor value) {
        Var v;
        v.node_ = std::make_shared<Node>();
        v.node_->val = std::move(value);
        v.node_->stamp = detail::node_stamp_counter().fetch_add(1, std::memory_order_relaxed);
        return v;
    }

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->val; }
    Tensor& mutable_value() { return node_->val; }
    const Tensor& grad() const { return node_->grad; }
    Tensor& mutable_grad() { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const std::vector<int>& shape() const { return node_->val.shape(); }
    int rows() const { return node_->val.rows(); }
    int cols() const { return node_->val.cols(); }

    void zero_grad() { node_->grad = Tensor(); }

    std::shared_ptr<Node> node() const { return node_; }

    static Var from_node(std::shared_ptr<Node> n) {
        Var v;
        v.node_ = std::move(n);
        return v;
    }

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

inline Var make_op(Tensor val, std::vector<Var> inputs, std::function<void(Node&)> back) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    n->stamp = node_stamp_counter().fetch_add(1, std::memory_order_relaxed);
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in.requires_grad();
    n->requires_grad = rg;
    if (rg) {
        for (auto& in : inputs) n->parents.push_back(in.node());
        n->back = std::move(back);
    }
    return Var::from_node(std::move(n));
}

inline void check_broadcastable(const Tensor& a, const Tensor& b, const char* op) {
    int ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
    bool ok = (ar == br || ar == 1 || br == 1) && (ac == bc || ac == 1 || bc == 1);
    if (!ok)
        throw std::invalid_argument(std::string(op) + ": shapes not broadcastable, " + a.shape_str() + " vs " +
                                    b.shape_str());
}

// Elementwise binary with row/column/scalar broadcasting in the 2-d view.
template <class F>
Tensor broadcast_apply(const Tensor& a, const Tensor& b, F&& f) {
    int r = std::max(a.rows(), b.rows()), c = std::max(a.cols(), b.cols());
    int rank = std::max(a.ndim(), b.ndim());
    Tensor out(rank <= 1 ? std::vector<int>{r * c} : std::vector<int>{r, c});
    const int ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out.at(i, j) = f(a.at(ar == 1 ? 0 : i, ac == 1 ? 0 : j), b.at(br == 1 ? 0 : i, bc == 1 ? 0 : j));
    return out;
}

// dfa/dfb map (a_elem, b_elem, gout_elem) -> gradient contribution.
template <class F, class DFA, class DFB>
Var binary_op(const char* name, const Var& a, const Var& b, F f, DFA dfa, DFB dfb) {
    check_broadcastable(a.value(), b.value(), name);
    Tensor val = broadcast_apply(a.value(), b.value(), f);
    return make_op(std::move(val), {a, b}, [dfa, dfb](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        const Tensor& av = pa.val;
        const Tensor& bv = pb.val;
        const int ar = av.rows(), ac = av.cols(), br = bv.rows(), bc = bv.cols();
        const int r = n.val.rows(), c = n.val.cols();
        if (pa.requires_grad) {
            Tensor ga(n.val.shape());
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j)
                    ga.at(i, j) = dfa(av.at(ar == 1 ? 0 : i, ac == 1 ? 0 : j),
                                      bv.at(br == 1 ? 0 : i, bc == 1 ? 0 : j), n.grad.at(i, j));
            accumulate_reduced(pa.grad, ga, av.shape());
        }
        if (pb.requires_grad) {
            Tensor gb(n.val.shape());
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j)
                    gb.at(i, j) = dfb(av.at(ar == 1 ? 0 : i, ac == 1 ? 0 : j),
                                      bv.at(br == 1 ? 0 : i, bc == 1 ? 0 : j), n.grad.at(i, j));
            accumulate_reduced(pb.grad, gb, bv.shape());
        }
    });
}

template <class F, class DF>
Var unary_op(const Var& a, F f, DF df) {
    Tensor val(a.value().shape());
    for (int64_t i = 0; i < val.numel(); ++i) val[i] = f(a.value()[i]);
    return make_op(std::move(val), {a}, [df](Node& n) {
        Node& pa = *n.parents[0];
        if (!pa.requires_grad) return;
        if (pa.grad.empty()) pa.grad = Tensor::zeros(pa.val.shape());
        for (int64_t i = 0; i < n.val.numel(); ++i) pa.grad[i] += df(pa.val[i], n.val[i], n.grad[i]);
    });
}

} // namespace detail

// --- arithmetic -------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
    return detail::binary_op(
        "add", a, b, [](float x, float y) { return x + y; }, [](float, float, float g) { return g; },
        [](float, float, float g) { return g; });
}

inline Var sub(const Var& a, const Var& b) {
    return detail::binary_op(
        "sub", a, b, [](float x, float y) { return x - y; }, [](float, float, float g) { return g; },
        [](float, float, float g) { return -g; });
}

inline Var mul(const Var& a, const Var& b) {
    return detail::binary_op(
        "mul", a, b, [](float x, float y) { return x * y; }, [](float, float y, float g) { return y * g; },
        [](float x, float, float g) { return x * g; });
}

inline Var div(const Var& a, const Var& b) {
    return detail::binary_op(
        "div", a, b, [](float x, float y) { return x / y; }, [](float, float y, float g) { return g / y; },
        [](float x, float y, float g) { return -x / (y * y) * g; });
}

inline Var scale(const Var& a, float c) {
    return detail::unary_op(
        a, [c](float x) { return c * x; }, [c](float, float, float g) { return c * g; });
}

inline Var add_scalar(const Var& a, float c) {
    return detail::unary_op(
        a, [c](float x) { return x + c; }, [](float, float, float g) { return g; });
}

inline Var neg(const Var& a) { return scale(a, -1.0f); }

// --- nonlinearities ----------------------------------------------------------

inline Var relu(const Var& a) {
    return detail::unary_op(
        a, [](float x) { return x > 0.0f ? x : 0.0f; },
        [](float x, float, float g) { return x > 0.0f ? g : 0.0f; });
}

inline Var sin_op(const Var& a) {
    return detail::unary_op(
        a, [](float x) { return std::sin(x); }, [](float x, float, float g) { return std::cos(x) * g; });
}

inline Var exp_op(const Var& a) {
    return detail::unary_op(
        a, [](float x) { return std::exp(x); }, [](float, float y, float g) { return y * g; });
}

inline Var sqrt_op(const Var& a) {
    return detail::unary_op(
        a, [](float x) { return std::sqrt(x); },
        [](float x, float y, float g) { return x > 0.0f ? 0.5f / y * g : 0.0f; });
}

inline Var tanh_op(const Var& a) {
    return detail::unary_op(
        a, [](float x) { return std::tanh(x); }, [](float, float y, float g) { return (1.0f - y * y) * g; });
}

/// GELU, tanh approximation.
inline Var gelu(const Var& a) {
    constexpr float k = 0.7978845608028654f; // sqrt(2/pi)
    constexpr float c3 = 0.044715f;
    return detail::unary_op(
        a,
        [=](float x) {
            float u = k * (x + c3 * x * x * x);
            return 0.5f * x * (1.0f + std::tanh(u));
        },
        [=](float x, float, float g) {
            float u = k * (x + c3 * x * x * x);
            float t = std::tanh(u);
            float d = 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * k * (1.0f + 3.0f * c3 * x * x);
            return d * g;
        });
}

/// Clamp to [lo, hi]; gradient passes where the input lies inside the
/// closed interval.
inline Var clamp(const Var& a, float lo, float hi) {
    return detail::unary_op(
        a, [=](float x) { return x < lo ? lo : (x > hi ? hi : x); },
        [=](float x, float, float g) { return (x >= lo && x <= hi) ? g : 0.0f; });
}

// --- matmul ------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b, bool ta = false, bool tb = false) {
    Tensor val = matmul_val(a.value(), b.value(), ta, tb);
    return detail::make_op(std::move(val), {a, b}, [ta, tb](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        const Tensor& A = pa.val;
        const Tensor& B = pb.val;
        const Tensor& G = n.grad;
        if (pa.requires_grad) {
            Tensor ga;
            if (!ta && !tb) ga = matmul_val(G, B, false, true);       // G B^T
            else if (ta && !tb) ga = matmul_val(B, G, false, true);   // B G^T
            else if (!ta && tb) ga = matmul_val(G, B, false, false);  // G B
            else ga = matmul_val(B, G, true, true);                   // B^T G^T
            accumulate_reduced(pa.grad, ga, A.shape());
        }
        if (pb.requires_grad) {
            Tensor gb;
            if (!ta && !tb) gb = matmul_val(A, G, true, false);       // A^T G
            else if (ta && !tb) gb = matmul_val(A, G, false, false);  // A G
            else if (!ta && tb) gb = matmul_val(G, A, true, false);   // G^T A
            else gb = matmul_val(G, A, true, true);                   // G^T A^T
            accumulate_reduced(pb.grad, gb, B.shape());
        }
    });
}

// --- reductions ---------------------------------------------------------------

inline Var sum(const Var& a) {
    double acc = 0.0;
    for (int64_t i = 0; i < a.value().numel(); ++i) acc += a.value()[i];
    return detail::make_op(Tensor::scalar(float(acc)), {a}, [](Node& n) {
        Node& pa = *n.parents[0];
        if (!pa.requires_grad) return;
        if (pa.grad.empty()) pa.grad = Tensor::zeros(pa.val.shape());
        float g = n.grad[0];
        for (int64_t i = 0; i < pa.val.numel(); ++i) pa.grad[i] += g;
    });
}

inline Var mean(const Var& a) {
    int64_t n_el = a.value().numel();
    if (n_el == 0) throw std::invalid_argument("mean: empty tensor");
    double acc = 0.0;
    for (int64_t i = 0; i < n_el; ++i) acc += a.value()[i];
    return detail::make_op(Tensor::scalar(float(acc / double(n_el))), {a}, [n_el](Node& n) {
        Node& pa = *n.parents[0];
        if (!pa.requires_grad) return;
        if (pa.grad.empty()) pa.grad = Tensor::zeros(pa.val.shape());
        float g = n.grad[0] / float(n_el);
        for (int64_t i = 0; i < pa.val.numel(); ++i) pa.grad[i] += g;
    });
}

/// Sum over one axis of the 2-d view. keepdim keeps the reduced axis as 1.
inline Var sum_axis(const Var& a, int axis, bool keepdim = true) {
    const Tensor& v = a.value();
    int r = v.rows(), c = v.cols();
    if (axis != 0 && axis != 1) throw std::invalid_argument("sum_axis: axis must be 0 or 1");
    std::vector<int> oshape = axis == 0 ? (keepdim ? std::vector<int>{1, c} : std::vector<int>{c})
                                        : (keepdim ? std::vector<int>{r, 1} : std::vector<int>{r});
    Tensor out(oshape);
    if (axis == 0) {
        for (int j = 0; j < c; ++j) {
            double acc = 0.0;
            for (int i = 0; i < r; ++i) acc += v.at(i, j);
            out[j] = float(acc);
        }
    } else {
        for (int i = 0; i < r; ++i) {
            double acc = 0.0;
            for (int j = 0; j < c; ++j) acc += v.at(i, j);
            out[i] = float(acc);
        }
    }
    return detail::make_op(std::move(out), {a}, [axis](Node& n) {
        Node& pa = *n.parents[0];
        if (!pa.requires_grad) return;
        if (pa.grad.empty()) pa.grad = Tensor::zeros(pa.val.shape());
        int r = pa.val.rows(), c = pa.val.cols();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) pa.grad.at(i, j) += n.grad[axis == 0 ? j : i];
    });
}

inline Var mean_axis(const Var& a, int axis, bool keepdim = true) {
    int n = axis == 0 ? a.rows() : a.cols();
    return scale(sum_axis(a, axis, keepdim), 1.0f / float(n));
}

/// Mean squared error between same-shaped tensors; returns a scalar.
inline Var mse(const Var& a, const Var& b) {
    if (!a.value().same_shape(b.value()))
        throw std::invalid_argument("mse: shape mismatch " + a.value().shape_str() + " vs " + b.value().shape_str());
    int64_t n_el = a.value().numel();
    if (n_el == 0) throw std::invalid_argument("mse: empty tensor");
    double acc = 0.0;
    for (int64_t i = 0; i < n_el; ++i) {
        double d = double(a.value()[i]) - double(b.value()[i]);
        acc += d * d;
    }
    return detail::make_op(Tensor::scalar(float(acc / double(n_el))), {a, b}, [n_el](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        float g = n.grad[0] * 2.0f / float(n_el);
        if (pa.requires_grad && pa.grad.empty()) pa.grad = Tensor::zeros(pa.val.shape());
        if (pb.requires_grad && pb.grad.empty()) pb.grad = Tensor::zeros(pb.val.shape());
        for (int64_t i = 0; i < n_el; ++i) {
            float d = (pa.val[i] - pb.val[i]) * g;
            if (pa.requires_grad) pa.grad[i] += d;
            if (pb.requires_grad) pb.grad[i] -= d;
        }
    });
}

/// Euclidean norm of all elements; returns a scalar.
inline Var l2norm(const Var& a) {
    double acc = 0.0;
    for (int64_t i = 0; i < a.value().numel(); ++i) acc += double(a.value()[i]) * double(a.value()[i]);
    float nv = float(std::sqrt(acc));
    return detail::make_op(Tensor::scalar(nv), {a}, [](Node& n) {
        Node& pa = *n.parents[0];
        if (!pa.requires_grad) return;
        if (pa.grad.empty()) pa.grad = Tensor::zeros(pa.val.shape());
        float nv2 = std::max(n.val[0], 1e-12f);
        float g = n.grad[0] / nv2;
        for (int64_t i = 0; i < pa.val.numel(); ++i) pa.grad[i] += pa.val[i] * g;
    });
}

// --- shape ops -----------------------------------------------------------------

inline Var reshape(const Var& a, std::vector<int> shape) {
    Tensor val = a.value().reshaped(shape);
    return detail::make_op(std::move(val), {a}, [](Node& n) {
        Node& pa = *n.parents[0];
        if (!pa.requires_grad) return;
        if (pa.grad.empty()) pa.grad = Tensor::zeros(pa.val.shape());
        for (int64_t i = 0; i < n.val.numel(); ++i) pa.grad[i] += n.grad[i];
    });
}

inline Var transpose2d(const Var& a) {
    const Tensor& v = a.value();
    int r = v.rows(), c = v.cols();
    Tensor out({c, r});
    emap(out) = emap(v).transpose();
    return detail::make_op(std::move(out), {a}, [](Node& n) {
        Node& pa = *n.parents[0];
        if (!pa.requires_grad) return;
        Tensor gt(pa.val.ndim() == 1 ? std::vector<int>{pa.val.cols()}
                                     : std::vector<int>{pa.val.rows(), pa.val.cols()});
        emap(gt) = emap(n.grad).transpose();
        accumulate_reduced(pa.grad, gt, pa.val.shape());
    });
}

/// Columns [c0, c1) of the 2-d view.
inline Var slice_cols(const Var& a, int c0, int c1) {
    const Tensor& v = a.value();
    int r = v.rows(), c = v.cols();
    if (c0 < 0 || c1 > c || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
    Tensor out({r, c1 - c0});
    for (int i = 0; i < r; ++i)
        for (int j = c0; j < c1; ++j) out.at(i, j - c0) = v.at(i, j);
    return detail::make_op(std::move(out), {a}, [c0, c1](Node& n) {
        Node& pa = *n.parents[0];
        if (!pa.requires_grad) return;
        if (pa.grad.empty()) pa.grad = Tensor::zeros(pa.val.shape());
        int r = n.val.rows();
        for (int i = 0; i < r; ++i)
            for (int j = c0; j < c1; ++j) pa.grad.at(i, j) += n.grad.at(i, j - c0);
    });
}

inline Var concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_cols: empty input");
    int r = xs[0].rows(), c = 0;
    for (const auto& x : xs) {
        if (x.rows() != r) throw std::invalid_argument("concat_cols: row mismatch");
        c += x.cols();
    }
    Tensor out({r, c});
    int off = 0;
    for (const auto& x : xs) {
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < x.cols(); ++j) out.at(i, off + j) = x.value().at(i, j);
        off += x.cols();
    }
    std::vector<int> widths;
    for (const auto& x : xs) widths.push_back(x.cols());
    return detail::make_op(std::move(out), xs, [widths](Node& n) {
        int off = 0;
        int r = n.val.rows();
        for (size_t k = 0; k < n.parents.size(); ++k) {
            Node& p = *n.parents[k];
            if (p.requires_grad) {
                if (p.grad.empty()) p.grad = Tensor::zeros(p.val.shape());
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < widths[k]; ++j) p.grad.at(i, j) += n.grad.at(i, off + j);
            }
            off += widths[k];
        }
    });
}

inline Var concat_rows(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_rows: empty input");
    int c = xs[0].cols(), r = 0;
    for (const auto& x : xs) {
        if (x.cols() != c) throw std::invalid_argument("concat_rows: column mismatch");
        r += x.rows();
    }
    Tensor out({r, c});
    int off = 0;
    for (const auto& x : xs) {
        for (int i = 0; i < x.rows(); ++i)
            for (int j = 0; j < c; ++j) out.at(off + i, j) = x.value().at(i, j);
        off += x.rows();
    }
    std::vector<int> heights;
    for (const auto& x : xs) heights.push_back(x.rows());
    return detail::make_op(std::move(out), xs, [heights](Node& n) {
        int off = 0;
        int c = n.val.cols();
        for (size_t k = 0; k < n.parents.size(); ++k) {
            Node& p = *n.parents[k];
            if (p.requires_grad) {
                if (p.grad.empty()) p.grad = Tensor::zeros(p.val.shape());
                for (int i = 0; i < heights[k]; ++i)
                    for (int j = 0; j < c; ++j) p.grad.at(i, j) += n.grad.at(off + i, j);
            }
            off += heights[k];
        }
    });
}

/// Value copy that blocks gradient flow.
inline Var detach(const Var& a) { return Var::constant(a.value()); }

// --- composite helpers ----------------------------------------------------------

/// Row-wise softmax with the usual max-shift for stability. The shift is a
/// constant, which leaves the gradient unchanged.
inline Var softmax_rows(const Var& a) {
    const Tensor& v = a.value();
    int r = v.rows();
    Tensor mx({r, 1});
    for (int i = 0; i < r; ++i) {
        float m = v.at(i, 0);
        for (int j = 1; j < v.cols(); ++j) m = std::max(m, v.at(i, j));
        mx.at(i, 0) = m;
    }
    Var e = exp_op(sub(a, Var::constant(std::move(mx))));
    return div(e, sum_axis(e, 1, true));
}

/// Row-wise layer normalization with learnable gain/bias (rank-1, length = cols).
inline Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-5f) {
    Var m = mean_axis(x, 1, true);
    Var xc = sub(x, m);
    Var var = mean_axis(mul(xc, xc), 1, true);
    Var xn = div(xc, sqrt_op(add_scalar(var, eps)));
    return add(mul(xn, gamma), beta);
}

// --- backward --------------------------------------------------------------------

/// Reverse-mode sweep from a scalar root. Each reachable gradient-requiring
/// node's backward runs exactly once, children before parents.
inline void backward(const Var& root) {
    if (!root.defined()) throw std::invalid_argument("backward: undefined variable");
    if (root.value().numel() != 1) throw std::invalid_argument("backward: root must be scalar");
    if (!root.node()->requires_grad) throw std::invalid_argument("backward: root does not require grad");

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root.node().get()};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (auto& p : n->parents)
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->stamp > b->stamp; });

    root.node()->grad = Tensor::ones({1});
    for (Node* n : order)
        if (n->back && !n->grad.empty()) n->back(*n);
}

} // namespace wsf
