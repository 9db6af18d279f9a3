#pragma once

#include "svsplat/errors.hpp"
#include "svsplat/tensor.hpp"
#include "svsplat/threading.hpp"

#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

namespace svsplat {

/// Reverse-mode tape over dense arrays. Nodes are recorded in creation
/// order (which is a topological order); backward walks the tape in
/// reverse, so gradient accumulation order is fixed and runs are
/// reproducible bit for bit.
template <typename T>
class Graph {
public:
    struct Node {
        TArr<T> val;
        TArr<T> grad;
        bool requires_grad = false;
        bool grad_alloc = false;
        std::function<void(Graph&)> backward;
    };

    int add_node(TArr<T> val, bool requires_grad, std::function<void(Graph&)> bw = nullptr) {
        Node n;
        n.val = std::move(val);
        n.requires_grad = requires_grad;
        n.backward = std::move(bw);
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    const TArr<T>& val(int id) const { return nodes_[static_cast<size_t>(id)].val; }

    bool wants_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

    /// Gradient buffer of a node, allocated to zeros on first use.
    TArr<T>& grad_buf(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.grad_alloc) {
            n.grad = TArr<T>::zeros(n.val.dims);
            n.grad_alloc = true;
        }
        return n.grad;
    }

    void backward(int loss_id) {
        Node& loss = nodes_[static_cast<size_t>(loss_id)];
        if (loss.val.numel() != 1)
            throw ShapeError("backward requires a scalar loss node");
        grad_buf(loss_id).v[0] = T(1);
        for (int i = loss_id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.backward && n.grad_alloc) n.backward(*this);
        }
    }

    size_t size() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
};

/// Lightweight handle to a tape node.
template <typename T>
struct Var {
    Graph<T>* g = nullptr;
    int id = -1;

    const TArr<T>& val() const { return g->val(id); }
    const Shape& dims() const { return g->val(id).dims; }
    const TArr<T>& grad() const { return g->node(id).grad; }
    bool defined() const { return g != nullptr && id >= 0; }
};

template <typename T>
Var<T> constant(Graph<T>& g, TArr<T> value) {
    return {&g, g.add_node(std::move(value), false)};
}

template <typename T>
Var<T> leaf(Graph<T>& g, TArr<T> value) {
    return {&g, g.add_node(std::move(value), true)};
}

namespace detail {

template <typename T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (!(a.val().dims == b.val().dims))
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.val().dims) +
                         " vs " + shape_str(b.val().dims));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::check_same_shape(a, b, "add");
    Graph<T>& g = *a.g;
    TArr<T> out = a.val();
    const TArr<T>& bv = b.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
    const int ida = a.id, idb = b.id;
    const int id = g.add_node(std::move(out), g.wants_grad(ida) || g.wants_grad(idb));
    g.node(id).backward = [id, ida, idb](Graph<T>& gr) {
        const TArr<T>& go = gr.node(id).grad;
        if (gr.wants_grad(ida)) {
            TArr<T>& ga = gr.grad_buf(ida);
            for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
        }
        if (gr.wants_grad(idb)) {
            TArr<T>& gb = gr.grad_buf(idb);
            for (int64_t i = 0; i < go.numel(); ++i) gb[i] += go[i];
        }
    };
    return {&g, id};
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    detail::check_same_shape(a, b, "sub");
    Graph<T>& g = *a.g;
    TArr<T> out = a.val();
    const TArr<T>& bv = b.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
    const int ida = a.id, idb = b.id;
    const int id = g.add_node(std::move(out), g.wants_grad(ida) || g.wants_grad(idb));
    g.node(id).backward = [id, ida, idb](Graph<T>& gr) {
        const TArr<T>& go = gr.node(id).grad;
        if (gr.wants_grad(ida)) {
            TArr<T>& ga = gr.grad_buf(ida);
            for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
        }
        if (gr.wants_grad(idb)) {
            TArr<T>& gb = gr.grad_buf(idb);
            for (int64_t i = 0; i < go.numel(); ++i) gb[i] -= go[i];
        }
    };
    return {&g, id};
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    detail::check_same_shape(a, b, "mul");
    Graph<T>& g = *a.g;
    TArr<T> out = a.val();
    const TArr<T>& bv = b.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    const int ida = a.id, idb = b.id;
    const int id = g.add_node(std::move(out), g.wants_grad(ida) || g.wants_grad(idb));
    g.node(id).backward = [id, ida, idb](Graph<T>& gr) {
        const TArr<T>& go = gr.node(id).grad;
        const TArr<T>& av = gr.val(ida);
        const TArr<T>& bv2 = gr.val(idb);
        if (gr.wants_grad(ida)) {
            TArr<T>& ga = gr.grad_buf(ida);
            for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * bv2[i];
        }
        if (gr.wants_grad(idb)) {
            TArr<T>& gb = gr.grad_buf(idb);
            for (int64_t i = 0; i < go.numel(); ++i) gb[i] += go[i] * av[i];
        }
    };
    return {&g, id};
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
    detail::check_same_shape(a, b, "div");
    Graph<T>& g = *a.g;
    TArr<T> out = a.val();
    const TArr<T>& bv = b.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] /= bv[i];
    const int ida = a.id, idb = b.id;
    const int id = g.add_node(std::move(out), g.wants_grad(ida) || g.wants_grad(idb));
    g.node(id).backward = [id, ida, idb](Graph<T>& gr) {
        const TArr<T>& go = gr.node(id).grad;
        const TArr<T>& av = gr.val(ida);
        const TArr<T>& bv2 = gr.val(idb);
        if (gr.wants_grad(ida)) {
            TArr<T>& ga = gr.grad_buf(ida);
            for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] / bv2[i];
        }
        if (gr.wants_grad(idb)) {
            TArr<T>& gb = gr.grad_buf(idb);
            for (int64_t i = 0; i < go.numel(); ++i)
                gb[i] -= go[i] * av[i] / (bv2[i] * bv2[i]);
        }
    };
    return {&g, id};
}

template <typename T>
Var<T> add_scalar(Var<T> a, T c) {
    Graph<T>& g = *a.g;
    TArr<T> out = a.val();
    for (auto& x : out.v) x += c;
    const int ida = a.id;
    const int id = g.add_node(std::move(out), g.wants_grad(ida));
    g.node(id).backward = [id, ida](Graph<T>& gr) {
        if (!gr.wants_grad(ida)) return;
        const TArr<T>& go = gr.node(id).grad;
        TArr<T>& ga = gr.grad_buf(ida);
        for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
    };
    return {&g, id};
}

template <typename T>
Var<T> mul_scalar(Var<T> a, T c) {
    Graph<T>& g = *a.g;
    TArr<T> out = a.val();
    for (auto& x : out.v) x *= c;
    const int ida = a.id;
    const int id = g.add_node(std::move(out), g.wants_grad(ida));
    g.node(id).backward = [id, ida, c](Graph<T>& gr) {
        if (!gr.wants_grad(ida)) return;
        const TArr<T>& go = gr.node(id).grad;
        TArr<T>& ga = gr.grad_buf(ida);
        for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * c;
    };
    return {&g, id};
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

namespace detail {

template <typename T, typename FwdFn, typename DerFn>
Var<T> unary_op(Var<T> a, FwdFn fwd, DerFn der) {
    Graph<T>& g = *a.g;
    TArr<T> out = a.val();
    for (auto& x : out.v) x = fwd(x);
    const int ida = a.id;
    const int id = g.add_node(std::move(out), g.wants_grad(ida));
    g.node(id).backward = [id, ida, der](Graph<T>& gr) {
        if (!gr.wants_grad(ida)) return;
        const TArr<T>& go = gr.node(id).grad;
        const TArr<T>& av = gr.val(ida);
        TArr<T>& ga = gr.grad_buf(ida);
        for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * der(av[i]);
    };
    return {&g, id};
}

template <typename T>
T sigmoid_scalar(T x) {
    if (x >= T(0)) {
        const T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
T softplus_scalar(T x) {
    if (x > T(20)) return x;
    if (x < T(-20)) return std::exp(x);
    return std::log1p(std::exp(x));
}

inline constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)

} // namespace detail

template <typename T>
Var<T> gelu(Var<T> a) {
    const T c = static_cast<T>(detail::kGeluC);
    return detail::unary_op(
        a,
        [c](T x) {
            const T u = c * (x + T(0.044715) * x * x * x);
            return T(0.5) * x * (T(1) + std::tanh(u));
        },
        [c](T x) {
            const T u = c * (x + T(0.044715) * x * x * x);
            const T t = std::tanh(u);
            const T du = c * (T(1) + T(3) * T(0.044715) * x * x);
            return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
        });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
    return detail::unary_op(
        a, [](T x) { return detail::sigmoid_scalar(x); },
        [](T x) {
            const T s = detail::sigmoid_scalar(x);
            return s * (T(1) - s);
        });
}

template <typename T>
Var<T> tanh_op(Var<T> a) {
    return detail::unary_op(
        a, [](T x) { return std::tanh(x); },
        [](T x) {
            const T t = std::tanh(x);
            return T(1) - t * t;
        });
}

template <typename T>
Var<T> softplus(Var<T> a) {
    return detail::unary_op(
        a, [](T x) { return detail::softplus_scalar(x); },
        [](T x) { return detail::sigmoid_scalar(x); });
}

template <typename T>
Var<T> abs_op(Var<T> a) {
    return detail::unary_op(
        a, [](T x) { return std::abs(x); },
        [](T x) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Var<T> square(Var<T> a) {
    return detail::unary_op(
        a, [](T x) { return x * x; }, [](T x) { return T(2) * x; });
}

/// Hard clamp; gradient is zero outside [lo, hi].
template <typename T>
Var<T> clamp_op(Var<T> a, T lo, T hi) {
    return detail::unary_op(
        a, [lo, hi](T x) { return x < lo ? lo : (x > hi ? hi : x); },
        [lo, hi](T x) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// Matrix products

namespace detail {

// C(m,n) += A(m,k) * B(k,n)
template <typename T>
void mm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    parallel_for_chunks(m, [=](int64_t r0, int64_t r1) {
        for (int64_t i = r0; i < r1; ++i)
            for (int64_t p = 0; p < k; ++p) {
                const T av = a[i * k + p];
                const T* brow = b + p * n;
                T* crow = c + i * n;
                for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
    });
}

// C(m,n) += A(m,k) * B(n,k)^T
template <typename T>
void mm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    parallel_for_chunks(m, [=](int64_t r0, int64_t r1) {
        for (int64_t i = r0; i < r1; ++i)
            for (int64_t j = 0; j < n; ++j) {
                const T* arow = a + i * k;
                const T* brow = b + j * k;
                T s = 0;
                for (int64_t p = 0; p < k; ++p) s += arow[p] * brow[p];
                c[i * n + j] += s;
            }
    });
}

// C(k,n) += A(m,k)^T * B(m,n)
template <typename T>
void mm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    parallel_for_chunks(k, [=](int64_t r0, int64_t r1) {
        for (int64_t p = r0; p < r1; ++p)
            for (int64_t i = 0; i < m; ++i) {
                const T av = a[i * k + p];
                const T* brow = b + i * n;
                T* crow = c + p * n;
                for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
    });
}

} // namespace detail

/// C = A (m,k) x B (k,n)
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    const auto& av = a.val();
    const auto& bv = b.val();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(av.dims) + " x " +
                         shape_str(bv.dims));
    Graph<T>& g = *a.g;
    const int64_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    TArr<T> out({m, n});
    detail::mm_nn(av.data(), bv.data(), out.data(), m, k, n);
    const int ida = a.id, idb = b.id;
    const int id = g.add_node(std::move(out), g.wants_grad(ida) || g.wants_grad(idb));
    g.node(id).backward = [id, ida, idb, m, k, n](Graph<T>& gr) {
        const TArr<T>& go = gr.node(id).grad;
        if (gr.wants_grad(ida)) // dA = G * B^T
            detail::mm_nt(go.data(), gr.val(idb).data(), gr.grad_buf(ida).data(), m, n, k);
        if (gr.wants_grad(idb)) // dB = A^T * G
            detail::mm_tn(gr.val(ida).data(), go.data(), gr.grad_buf(idb).data(), m, k, n);
    };
    return {&g, id};
}

/// C = A (m,k) x B(n,k)^T
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
    const auto& av = a.val();
    const auto& bv = b.val();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1))
        throw ShapeError("matmul_nt: incompatible shapes " + shape_str(av.dims) + " x " +
                         shape_str(bv.dims));
    Graph<T>& g = *a.g;
    const int64_t m = av.dim(0), k = av.dim(1), n = bv.dim(0);
    TArr<T> out({m, n});
    detail::mm_nt(av.data(), bv.data(), out.data(), m, k, n);
    const int ida = a.id, idb = b.id;
    const int id = g.add_node(std::move(out), g.wants_grad(ida) || g.wants_grad(idb));
    g.node(id).backward = [id, ida, idb, m, k, n](Graph<T>& gr) {
        const TArr<T>& go = gr.node(id).grad;
        if (gr.wants_grad(ida)) // dA = G * B
            detail::mm_nn(go.data(), gr.val(idb).data(), gr.grad_buf(ida).data(), m, n, k);
        if (gr.wants_grad(idb)) // dB = G^T * A
            detail::mm_tn(go.data(), gr.val(ida).data(), gr.grad_buf(idb).data(), m, n, k);
    };
    return {&g, id};
}

/// Broadcast-add a row vector b (n) to every row of a (m,n).
template <typename T>
Var<T> add_rowvec(Var<T> a, Var<T> b) {
    const auto& av = a.val();
    const auto& bv = b.val();
    if (av.rank() != 2 || bv.rank() != 1 || av.dim(1) != bv.dim(0))
        throw ShapeError("add_rowvec: incompatible shapes");
    Graph<T>& g = *a.g;
    const int64_t m = av.dim(0), n = av.dim(1);
    TArr<T> out = av;
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
    const int ida = a.id, idb = b.id;
    const int id = g.add_node(std::move(out), g.wants_grad(ida) || g.wants_grad(idb));
    g.node(id).backward = [id, ida, idb, m, n](Graph<T>& gr) {
        const TArr<T>& go = gr.node(id).grad;
        if (gr.wants_grad(ida)) {
            TArr<T>& ga = gr.grad_buf(ida);
            for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
        }
        if (gr.wants_grad(idb)) {
            TArr<T>& gb = gr.grad_buf(idb);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
        }
    };
    return {&g, id};
}

// ---------------------------------------------------------------------------
// Row-wise softmax / layer norm / normalize / maxpool

template <typename T>
Var<T> softmax_rows(Var<T> a) {
    const auto& av = a.val();
    if (av.rank() != 2) throw ShapeError("softmax_rows expects (m,n)");
    Graph<T>& g = *a.g;
    const int64_t m = av.dim(0), n = av.dim(1);
    TArr<T> out({m, n});
    for (int64_t i = 0; i < m; ++i) {
        const T* row = av.data() + i * n;
        T mx = row[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        T sum = 0;
        for (int64_t j = 0; j < n; ++j) {
            const T e = std::exp(row[j] - mx);
            out[i * n + j] = e;
            sum += e;
        }
        for (int64_t j = 0; j < n; ++j) out[i * n + j] /= sum;
    }
    const int ida = a.id;
    const int id = g.add_node(std::move(out), g.wants_grad(ida));
    g.node(id).backward = [id, ida, m, n](Graph<T>& gr) {
        if (!gr.wants_grad(ida)) return;
        const TArr<T>& go = gr.node(id).grad;
        const TArr<T>& y = gr.val(id);
        TArr<T>& ga = gr.grad_buf(ida);
        for (int64_t i = 0; i < m; ++i) {
            T dot = 0;
            for (int64_t j = 0; j < n; ++j) dot += go[i * n + j] * y[i * n + j];
            for (int64_t j = 0; j < n; ++j)
                ga[i * n + j] += y[i * n + j] * (go[i * n + j] - dot);
        }
    };
    return {&g, id};
}

/// Per-row layer normalization with learned gain/bias over the last dim.
template <typename T>
Var<T> layernorm_rows(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
    const auto& xv = x.val();
    if (xv.rank() != 2) throw ShapeError("layernorm_rows expects (m,n)");
    const int64_t m = xv.dim(0), n = xv.dim(1);
    if (gain.val().dims != Shape{n} || bias.val().dims != Shape{n})
        throw ShapeError("layernorm_rows: gain/bias must be (n)");
    Graph<T>& g = *x.g;

    TArr<T> out({m, n});
    auto xhat = std::make_shared<TArr<T>>(Shape{m, n});
    auto inv_sigma = std::make_shared<TArr<T>>(Shape{m});
    const auto& gv = gain.val();
    const auto& bv = bias.val();
    for (int64_t i = 0; i < m; ++i) {
        const T* row = xv.data() + i * n;
        T mean = 0;
        for (int64_t j = 0; j < n; ++j) mean += row[j];
        mean /= static_cast<T>(n);
        T var = 0;
        for (int64_t j = 0; j < n; ++j) {
            const T d = row[j] - mean;
            var += d * d;
        }
        var /= static_cast<T>(n);
        const T is = T(1) / std::sqrt(var + eps);
        inv_sigma->at(i) = is;
        for (int64_t j = 0; j < n; ++j) {
            const T xh = (row[j] - mean) * is;
            xhat->at(i, j) = xh;
            out[i * n + j] = xh * gv[j] + bv[j];
        }
    }
    const int idx = x.id, idg = gain.id, idb = bias.id;
    const int id = g.add_node(std::move(out),
                              g.wants_grad(idx) || g.wants_grad(idg) || g.wants_grad(idb));
    g.node(id).backward = [id, idx, idg, idb, m, n, xhat, inv_sigma](Graph<T>& gr) {
        const TArr<T>& go = gr.node(id).grad;
        const TArr<T>& gv2 = gr.val(idg);
        if (gr.wants_grad(idg)) {
            TArr<T>& gg = gr.grad_buf(idg);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) gg[j] += go[i * n + j] * xhat->at(i, j);
        }
        if (gr.wants_grad(idb)) {
            TArr<T>& gb = gr.grad_buf(idb);
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
        }
        if (gr.wants_grad(idx)) {
            TArr<T>& gx = gr.grad_buf(idx);
            for (int64_t i = 0; i < m; ++i) {
                T mean_dxhat = 0, mean_dxhat_xhat = 0;
                for (int64_t j = 0; j < n; ++j) {
                    const T dxh = go[i * n + j] * gv2[j];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xhat->at(i, j);
                }
                mean_dxhat /= static_cast<T>(n);
                mean_dxhat_xhat /= static_cast<T>(n);
                const T is = inv_sigma->at(i);
                for (int64_t j = 0; j < n; ++j) {
                    const T dxh = go[i * n + j] * gv2[j];
                    gx[i * n + j] +=
                        is * (dxh - mean_dxhat - xhat->at(i, j) * mean_dxhat_xhat);
                }
            }
        }
    };
    return {&g, id};
}

/// L2-normalize each row.
template <typename T>
Var<T> normalize_rows(Var<T> a) {
    const auto& av = a.val();
    if (av.rank() != 2) throw ShapeError("normalize_rows expects (m,n)");
    Graph<T>& g = *a.g;
    const int64_t m = av.dim(0), n = av.dim(1);
    TArr<T> out({m, n});
    auto norms = std::make_shared<TArr<T>>(Shape{m});
    for (int64_t i = 0; i < m; ++i) {
        T s = 0;
        for (int64_t j = 0; j < n; ++j) s += av[i * n + j] * av[i * n + j];
        const T nn = std::sqrt(s);
        if (nn == T(0)) throw ValidationError("normalize_rows: zero row");
        norms->at(i) = nn;
        for (int64_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] / nn;
    }
    const int ida = a.id;
    const int id = g.add_node(std::move(out), g.wants_grad(ida));
    g.node(id).backward = [id, ida, m, n, norms](Graph<T>& gr) {
        if (!gr.wants_grad(ida)) return;
        const TArr<T>& go = gr.node(id).grad;
        const TArr<T>& y = gr.val(id);
        TArr<T>& ga = gr.grad_buf(ida);
        for (int64_t i = 0; i < m; ++i) {
            T dot = 0;
            for (int64_t j = 0; j < n; ++j) dot += go[i * n + j] * y[i * n + j];
            for (int64_t j = 0; j < n; ++j)
                ga[i * n + j] += (go[i * n + j] - y[i * n + j] * dot) / norms->at(i);
        }
    };
    return {&g, id};
}

/// Column-wise max over rows: (m,n) -> (n). Ties route the gradient to the
/// lowest row index.
template <typename T>
Var<T> maxpool_rows(Var<T> a) {
    const auto& av = a.val();
    if (av.rank() != 2) throw ShapeError("maxpool_rows expects (m,n)");
    Graph<T>& g = *a.g;
    const int64_t m = av.dim(0), n = av.dim(1);
    TArr<T> out({n});
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n), 0);
    for (int64_t j = 0; j < n; ++j) {
        T best = av[j];
        int64_t bi = 0;
        for (int64_t i = 1; i < m; ++i) {
            const T v = av[i * n + j];
            if (v > best) {
                best = v;
                bi = i;
            }
        }
        out[j] = best;
        (*argmax)[static_cast<size_t>(j)] = bi;
    }
    const int ida = a.id;
    const int id = g.add_node(std::move(out), g.wants_grad(ida));
    g.node(id).backward = [id, ida, n, argmax](Graph<T>& gr) {
        if (!gr.wants_grad(ida)) return;
        const TArr<T>& go = gr.node(id).grad;
        TArr<T>& ga = gr.grad_buf(ida);
        for (int64_t j = 0; j < n; ++j)
            ga[(*argmax)[static_cast<size_t>(j)] * n + j] += go[j];
    };
    return {&g, id};
}

// ---------------------------------------------------------------------------
// Structure ops

template <typename T>
Var<T> reshape(Var<T> a, Shape dims) {
    if (shape_numel(dims) != a.val().numel())
        throw ShapeError("reshape: element count mismatch");
    Graph<T>& g = *a.g;
    TArr<T> out;
    out.dims = std::move(dims);
    out.v = a.val().v;
    const int ida = a.id;
    const int id = g.add_node(std::move(out), g.wants_grad(ida));
    g.node(id).backward = [id, ida](Graph<T>& gr) {
        if (!gr.wants_grad(ida)) return;
        const TArr<T>& go = gr.node(id).grad;
        TArr<T>& ga = gr.grad_buf(ida);
        for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
    };
    return {&g, id};
}

/// Slice [c0, c1) of the last dimension (rank 2 or 3).
template <typename T>
Var<T> slice_last(Var<T> a, int64_t c0, int64_t c1) {
    const auto& av = a.val();
    const int rank = av.rank();
    if (rank < 2 || rank > 3) throw ShapeError("slice_last expects rank 2 or 3");
    const int64_t c = av.dims.back();
    if (!(0 <= c0 && c0 < c1 && c1 <= c)) throw ShapeError("slice_last: bad range");
    const int64_t rows = av.numel() / c;
    const int64_t w = c1 - c0;
    Graph<T>& g = *a.g;
    Shape od = av.dims;
    od.back() = w;
    TArr<T> out(od);
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < w; ++j) out[r * w + j] = av[r * c + c0 + j];
    const int ida = a.id;
    const int id = g.add_node(std::move(out), g.wants_grad(ida));
    g.node(id).backward = [id, ida, rows, c, c0, w](Graph<T>& gr) {
        if (!gr.wants_grad(ida)) return;
        const TArr<T>& go = gr.node(id).grad;
        TArr<T>& ga = gr.grad_buf(ida);
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < w; ++j) ga[r * c + c0 + j] += go[r * w + j];
    };
    return {&g, id};
}

/// Concatenate along the last dimension; all parts share leading dims.
template <typename T>
Var<T> concat_last(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_last: no parts");
    Graph<T>& g = *parts[0].g;
    const auto lead = [](const Shape& d) { return Shape(d.begin(), d.end() - 1); };
    const Shape lead0 = lead(parts[0].val().dims);
    int64_t total = 0;
    for (const auto& p : parts) {
        if (lead(p.val().dims) != lead0) throw ShapeError("concat_last: leading dims differ");
        total += p.val().dims.back();
    }
    Shape od = parts[0].val().dims;
    od.back() = total;
    const int64_t rows = shape_numel(lead0);
    TArr<T> out(od);
    std::vector<int> ids;
    std::vector<int64_t> widths;
    bool req = false;
    int64_t off = 0;
    for (const auto& p : parts) {
        const int64_t w = p.val().dims.back();
        const auto& pv = p.val();
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < w; ++j) out[r * total + off + j] = pv[r * w + j];
        ids.push_back(p.id);
        widths.push_back(w);
        req = req || g.wants_grad(p.id);
        off += w;
    }
    const int id = g.add_node(std::move(out), req);
    g.node(id).backward = [id, ids, widths, rows, total](Graph<T>& gr) {
        const TArr<T>& go = gr.node(id).grad;
        int64_t off2 = 0;
        for (size_t k = 0; k < ids.size(); ++k) {
            const int64_t w = widths[k];
            if (gr.wants_grad(ids[k])) {
                TArr<T>& ga = gr.grad_buf(ids[k]);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < w; ++j) ga[r * w + j] += go[r * total + off2 + j];
            }
            off2 += w;
        }
    };
    return {&g, id};
}

/// Gather rows by constant indices (duplicates allowed).
template <typename T>
Var<T> gather_rows(Var<T> a, std::vector<int64_t> idx) {
    const auto& av = a.val();
    if (av.rank() != 2) throw ShapeError("gather_rows expects (m,n)");
    const int64_t m = av.dim(0), n = av.dim(1);
    for (int64_t i : idx)
        if (i < 0 || i >= m) throw ShapeError("gather_rows: index out of range");
    Graph<T>& g = *a.g;
    const int64_t k = static_cast<int64_t>(idx.size());
    TArr<T> out({k, n});
    for (int64_t r = 0; r < k; ++r)
        for (int64_t j = 0; j < n; ++j) out[r * n + j] = av[idx[static_cast<size_t>(r)] * n + j];
    const int ida = a.id;
    auto idx_sp = std::make_shared<std::vector<int64_t>>(std::move(idx));
    const int id = g.add_node(std::move(out), g.wants_grad(ida));
    g.node(id).backward = [id, ida, n, idx_sp](Graph<T>& gr) {
        if (!gr.wants_grad(ida)) return;
        const TArr<T>& go = gr.node(id).grad;
        TArr<T>& ga = gr.grad_buf(ida);
        const int64_t k2 = static_cast<int64_t>(idx_sp->size());
        for (int64_t r = 0; r < k2; ++r)
            for (int64_t j = 0; j < n; ++j)
                ga[(*idx_sp)[static_cast<size_t>(r)] * n + j] += go[r * n + j];
    };
    return {&g, id};
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum_all(Var<T> a) {
    Graph<T>& g = *a.g;
    T s = 0;
    for (const T& x : a.val().v) s += x;
    const int ida = a.id;
    const int id = g.add_node(TArr<T>::scalar(s), g.wants_grad(ida));
    g.node(id).backward = [id, ida](Graph<T>& gr) {
        if (!gr.wants_grad(ida)) return;
        const T go = gr.node(id).grad[0];
        TArr<T>& ga = gr.grad_buf(ida);
        for (auto& x : ga.v) x += go;
    };
    return {&g, id};
}

template <typename T>
Var<T> mean_all(Var<T> a) {
    Graph<T>& g = *a.g;
    const int64_t n = a.val().numel();
    T s = 0;
    for (const T& x : a.val().v) s += x;
    s /= static_cast<T>(n);
    const int ida = a.id;
    const int id = g.add_node(TArr<T>::scalar(s), g.wants_grad(ida));
    g.node(id).backward = [id, ida, n](Graph<T>& gr) {
        if (!gr.wants_grad(ida)) return;
        const T go = gr.node(id).grad[0] / static_cast<T>(n);
        TArr<T>& ga = gr.grad_buf(ida);
        for (auto& x : ga.v) x += go;
    };
    return {&g, id};
}

// ---------------------------------------------------------------------------
// Convolution / resampling

/// 2D convolution on (H,W,Cin) with kernel (KH,KW,Cin,Cout), zero padding.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride, int pad) {
    const auto& xv = x.val();
    const auto& wv = w.val();
    const auto& bv = b.val();
    if (xv.rank() != 3 || wv.rank() != 4) throw ShapeError("conv2d expects (H,W,C) and (KH,KW,Cin,Cout)");
    const int64_t h = xv.dim(0), wd = xv.dim(1), cin = xv.dim(2);
    const int64_t kh = wv.dim(0), kw = wv.dim(1), cout = wv.dim(3);
    if (wv.dim(2) != cin) throw ShapeError("conv2d: input channel mismatch");
    if (bv.dims != Shape{cout}) throw ShapeError("conv2d: bias must be (Cout)");
    const int64_t oh = (h + 2 * pad - kh) / stride + 1;
    const int64_t ow = (wd + 2 * pad - kw) / stride + 1;
    if (oh < 1 || ow < 1) throw ShapeError("conv2d: output would be empty");

    Graph<T>& g = *x.g;
    TArr<T> out({oh, ow, cout});
    {
        const T* xd = xv.data();
        const T* wd_ = wv.data();
        const T* bd = bv.data();
        T* od = out.data();
        parallel_for_chunks(oh, [&](int64_t r0, int64_t r1) {
            for (int64_t oy = r0; oy < r1; ++oy)
                for (int64_t ox = 0; ox < ow; ++ox) {
                    T* o = od + (oy * ow + ox) * cout;
                    for (int64_t c = 0; c < cout; ++c) o[c] = bd[c];
                    for (int64_t ky = 0; ky < kh; ++ky) {
                        const int64_t iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            const int64_t ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= wd) continue;
                            const T* xp = xd + (iy * wd + ix) * cin;
                            const T* wp = wd_ + ((ky * kw + kx) * cin) * cout;
                            for (int64_t ic = 0; ic < cin; ++ic) {
                                const T xvban = xp[ic];
                                const T* wrow = wp + ic * cout;
                                for (int64_t c = 0; c < cout; ++c) o[c] += xvban * wrow[c];
                            }
                        }
                    }
                }
        });
    }
    const int idx = x.id, idw = w.id, idb = b.id;
    const bool req = g.wants_grad(idx) || g.wants_grad(idw) || g.wants_grad(idb);
    const int id = g.add_node(std::move(out), req);
    g.node(id).backward = [id, idx, idw, idb, h, wd, cin, kh, kw, cout, oh, ow, stride,
                           pad](Graph<T>& gr) {
        const TArr<T>& go = gr.node(id).grad;
        const T* god = go.data();
        if (gr.wants_grad(idb)) {
            TArr<T>& gb = gr.grad_buf(idb);
            for (int64_t p = 0; p < oh * ow; ++p)
                for (int64_t c = 0; c < cout; ++c) gb[c] += god[p * cout + c];
        }
        if (gr.wants_grad(idw)) {
            const T* xd = gr.val(idx).data();
            TArr<T>& gw = gr.grad_buf(idw);
            T* gwd = gw.data();
            // each (ky,kx,ic) slice is owned by one worker: disjoint writes
            parallel_for_chunks(kh * kw, [&](int64_t k0, int64_t k1) {
                for (int64_t kk = k0; kk < k1; ++kk) {
                    const int64_t ky = kk / kw, kx = kk % kw;
                    for (int64_t oy = 0; oy < oh; ++oy) {
                        const int64_t iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int64_t ox = 0; ox < ow; ++ox) {
                            const int64_t ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= wd) continue;
                            const T* xp = xd + (iy * wd + ix) * cin;
                            const T* gop = god + (oy * ow + ox) * cout;
                            T* gwp = gwd + ((ky * kw + kx) * cin) * cout;
                            for (int64_t ic = 0; ic < cin; ++ic) {
                                const T xvban = xp[ic];
                                T* gwrow = gwp + ic * cout;
                                for (int64_t c = 0; c < cout; ++c)
                                    gwrow[c] += xvban * gop[c];
                            }
                        }
                    }
                }
            });
        }
        if (gr.wants_grad(idx)) {
            const T* wdp = gr.val(idw).data();
            TArr<T>& gx = gr.grad_buf(idx);
            T* gxd = gx.data();
            // gather form: each input row owned by one worker
            parallel_for_chunks(h, [&](int64_t r0, int64_t r1) {
                for (int64_t iy = r0; iy < r1; ++iy)
                    for (int64_t ix = 0; ix < wd; ++ix) {
                        T* gxp = gxd + (iy * wd + ix) * cin;
                        for (int64_t ky = 0; ky < kh; ++ky) {
                            const int64_t num = iy + pad - ky;
                            if (num < 0 || num % stride != 0) continue;
                            const int64_t oy = num / stride;
                            if (oy >= oh) continue;
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                const int64_t numx = ix + pad - kx;
                                if (numx < 0 || numx % stride != 0) continue;
                                const int64_t ox = numx / stride;
                                if (ox >= ow) continue;
                                const T* gop = god + (oy * ow + ox) * cout;
                                const T* wp = wdp + ((ky * kw + kx) * cin) * cout;
                                for (int64_t ic = 0; ic < cin; ++ic) {
                                    const T* wrow = wp + ic * cout;
                                    T s = 0;
                                    for (int64_t c = 0; c < cout; ++c) s += wrow[c] * gop[c];
                                    gxp[ic] += s;
                                }
                            }
                        }
                    }
            });
        }
    };
    return {&g, id};
}

/// Nearest-neighbor 2x upsample of (H,W,C).
template <typename T>
Var<T> upsample2x(Var<T> x) {
    const auto& xv = x.val();
    if (xv.rank() != 3) throw ShapeError("upsample2x expects (H,W,C)");
    const int64_t h = xv.dim(0), w = xv.dim(1), c = xv.dim(2);
    Graph<T>& g = *x.g;
    TArr<T> out({2 * h, 2 * w, c});
    for (int64_t y = 0; y < 2 * h; ++y)
        for (int64_t xx = 0; xx < 2 * w; ++xx)
            for (int64_t ch = 0; ch < c; ++ch)
                out.at(y, xx, ch) = xv.at(y / 2, xx / 2, ch);
    const int idx = x.id;
    const int id = g.add_node(std::move(out), g.wants_grad(idx));
    g.node(id).backward = [id, idx, h, w, c](Graph<T>& gr) {
        if (!gr.wants_grad(idx)) return;
        const TArr<T>& go = gr.node(id).grad;
        TArr<T>& gx = gr.grad_buf(idx);
        for (int64_t y = 0; y < 2 * h; ++y)
            for (int64_t xx = 0; xx < 2 * w; ++xx)
                for (int64_t ch = 0; ch < c; ++ch)
                    gx.at(y / 2, xx / 2, ch) += go.at(y, xx, ch);
    };
    return {&g, id};
}

/// Keep the top-left (h2, w2) window of (H,W,C).
template <typename T>
Var<T> crop2d(Var<T> x, int64_t h2, int64_t w2) {
    const auto& xv = x.val();
    if (xv.rank() != 3) throw ShapeError("crop2d expects (H,W,C)");
    const int64_t h = xv.dim(0), w = xv.dim(1), c = xv.dim(2);
    if (h2 > h || w2 > w || h2 < 1 || w2 < 1) throw ShapeError("crop2d: bad target dims");
    Graph<T>& g = *x.g;
    TArr<T> out({h2, w2, c});
    for (int64_t y = 0; y < h2; ++y)
        for (int64_t xx = 0; xx < w2; ++xx)
            for (int64_t ch = 0; ch < c; ++ch) out.at(y, xx, ch) = xv.at(y, xx, ch);
    const int idx = x.id;
    const int id = g.add_node(std::move(out), g.wants_grad(idx));
    g.node(id).backward = [id, idx, h2, w2, c](Graph<T>& gr) {
        if (!gr.wants_grad(idx)) return;
        const TArr<T>& go = gr.node(id).grad;
        TArr<T>& gx = gr.grad_buf(idx);
        for (int64_t y = 0; y < h2; ++y)
            for (int64_t xx = 0; xx < w2; ++xx)
                for (int64_t ch = 0; ch < c; ++ch) gx.at(y, xx, ch) += go.at(y, xx, ch);
    };
    return {&g, id};
}

// ---------------------------------------------------------------------------
// Separable symmetric-padded filter (SSIM window)

namespace detail {

inline int64_t sym_index(int64_t i, int64_t n) {
    // half-sample symmetric reflection: ... 1 0 | 0 1 ... n-1 | n-1 n-2 ...
    while (i < 0 || i >= n) {
        if (i < 0) i = -1 - i;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

} // namespace detail

/// Correlate (H,W,C) with a 1D kernel along W then H, symmetric padding.
template <typename T>
Var<T> sep_filter_sym(Var<T> x, const std::vector<T>& taps) {
    const auto& xv = x.val();
    if (xv.rank() != 3) throw ShapeError("sep_filter_sym expects (H,W,C)");
    const int64_t h = xv.dim(0), w = xv.dim(1), c = xv.dim(2);
    const int64_t k = static_cast<int64_t>(taps.size());
    const int64_t r = k / 2;
    if (k % 2 != 1) throw ShapeError("sep_filter_sym: kernel length must be odd");
    Graph<T>& g = *x.g;

    auto run_w = [&](const TArr<T>& in, TArr<T>& out2) {
        for (int64_t y = 0; y < h; ++y)
            for (int64_t xx = 0; xx < w; ++xx)
                for (int64_t ch = 0; ch < c; ++ch) {
                    T s = 0;
                    for (int64_t t = 0; t < k; ++t)
                        s += taps[static_cast<size_t>(t)] *
                             in.at(y, detail::sym_index(xx - r + t, w), ch);
                    out2.at(y, xx, ch) = s;
                }
    };
    auto run_h = [&](const TArr<T>& in, TArr<T>& out2) {
        for (int64_t y = 0; y < h; ++y)
            for (int64_t xx = 0; xx < w; ++xx)
                for (int64_t ch = 0; ch < c; ++ch) {
                    T s = 0;
                    for (int64_t t = 0; t < k; ++t)
                        s += taps[static_cast<size_t>(t)] *
                             in.at(detail::sym_index(y - r + t, h), xx, ch);
                    out2.at(y, xx, ch) = s;
                }
    };

    TArr<T> tmp({h, w, c});
    run_w(xv, tmp);
    TArr<T> out({h, w, c});
    run_h(tmp, out);

    const int idx = x.id;
    auto taps_sp = std::make_shared<std::vector<T>>(taps);
    const int id = g.add_node(std::move(out), g.wants_grad(idx));
    g.node(id).backward = [id, idx, h, w, c, k, r, taps_sp](Graph<T>& gr) {
        if (!gr.wants_grad(idx)) return;
        const TArr<T>& go = gr.node(id).grad;
        const auto& tp = *taps_sp;
        // adjoint of H pass (scatter), then adjoint of W pass (scatter)
        TArr<T> tmp2({h, w, c});
        for (int64_t y = 0; y < h; ++y)
            for (int64_t xx = 0; xx < w; ++xx)
                for (int64_t ch = 0; ch < c; ++ch) {
                    const T gv = go.at(y, xx, ch);
                    for (int64_t t = 0; t < k; ++t)
                        tmp2.at(detail::sym_index(y - r + t, h), xx, ch) +=
                            tp[static_cast<size_t>(t)] * gv;
                }
        TArr<T>& gx = gr.grad_buf(idx);
        for (int64_t y = 0; y < h; ++y)
            for (int64_t xx = 0; xx < w; ++xx)
                for (int64_t ch = 0; ch < c; ++ch) {
                    const T gv = tmp2.at(y, xx, ch);
                    for (int64_t t = 0; t < k; ++t)
                        gx.at(y, detail::sym_index(xx - r + t, w), ch) +=
                            tp[static_cast<size_t>(t)] * gv;
                }
    };
    return {&g, id};
}

} // namespace svsplat
