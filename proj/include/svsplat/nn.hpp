#pragma once

#include "svsplat/autodiff.hpp"
#include "svsplat/rng.hpp"

#include <map>
#include <string>

namespace svsplat {

/// Named parameter tensors with deterministic (sorted) iteration order.
template <typename T>
struct Params {
    std::map<std::string, TArr<T>> tensors;

    TArr<T>& at(const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw StateError("unknown parameter '" + name + "'");
        return it->second;
    }
    const TArr<T>& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw StateError("unknown parameter '" + name + "'");
        return it->second;
    }
    bool contains(const std::string& name) const { return tensors.count(name) != 0; }

    int64_t total_elements() const {
        int64_t n = 0;
        for (const auto& [k, v] : tensors) n += v.numel();
        return n;
    }

    template <typename U>
    Params<U> cast() const {
        Params<U> out;
        for (const auto& [k, v] : tensors) out.tensors.emplace(k, v.template cast<U>());
        return out;
    }
};

/// Per-forward-pass context: the tape plus a leaf cache so each parameter
/// becomes exactly one leaf node per graph.
template <typename T>
struct Workspace {
    Graph<T> g;
    Params<T>* params = nullptr;
    std::map<std::string, int> leaf_ids;

    explicit Workspace(Params<T>& p) : params(&p) {}

    Var<T> param(const std::string& name) {
        auto it = leaf_ids.find(name);
        if (it != leaf_ids.end()) return {&g, it->second};
        Var<T> v = leaf(g, params->at(name));
        leaf_ids.emplace(name, v.id);
        return v;
    }

    Var<T> input(TArr<T> value) { return constant(g, std::move(value)); }

    /// Gradient of a parameter after backward (zeros if untouched).
    TArr<T> grad(const std::string& name) {
        auto it = leaf_ids.find(name);
        if (it == leaf_ids.end()) return TArr<T>::zeros(params->at(name).dims);
        auto& node = g.node(it->second);
        if (!node.grad_alloc) return TArr<T>::zeros(node.val.dims);
        return node.grad;
    }
};

// ---------------------------------------------------------------------------
// Initializers. Each parameter draws from an Rng stream split by name, so
// initialization is independent of creation order.

template <typename T>
void init_kaiming(Params<T>& p, const std::string& name, Shape dims, int64_t fan_in,
                  const Rng& root) {
    Rng s = root.split(name);
    TArr<T> t(std::move(dims));
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& x : t.v) x = static_cast<T>(s.normal() * std);
    p.tensors[name] = std::move(t);
}

template <typename T>
void init_xavier(Params<T>& p, const std::string& name, Shape dims, int64_t fan_in,
                 int64_t fan_out, const Rng& root) {
    Rng s = root.split(name);
    TArr<T> t(dims);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& x : t.v) x = static_cast<T>(s.uniform(-bound, bound));
    p.tensors[name] = std::move(t);
}

template <typename T>
void init_const(Params<T>& p, const std::string& name, Shape dims, T value) {
    p.tensors[name] = TArr<T>::full(std::move(dims), value);
}

template <typename T>
void init_zeros(Params<T>& p, const std::string& name, Shape dims) {
    p.tensors[name] = TArr<T>::zeros(std::move(dims));
}

// ---------------------------------------------------------------------------
// Layers

/// y = x W + b with W stored (in, out).
template <typename T>
Var<T> linear(Workspace<T>& ws, Var<T> x, const std::string& prefix) {
    return add_rowvec(matmul(x, ws.param(prefix + ".w")), ws.param(prefix + ".b"));
}

/// y = x W (bias-free projection, as in the attention equations).
template <typename T>
Var<T> linear_nobias(Workspace<T>& ws, Var<T> x, const std::string& prefix) {
    return matmul(x, ws.param(prefix + ".w"));
}

enum class AttnScale { PerHead, FullDim };

template <typename T>
struct AttentionResult {
    Var<T> out;
    std::vector<TArr<T>> weights; // one (Tq,Tk) probability matrix per head
};

/// Multi-head attention. Queries from q_src, keys/values from kv_src.
/// Weight names: <prefix>.{wq,wk,wv,wo}, each (D,D). The default logit
/// scale is 1/sqrt(D/heads); AttnScale::FullDim selects 1/sqrt(D).
template <typename T>
AttentionResult<T> multi_head_attention(Workspace<T>& ws, Var<T> q_src, Var<T> kv_src,
                                        const std::string& prefix, int heads,
                                        AttnScale scale_mode = AttnScale::PerHead) {
    const int64_t d = q_src.val().dim(1);
    if (kv_src.val().rank() != 2 || kv_src.val().dim(1) != d)
        throw ShapeError("multi_head_attention: q/kv width mismatch");
    if (d % heads != 0) throw ShapeError("multi_head_attention: heads must divide width");
    const int64_t dh = d / heads;
    const T scale = scale_mode == AttnScale::PerHead
                        ? static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)))
                        : static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));

    Var<T> q = linear_nobias(ws, q_src, prefix + ".q");
    Var<T> k = linear_nobias(ws, kv_src, prefix + ".k");
    Var<T> v = linear_nobias(ws, kv_src, prefix + ".v");

    AttentionResult<T> res;
    std::vector<Var<T>> head_outs;
    head_outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Var<T> qh = slice_last(q, h * dh, (h + 1) * dh);
        Var<T> kh = slice_last(k, h * dh, (h + 1) * dh);
        Var<T> vh = slice_last(v, h * dh, (h + 1) * dh);
        Var<T> logits = mul_scalar(matmul_nt(qh, kh), scale);
        Var<T> probs = softmax_rows(logits);
        res.weights.push_back(probs.val());
        head_outs.push_back(matmul(probs, vh));
    }
    Var<T> cat = heads == 1 ? head_outs[0] : concat_last(head_outs);
    res.out = linear_nobias(ws, cat, prefix + ".o");
    return res;
}

template <typename T>
void init_attention(Params<T>& p, const std::string& prefix, int64_t d, const Rng& root) {
    init_xavier(p, prefix + ".q.w", {d, d}, d, d, root);
    init_xavier(p, prefix + ".k.w", {d, d}, d, d, root);
    init_xavier(p, prefix + ".v.w", {d, d}, d, d, root);
    init_xavier(p, prefix + ".o.w", {d, d}, d, d, root);
}

/// Inverted dropout: identity in eval mode, mask-and-rescale in training.
template <typename T>
Var<T> dropout(Workspace<T>& ws, Var<T> x, double rate, bool training, Rng& rng) {
    if (!training || rate <= 0.0) return x;
    TArr<T> mask(x.val().dims);
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    for (auto& m : mask.v) m = rng.bernoulli(rate) ? T(0) : keep_scale;
    return mul(x, ws.input(std::move(mask)));
}

/// Norm(base + gamma * Dropout(fused)) with per-token layer normalization.
/// Weight names: <prefix>.{g,b}.
template <typename T>
Var<T> gated_add_norm(Workspace<T>& ws, Var<T> base, Var<T> fused, const std::string& prefix,
                      double gamma, double dropout_rate, bool training, Rng& rng) {
    detail::check_same_shape(base, fused, "gated_add_norm");
    Var<T> f = dropout(ws, fused, dropout_rate, training, rng);
    Var<T> pre = add(base, mul_scalar(f, static_cast<T>(gamma)));
    return layernorm_rows(pre, ws.param(prefix + ".g"), ws.param(prefix + ".b"), T(1e-5));
}

} // namespace svsplat
