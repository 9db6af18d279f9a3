#pragma once

#include "svsplat/nn.hpp"

#include <vector>

namespace svsplat {

/// Greedy farthest point sampling. The first output is seed_index; each
/// following index maximizes the minimum Euclidean distance to the
/// already-selected set, ties broken by lowest index.
template <typename T>
std::vector<int64_t> farthest_point_sample(const TArr<T>& points, int64_t k,
                                           int64_t seed_index) {
    if (points.rank() != 2 || points.dim(1) != 3)
        throw ShapeError("farthest_point_sample expects (N,3)");
    const int64_t n = points.dim(0);
    if (k < 1 || k > n)
        throw ValidationError("farthest_point_sample: k must lie in [1, N]");
    if (seed_index < 0 || seed_index >= n)
        throw ValidationError("farthest_point_sample: seed index out of range");

    std::vector<int64_t> picked;
    picked.reserve(static_cast<size_t>(k));
    picked.push_back(seed_index);

    std::vector<T> min_d2(static_cast<size_t>(n));
    auto d2 = [&](int64_t a, int64_t b) {
        const T dx = points.at(a, 0) - points.at(b, 0);
        const T dy = points.at(a, 1) - points.at(b, 1);
        const T dz = points.at(a, 2) - points.at(b, 2);
        return dx * dx + dy * dy + dz * dz;
    };
    for (int64_t i = 0; i < n; ++i) min_d2[static_cast<size_t>(i)] = d2(i, seed_index);

    while (static_cast<int64_t>(picked.size()) < k) {
        int64_t best = 0;
        T best_d = T(-1);
        for (int64_t i = 0; i < n; ++i) {
            const T d = min_d2[static_cast<size_t>(i)];
            if (d > best_d) {
                best_d = d;
                best = i;
            }
        }
        picked.push_back(best);
        for (int64_t i = 0; i < n; ++i)
            min_d2[static_cast<size_t>(i)] = std::min(min_d2[static_cast<size_t>(i)], d2(i, best));
    }
    return picked;
}

/// Shared-MLP + max-pool T-Net emitting identity + learned residual, so a
/// freshly initialized net returns the identity matrix exactly.
/// Weight names: <prefix>.{mlp0,mlp1,head0,head1}.{w,b}.
template <typename T>
Var<T> tnet_transform(Workspace<T>& ws, Var<T> features, const std::string& prefix) {
    const int64_t f = features.val().dim(1);
    Var<T> h = gelu(linear(ws, features, prefix + ".mlp0"));
    h = gelu(linear(ws, h, prefix + ".mlp1"));
    Var<T> pooled = reshape(maxpool_rows(h), {1, h.val().dim(1)});
    Var<T> head = gelu(linear(ws, pooled, prefix + ".head0"));
    head = linear(ws, head, prefix + ".head1");
    if (head.val().dim(1) != f * f)
        throw ShapeError("tnet_transform: head width must be F*F");
    Var<T> residual = reshape(head, {f, f});
    TArr<T> eye({f, f});
    for (int64_t i = 0; i < f; ++i) eye.at(i, i) = T(1);
    return add(ws.input(std::move(eye)), residual);
}

template <typename T>
void init_tnet(Params<T>& p, const std::string& prefix, int64_t f, int64_t h0, int64_t h1,
               int64_t h2, const Rng& root) {
    init_kaiming(p, prefix + ".mlp0.w", {f, h0}, f, root);
    init_zeros(p, prefix + ".mlp0.b", {h0});
    init_kaiming(p, prefix + ".mlp1.w", {h0, h1}, h0, root);
    init_zeros(p, prefix + ".mlp1.b", {h1});
    init_kaiming(p, prefix + ".head0.w", {h1, h2}, h1, root);
    init_zeros(p, prefix + ".head0.b", {h2});
    // zero head: predicted transform starts at the identity
    init_zeros(p, prefix + ".head1.w", {h2, f * f});
    init_zeros(p, prefix + ".head1.b", {f * f});
}

/// Token encoder over an already-sampled point set (Ns,3). Exposed
/// separately so permutation behavior can be tested with a fixed sample.
template <typename T>
Var<T> encode_sampled_points(Workspace<T>& ws, Var<T> sampled) {
    Var<T> a1 = tnet_transform(ws, sampled, "pointenc.tnet1");
    Var<T> x = matmul_nt(sampled, a1); // row p -> A1 p
    x = gelu(linear(ws, x, "pointenc.mlp1"));
    Var<T> a2 = tnet_transform(ws, x, "pointenc.tnet2");
    x = matmul_nt(x, a2);
    x = gelu(linear(ws, x, "pointenc.mlp2"));
    return linear(ws, x, "pointenc.mlp3"); // (Ns, Ds) token matrix
}

/// Full spatial-token path: FPS (seed index 0 for determinism) then the
/// T-Net/MLP stack. Returns per-point tokens (Ns, Ds), not a pooled vector.
template <typename T>
Var<T> encode_points(Workspace<T>& ws, const TArr<T>& points, int64_t n_sample) {
    if (points.rank() != 2 || points.dim(1) != 3)
        throw ShapeError("encode_points expects (N,3)");
    if (points.dim(0) < n_sample)
        throw ValidationError("encode_points: fewer points than n_points");
    const auto idx = farthest_point_sample(points, n_sample, 0);
    TArr<T> sampled({n_sample, 3});
    for (int64_t i = 0; i < n_sample; ++i)
        for (int64_t j = 0; j < 3; ++j) sampled.at(i, j) = points.at(idx[static_cast<size_t>(i)], j);
    return encode_sampled_points(ws, ws.input(std::move(sampled)));
}

template <typename T>
void init_point_encoder(Params<T>& p, int64_t point_token_dim, const Rng& root) {
    init_tnet(p, "pointenc.tnet1", 3, 32, 64, 32, root);
    init_kaiming(p, "pointenc.mlp1.w", {3, 64}, 3, root);
    init_zeros(p, "pointenc.mlp1.b", {64});
    init_tnet(p, "pointenc.tnet2", 64, 64, 64, 32, root);
    init_kaiming(p, "pointenc.mlp2.w", {64, 128}, 64, root);
    init_zeros(p, "pointenc.mlp2.b", {128});
    init_kaiming(p, "pointenc.mlp3.w", {128, point_token_dim}, 128, root);
    init_zeros(p, "pointenc.mlp3.b", {point_token_dim});
}

} // namespace svsplat
