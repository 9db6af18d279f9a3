#pragma once

#include "svsplat/config.hpp"
#include "svsplat/nn.hpp"

#include <string>
#include <vector>

namespace svsplat {

struct TransformerOptions {
    int heads = 8;
    double gamma = 0.5;
    double dropout = 0.1;
    bool training = false;
    bool use_contextual = true;
    bool use_spatial = true;
    AttnScale scale = AttnScale::PerHead;

    static TransformerOptions from_config(const Config& cfg, bool training) {
        TransformerOptions o;
        o.heads = cfg.heads;
        o.gamma = cfg.gamma;
        o.dropout = cfg.dropout;
        o.training = training;
        o.use_contextual = cfg.use_contextual;
        o.use_spatial = cfg.use_spatial;
        o.scale = cfg.attention_scale == "full_dim" ? AttnScale::FullDim : AttnScale::PerHead;
        return o;
    }
};

/// One transformer layer over a flattened feature map. Guidance enters
/// through two chained cross-attentions; the gated add-norm keeps the
/// residual on the original features, then self-attention and a
/// position-wise feedforward refine the result (post-norm order).
template <typename T>
Var<T> transformer_layer(Workspace<T>& ws, Var<T> features, Var<T> tokens_c, Var<T> tokens_s,
                         const std::string& prefix, const TransformerOptions& opt, Rng& rng,
                         std::vector<std::string>* trace = nullptr) {
    const auto& fd = features.val();
    if (fd.rank() != 3) throw ShapeError("transformer_layer expects (H,W,D) features");
    const int64_t h = fd.dim(0), w = fd.dim(1), d = fd.dim(2);

    Var<T> x = reshape(features, {h * w, d});

    Var<T> fused = x; // F^I when both guidance branches are off
    if (opt.use_contextual) {
        Var<T> tok = linear(ws, tokens_c, prefix + ".proj_c");
        fused = multi_head_attention(ws, fused, tok, prefix + ".ctx", opt.heads, opt.scale).out;
        if (trace) trace->push_back(prefix + ".contextual_cross_attention");
    }
    if (opt.use_spatial) {
        Var<T> tok = linear(ws, tokens_s, prefix + ".proj_s");
        fused = multi_head_attention(ws, fused, tok, prefix + ".spa", opt.heads, opt.scale).out;
        if (trace) trace->push_back(prefix + ".spatial_cross_attention");
    }

    Var<T> y = gated_add_norm(ws, x, fused, prefix + ".norm1", opt.gamma, opt.dropout,
                              opt.training, rng);
    if (trace) trace->push_back(prefix + ".gated_add_norm");

    Var<T> sa = multi_head_attention(ws, y, y, prefix + ".self", opt.heads, opt.scale).out;
    Var<T> z = layernorm_rows(add(y, sa), ws.param(prefix + ".norm2.g"),
                              ws.param(prefix + ".norm2.b"), T(1e-5));
    if (trace) trace->push_back(prefix + ".self_attention");

    Var<T> ff = gelu(linear(ws, z, prefix + ".ffn.fc1"));
    ff = linear(ws, ff, prefix + ".ffn.fc2");
    Var<T> out = layernorm_rows(add(z, ff), ws.param(prefix + ".norm3.g"),
                                ws.param(prefix + ".norm3.b"), T(1e-5));
    if (trace) trace->push_back(prefix + ".feedforward");

    return reshape(out, {h, w, d});
}

/// Multi-resolution forwarding: level i is refined by layer i with its own
/// token projections; levels never attend to each other. Dropout draws
/// from a stream pre-split per level so any evaluation schedule is
/// reproducible.
template <typename T>
std::vector<Var<T>> transformer_forward(Workspace<T>& ws, const std::vector<Var<T>>& pyramid,
                                        Var<T> tokens_c, Var<T> tokens_s,
                                        const TransformerOptions& opt, const Rng& rng,
                                        std::vector<std::string>* trace = nullptr) {
    std::vector<Var<T>> out;
    out.reserve(pyramid.size());
    for (size_t i = 0; i < pyramid.size(); ++i) {
        const std::string prefix = "transformer.l" + std::to_string(i);
        if (!ws.params->contains(prefix + ".norm1.g"))
            throw ConfigError("transformer parameters missing for level " + std::to_string(i));
        Rng level_rng = rng.split(prefix);
        out.push_back(transformer_layer(ws, pyramid[i], tokens_c, tokens_s, prefix, opt,
                                        level_rng, trace));
    }
    if (ws.params->contains("transformer.l" + std::to_string(pyramid.size()) + ".norm1.g"))
        throw ConfigError("level count does not match transformer parameter count");
    return out;
}

template <typename T>
void init_transformer_layer(Params<T>& p, const std::string& prefix, int64_t d, int64_t dc,
                            int64_t ds, int ffn_ratio, const Rng& root) {
    init_xavier(p, prefix + ".proj_c.w", {dc, d}, dc, d, root);
    init_zeros(p, prefix + ".proj_c.b", {d});
    init_xavier(p, prefix + ".proj_s.w", {ds, d}, ds, d, root);
    init_zeros(p, prefix + ".proj_s.b", {d});
    init_attention(p, prefix + ".ctx", d, root);
    init_attention(p, prefix + ".spa", d, root);
    init_attention(p, prefix + ".self", d, root);
    for (const char* n : {".norm1", ".norm2", ".norm3"}) {
        init_const(p, prefix + n + ".g", {d}, T(1));
        init_zeros(p, prefix + n + ".b", {d});
    }
    const int64_t hidden = d * ffn_ratio;
    init_xavier(p, prefix + ".ffn.fc1.w", {d, hidden}, d, hidden, root);
    init_zeros(p, prefix + ".ffn.fc1.b", {hidden});
    init_xavier(p, prefix + ".ffn.fc2.w", {hidden, d}, hidden, d, root);
    init_zeros(p, prefix + ".ffn.fc2.b", {d});
}

template <typename T>
void init_transformer(Params<T>& p, const Config& cfg, const Rng& root) {
    for (int i = 0; i < cfg.levels; ++i)
        init_transformer_layer(p, "transformer.l" + std::to_string(i),
                               cfg.level_widths[static_cast<size_t>(i)], cfg.token_dim,
                               cfg.point_token_dim, cfg.ffn_ratio, root);
}

} // namespace svsplat
