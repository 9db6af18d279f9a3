#pragma once

#include "svsplat/checkpoint.hpp"
#include "svsplat/config.hpp"
#include "svsplat/heads.hpp"
#include "svsplat/losses.hpp"
#include "svsplat/point_encoder.hpp"
#include "svsplat/rasterizer.hpp"
#include "svsplat/scene.hpp"
#include "svsplat/transformer.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace svsplat {

// ---------------------------------------------------------------------------
// Model assembly

template <typename T>
Params<T> init_model(const Config& cfg, uint64_t seed) {
    cfg.validate();
    Params<T> p;
    const Rng root(seed);
    init_encoder(p, cfg, root);
    init_transformer(p, cfg, root);
    init_decoder(p, cfg, root);
    init_point_encoder(p, cfg.point_token_dim, root);
    return p;
}

// ---------------------------------------------------------------------------
// Forward pass

template <typename T>
struct PipelineInputs {
    TArr<T> image; // (H,W,3)
    TArr<T> depth; // (H,W)
    TArr<T> tokens; // (Nc,Dc)
    Camera cam;
    std::optional<TArr<T>> point_override;
};

template <typename T>
PipelineInputs<T> to_inputs(const Scene& scene, const Config& cfg) {
    if (scene.height() != cfg.image_height || scene.width() != cfg.image_width)
        throw ConfigError("scene dims " + std::to_string(scene.height()) + "x" +
                          std::to_string(scene.width()) + " do not match config " +
                          std::to_string(cfg.image_height) + "x" +
                          std::to_string(cfg.image_width));
    if (scene.text_tokens.dims()[1] != cfg.token_dim)
        throw ConfigError("token width " + std::to_string(scene.text_tokens.dims()[1]) +
                          " does not match config token_dim");
    PipelineInputs<T> in;
    in.image = scene.image.template cast<T>();
    in.depth = scene.depth.template cast<T>();
    in.tokens = scene.text_tokens.template to_array<T>();
    in.cam = scene.cam;
    if (scene.point_override) in.point_override = scene.point_override->template cast<T>();
    return in;
}

template <typename T>
RenderSettings<T> settings_from_config(const Config& cfg) {
    RenderSettings<T> s;
    s.near = static_cast<T>(cfg.near);
    s.far = static_cast<T>(cfg.far);
    s.sh_degree = cfg.sh_degree;
    return s;
}

template <typename T>
struct ForwardGraphResult {
    Var<T> image;
    DecodedGaussians<T> decoded;
    std::shared_ptr<RenderOutput<T>> render;
    GaussianSet<T> gaussians;
};

/// Single-view reconstruction forward pass: encode the depth-conditioned
/// image, load guidance tokens, unproject the depth map and encode it into
/// spatial tokens, refine the pyramid with the guidance transformer, decode
/// per-pixel Gaussians, and render at the requested relative pose.
template <typename T>
ForwardGraphResult<T> forward_g(Workspace<T>& ws, const PipelineInputs<T>& in,
                                const Pose<T>& target_from_source, const Config& cfg,
                                bool training, const Rng& rng,
                                std::vector<std::string>* trace = nullptr) {
    if (trace) trace->push_back("estimate_depth(input)");
    if (trace) trace->push_back("concat_image_depth");
    Var<T> image_v = ws.input(in.image);
    Var<T> depth_v = ws.input(in.depth);
    auto pyramid = encode_image_g(ws, image_v, depth_v, cfg);
    if (trace) trace->push_back("encode_image");

    Var<T> tokens_c = ws.input(in.tokens);
    if (trace) trace->push_back("load_text_tokens(precomputed)");

    TArr<T> points;
    if (in.point_override) {
        points = *in.point_override;
    } else {
        TArr<T> cloud = unproject_depth(in.depth, in.cam);
        points = TArr<T>({cloud.dim(0) * cloud.dim(1), 3}, std::move(cloud.v));
    }
    if (trace) trace->push_back("unproject_depth");
    if (points.dim(0) < cfg.n_points)
        throw ConfigError("n_points exceeds available point count");
    Var<T> tokens_s = encode_points(ws, points, cfg.n_points);
    if (trace) trace->push_back("encode_points");

    const auto opt = TransformerOptions::from_config(cfg, training);
    auto refined = transformer_forward(ws, pyramid, tokens_c, tokens_s, opt,
                                       rng.split("transformer_dropout"), trace);

    auto decoded = decode_gaussians_g(ws, refined, in.depth, in.cam, cfg);
    if (trace) trace->push_back("decode_gaussians");

    ForwardGraphResult<T> out;
    out.decoded = decoded;
    out.gaussians = to_gaussian_set(decoded, in.depth.dim(0), in.depth.dim(1), cfg);
    auto node = rasterize_node(ws, decoded, out.gaussians, target_from_source, in.cam,
                               settings_from_config<T>(cfg));
    if (trace) trace->push_back("rasterize");
    out.image = node.image;
    out.render = node.output;
    return out;
}

template <typename T>
struct ForwardResult {
    TArr<T> image;
    RenderOutput<T> render;
    GaussianSet<T> gaussians;
    int64_t clamped_depth_count = 0;
};

/// Deterministic eval-mode forward.
template <typename T>
ForwardResult<T> forward(const Scene& scene, Params<T>& params, const Config& cfg,
                         const Pose<double>& world_from_target,
                         std::vector<std::string>* trace = nullptr) {
    Workspace<T> ws(params);
    const auto in = to_inputs<T>(scene, cfg);
    const Pose<double> rel = relative_pose(scene.world_from_cam, world_from_target);
    Pose<T> rel_t;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) rel_t.rot(i, j) = static_cast<T>(rel.rot(i, j));
    rel_t.trans = {static_cast<T>(rel.trans.x), static_cast<T>(rel.trans.y),
                   static_cast<T>(rel.trans.z)};
    auto fg = forward_g(ws, in, rel_t, cfg, /*training=*/false, Rng(0), trace);
    ForwardResult<T> r;
    r.image = fg.image.val();
    r.render = *fg.render;
    r.gaussians = std::move(fg.gaussians);
    r.clamped_depth_count = fg.decoded.clamped_depth_count;
    return r;
}

// ---------------------------------------------------------------------------
// Adam

template <typename T>
struct Adam {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t t = 0;
    std::map<std::string, TArr<T>> m, v;

    void step(Params<T>& params, const std::map<std::string, TArr<T>>& grads) {
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (auto& [name, p] : params.tensors) {
            const auto git = grads.find(name);
            if (git == grads.end()) continue;
            const TArr<T>& g = git->second;
            TArr<T>& mm = m.try_emplace(name, TArr<T>::zeros(p.dims)).first->second;
            TArr<T>& vv = v.try_emplace(name, TArr<T>::zeros(p.dims)).first->second;
            for (int64_t i = 0; i < p.numel(); ++i) {
                const T gi = g[i];
                mm[i] = static_cast<T>(beta1) * mm[i] + static_cast<T>(1 - beta1) * gi;
                vv[i] = static_cast<T>(beta2) * vv[i] + static_cast<T>(1 - beta2) * gi * gi;
                const double mhat = static_cast<double>(mm[i]) / bc1;
                const double vhat = static_cast<double>(vv[i]) / bc2;
                p[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps));
            }
        }
    }
};

// ---------------------------------------------------------------------------
// Toy training

struct TrainOptions {
    int64_t steps = 2000;
    uint64_t seed = 0;
    std::vector<int> target_filter; // empty = train on every target view
    double stop_at_psnr = 0;        // 0 = never stop early
    int64_t eval_every = 100;       // PSNR probe interval when stop_at_psnr > 0
};

template <typename T>
struct StepLog {
    int64_t step = 0;
    LossBreakdown<T> loss;
};

template <typename T>
struct TrainResult {
    Params<T> params;
    std::vector<StepLog<T>> log;
    int64_t steps_run = 0;
    double final_mean_psnr = -1; // over training targets, when measured
};

template <typename T>
struct TrainPair {
    PipelineInputs<T> inputs;
    TArr<T> target_image;
    Pose<T> target_from_source;
};

template <typename T>
std::vector<TrainPair<T>> build_train_pairs(const std::vector<Scene>& scenes,
                                            const std::vector<std::vector<TargetView>>& targets,
                                            const Config& cfg,
                                            const std::vector<int>& target_filter) {
    std::vector<TrainPair<T>> pairs;
    for (size_t s = 0; s < scenes.size(); ++s) {
        const auto in = to_inputs<T>(scenes[s], cfg);
        for (size_t k = 0; k < targets[s].size(); ++k) {
            if (!target_filter.empty() &&
                std::find(target_filter.begin(), target_filter.end(), static_cast<int>(k)) ==
                    target_filter.end())
                continue;
            TrainPair<T> pair;
            pair.inputs = in;
            pair.target_image = targets[s][k].image.template cast<T>();
            const Pose<double> rel =
                relative_pose(scenes[s].world_from_cam, targets[s][k].world_from_cam);
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) pair.target_from_source.rot(i, j) =
                    static_cast<T>(rel.rot(i, j));
            pair.target_from_source.trans = {static_cast<T>(rel.trans.x),
                                             static_cast<T>(rel.trans.y),
                                             static_cast<T>(rel.trans.z)};
            pairs.push_back(std::move(pair));
        }
    }
    if (pairs.empty()) throw ValidationError("training requires at least one target view");
    return pairs;
}

/// Adam training of the full pipeline on (scene, target) pairs in
/// round-robin order. Loss is logged every step; a non-finite loss aborts
/// with a diagnostic dump through `on_nan`.
template <typename T>
TrainResult<T> train_toy(const Config& cfg, const std::vector<Scene>& scenes,
                         const std::vector<std::vector<TargetView>>& targets,
                         const TrainOptions& opt,
                         const std::function<void(const std::string&)>& on_nan = {}) {
    cfg.validate();
    auto pairs = build_train_pairs<T>(scenes, targets, cfg, opt.target_filter);

    TrainResult<T> res;
    res.params = init_model<T>(cfg, opt.seed);
    Adam<T> adam;
    adam.lr = cfg.lr;
    const Rng train_rng(opt.seed);
    const LossWeights weights{cfg.lambda_l1, cfg.lambda_ssim, cfg.lambda_lpips};
    const ZeroLpips<T> lpips;

    auto mean_train_psnr = [&]() {
        double acc = 0;
        for (const auto& pair : pairs) {
            Workspace<T> ws(res.params);
            auto fg = forward_g(ws, pair.inputs, pair.target_from_source, cfg, false, Rng(0));
            acc += psnr(fg.image.val(), pair.target_image);
        }
        return acc / static_cast<double>(pairs.size());
    };

    for (int64_t step = 0; step < opt.steps; ++step) {
        const TrainPair<T>& pair = pairs[static_cast<size_t>(step % static_cast<int64_t>(pairs.size()))];
        Workspace<T> ws(res.params);
        auto fg = forward_g(ws, pair.inputs, pair.target_from_source, cfg, /*training=*/true,
                            train_rng.split(static_cast<uint64_t>(step)));
        Var<T> target = ws.input(pair.target_image);
        auto loss = total_loss_g(ws, fg.image, target, weights, lpips);

        if (!std::isfinite(static_cast<double>(loss.breakdown.total))) {
            std::string dump = "non-finite loss at step " + std::to_string(step) +
                               ": l1=" + format_double(static_cast<double>(loss.breakdown.l1)) +
                               " ssim=" +
                               format_double(static_cast<double>(loss.breakdown.ssim_loss)) +
                               " lpips=" +
                               format_double(static_cast<double>(loss.breakdown.lpips_loss));
            if (on_nan) on_nan(dump);
            throw StateError(dump);
        }

        ws.g.backward(loss.total.id);
        std::map<std::string, TArr<T>> grads;
        for (const auto& [name, _] : res.params.tensors) grads.emplace(name, ws.grad(name));
        adam.step(res.params, grads);

        res.log.push_back({step, loss.breakdown});
        res.steps_run = step + 1;

        if (opt.stop_at_psnr > 0 && (step + 1) % opt.eval_every == 0) {
            res.final_mean_psnr = mean_train_psnr();
            if (res.final_mean_psnr >= opt.stop_at_psnr) break;
        }
    }
    if (res.final_mean_psnr < 0 && opt.stop_at_psnr > 0) res.final_mean_psnr = mean_train_psnr();
    return res;
}

} // namespace svsplat
