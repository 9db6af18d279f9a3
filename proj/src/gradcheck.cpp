#include "svsplat/gradcheck.hpp"

#include "svsplat/evaluate.hpp"

namespace svsplat {

using fd_detail::perturb_params;
using fd_detail::probe_dot;
using fd_detail::random_array;
using fd_detail::random_probe;
using fd_detail::Suite;

namespace {

void append(GradcheckReport& rep, std::vector<GroupReport> groups) {
    for (auto& g : groups) rep.groups.push_back(std::move(g));
}

Pose<double> small_pose(Rng& rng) {
    std::array<double, 4> q = {1.0, 0.15 * rng.normal(), 0.15 * rng.normal(),
                               0.15 * rng.normal()};
    q = quat_normalize(q);
    Pose<double> p;
    p.rot = quat_to_rot(q);
    p.trans = {rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2)};
    return p;
}

} // namespace

// ---------------------------------------------------------------------------

GradcheckReport gradcheck_geometry(uint64_t seed) {
    GradcheckReport rep;
    rep.component = "geometry";
    Rng rng = Rng(seed).split("geometry");

    { // unproject_depth
        Suite s;
        const Camera cam{37.0, 41.0, 3.1, 2.2, 8, 6};
        s.params.tensors["unproject.depth"] = random_array({6, 8}, rng, 0.5, 3.0);
        const TArr<double> probe = random_probe({6, 8, 3}, rng);
        s.eval = [cam, probe](Params<double>& p) {
            return probe_dot(probe, unproject_depth(p.at("unproject.depth"), cam));
        };
        s.analytic["unproject.depth"] = unproject_depth_vjp(probe, cam);
        append(rep, fd_detail::run(s, 64, rng.split("u")));
    }

    { // gaussian_centers
        Suite s;
        const Camera cam{29.0, 27.0, 1.7, 1.3, 4, 3};
        s.params.tensors["centers.depth"] = random_array({3, 4}, rng, 1.0, 3.0);
        s.params.tensors["centers.delta"] = random_array({3, 4, 2}, rng, -0.2, 0.3);
        s.params.tensors["centers.offsets"] = random_array({3, 4, 2, 3}, rng, -0.1, 0.1);
        const TArr<double> probe = random_probe({24, 3}, rng);
        s.eval = [cam, probe](Params<double>& p) {
            return probe_dot(probe, gaussian_centers(p.at("centers.depth"), p.at("centers.delta"),
                                                     p.at("centers.offsets"), cam));
        };
        const auto g = gaussian_centers_vjp(probe, 3, 4, 2, cam);
        s.analytic["centers.depth"] = g.depth;
        s.analytic["centers.delta"] = g.delta;
        s.analytic["centers.offsets"] = g.offsets;
        append(rep, fd_detail::run(s, 96, rng.split("c")));
    }

    for (int inst = 0; inst < 3; ++inst) { // build_covariance
        Suite s;
        const std::string tag = "covariance" + std::to_string(inst);
        TArr<double> q = random_array({4}, rng, -1.0, 1.0);
        q[0] += 1.5; // keep well away from the zero quaternion
        s.params.tensors[tag + ".quat"] = q;
        s.params.tensors[tag + ".log_scales"] = random_array({3}, rng, -2.0, 0.5);
        const TArr<double> probe = random_probe({3, 3}, rng);
        s.eval = [probe, tag](Params<double>& p) {
            const TArr<double>& qq = p.at(tag + ".quat");
            const TArr<double>& ls = p.at(tag + ".log_scales");
            const Mat3<double> sigma = build_covariance<double>(
                {qq[0], qq[1], qq[2], qq[3]}, {ls[0], ls[1], ls[2]});
            double acc = 0;
            for (int i = 0; i < 9; ++i) acc += probe[i] * sigma.m[static_cast<size_t>(i)];
            return acc;
        };
        Mat3<double> gs;
        for (int i = 0; i < 9; ++i) gs.m[static_cast<size_t>(i)] = probe[i];
        const TArr<double>& qq = s.params.at(tag + ".quat");
        const TArr<double>& ls = s.params.at(tag + ".log_scales");
        const auto g = build_covariance_vjp<double>({qq[0], qq[1], qq[2], qq[3]},
                                                    {ls[0], ls[1], ls[2]}, gs);
        s.analytic[tag + ".quat"] = TArr<double>({4}, {g.quat[0], g.quat[1], g.quat[2], g.quat[3]});
        s.analytic[tag + ".log_scales"] =
            TArr<double>({3}, {g.log_scales.x, g.log_scales.y, g.log_scales.z});
        append(rep, fd_detail::run(s, 16, rng.split(tag)));
    }

    for (int inst = 0; inst < 3; ++inst) { // project_gaussian
        Suite s;
        const std::string tag = "project" + std::to_string(inst);
        const Camera cam{20.0, 22.0, 11.5, 7.5, 24, 16};
        const Pose<double> pose = small_pose(rng);
        const double z = rng.uniform(1.2, 3.0);
        s.params.tensors[tag + ".mu"] = TArr<double>(
            {3}, {z * rng.uniform(-0.3, 0.3), z * rng.uniform(-0.3, 0.3), z});
        TArr<double> a = random_array({3, 3}, rng, -0.3, 0.3);
        TArr<double> sigma({3, 3});
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double acc = i == j ? 0.01 : 0.0;
                for (int k = 0; k < 3; ++k) acc += a.at(i, k) * a.at(j, k);
                sigma.at(i, j) = acc;
            }
        s.params.tensors[tag + ".sigma"] = sigma;
        const TArr<double> w = random_probe({6}, rng); // mean2, cov3, depth
        s.eval = [cam, pose, w, tag](Params<double>& p) {
            const TArr<double>& m = p.at(tag + ".mu");
            const TArr<double>& sg = p.at(tag + ".sigma");
            Mat3<double> sm;
            for (int i = 0; i < 9; ++i) sm.m[static_cast<size_t>(i)] = sg[i];
            const auto proj =
                project_gaussian<double>({m[0], m[1], m[2]}, sm, pose, cam, 0.01, 100.0);
            if (!proj) throw StateError("gradcheck: splat unexpectedly culled");
            return w[0] * proj->mean_x + w[1] * proj->mean_y + w[2] * proj->cov_xx +
                   w[3] * proj->cov_xy + w[4] * proj->cov_yy + w[5] * proj->depth;
        };
        {
            const TArr<double>& m = s.params.at(tag + ".mu");
            const TArr<double>& sg = s.params.at(tag + ".sigma");
            Mat3<double> sm;
            for (int i = 0; i < 9; ++i) sm.m[static_cast<size_t>(i)] = sg[i];
            const auto g = project_gaussian_vjp<double>({m[0], m[1], m[2]}, sm, pose, cam, w[0],
                                                        w[1], w[2], w[3], w[4], w[5]);
            s.analytic[tag + ".mu"] = TArr<double>({3}, {g.mu.x, g.mu.y, g.mu.z});
            TArr<double> gsig({3, 3});
            for (int i = 0; i < 9; ++i) gsig[i] = g.sigma.m[static_cast<size_t>(i)];
            s.analytic[tag + ".sigma"] = gsig;
        }
        append(rep, fd_detail::run(s, 16, rng.split(tag)));
    }
    return rep;
}

// ---------------------------------------------------------------------------

GradcheckReport gradcheck_point_encoder(uint64_t seed) {
    GradcheckReport rep;
    rep.component = "point_encoder";
    Rng rng = Rng(seed).split("point_encoder");

    Suite s;
    init_point_encoder(s.params, 10, Rng(seed).split("pe_init"));
    perturb_params(s.params, rng.split("perturb"), 0.05);
    const TArr<double> points = random_array({40, 3}, rng, -1.0, 1.0);
    const TArr<double> probe = random_probe({8, 10}, rng);

    s.eval = [points, probe](Params<double>& p) {
        Workspace<double> ws(p);
        Var<double> tokens = encode_points(ws, points, 8);
        return probe_dot(probe, tokens.val());
    };
    {
        Workspace<double> ws(s.params);
        Var<double> tokens = encode_points(ws, points, 8);
        Var<double> loss = sum_all(mul(tokens, ws.input(probe)));
        ws.g.backward(loss.id);
        for (const auto& [name, _] : s.params.tensors) s.analytic[name] = ws.grad(name);
    }
    append(rep, fd_detail::run(s, 10, rng.split("run")));
    return rep;
}

// ---------------------------------------------------------------------------

GradcheckReport gradcheck_transformer(uint64_t seed) {
    GradcheckReport rep;
    rep.component = "transformer";
    Rng rng = Rng(seed).split("transformer");

    Config tiny;
    tiny.levels = 3;
    tiny.level_widths = {8, 8, 8};
    tiny.heads = 2;
    tiny.token_dim = 5;
    tiny.point_token_dim = 6;
    tiny.ffn_ratio = 2;

    Suite s;
    init_transformer(s.params, tiny, Rng(seed).split("tf_init"));
    perturb_params(s.params, rng.split("perturb"), 0.05);
    s.params.tensors["input.level0"] = random_array({2, 3, 8}, rng, -1.0, 1.0);
    s.params.tensors["input.level1"] = random_array({2, 2, 8}, rng, -1.0, 1.0);
    s.params.tensors["input.level2"] = random_array({1, 2, 8}, rng, -1.0, 1.0);
    s.params.tensors["input.tokens_c"] = random_array({3, 5}, rng, -1.0, 1.0);
    s.params.tensors["input.tokens_s"] = random_array({4, 6}, rng, -1.0, 1.0);

    TransformerOptions opt;
    opt.heads = 2;
    opt.gamma = 0.5;
    opt.dropout = 0.0;
    opt.training = false;

    const TArr<double> p0 = random_probe({2, 3, 8}, rng);
    const TArr<double> p1 = random_probe({2, 2, 8}, rng);
    const TArr<double> p2 = random_probe({1, 2, 8}, rng);

    auto build = [opt](Workspace<double>& ws) {
        std::vector<Var<double>> pyramid = {ws.param("input.level0"), ws.param("input.level1"),
                                            ws.param("input.level2")};
        return transformer_forward(ws, pyramid, ws.param("input.tokens_c"),
                                   ws.param("input.tokens_s"), opt, Rng(0));
    };
    s.eval = [build, p0, p1, p2](Params<double>& p) {
        Workspace<double> ws(p);
        auto refined = build(ws);
        return probe_dot(p0, refined[0].val()) + probe_dot(p1, refined[1].val()) +
               probe_dot(p2, refined[2].val());
    };
    {
        Workspace<double> ws(s.params);
        auto refined = build(ws);
        Var<double> loss = add(add(sum_all(mul(refined[0], ws.input(p0))),
                                   sum_all(mul(refined[1], ws.input(p1)))),
                               sum_all(mul(refined[2], ws.input(p2))));
        ws.g.backward(loss.id);
        for (const auto& [name, _] : s.params.tensors) s.analytic[name] = ws.grad(name);
    }
    append(rep, fd_detail::run(s, 8, rng.split("run")));
    return rep;
}

// ---------------------------------------------------------------------------

namespace {

Config heads_config() {
    Config cfg;
    cfg.image_height = 16;
    cfg.image_width = 24;
    cfg.n_points = 64;
    return cfg;
}

} // namespace

GradcheckReport gradcheck_heads(uint64_t seed) {
    GradcheckReport rep;
    rep.component = "heads";
    Rng rng = Rng(seed).split("heads");

    const Config cfg = heads_config();
    const Camera cam{18.0, 18.0, 11.5, 7.5, cfg.image_width, cfg.image_height};

    Suite s;
    init_encoder(s.params, cfg, Rng(seed).split("heads_init"));
    init_decoder(s.params, cfg, Rng(seed).split("heads_init"));
    perturb_params(s.params, rng.split("perturb"), 0.02);

    const TArr<double> image = random_array({16, 24, 3}, rng, 0.0, 1.0);
    const TArr<double> depth = random_array({16, 24}, rng, 1.0, 3.0);
    const int64_t j = 16 * 24 * cfg.gaussians_per_pixel;
    const int64_t b = cfg.sh_coeff_count();
    const TArr<double> pm = random_probe({j, 3}, rng);
    const TArr<double> pq = random_probe({j, 4}, rng);
    const TArr<double> pl = random_probe({j, 3}, rng);
    const TArr<double> po = random_probe({j}, rng);
    const TArr<double> ps = random_probe({j, 3, b}, rng);

    auto decode = [cfg, cam, image, depth](Workspace<double>& ws) {
        auto pyramid = encode_image_g(ws, ws.input(image), ws.input(depth), cfg);
        return decode_gaussians_g(ws, pyramid, depth, cam, cfg);
    };
    s.eval = [decode, pm, pq, pl, po, ps](Params<double>& p) {
        Workspace<double> ws(p);
        auto d = decode(ws);
        return probe_dot(pm, d.mu.val()) + probe_dot(pq, d.quat.val()) +
               probe_dot(pl, d.log_scales.val()) + probe_dot(po, d.opacity.val()) +
               probe_dot(ps, d.sh.val());
    };
    {
        Workspace<double> ws(s.params);
        auto d = decode(ws);
        Var<double> loss = sum_all(mul(d.mu, ws.input(pm)));
        loss = add(loss, sum_all(mul(d.quat, ws.input(pq))));
        loss = add(loss, sum_all(mul(d.log_scales, ws.input(pl))));
        loss = add(loss, sum_all(mul(d.opacity, ws.input(po))));
        loss = add(loss, sum_all(mul(d.sh, ws.input(ps))));
        ws.g.backward(loss.id);
        for (const auto& [name, _] : s.params.tensors) s.analytic[name] = ws.grad(name);
    }
    append(rep, fd_detail::run(s, 6, rng.split("run")));
    return rep;
}

// ---------------------------------------------------------------------------

namespace {

/// Random splat set inside the camera frustum with colors kept away from
/// the clamp boundary.
GaussianSet<double> random_gaussian_set(Rng& rng, int64_t count, int sh_degree,
                                        const Pose<double>& pose) {
    const int b = (sh_degree + 1) * (sh_degree + 1);
    GaussianSet<double> set;
    set.sh_degree = sh_degree;
    set.gaussians_per_pixel = 1;
    set.mu = TArr<double>({count, 3});
    set.quat = TArr<double>({count, 4});
    set.log_scales = TArr<double>({count, 3});
    set.opacity = TArr<double>({count});
    set.sh = TArr<double>({count, 3, b});
    const Vec3<double> campos = pose.origin();
    for (int64_t i = 0; i < count; ++i) {
        const double z = rng.uniform(1.2, 3.0);
        set.mu.at(i, 0) = z * rng.uniform(-0.45, 0.45);
        set.mu.at(i, 1) = z * rng.uniform(-0.35, 0.35);
        set.mu.at(i, 2) = z;
        std::array<double, 4> q = {rng.normal(), rng.normal(), rng.normal(), rng.normal()};
        q[0] += 2.0;
        q = quat_normalize(q);
        for (int k = 0; k < 4; ++k) set.quat.at(i, k) = q[static_cast<size_t>(k)];
        for (int k = 0; k < 3; ++k)
            set.log_scales.at(i, k) = std::log(rng.uniform(0.05, 0.25));
        set.opacity.at(i) = rng.uniform(0.3, 0.85);
        // draw colors until every channel is safely off the clamp boundary
        const Vec3<double> dir =
            (Vec3<double>{set.mu.at(i, 0), set.mu.at(i, 1), set.mu.at(i, 2)} - campos)
                .normalized();
        double basis_vals[16];
        sh::basis(dir, sh_degree, basis_vals);
        for (int c = 0; c < 3; ++c) {
            for (int attempt = 0; attempt < 64; ++attempt) {
                set.sh.at(i, c, 0) = rng.uniform(-1.0, 1.0);
                for (int k = 1; k < b; ++k) set.sh.at(i, c, k) = rng.uniform(-0.1, 0.1);
                double pre = 0.5;
                for (int k = 0; k < b; ++k) pre += set.sh.at(i, c, k) * basis_vals[k];
                if (pre > 0.05 && pre < 0.95) break;
            }
        }
    }
    return set;
}

} // namespace

GradcheckReport gradcheck_rasterizer(uint64_t seed) {
    GradcheckReport rep;
    rep.component = "rasterizer";
    Rng rng = Rng(seed).split("rasterizer");

    const Camera cam{20.0, 20.0, 15.5, 11.5, 32, 24};
    const Pose<double> pose = small_pose(rng);
    RenderSettings<double> settings;
    settings.sh_degree = 1;

    GaussianSet<double> base = random_gaussian_set(rng, 20, 1, pose);
    Suite s;
    s.params.tensors["mu"] = base.mu;
    s.params.tensors["quat"] = base.quat;
    s.params.tensors["log_scales"] = base.log_scales;
    s.params.tensors["opacity"] = base.opacity;
    s.params.tensors["sh"] = base.sh;
    const TArr<double> probe = random_probe({24, 32, 3}, rng);

    auto to_set = [&base](Params<double>& p) {
        GaussianSet<double> set = base;
        set.mu = p.at("mu");
        set.quat = p.at("quat");
        set.log_scales = p.at("log_scales");
        set.opacity = p.at("opacity");
        set.sh = p.at("sh");
        return set;
    };
    s.eval = [to_set, pose, cam, settings, probe](Params<double>& p) {
        GaussianSet<double> set = to_set(p);
        const auto out = rasterize(set, pose, cam, settings);
        return probe_dot(probe, out.image);
    };
    {
        GaussianSet<double> set = to_set(s.params);
        RasterizeState<double> state;
        rasterize(set, pose, cam, settings, &state);
        const auto g = rasterize_backward(probe, state);
        s.analytic["mu"] = g.mu;
        s.analytic["quat"] = g.quat;
        s.analytic["log_scales"] = g.log_scales;
        s.analytic["opacity"] = g.opacity;
        s.analytic["sh"] = g.sh;
    }
    append(rep, fd_detail::run(s, 1 << 20, rng.split("run"))); // all elements
    return rep;
}

// ---------------------------------------------------------------------------

GradcheckReport gradcheck_losses(uint64_t seed) {
    GradcheckReport rep;
    rep.component = "losses";
    Rng rng = Rng(seed).split("losses");

    Suite s;
    s.params.tensors["pred"] = random_array({16, 24, 3}, rng, 0.0, 1.0);
    const TArr<double> target = random_array({16, 24, 3}, rng, 0.0, 1.0);
    const LossWeights w{1.0, 0.85, 0.01};

    s.eval = [target, w](Params<double>& p) {
        Workspace<double> ws(p);
        Var<double> pred = ws.param("pred");
        Var<double> tgt = ws.input(target);
        return static_cast<double>(total_loss_g(ws, pred, tgt, w, ZeroLpips<double>{}).breakdown.total);
    };
    {
        Workspace<double> ws(s.params);
        Var<double> pred = ws.param("pred");
        Var<double> tgt = ws.input(target);
        auto r = total_loss_g(ws, pred, tgt, w, ZeroLpips<double>{});
        ws.g.backward(r.total.id);
        s.analytic["pred"] = ws.grad("pred");
    }
    append(rep, fd_detail::run(s, 24, rng.split("run")));
    return rep;
}

// ---------------------------------------------------------------------------

GradcheckReport gradcheck_end_to_end(uint64_t seed) {
    GradcheckReport rep;
    rep.component = "end_to_end";
    rep.tolerance = kFdToleranceEndToEnd;
    Rng rng = Rng(seed).split("end_to_end");

    Config cfg = heads_config();

    Suite s;
    s.params = init_model<double>(cfg, seed);
    perturb_params(s.params, rng.split("perturb"), 0.02);

    PipelineInputs<double> in;
    in.image = random_array({16, 24, 3}, rng, 0.0, 1.0);
    in.depth = random_array({16, 24}, rng, 1.5, 3.0);
    in.tokens = random_array({8, cfg.token_dim}, rng, -1.0, 1.0);
    in.cam = Camera{18.0, 18.0, 11.5, 7.5, cfg.image_width, cfg.image_height};
    const Pose<double> pose = small_pose(rng);
    const TArr<double> target = random_array({16, 24, 3}, rng, 0.0, 1.0);
    const LossWeights w{cfg.lambda_l1, cfg.lambda_ssim, cfg.lambda_lpips};

    s.eval = [in, pose, cfg, target, w](Params<double>& p) {
        Workspace<double> ws(p);
        auto fg = forward_g(ws, in, pose, cfg, false, Rng(0));
        Var<double> tgt = ws.input(target);
        return static_cast<double>(
            total_loss_g(ws, fg.image, tgt, w, ZeroLpips<double>{}).breakdown.total);
    };
    {
        Workspace<double> ws(s.params);
        auto fg = forward_g(ws, in, pose, cfg, false, Rng(0));
        Var<double> tgt = ws.input(target);
        auto r = total_loss_g(ws, fg.image, tgt, w, ZeroLpips<double>{});
        ws.g.backward(r.total.id);
        for (const auto& [name, _] : s.params.tensors) s.analytic[name] = ws.grad(name);
    }
    append(rep, fd_detail::run(s, 4, rng.split("run")));
    return rep;
}

// ---------------------------------------------------------------------------

GradcheckReport gradcheck_component(const std::string& component, uint64_t seed) {
    if (component == "geometry") return gradcheck_geometry(seed);
    if (component == "point_encoder") return gradcheck_point_encoder(seed);
    if (component == "transformer") return gradcheck_transformer(seed);
    if (component == "heads") return gradcheck_heads(seed);
    if (component == "rasterizer") return gradcheck_rasterizer(seed);
    if (component == "losses") return gradcheck_losses(seed);
    if (component == "end_to_end") return gradcheck_end_to_end(seed);
    throw UsageError("unknown gradcheck component '" + component +
                     "' (expected geometry, point_encoder, transformer, heads, rasterizer, "
                     "losses, or end_to_end)");
}

} // namespace svsplat
