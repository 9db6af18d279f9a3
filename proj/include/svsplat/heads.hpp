#pragma once

#include "svsplat/config.hpp"
#include "svsplat/geometry.hpp"
#include "svsplat/nn.hpp"

#include <vector>

namespace svsplat {

/// Flat per-pixel Gaussian collection in the source camera frame.
/// Primitive j = (y*W + x)*G + g; pixel_of keeps the provenance.
template <typename T>
struct GaussianSet {
    TArr<T> mu;         // (J,3)
    TArr<T> quat;       // (J,4), unit rows
    TArr<T> log_scales; // (J,3)
    TArr<T> opacity;    // (J), in (0,1)
    TArr<T> sh;         // (J,3,B)
    std::vector<int32_t> pixel_of; // flat source pixel y*W+x, empty for synthetic sets
    int64_t height = 0, width = 0;
    int gaussians_per_pixel = 1;
    int sh_degree = 0;

    int64_t count() const { return mu.rank() ? mu.dim(0) : 0; }
    int sh_coeffs() const { return (sh_degree + 1) * (sh_degree + 1); }

    GaussianPrimitive<T> primitive(int64_t j) const {
        GaussianPrimitive<T> p;
        p.mu = {mu.at(j, 0), mu.at(j, 1), mu.at(j, 2)};
        p.opacity = opacity.at(j);
        p.quat = {quat.at(j, 0), quat.at(j, 1), quat.at(j, 2), quat.at(j, 3)};
        p.log_scales = {log_scales.at(j, 0), log_scales.at(j, 1), log_scales.at(j, 2)};
        const int b = sh_coeffs();
        p.sh.resize(static_cast<size_t>(3 * b));
        for (int c = 0; c < 3; ++c)
            for (int k = 0; k < b; ++k)
                p.sh[static_cast<size_t>(c * b + k)] = sh.at(j, c, k);
        return p;
    }

    void validate() const {
        const int64_t j = count();
        for (int64_t i = 0; i < j; ++i) {
            const T o = opacity.at(i);
            if (!(o > T(0) && o < T(1)))
                throw ValidationError("opacity outside (0,1) at primitive " + std::to_string(i));
            const T n = std::sqrt(quat.at(i, 0) * quat.at(i, 0) + quat.at(i, 1) * quat.at(i, 1) +
                                  quat.at(i, 2) * quat.at(i, 2) + quat.at(i, 3) * quat.at(i, 3));
            if (std::abs(static_cast<double>(n) - 1.0) > 1e-6)
                throw ValidationError("non-unit quaternion at primitive " + std::to_string(i));
        }
    }
};

// ---------------------------------------------------------------------------
// Depth-conditioned image encoder
//
// Desk-scale CNN: a stride-4 stem over the 4-channel (RGB+depth) input,
// then stages at strides 1, 2, 2 giving pyramid levels at /4, /8, /16.

template <typename T>
std::vector<Var<T>> encode_image_g(Workspace<T>& ws, Var<T> image, Var<T> depth,
                                   const Config& cfg) {
    const auto& iv = image.val();
    if (iv.rank() != 3 || iv.dim(2) != 3) throw ShapeError("encode_image expects (H,W,3) image");
    if (depth.val().dims != Shape{iv.dim(0), iv.dim(1)})
        throw ShapeError("encode_image: depth dims must match image");
    if (iv.dim(0) != cfg.image_height || iv.dim(1) != cfg.image_width)
        throw ShapeError("encode_image: dims do not match config");
    if (cfg.levels != 3 || cfg.level_widths.size() != 3)
        throw ConfigError("encoder expects a 3-level configuration");

    Var<T> d3 = reshape(depth, {iv.dim(0), iv.dim(1), 1});
    Var<T> x = concat_last(std::vector<Var<T>>{image, d3}); // (H,W,4)

    x = gelu(conv2d(x, ws.param("encoder.conv0.w"), ws.param("encoder.conv0.b"), 2, 1));
    x = gelu(conv2d(x, ws.param("encoder.conv1.w"), ws.param("encoder.conv1.b"), 2, 1));
    x = gelu(conv2d(x, ws.param("encoder.conv2.w"), ws.param("encoder.conv2.b"), 1, 1));
    Var<T> l1 = gelu(conv2d(x, ws.param("encoder.conv3.w"), ws.param("encoder.conv3.b"), 1, 1));
    Var<T> l2 = gelu(conv2d(l1, ws.param("encoder.conv4.w"), ws.param("encoder.conv4.b"), 2, 1));
    Var<T> l3 = gelu(conv2d(l2, ws.param("encoder.conv5.w"), ws.param("encoder.conv5.b"), 2, 1));
    return {l1, l2, l3};
}

template <typename T>
void init_encoder(Params<T>& p, const Config& cfg, const Rng& root) {
    const int64_t w1 = cfg.level_widths[0], w2 = cfg.level_widths[1], w3 = cfg.level_widths[2];
    auto conv = [&](const std::string& name, int64_t cin, int64_t cout) {
        init_kaiming(p, "encoder." + name + ".w", {3, 3, cin, cout}, 9 * cin, root);
        init_zeros(p, "encoder." + name + ".b", {cout});
    };
    conv("conv0", 4, w1);
    conv("conv1", w1, w1);
    conv("conv2", w1, w1);
    conv("conv3", w1, w1);
    conv("conv4", w1, w2);
    conv("conv5", w2, w3);
}

// ---------------------------------------------------------------------------
// Gaussian parameter decoder

inline constexpr int kDecoderFuseWidth = 48;
inline constexpr int kDecoderTrunkWidth = 24;
inline constexpr double kLogScaleMin = -9.210340371976182; // ln 1e-4
inline constexpr double kLogScaleMax = 0.0;                // ln 1
inline constexpr double kInitScale = 0.02;                 // meters

template <typename T>
struct DecodedGaussians {
    Var<T> mu;         // (J,3)
    Var<T> quat;       // (J,4) unit rows
    Var<T> log_scales; // (J,3) clamped to [ln 1e-4, ln 1]
    Var<T> opacity;    // (J)
    Var<T> sh;         // (J,3,B)
    int64_t clamped_depth_count = 0;
};

namespace detail {

/// delta' such that depth + delta' = near + 1e-4 wherever depth + delta
/// would be nonpositive; elsewhere delta passes through. Clamped entries
/// stop gradient. Returns the adjusted Var and the clamp count.
template <typename T>
std::pair<Var<T>, int64_t> floor_refined_delta(Workspace<T>& ws, Var<T> delta,
                                               const TArr<T>& depth, T near) {
    const auto& dv = delta.val();
    const int64_t h = dv.dim(0), w = dv.dim(1), g = dv.dim(2);
    TArr<T> out = dv;
    auto mask = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(dv.numel()), 1);
    int64_t clamped = 0;
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t k = 0; k < g; ++k) {
                const int64_t i = (y * w + x) * g + k;
                const T d = depth.at(y, x);
                if (!(d + out[i] > T(0))) {
                    out[i] = near + T(1e-4) - d;
                    (*mask)[static_cast<size_t>(i)] = 0;
                    ++clamped;
                }
            }
    Graph<T>& gr = ws.g;
    const int ida = delta.id;
    const int id = gr.add_node(std::move(out), gr.wants_grad(ida));
    gr.node(id).backward = [id, ida, mask](Graph<T>& g2) {
        if (!g2.wants_grad(ida)) return;
        const TArr<T>& go = g2.node(id).grad;
        TArr<T>& ga = g2.grad_buf(ida);
        for (int64_t i = 0; i < go.numel(); ++i)
            if ((*mask)[static_cast<size_t>(i)]) ga[i] += go[i];
    };
    return {Var<T>{&gr, id}, clamped};
}

/// Tape node wrapping geometry::gaussian_centers over (delta, offsets),
/// with the depth map and camera held constant.
template <typename T>
Var<T> centers_node(Workspace<T>& ws, Var<T> delta, Var<T> offsets, const TArr<T>& depth,
                    const Camera& cam) {
    const int64_t h = depth.dim(0), w = depth.dim(1), g = delta.val().dim(2);
    TArr<T> mu = gaussian_centers(depth, delta.val(), offsets.val(), cam);
    Graph<T>& gr = ws.g;
    const int idd = delta.id, ido = offsets.id;
    const Camera cam_copy = cam;
    const int id = gr.add_node(std::move(mu), gr.wants_grad(idd) || gr.wants_grad(ido));
    gr.node(id).backward = [id, idd, ido, h, w, g, cam_copy](Graph<T>& g2) {
        const TArr<T>& go = g2.node(id).grad;
        auto grads = gaussian_centers_vjp(go, h, w, g, cam_copy);
        if (g2.wants_grad(idd)) {
            TArr<T>& gd = g2.grad_buf(idd);
            for (int64_t i = 0; i < gd.numel(); ++i) gd[i] += grads.delta[i];
        }
        if (g2.wants_grad(ido)) {
            TArr<T>& gof = g2.grad_buf(ido);
            for (int64_t i = 0; i < gof.numel(); ++i) gof[i] += grads.offsets[i];
        }
    };
    return {&gr, id};
}

} // namespace detail

/// Fuse the refined pyramid to full resolution and decode per-pixel
/// Gaussian parameters. Activation choices:
///   delta      softplus(x) - softplus(0)   (mild negative refinement allowed)
///   offsets    offset_bound * tanh(x)
///   opacity    sigmoid(x)
///   quat       row-normalized
///   log_scales clamp to [ln 1e-4, ln 1]
///   sh         raw
template <typename T>
DecodedGaussians<T> decode_gaussians_g(Workspace<T>& ws, const std::vector<Var<T>>& refined,
                                       const TArr<T>& depth, const Camera& cam,
                                       const Config& cfg) {
    if (refined.size() != 3) throw ShapeError("decode_gaussians expects a 3-level pyramid");
    const int64_t h = depth.dim(0), w = depth.dim(1);
    const int64_t h2 = (h + 1) / 2, w2 = (w + 1) / 2;
    const int g = cfg.gaussians_per_pixel;
    const int b = cfg.sh_coeff_count();

    auto conv1x1 = [&](Var<T> x, const std::string& name) {
        return conv2d(x, ws.param(name + ".w"), ws.param(name + ".b"), 1, 0);
    };
    auto conv3x3 = [&](Var<T> x, const std::string& name) {
        return conv2d(x, ws.param(name + ".w"), ws.param(name + ".b"), 1, 1);
    };

    // top-down fusion over the pyramid
    Var<T> u = conv1x1(refined[2], "decoder.lat3");
    u = crop2d(upsample2x(u), refined[1].val().dim(0), refined[1].val().dim(1));
    u = gelu(conv3x3(add(u, conv1x1(refined[1], "decoder.lat2")), "decoder.fuse2"));
    u = crop2d(upsample2x(u), refined[0].val().dim(0), refined[0].val().dim(1));
    u = gelu(conv3x3(add(u, conv1x1(refined[0], "decoder.lat1")), "decoder.fuse1"));
    // back to full resolution
    u = crop2d(upsample2x(u), h2, w2);
    u = gelu(conv3x3(u, "decoder.up1"));
    u = crop2d(upsample2x(u), h, w);
    u = gelu(conv3x3(u, "decoder.up2"));
    Var<T> raw = conv1x1(u, "decoder.head"); // (H, W, (12 + 3B) G)

    const int64_t gc = g;
    int64_t off = 0;
    Var<T> delta_raw = slice_last(raw, off, off + gc);
    off += gc;
    Var<T> offs_raw = slice_last(raw, off, off + 3 * gc);
    off += 3 * gc;
    Var<T> opac_raw = slice_last(raw, off, off + gc);
    off += gc;
    Var<T> quat_raw = slice_last(raw, off, off + 4 * gc);
    off += 4 * gc;
    Var<T> ls_raw = slice_last(raw, off, off + 3 * gc);
    off += 3 * gc;
    Var<T> sh_raw = slice_last(raw, off, off + 3 * b * gc);

    const T softplus_zero = detail::softplus_scalar(T(0));
    Var<T> delta = add_scalar(softplus(delta_raw), -softplus_zero); // (H,W,G)
    auto [delta_floored, clamped] =
        detail::floor_refined_delta(ws, delta, depth, static_cast<T>(cfg.near));
    Var<T> offsets = mul_scalar(tanh_op(reshape(offs_raw, {h, w, gc, 3})),
                                static_cast<T>(cfg.offset_bound));

    DecodedGaussians<T> out;
    out.clamped_depth_count = clamped;
    out.mu = detail::centers_node(ws, delta_floored, offsets, depth, cam);
    out.opacity = reshape(sigmoid(opac_raw), {h * w * gc});
    out.quat = normalize_rows(reshape(quat_raw, {h * w * gc, 4}));
    out.log_scales = clamp_op(reshape(ls_raw, {h * w * gc, 3}), static_cast<T>(kLogScaleMin),
                              static_cast<T>(kLogScaleMax));
    out.sh = reshape(sh_raw, {h * w * gc, 3, b});
    return out;
}

/// Detach a decoded set into a plain GaussianSet.
template <typename T>
GaussianSet<T> to_gaussian_set(const DecodedGaussians<T>& d, int64_t h, int64_t w,
                               const Config& cfg) {
    GaussianSet<T> set;
    set.mu = d.mu.val();
    set.quat = d.quat.val();
    set.log_scales = d.log_scales.val();
    set.opacity = d.opacity.val();
    set.sh = d.sh.val();
    set.height = h;
    set.width = w;
    set.gaussians_per_pixel = cfg.gaussians_per_pixel;
    set.sh_degree = cfg.sh_degree;
    const int64_t j = set.count();
    set.pixel_of.resize(static_cast<size_t>(j));
    for (int64_t i = 0; i < j; ++i)
        set.pixel_of[static_cast<size_t>(i)] = static_cast<int32_t>(i / cfg.gaussians_per_pixel);
    return set;
}

template <typename T>
void init_decoder(Params<T>& p, const Config& cfg, const Rng& root) {
    const int64_t w1 = cfg.level_widths[0], w2 = cfg.level_widths[1], w3 = cfg.level_widths[2];
    const int64_t f = kDecoderFuseWidth, t = kDecoderTrunkWidth;
    const int g = cfg.gaussians_per_pixel;
    const int b = cfg.sh_coeff_count();

    auto conv = [&](const std::string& name, int64_t k, int64_t cin, int64_t cout) {
        init_kaiming(p, "decoder." + name + ".w", {k, k, cin, cout}, k * k * cin, root);
        init_zeros(p, "decoder." + name + ".b", {cout});
    };
    conv("lat3", 1, w3, f);
    conv("lat2", 1, w2, f);
    conv("lat1", 1, w1, f);
    conv("fuse2", 3, f, f);
    conv("fuse1", 3, f, f);
    conv("up1", 3, f, t);
    conv("up2", 3, t, t);

    // zero-initialized final head: delta = 0, offsets = 0, opacity = 0.5,
    // quat = identity rotation, scales = kInitScale, sh = 0 at step 0
    const int64_t cout = (12 + 3 * b) * g;
    init_zeros(p, "decoder.head.w", {1, 1, t, cout});
    TArr<T> bias({cout});
    for (int k = 0; k < g; ++k) {
        bias[5 * g + 4 * k] = T(1); // quaternion w
        for (int c = 0; c < 3; ++c)
            bias[9 * g + 3 * k + c] = static_cast<T>(std::log(kInitScale));
    }
    p.tensors["decoder.head.b"] = std::move(bias);
}

} // namespace svsplat
