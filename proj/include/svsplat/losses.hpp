#pragma once

#include "svsplat/autodiff.hpp"
#include "svsplat/nn.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <memory>

namespace svsplat {

struct LossWeights {
    double l1 = 1.0;
    double ssim = 0.85;
    double lpips = 0.01;
};

template <typename T>
struct LossBreakdown {
    T l1 = 0;
    T ssim_loss = 0;
    T lpips_loss = 0;
    T total = 0;
};

/// Pluggable perceptual scorer. The default returns zero: the loss keeps
/// its three-term structure while no pretrained network ships with the
/// library.
template <typename T>
class LpipsScorer {
public:
    virtual ~LpipsScorer() = default;
    /// Returns the score; when grad_pred is non-null, accumulates
    /// d(score)/d(pred) into it.
    virtual T score(const TArr<T>& pred, const TArr<T>& target, TArr<T>* grad_pred) const = 0;
};

template <typename T>
class ZeroLpips final : public LpipsScorer<T> {
public:
    T score(const TArr<T>&, const TArr<T>&, TArr<T>*) const override { return T(0); }
};

// ---------------------------------------------------------------------------
// L1

template <typename T>
Var<T> l1_loss_g(Var<T> pred, Var<T> target) {
    detail::check_same_shape(pred, target, "l1_loss");
    return mean_all(abs_op(sub(pred, target)));
}

template <typename T>
T l1_loss(const TArr<T>& a, const TArr<T>& b) {
    if (!(a.dims == b.dims)) throw ShapeError("l1_loss: shape mismatch");
    T s = 0;
    for (int64_t i = 0; i < a.numel(); ++i) s += std::abs(a[i] - b[i]);
    return s / static_cast<T>(a.numel());
}

// ---------------------------------------------------------------------------
// SSIM (11x11 Gaussian window, sigma 1.5, K1 = 0.01, K2 = 0.03, range 1,
// symmetric padding, per-channel then averaged)

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

template <typename T>
std::vector<T> ssim_window_taps() {
    std::vector<T> taps(kSsimWindow);
    double sum = 0;
    for (int i = 0; i < kSsimWindow; ++i) {
        const double d = i - (kSsimWindow - 1) / 2.0;
        const double v = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
        taps[static_cast<size_t>(i)] = static_cast<T>(v);
        sum += v;
    }
    for (auto& t : taps) t = static_cast<T>(static_cast<double>(t) / sum);
    return taps;
}

/// Differentiable SSIM between two (H,W,C) images.
template <typename T>
Var<T> ssim_g(Var<T> a, Var<T> b) {
    detail::check_same_shape(a, b, "ssim");
    const auto& ad = a.val().dims;
    if (ad.size() != 3) throw ShapeError("ssim expects (H,W,C) images");
    if (ad[0] < kSsimWindow || ad[1] < kSsimWindow)
        throw ValidationError("ssim: images smaller than the 11x11 window");
    const auto taps = ssim_window_taps<T>();
    const T c1 = static_cast<T>(kSsimC1), c2 = static_cast<T>(kSsimC2);

    Var<T> mu_x = sep_filter_sym(a, taps);
    Var<T> mu_y = sep_filter_sym(b, taps);
    Var<T> xx = sep_filter_sym(mul(a, a), taps);
    Var<T> yy = sep_filter_sym(mul(b, b), taps);
    Var<T> xy = sep_filter_sym(mul(a, b), taps);

    Var<T> mu_xx = mul(mu_x, mu_x);
    Var<T> mu_yy = mul(mu_y, mu_y);
    Var<T> mu_xy = mul(mu_x, mu_y);
    Var<T> sx = sub(xx, mu_xx);
    Var<T> sy = sub(yy, mu_yy);
    Var<T> sxy = sub(xy, mu_xy);

    Var<T> num = mul(add_scalar(mul_scalar(mu_xy, T(2)), c1),
                     add_scalar(mul_scalar(sxy, T(2)), c2));
    Var<T> den = mul(add_scalar(add(mu_xx, mu_yy), c1), add_scalar(add(sx, sy), c2));
    return mean_all(div(num, den));
}

/// SSIM as a plain metric (runs the differentiable path on a local tape).
template <typename T>
T ssim(const TArr<T>& a, const TArr<T>& b) {
    Params<T> dummy;
    Workspace<T> ws(dummy);
    Var<T> va = ws.input(a);
    Var<T> vb = ws.input(b);
    return ssim_g(va, vb).val()[0];
}

// ---------------------------------------------------------------------------
// PSNR

/// 10 log10(1 / MSE) at dynamic range 1; identical images report +inf.
template <typename T>
double psnr(const TArr<T>& a, const TArr<T>& b) {
    if (!(a.dims == b.dims)) throw ShapeError("psnr: shape mismatch");
    double mse = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(a.numel());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return -10.0 * std::log10(mse);
}

// ---------------------------------------------------------------------------
// Total loss (weighted sum of the three terms)

template <typename T>
struct TotalLossResult {
    Var<T> total;
    LossBreakdown<T> breakdown;
};

/// total = w.l1 * L1 + w.ssim * (1 - SSIM) + w.lpips * LPIPS, differentiable
/// with respect to pred. The scorer contributes through a custom node so a
/// real perceptual model can slot in without touching this code.
template <typename T>
TotalLossResult<T> total_loss_g(Workspace<T>& ws, Var<T> pred, Var<T> target,
                                const LossWeights& w, const LpipsScorer<T>& scorer) {
    Var<T> l1 = l1_loss_g(pred, target);
    Var<T> ssim_loss = add_scalar(mul_scalar(ssim_g(pred, target), T(-1)), T(1));

    // LPIPS as a custom node over pred
    Graph<T>& g = ws.g;
    const int id_pred = pred.id;
    const T lp = scorer.score(pred.val(), target.val(), nullptr);
    const int id_lp = g.add_node(TArr<T>::scalar(lp), g.wants_grad(id_pred));
    const LpipsScorer<T>* scorer_ptr = &scorer;
    auto target_copy = std::make_shared<TArr<T>>(target.val());
    g.node(id_lp).backward = [id_lp, id_pred, scorer_ptr, target_copy](Graph<T>& gr) {
        if (!gr.wants_grad(id_pred)) return;
        const T go = gr.node(id_lp).grad[0];
        if (go == T(0)) return;
        TArr<T> gp(gr.val(id_pred).dims);
        scorer_ptr->score(gr.val(id_pred), *target_copy, &gp);
        TArr<T>& dst = gr.grad_buf(id_pred);
        for (int64_t i = 0; i < gp.numel(); ++i) dst[i] += go * gp[i];
    };
    Var<T> lpips{&g, id_lp};

    Var<T> total = add(add(mul_scalar(l1, static_cast<T>(w.l1)),
                           mul_scalar(ssim_loss, static_cast<T>(w.ssim))),
                       mul_scalar(lpips, static_cast<T>(w.lpips)));

    TotalLossResult<T> r;
    r.total = total;
    r.breakdown.l1 = l1.val()[0];
    r.breakdown.ssim_loss = ssim_loss.val()[0];
    r.breakdown.lpips_loss = lpips.val()[0];
    r.breakdown.total = total.val()[0];
    return r;
}

template <typename T>
LossBreakdown<T> total_loss(const TArr<T>& pred, const TArr<T>& target, const LossWeights& w,
                            const LpipsScorer<T>& scorer) {
    Params<T> dummy;
    Workspace<T> ws(dummy);
    Var<T> vp = ws.input(pred);
    Var<T> vt = ws.input(target);
    return total_loss_g(ws, vp, vt, w, scorer).breakdown;
}

template <typename T>
LossBreakdown<T> total_loss(const TArr<T>& pred, const TArr<T>& target, const LossWeights& w) {
    return total_loss(pred, target, w, ZeroLpips<T>{});
}

} // namespace svsplat
