#pragma once

#include "svsplat/autodiff.hpp"
#include "svsplat/geometry.hpp"
#include "svsplat/heads.hpp"
#include "svsplat/threading.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <memory>
#include <numeric>
#include <vector>

namespace svsplat {

// ---------------------------------------------------------------------------
// Spherical harmonics color

namespace sh {
inline constexpr double kC0 = 0.28209479177387814;
inline constexpr double kC1 = 0.4886025119029199;
inline constexpr double kC2[5] = {1.0925484305920792, -1.0925484305920792,
                                  0.31539156525252005, -1.0925484305920792,
                                  0.5462742152960396};
inline constexpr double kC3[7] = {-0.5900435899266435, 2.890611442640554,
                                  -0.4570457994644658, 0.3731763325901154,
                                  -0.4570457994644658, 1.445305721320277,
                                  -0.5900435899266435};

/// Real SH basis values up to `deg` for a unit direction; basis[k] holds
/// Y_k with the conventional sign folded in.
template <typename T>
void basis(const Vec3<T>& d, int deg, T* out) {
    out[0] = static_cast<T>(kC0);
    if (deg < 1) return;
    const T x = d.x, y = d.y, z = d.z;
    out[1] = static_cast<T>(-kC1) * y;
    out[2] = static_cast<T>(kC1) * z;
    out[3] = static_cast<T>(-kC1) * x;
    if (deg < 2) return;
    const T xx = x * x, yy = y * y, zz = z * z;
    out[4] = static_cast<T>(kC2[0]) * x * y;
    out[5] = static_cast<T>(kC2[1]) * y * z;
    out[6] = static_cast<T>(kC2[2]) * (T(2) * zz - xx - yy);
    out[7] = static_cast<T>(kC2[3]) * x * z;
    out[8] = static_cast<T>(kC2[4]) * (xx - yy);
    if (deg < 3) return;
    out[9] = static_cast<T>(kC3[0]) * y * (T(3) * xx - yy);
    out[10] = static_cast<T>(kC3[1]) * x * y * z;
    out[11] = static_cast<T>(kC3[2]) * y * (T(4) * zz - xx - yy);
    out[12] = static_cast<T>(kC3[3]) * z * (T(2) * zz - T(3) * xx - T(3) * yy);
    out[13] = static_cast<T>(kC3[4]) * x * (T(4) * zz - xx - yy);
    out[14] = static_cast<T>(kC3[5]) * z * (xx - yy);
    out[15] = static_cast<T>(kC3[6]) * x * (xx - T(3) * yy);
}

/// dY_k/d(direction); rows k, columns (x,y,z).
template <typename T>
void basis_jacobian(const Vec3<T>& d, int deg, T (*out)[3]) {
    const T x = d.x, y = d.y, z = d.z;
    const int n = (deg + 1) * (deg + 1);
    for (int k = 0; k < n; ++k) out[k][0] = out[k][1] = out[k][2] = T(0);
    if (deg < 1) return;
    out[1][1] = static_cast<T>(-kC1);
    out[2][2] = static_cast<T>(kC1);
    out[3][0] = static_cast<T>(-kC1);
    if (deg < 2) return;
    out[4][0] = static_cast<T>(kC2[0]) * y;
    out[4][1] = static_cast<T>(kC2[0]) * x;
    out[5][1] = static_cast<T>(kC2[1]) * z;
    out[5][2] = static_cast<T>(kC2[1]) * y;
    out[6][0] = static_cast<T>(kC2[2]) * (T(-2) * x);
    out[6][1] = static_cast<T>(kC2[2]) * (T(-2) * y);
    out[6][2] = static_cast<T>(kC2[2]) * (T(4) * z);
    out[7][0] = static_cast<T>(kC2[3]) * z;
    out[7][2] = static_cast<T>(kC2[3]) * x;
    out[8][0] = static_cast<T>(kC2[4]) * (T(2) * x);
    out[8][1] = static_cast<T>(kC2[4]) * (T(-2) * y);
    if (deg < 3) return;
    out[9][0] = static_cast<T>(kC3[0]) * (T(6) * x * y);
    out[9][1] = static_cast<T>(kC3[0]) * (T(3) * x * x - T(3) * y * y);
    out[10][0] = static_cast<T>(kC3[1]) * y * z;
    out[10][1] = static_cast<T>(kC3[1]) * x * z;
    out[10][2] = static_cast<T>(kC3[1]) * x * y;
    out[11][0] = static_cast<T>(kC3[2]) * (T(-2) * x * y);
    out[11][1] = static_cast<T>(kC3[2]) * (T(4) * z * z - x * x - T(3) * y * y);
    out[11][2] = static_cast<T>(kC3[2]) * (T(8) * y * z);
    out[12][0] = static_cast<T>(kC3[3]) * (T(-6) * x * z);
    out[12][1] = static_cast<T>(kC3[3]) * (T(-6) * y * z);
    out[12][2] = static_cast<T>(kC3[3]) * (T(6) * z * z - T(3) * x * x - T(3) * y * y);
    out[13][0] = static_cast<T>(kC3[4]) * (T(4) * z * z - T(3) * x * x - y * y);
    out[13][1] = static_cast<T>(kC3[4]) * (T(-2) * x * y);
    out[13][2] = static_cast<T>(kC3[4]) * (T(8) * x * z);
    out[14][0] = static_cast<T>(kC3[5]) * (T(2) * x * z);
    out[14][1] = static_cast<T>(kC3[5]) * (T(-2) * y * z);
    out[14][2] = static_cast<T>(kC3[5]) * (x * x - y * y);
    out[15][0] = static_cast<T>(kC3[6]) * (T(3) * x * x - T(3) * y * y);
    out[15][1] = static_cast<T>(kC3[6]) * (T(-6) * x * y);
}
} // namespace sh

/// Evaluate SH color: sum_k c_k Y_k(dir) + 0.5 per channel, clamped to be
/// nonnegative. The +0.5 offset makes all-zero coefficients mid-gray.
/// coeffs is (3, B) with B >= (deg+1)^2; dir must be unit length.
template <typename T>
std::array<T, 3> evaluate_sh(const TArr<T>& coeffs, const Vec3<T>& dir, int deg) {
    if (deg < 0 || deg > 3) throw ValidationError("sh degree must be in 0..3");
    if (coeffs.rank() != 2 || coeffs.dim(0) != 3 || coeffs.dim(1) < (deg + 1) * (deg + 1))
        throw ShapeError("sh coefficients must be (3,(deg+1)^2)");
    if (std::abs(static_cast<double>(dir.norm()) - 1.0) > 1e-6)
        throw ValidationError("sh view direction must be unit length");
    T y[16];
    sh::basis(dir, deg, y);
    const int n = (deg + 1) * (deg + 1);
    std::array<T, 3> rgb{};
    for (int c = 0; c < 3; ++c) {
        T s = T(0.5);
        for (int k = 0; k < n; ++k) s += coeffs.at(c, k) * y[k];
        rgb[static_cast<size_t>(c)] = std::max(T(0), s);
    }
    return rgb;
}

// ---------------------------------------------------------------------------
// Render settings / output

template <typename T>
struct RenderSettings {
    std::array<T, 3> background = {T(0), T(0), T(0)};
    int tile = 16;
    T alpha_cutoff = static_cast<T>(1.0 / 255.0);
    T transmittance_floor = static_cast<T>(1e-4);
    int sh_degree = 3; // evaluation cap; the set's own degree also applies
    T near = static_cast<T>(0.01);
    T far = static_cast<T>(100.0);

    void validate() const {
        if (tile < 1) throw ValidationError("tile must be >= 1");
        if (!(alpha_cutoff > T(0) && alpha_cutoff < T(1)))
            throw ValidationError("alpha_cutoff must lie in (0,1)");
        if (!(transmittance_floor > T(0) && transmittance_floor < T(1)))
            throw ValidationError("transmittance_floor must lie in (0,1)");
        for (T b : background)
            if (!(b >= T(0) && b <= T(1))) throw ValidationError("background must lie in [0,1]");
    }
};

template <typename T>
struct RenderOutput {
    TArr<T> image;            // (H,W,3)
    TArr<T> transmittance;    // (H,W), remaining light
    TArr<int32_t> contributors; // (H,W) splats composited per pixel
    int64_t culled = 0;       // outside (near, far)
    int64_t skipped_singular = 0;
};

// ---------------------------------------------------------------------------
// Internals shared by the tiled path, the oracle, and the backward pass

namespace raster_detail {

template <typename T>
struct SplatRecord {
    int64_t index; // original primitive id
    T mean_x, mean_y;
    T inv_xx, inv_xy, inv_yy; // inverse 2D covariance
    T cov_xx, cov_xy, cov_yy;
    T depth;
    T alpha;
    T radius; // conservative screen-space extent
    std::array<T, 3> color;
};

/// Project every primitive, evaluate its color, and keep the splats that
/// can contribute, sorted by camera depth (index tiebreak).
template <typename T>
std::vector<SplatRecord<T>> preprocess(const GaussianSet<T>& set, const Pose<T>& pose,
                                       const Camera& cam, const RenderSettings<T>& settings,
                                       int64_t* culled, int64_t* skipped_singular) {
    const int64_t j = set.count();
    const int deg = std::min(set.sh_degree, settings.sh_degree);
    const Vec3<T> campos = pose.origin();
    std::vector<SplatRecord<T>> recs;
    recs.reserve(static_cast<size_t>(j));
    int64_t n_culled = 0, n_singular = 0;

    for (int64_t i = 0; i < j; ++i) {
        const std::array<T, 4> q = {set.quat.at(i, 0), set.quat.at(i, 1), set.quat.at(i, 2),
                                    set.quat.at(i, 3)};
        const Vec3<T> ls = {set.log_scales.at(i, 0), set.log_scales.at(i, 1),
                            set.log_scales.at(i, 2)};
        const Vec3<T> mu = {set.mu.at(i, 0), set.mu.at(i, 1), set.mu.at(i, 2)};
        const Mat3<T> sigma = build_covariance(q, ls);
        const auto proj = project_gaussian(mu, sigma, pose, cam, settings.near, settings.far);
        if (!proj) {
            ++n_culled;
            continue;
        }
        const T det = proj->cov_xx * proj->cov_yy - proj->cov_xy * proj->cov_xy;
        if (!(det > T(0)) || !std::isfinite(static_cast<double>(det))) {
            ++n_singular;
            continue;
        }
        const T alpha = set.opacity.at(i);
        if (!(alpha >= settings.alpha_cutoff)) continue; // cannot pass the per-pixel test

        SplatRecord<T> r;
        r.index = i;
        r.mean_x = proj->mean_x;
        r.mean_y = proj->mean_y;
        r.cov_xx = proj->cov_xx;
        r.cov_xy = proj->cov_xy;
        r.cov_yy = proj->cov_yy;
        r.inv_xx = proj->cov_yy / det;
        r.inv_xy = -proj->cov_xy / det;
        r.inv_yy = proj->cov_xx / det;
        r.depth = proj->depth;
        r.alpha = alpha;

        // Conservative extent: past radius, alpha * exp(-r^2 / (2 lambda_max))
        // is below alpha_cutoff, so a binned-out splat can never pass the
        // per-pixel test. See docs/rendering.md.
        const T mid = (proj->cov_xx + proj->cov_yy) / T(2);
        const T half_diff = (proj->cov_xx - proj->cov_yy) / T(2);
        const T lam_max =
            mid + std::sqrt(half_diff * half_diff + proj->cov_xy * proj->cov_xy);
        const T need = T(2) * std::max(T(4.5), std::log(alpha / settings.alpha_cutoff));
        r.radius = std::sqrt(lam_max * need);

        // same math as evaluate_sh, without the per-splat temporary
        const Vec3<T> dir = (mu - campos).normalized();
        T basis_vals[16];
        sh::basis(dir, deg, basis_vals);
        const int nb = (deg + 1) * (deg + 1);
        for (int c = 0; c < 3; ++c) {
            T s = T(0.5);
            for (int k = 0; k < nb; ++k) s += set.sh.at(i, c, k) * basis_vals[k];
            r.color[static_cast<size_t>(c)] = std::max(T(0), s);
        }
        recs.push_back(r);
    }

    std::sort(recs.begin(), recs.end(), [](const SplatRecord<T>& a, const SplatRecord<T>& b2) {
        if (a.depth != b2.depth) return a.depth < b2.depth;
        return a.index < b2.index;
    });
    if (culled) *culled = n_culled;
    if (skipped_singular) *skipped_singular = n_singular;
    return recs;
}

/// One pixel, front к back over an ordered splat sequence. Emits composited
/// entries through `sink(record_pos, alpha_eff, g, t_before)` and returns
/// the final transmittance.
template <typename T, typename Iter, typename Sink>
T composite_pixel(T px, T py, Iter begin, Iter end, const std::vector<SplatRecord<T>>& recs,
                  const RenderSettings<T>& settings, std::array<T, 3>& color_out,
                  int32_t& count_out, Sink&& sink) {
    T trans = T(1);
    std::array<T, 3> color = {T(0), T(0), T(0)};
    int32_t count = 0;
    for (Iter it = begin; it != end; ++it) {
        const int32_t pos = *it;
        const SplatRecord<T>& r = recs[static_cast<size_t>(pos)];
        const T dx = px - r.mean_x;
        const T dy = py - r.mean_y;
        const T power = T(0.5) * (r.inv_xx * dx * dx + r.inv_yy * dy * dy) + r.inv_xy * dx * dy;
        if (!(power >= T(0))) continue; // numerical guard, mirrored in both paths
        const T g = std::exp(-power);
        const T alpha_eff = std::min(T(0.99), r.alpha * g);
        if (alpha_eff < settings.alpha_cutoff) continue;
        sink(pos, alpha_eff, g, trans);
        for (int c = 0; c < 3; ++c)
            color[static_cast<size_t>(c)] += r.color[static_cast<size_t>(c)] * alpha_eff * trans;
        trans *= (T(1) - alpha_eff);
        ++count;
        if (trans < settings.transmittance_floor) break;
    }
    for (int c = 0; c < 3; ++c)
        color[static_cast<size_t>(c)] += trans * settings.background[static_cast<size_t>(c)];
    color_out = color;
    count_out = count;
    return trans;
}

struct TileGrid {
    int tiles_x = 0, tiles_y = 0, tile = 16;
    int64_t w = 0, h = 0;
};

template <typename T>
std::vector<std::vector<int32_t>> bin_tiles(const std::vector<SplatRecord<T>>& recs,
                                            const TileGrid& grid) {
    std::vector<std::vector<int32_t>> bins(
        static_cast<size_t>(grid.tiles_x) * static_cast<size_t>(grid.tiles_y));
    for (int32_t pos = 0; pos < static_cast<int32_t>(recs.size()); ++pos) {
        const auto& r = recs[static_cast<size_t>(pos)];
        const double x0 = static_cast<double>(r.mean_x) - static_cast<double>(r.radius);
        const double x1 = static_cast<double>(r.mean_x) + static_cast<double>(r.radius);
        const double y0 = static_cast<double>(r.mean_y) - static_cast<double>(r.radius);
        const double y1 = static_cast<double>(r.mean_y) + static_cast<double>(r.radius);
        // tile t covers pixel centers [t*tile, min(extent-1, (t+1)*tile - 1)]
        int tx0 = static_cast<int>(std::floor(x0 / grid.tile));
        int tx1 = static_cast<int>(std::floor(x1 / grid.tile));
        int ty0 = static_cast<int>(std::floor(y0 / grid.tile));
        int ty1 = static_cast<int>(std::floor(y1 / grid.tile));
        tx0 = std::max(tx0, 0);
        ty0 = std::max(ty0, 0);
        tx1 = std::min(tx1, grid.tiles_x - 1);
        ty1 = std::min(ty1, grid.tiles_y - 1);
        for (int ty = ty0; ty <= ty1; ++ty)
            for (int tx = tx0; tx <= tx1; ++tx)
                bins[static_cast<size_t>(ty) * static_cast<size_t>(grid.tiles_x) +
                     static_cast<size_t>(tx)]
                    .push_back(pos);
    }
    return bins;
}

} // namespace raster_detail

/// Saved forward state for the backward pass: the projected splat records,
/// tile bins, and a snapshot of the inputs. Per-pixel weights are
/// recomputed in backward, keeping memory O(splats + pixels).
template <typename T>
struct RasterizeState {
    bool retained = false;
    int64_t height = 0, width = 0;
    RenderSettings<T> settings;
    Pose<T> pose;
    Camera cam;
    raster_detail::TileGrid grid;
    std::vector<raster_detail::SplatRecord<T>> records;
    std::vector<std::vector<int32_t>> bins;
    int sh_degree_used = 0;
    // input snapshot
    TArr<T> mu, quat, log_scales, opacity, sh;
};

/// Tiled production rasterizer. Splats are depth-sorted globally (index
/// tiebreak), binned by conservative screen radius, and composited front to
/// back per pixel; tiles are independent work items so any thread count
/// yields identical bits.
template <typename T>
RenderOutput<T> rasterize(const GaussianSet<T>& set, const Pose<T>& pose, const Camera& cam,
                          const RenderSettings<T>& settings,
                          RasterizeState<T>* state_out = nullptr) {
    settings.validate();
    const int64_t h = cam.height, w = cam.width;
    RenderOutput<T> out;
    out.image = TArr<T>({h, w, 3});
    out.transmittance = TArr<T>({h, w});
    out.contributors = TArr<int32_t>({h, w});

    auto recs = raster_detail::preprocess(set, pose, cam, settings, &out.culled,
                                          &out.skipped_singular);

    raster_detail::TileGrid grid;
    grid.tile = settings.tile;
    grid.w = w;
    grid.h = h;
    grid.tiles_x = static_cast<int>((w + settings.tile - 1) / settings.tile);
    grid.tiles_y = static_cast<int>((h + settings.tile - 1) / settings.tile);
    auto bins = raster_detail::bin_tiles(recs, grid);

    const int64_t n_tiles = static_cast<int64_t>(bins.size());
    parallel_for(n_tiles, [&](int64_t t) {
        const int ty = static_cast<int>(t) / grid.tiles_x;
        const int tx = static_cast<int>(t) % grid.tiles_x;
        const auto& bin = bins[static_cast<size_t>(t)];
        const int64_t y0 = static_cast<int64_t>(ty) * settings.tile;
        const int64_t y1 = std::min<int64_t>(h, y0 + settings.tile);
        const int64_t x0 = static_cast<int64_t>(tx) * settings.tile;
        const int64_t x1 = std::min<int64_t>(w, x0 + settings.tile);
        for (int64_t y = y0; y < y1; ++y)
            for (int64_t x = x0; x < x1; ++x) {
                std::array<T, 3> color;
                int32_t count = 0;
                const T trans = raster_detail::composite_pixel(
                    static_cast<T>(x), static_cast<T>(y), bin.begin(), bin.end(), recs,
                    settings, color, count, [](int32_t, T, T, T) {});
                for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = color[static_cast<size_t>(c)];
                out.transmittance.at(y, x) = trans;
                out.contributors.at(y, x) = count;
            }
    });

    if (state_out) {
        state_out->retained = true;
        state_out->height = h;
        state_out->width = w;
        state_out->settings = settings;
        state_out->pose = pose;
        state_out->cam = cam;
        state_out->grid = grid;
        state_out->records = std::move(recs);
        state_out->bins = std::move(bins);
        state_out->sh_degree_used = std::min(set.sh_degree, settings.sh_degree);
        state_out->mu = set.mu;
        state_out->quat = set.quat;
        state_out->log_scales = set.log_scales;
        state_out->opacity = set.opacity;
        state_out->sh = set.sh;
    }
    return out;
}

/// Brute-force verification path: every pixel walks the full depth-sorted
/// splat list with no tiling and no radius culling. Single-threaded and
/// deterministic by contract.
template <typename T>
RenderOutput<T> rasterize_oracle(const GaussianSet<T>& set, const Pose<T>& pose,
                                 const Camera& cam, const RenderSettings<T>& settings) {
    settings.validate();
    const int64_t h = cam.height, w = cam.width;
    RenderOutput<T> out;
    out.image = TArr<T>({h, w, 3});
    out.transmittance = TArr<T>({h, w});
    out.contributors = TArr<int32_t>({h, w});

    auto recs = raster_detail::preprocess(set, pose, cam, settings, &out.culled,
                                          &out.skipped_singular);
    std::vector<int32_t> all(recs.size());
    std::iota(all.begin(), all.end(), 0);

    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            std::array<T, 3> color;
            int32_t count = 0;
            const T trans = raster_detail::composite_pixel(
                static_cast<T>(x), static_cast<T>(y), all.begin(), all.end(), recs, settings,
                color, count, [](int32_t, T, T, T) {});
            for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = color[static_cast<size_t>(c)];
            out.transmittance.at(y, x) = trans;
            out.contributors.at(y, x) = count;
        }
    return out;
}

template <typename T>
struct GaussianGrads {
    TArr<T> mu;         // (J,3)
    TArr<T> quat;       // (J,4)
    TArr<T> log_scales; // (J,3)
    TArr<T> opacity;    // (J)
    TArr<T> sh;         // (J,3,B)
};

/// Analytic vector-Jacobian product of the full render. Stage 1 walks
/// pixels per tile (partials reduced in fixed tile order), stage 2 chains
/// screen-space cotangents through projection, covariance, and SH per
/// splat. Accumulation order is fixed, so results are thread-count
/// invariant.
template <typename T>
GaussianGrads<T> rasterize_backward(const TArr<T>& grad_image, const RasterizeState<T>& state) {
    if (!state.retained) throw StateError("rasterize_backward: forward state was not retained");
    const int64_t h = state.height, w = state.width;
    if (grad_image.dims != Shape{h, w, 3})
        throw ShapeError("rasterize_backward: grad_image must be (H,W,3)");

    const auto& recs = state.records;
    const int64_t n = static_cast<int64_t>(recs.size());
    const int64_t jn = state.mu.rank() ? state.mu.dim(0) : 0;
    const int b = state.sh.rank() == 3 ? static_cast<int>(state.sh.dim(2)) : 1;

    GaussianGrads<T> out;
    out.mu = TArr<T>({jn, 3});
    out.quat = TArr<T>({jn, 4});
    out.log_scales = TArr<T>({jn, 3});
    out.opacity = TArr<T>({jn});
    out.sh = TArr<T>({jn, 3, static_cast<int64_t>(b)});
    if (n == 0) return out;

    // Stage 1: screen-space cotangents per record.
    // Per-tile partial buffers indexed by bin position, reduced tile-major.
    struct ScreenGrad {
        double mean_x = 0, mean_y = 0;
        double inv_xx = 0, inv_xy = 0, inv_yy = 0;
        double color[3] = {0, 0, 0};
        double alpha = 0;
    };
    const int64_t n_tiles = static_cast<int64_t>(state.bins.size());
    std::vector<std::vector<ScreenGrad>> tile_partials(static_cast<size_t>(n_tiles));

    parallel_for(n_tiles, [&](int64_t t) {
        const auto& bin = state.bins[static_cast<size_t>(t)];
        if (bin.empty()) return;
        auto& partial = tile_partials[static_cast<size_t>(t)];
        partial.assign(bin.size(), ScreenGrad{});
        // map record position -> slot in this bin
        // bins hold positions in increasing order, so binary search works
        auto slot_of = [&bin](int32_t pos) {
            return static_cast<size_t>(
                std::lower_bound(bin.begin(), bin.end(), pos) - bin.begin());
        };

        const int ty = static_cast<int>(t) / state.grid.tiles_x;
        const int tx = static_cast<int>(t) % state.grid.tiles_x;
        const int64_t y0 = static_cast<int64_t>(ty) * state.settings.tile;
        const int64_t y1 = std::min<int64_t>(h, y0 + state.settings.tile);
        const int64_t x0 = static_cast<int64_t>(tx) * state.settings.tile;
        const int64_t x1 = std::min<int64_t>(w, x0 + state.settings.tile);

        struct Entry {
            int32_t pos;
            T alpha_eff, g, t_before, dx, dy;
        };
        std::vector<Entry> stack;
        stack.reserve(64);

        for (int64_t y = y0; y < y1; ++y)
            for (int64_t x = x0; x < x1; ++x) {
                stack.clear();
                std::array<T, 3> color;
                int32_t count = 0;
                const T t_final = raster_detail::composite_pixel(
                    static_cast<T>(x), static_cast<T>(y), bin.begin(), bin.end(), recs,
                    state.settings, color, count,
                    [&](int32_t pos, T alpha_eff, T g, T t_before) {
                        const auto& r = recs[static_cast<size_t>(pos)];
                        stack.push_back({pos, alpha_eff, g, t_before,
                                         static_cast<T>(x) - r.mean_x,
                                         static_cast<T>(y) - r.mean_y});
                    });

                const double gpix[3] = {static_cast<double>(grad_image.at(y, x, 0)),
                                        static_cast<double>(grad_image.at(y, x, 1)),
                                        static_cast<double>(grad_image.at(y, x, 2))};
                if (gpix[0] == 0 && gpix[1] == 0 && gpix[2] == 0) continue;

                // suffix contribution (including background) per channel
                double suffix[3];
                for (int c = 0; c < 3; ++c)
                    suffix[c] = static_cast<double>(t_final) *
                                static_cast<double>(state.settings.background[static_cast<size_t>(c)]);

                for (int64_t i = static_cast<int64_t>(stack.size()) - 1; i >= 0; --i) {
                    const Entry& e = stack[static_cast<size_t>(i)];
                    const auto& r = recs[static_cast<size_t>(e.pos)];
                    ScreenGrad& sg = partial[slot_of(e.pos)];

                    const double ae = static_cast<double>(e.alpha_eff);
                    const double tb = static_cast<double>(e.t_before);
                    double d_alpha_eff = 0;
                    for (int c = 0; c < 3; ++c) {
                        const double col = static_cast<double>(r.color[static_cast<size_t>(c)]);
                        d_alpha_eff += gpix[c] * (col * tb - suffix[c] / (1.0 - ae));
                        sg.color[c] += gpix[c] * ae * tb;
                        suffix[c] += col * ae * tb;
                    }

                    const bool ceiling = e.alpha_eff >= T(0.99); // min() clamp was active
                    if (!ceiling) {
                        const double g = static_cast<double>(e.g);
                        sg.alpha += d_alpha_eff * g;
                        const double d_g = d_alpha_eff * static_cast<double>(r.alpha);
                        const double d_power = -g * d_g;
                        const double dx = static_cast<double>(e.dx);
                        const double dy = static_cast<double>(e.dy);
                        sg.inv_xx += d_power * 0.5 * dx * dx;
                        sg.inv_xy += d_power * dx * dy;
                        sg.inv_yy += d_power * 0.5 * dy * dy;
                        const double ddx =
                            d_power * (static_cast<double>(r.inv_xx) * dx +
                                       static_cast<double>(r.inv_xy) * dy);
                        const double ddy =
                            d_power * (static_cast<double>(r.inv_xy) * dx +
                                       static_cast<double>(r.inv_yy) * dy);
                        sg.mean_x -= ddx;
                        sg.mean_y -= ddy;
                    }
                }
            }
    });

    // fixed-order reduction
    std::vector<ScreenGrad> screen(static_cast<size_t>(n));
    for (int64_t t = 0; t < n_tiles; ++t) {
        const auto& bin = state.bins[static_cast<size_t>(t)];
        const auto& partial = tile_partials[static_cast<size_t>(t)];
        if (partial.empty()) continue;
        for (size_t s = 0; s < bin.size(); ++s) {
            ScreenGrad& dst = screen[static_cast<size_t>(bin[s])];
            const ScreenGrad& src = partial[s];
            dst.mean_x += src.mean_x;
            dst.mean_y += src.mean_y;
            dst.inv_xx += src.inv_xx;
            dst.inv_xy += src.inv_xy;
            dst.inv_yy += src.inv_yy;
            for (int c = 0; c < 3; ++c) dst.color[c] += src.color[c];
            dst.alpha += src.alpha;
        }
    }

    // Stage 2: per-splat chain to primitive parameters (disjoint writes).
    const Vec3<T> campos = state.pose.origin();
    const int deg = state.sh_degree_used;
    parallel_for(n, [&](int64_t pos) {
        const auto& r = recs[static_cast<size_t>(pos)];
        const ScreenGrad& sg = screen[static_cast<size_t>(pos)];
        const int64_t i = r.index;

        out.opacity[i] = static_cast<T>(sg.alpha);

        // inverse covariance -> covariance: GC = -Lam * GLam * Lam
        const double lxx = static_cast<double>(r.inv_xx);
        const double lxy = static_cast<double>(r.inv_xy);
        const double lyy = static_cast<double>(r.inv_yy);
        const double ga = sg.inv_xx, gb = sg.inv_xy / 2.0, gc = sg.inv_yy;
        // M = GLam (full symmetric), P = Lam * M * Lam
        const double m00 = ga, m01 = gb, m10 = gb, m11 = gc;
        const double lm00 = lxx * m00 + lxy * m10;
        const double lm01 = lxx * m01 + lxy * m11;
        const double lm10 = lxy * m00 + lyy * m10;
        const double lm11 = lxy * m01 + lyy * m11;
        const double p00 = lm00 * lxx + lm01 * lxy;
        const double p01 = lm00 * lxy + lm01 * lyy;
        const double p10 = lm10 * lxx + lm11 * lxy;
        const double p11 = lm10 * lxy + lm11 * lyy;
        const double d_cov_xx = -p00;
        const double d_cov_xy = -(p01 + p10);
        const double d_cov_yy = -p11;

        // color -> sh coefficients and view direction
        const Vec3<T> mu = {state.mu.at(i, 0), state.mu.at(i, 1), state.mu.at(i, 2)};
        const Vec3<T> v = mu - campos;
        const T vnorm = v.norm();
        const Vec3<T> dir = {v.x / vnorm, v.y / vnorm, v.z / vnorm};
        T basis_vals[16];
        sh::basis(dir, deg, basis_vals);
        T basis_jac[16][3];
        sh::basis_jacobian(dir, deg, basis_jac);
        const int nb = (deg + 1) * (deg + 1);
        double ddir[3] = {0, 0, 0};
        for (int c = 0; c < 3; ++c) {
            // recompute pre-clamp value; clamped channels stop gradient
            double pre = 0.5;
            for (int k = 0; k < nb; ++k)
                pre += static_cast<double>(state.sh.at(i, c, k)) *
                       static_cast<double>(basis_vals[k]);
            if (pre < 0.0) continue;
            const double gcol = sg.color[c];
            if (gcol == 0.0) continue;
            for (int k = 0; k < nb; ++k) {
                out.sh.at(i, c, k) += static_cast<T>(gcol * static_cast<double>(basis_vals[k]));
                for (int a = 0; a < 3; ++a)
                    ddir[a] += gcol * static_cast<double>(state.sh.at(i, c, k)) *
                               static_cast<double>(basis_jac[k][a]);
            }
        }
        // dir = v/|v|
        const double dirv[3] = {static_cast<double>(dir.x), static_cast<double>(dir.y),
                                static_cast<double>(dir.z)};
        const double dot = ddir[0] * dirv[0] + ddir[1] * dirv[1] + ddir[2] * dirv[2];
        Vec3<T> dmu_color = {
            static_cast<T>((ddir[0] - dirv[0] * dot) / static_cast<double>(vnorm)),
            static_cast<T>((ddir[1] - dirv[1] * dot) / static_cast<double>(vnorm)),
            static_cast<T>((ddir[2] - dirv[2] * dot) / static_cast<double>(vnorm))};

        // projection chain
        const std::array<T, 4> q = {state.quat.at(i, 0), state.quat.at(i, 1),
                                    state.quat.at(i, 2), state.quat.at(i, 3)};
        const Vec3<T> ls = {state.log_scales.at(i, 0), state.log_scales.at(i, 1),
                            state.log_scales.at(i, 2)};
        const Mat3<T> sigma = build_covariance(q, ls);
        const auto pg = project_gaussian_vjp(
            mu, sigma, state.pose, state.cam, static_cast<T>(sg.mean_x),
            static_cast<T>(sg.mean_y), static_cast<T>(d_cov_xx), static_cast<T>(d_cov_xy),
            static_cast<T>(d_cov_yy), T(0));
        const auto cg = build_covariance_vjp(q, ls, pg.sigma);

        out.mu.at(i, 0) = pg.mu.x + dmu_color.x;
        out.mu.at(i, 1) = pg.mu.y + dmu_color.y;
        out.mu.at(i, 2) = pg.mu.z + dmu_color.z;
        for (int k = 0; k < 4; ++k) out.quat.at(i, k) = cg.quat[static_cast<size_t>(k)];
        out.log_scales.at(i, 0) = cg.log_scales.x;
        out.log_scales.at(i, 1) = cg.log_scales.y;
        out.log_scales.at(i, 2) = cg.log_scales.z;
    });

    return out;
}

// ---------------------------------------------------------------------------
// Tape integration

template <typename T>
struct RasterizeNode {
    Var<T> image;
    std::shared_ptr<RenderOutput<T>> output;
};

/// Record the render as a tape node over the decoded Gaussian fields.
template <typename T>
RasterizeNode<T> rasterize_node(Workspace<T>& ws, const DecodedGaussians<T>& dec,
                                const GaussianSet<T>& set, const Pose<T>& pose,
                                const Camera& cam, const RenderSettings<T>& settings) {
    auto state = std::make_shared<RasterizeState<T>>();
    auto output = std::make_shared<RenderOutput<T>>(rasterize(set, pose, cam, settings,
                                                              state.get()));
    Graph<T>& g = ws.g;
    const int id_mu = dec.mu.id, id_q = dec.quat.id, id_ls = dec.log_scales.id,
              id_op = dec.opacity.id, id_sh = dec.sh.id;
    const bool req = g.wants_grad(id_mu) || g.wants_grad(id_q) || g.wants_grad(id_ls) ||
                     g.wants_grad(id_op) || g.wants_grad(id_sh);
    const int id = g.add_node(output->image, req);
    g.node(id).backward = [id, id_mu, id_q, id_ls, id_op, id_sh, state](Graph<T>& gr) {
        const TArr<T>& go = gr.node(id).grad;
        auto grads = rasterize_backward(go, *state);
        auto accum = [&gr](int target, const TArr<T>& src) {
            if (!gr.wants_grad(target)) return;
            TArr<T>& dst = gr.grad_buf(target);
            for (int64_t k = 0; k < src.numel(); ++k) dst[k] += src[k];
        };
        accum(id_mu, grads.mu);
        accum(id_q, grads.quat);
        accum(id_ls, grads.log_scales);
        accum(id_op, grads.opacity);
        accum(id_sh, grads.sh);
    };
    return {Var<T>{&g, id}, output};
}

} // namespace svsplat
