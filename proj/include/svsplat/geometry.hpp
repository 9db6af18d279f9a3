#pragma once

#include "svsplat/errors.hpp"
#include "svsplat/tensor.hpp"

#include <array>
#include <cmath>
#include <optional>
#include <string>

namespace svsplat {

template <typename T>
struct Vec3 {
    T x = 0, y = 0, z = 0;

    Vec3() = default;
    Vec3(T x_, T y_, T z_) : x(x_), y(y_), z(z_) {}

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(T s) const { return {x * s, y * s, z * s}; }
    Vec3 operator-() const { return {-x, -y, -z}; }
    T dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    T norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const {
        const T n = norm();
        if (n == T(0)) throw ValidationError("cannot normalize zero vector");
        return {x / n, y / n, z / n};
    }
};

template <typename T>
struct Mat3 {
    // row-major
    std::array<T, 9> m{};

    static Mat3 identity() {
        Mat3 r;
        r.m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
        return r;
    }
    static Mat3 diag(T a, T b, T c) {
        Mat3 r;
        r.m = {a, 0, 0, 0, b, 0, 0, 0, c};
        return r;
    }

    T& operator()(int i, int j) { return m[static_cast<size_t>(3 * i + j)]; }
    T operator()(int i, int j) const { return m[static_cast<size_t>(3 * i + j)]; }

    Mat3 operator+(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 9; ++i) r.m[i] = m[i] + o.m[i];
        return r;
    }
    Mat3 operator*(T s) const {
        Mat3 r;
        for (int i = 0; i < 9; ++i) r.m[i] = m[i] * s;
        return r;
    }
    Mat3 operator*(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                T s = 0;
                for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
                r(i, j) = s;
            }
        return r;
    }
    Vec3<T> operator*(const Vec3<T>& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
                m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }
    Mat3 transposed() const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
        return r;
    }
    T det() const {
        return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
               m[2] * (m[3] * m[7] - m[4] * m[6]);
    }
};

/// Pinhole intrinsics. The published formulation uses K = diag(fx, fy, 1);
/// that is the cx = cy = 0 special case here.
struct Camera {
    double fx = 1, fy = 1, cx = 0, cy = 0;
    int64_t width = 1, height = 1;

    void validate() const {
        if (!(fx > 0) || !(fy > 0)) throw ValidationError("focal lengths must be positive");
        if (!(cx >= 0 && cx < static_cast<double>(width)))
            throw ValidationError("cx out of image bounds");
        if (!(cy >= 0 && cy < static_cast<double>(height)))
            throw ValidationError("cy out of image bounds");
    }
};

/// Rigid transform p -> R p + t. Direction (world-to-camera vs
/// source-to-target) is by usage context.
template <typename T>
struct Pose {
    Mat3<T> rot = Mat3<T>::identity();
    Vec3<T> trans{};

    Vec3<T> apply(const Vec3<T>& p) const { return rot * p + trans; }

    Pose inverse() const {
        Pose r;
        r.rot = rot.transposed();
        r.trans = -(r.rot * trans);
        return r;
    }
    /// this ∘ other (apply `other` first).
    Pose compose(const Pose& other) const {
        Pose r;
        r.rot = rot * other.rot;
        r.trans = rot * other.trans + trans;
        return r;
    }
    /// Camera origin expressed in the source frame of this transform.
    Vec3<T> origin() const { return -(rot.transposed() * trans); }

    void validate(double tol = 1e-6) const {
        const Mat3<T> should_be_i = rot.transposed() * rot;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                const double want = i == j ? 1.0 : 0.0;
                if (std::abs(static_cast<double>(should_be_i(i, j)) - want) > tol)
                    throw ValidationError("pose rotation is not orthonormal");
            }
        if (std::abs(static_cast<double>(rot.det()) - 1.0) > tol)
            throw ValidationError("pose rotation determinant is not +1");
    }
};

/// One pixel-aligned Gaussian in the source camera frame.
template <typename T>
struct GaussianPrimitive {
    Vec3<T> mu;               // center, meters
    T opacity = T(0.5);       // in (0,1)
    std::array<T, 4> quat = {1, 0, 0, 0}; // unit (w,x,y,z)
    Vec3<T> log_scales{};     // ln of per-axis scale, meters
    std::vector<T> sh;        // (3, (deg+1)^2) row-major
};

// ---------------------------------------------------------------------------
// Quaternion helpers

template <typename T>
std::array<T, 4> quat_normalize(const std::array<T, 4>& q) {
    const T n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    if (n == T(0)) throw ValidationError("zero quaternion");
    return {q[0] / n, q[1] / n, q[2] / n, q[3] / n};
}

template <typename T>
std::array<T, 4> quat_mul(const std::array<T, 4>& a, const std::array<T, 4>& b) {
    return {a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
            a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
            a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
            a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]};
}

/// Rotation matrix of a unit quaternion (w,x,y,z).
template <typename T>
Mat3<T> quat_to_rot(const std::array<T, 4>& q) {
    const T w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3<T> r;
    r.m = {1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
           2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
           2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)};
    return r;
}

/// d(quat_to_rot)/dq_k for a unit quaternion, k in {w,x,y,z}.
template <typename T>
Mat3<T> quat_rot_partial(const std::array<T, 4>& q, int k) {
    const T w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3<T> d;
    switch (k) {
    case 0: d.m = {0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0}; break;
    case 1: d.m = {0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x}; break;
    case 2: d.m = {-4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y}; break;
    default: d.m = {-4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0}; break;
    }
    return d;
}

// ---------------------------------------------------------------------------
// unproject_depth

/// Back-project a depth map: p(u) = ((ux-cx) d / fx, (uy-cy) d / fy, d).
/// Output is (H, W, 3); the z channel equals the input depth exactly.
template <typename T>
TArr<T> unproject_depth(const TArr<T>& depth, const Camera& cam) {
    if (depth.rank() != 2) throw ShapeError("depth must be (H,W)");
    const int64_t h = depth.dim(0), w = depth.dim(1);
    TArr<T> pts({h, w, 3});
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            const T d = depth.at(y, x);
            if (!(d > T(0)))
                throw ValidationError("nonpositive depth at pixel (" + std::to_string(x) + "," +
                                      std::to_string(y) + ")");
            pts.at(y, x, 0) = (static_cast<T>(x) - static_cast<T>(cam.cx)) * d / static_cast<T>(cam.fx);
            pts.at(y, x, 1) = (static_cast<T>(y) - static_cast<T>(cam.cy)) * d / static_cast<T>(cam.fy);
            pts.at(y, x, 2) = d;
        }
    return pts;
}

/// VJP of unproject_depth with respect to depth.
template <typename T>
TArr<T> unproject_depth_vjp(const TArr<T>& grad_points, const Camera& cam) {
    const int64_t h = grad_points.dim(0), w = grad_points.dim(1);
    TArr<T> gd({h, w});
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            const T gx = grad_points.at(y, x, 0);
            const T gy = grad_points.at(y, x, 1);
            const T gz = grad_points.at(y, x, 2);
            gd.at(y, x) = gx * (static_cast<T>(x) - static_cast<T>(cam.cx)) / static_cast<T>(cam.fx) +
                          gy * (static_cast<T>(y) - static_cast<T>(cam.cy)) / static_cast<T>(cam.fy) + gz;
        }
    return gd;
}

// ---------------------------------------------------------------------------
// gaussian_centers

/// Assemble Gaussian centers from refined depth and 3D offsets:
///   mu = ((ux-cx)(d+delta)/fx + Dx, (uy-cy)(d+delta)/fy + Dy, (d+delta) + Dz)
/// delta is (H,W,G), offsets is (H,W,G,3); output is (H*W*G, 3) with
/// primitive j = (y*W + x)*G + g.
template <typename T>
TArr<T> gaussian_centers(const TArr<T>& depth, const TArr<T>& delta, const TArr<T>& offsets,
                         const Camera& cam) {
    if (depth.rank() != 2) throw ShapeError("depth must be (H,W)");
    if (delta.rank() != 3) throw ShapeError("delta must be (H,W,G)");
    if (offsets.rank() != 4 || offsets.dim(3) != 3) throw ShapeError("offsets must be (H,W,G,3)");
    const int64_t h = depth.dim(0), w = depth.dim(1), g = delta.dim(2);
    if (delta.dim(0) != h || delta.dim(1) != w || offsets.dim(0) != h || offsets.dim(1) != w ||
        offsets.dim(2) != g)
        throw ShapeError("depth/delta/offsets extents disagree");

    TArr<T> mu({h * w * g, 3});
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t k = 0; k < g; ++k) {
                const T dref = depth.at(y, x) + delta.at(y, x, k);
                if (!(dref > T(0)))
                    throw ValidationError("refined depth nonpositive at pixel (" +
                                          std::to_string(x) + "," + std::to_string(y) + ") set " +
                                          std::to_string(k));
                const int64_t j = (y * w + x) * g + k;
                mu.at(j, 0) = (static_cast<T>(x) - static_cast<T>(cam.cx)) * dref / static_cast<T>(cam.fx) +
                              offsets.at(y, x, k, 0);
                mu.at(j, 1) = (static_cast<T>(y) - static_cast<T>(cam.cy)) * dref / static_cast<T>(cam.fy) +
                              offsets.at(y, x, k, 1);
                mu.at(j, 2) = dref + offsets.at(y, x, k, 2);
            }
    return mu;
}

template <typename T>
struct GaussianCentersGrads {
    TArr<T> depth;   // (H,W)
    TArr<T> delta;   // (H,W,G)
    TArr<T> offsets; // (H,W,G,3)
};

template <typename T>
GaussianCentersGrads<T> gaussian_centers_vjp(const TArr<T>& grad_mu, int64_t h, int64_t w,
                                             int64_t g, const Camera& cam) {
    GaussianCentersGrads<T> out{TArr<T>({h, w}), TArr<T>({h, w, g}), TArr<T>({h, w, g, 3})};
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t k = 0; k < g; ++k) {
                const int64_t j = (y * w + x) * g + k;
                const T gx = grad_mu.at(j, 0), gy = grad_mu.at(j, 1), gz = grad_mu.at(j, 2);
                const T ddref = gx * (static_cast<T>(x) - static_cast<T>(cam.cx)) / static_cast<T>(cam.fx) +
                                gy * (static_cast<T>(y) - static_cast<T>(cam.cy)) / static_cast<T>(cam.fy) + gz;
                out.depth.at(y, x) += ddref;
                out.delta.at(y, x, k) = ddref;
                out.offsets.at(y, x, k, 0) = gx;
                out.offsets.at(y, x, k, 1) = gy;
                out.offsets.at(y, x, k, 2) = gz;
            }
    return out;
}

// ---------------------------------------------------------------------------
// build_covariance

/// Sigma = R S S^T R^T with S = diag(exp(log_scales)) and R from the
/// normalized quaternion. Symmetric PSD by construction.
template <typename T>
Mat3<T> build_covariance(const std::array<T, 4>& quat, const Vec3<T>& log_scales) {
    const auto q = quat_normalize(quat);
    const Mat3<T> r = quat_to_rot(q);
    const Mat3<T> d = Mat3<T>::diag(std::exp(T(2) * log_scales.x), std::exp(T(2) * log_scales.y),
                                    std::exp(T(2) * log_scales.z));
    return r * d * r.transposed();
}

template <typename T>
struct CovarianceGrads {
    std::array<T, 4> quat{};
    Vec3<T> log_scales{};
};

/// VJP of build_covariance. grad_sigma may be an arbitrary 3x3 cotangent.
template <typename T>
CovarianceGrads<T> build_covariance_vjp(const std::array<T, 4>& quat, const Vec3<T>& log_scales,
                                        const Mat3<T>& grad_sigma) {
    const T qn = std::sqrt(quat[0] * quat[0] + quat[1] * quat[1] + quat[2] * quat[2] + quat[3] * quat[3]);
    if (qn == T(0)) throw ValidationError("zero quaternion");
    const std::array<T, 4> q = {quat[0] / qn, quat[1] / qn, quat[2] / qn, quat[3] / qn};
    const Mat3<T> r = quat_to_rot(q);
    const T d0 = std::exp(T(2) * log_scales.x);
    const T d1 = std::exp(T(2) * log_scales.y);
    const T d2 = std::exp(T(2) * log_scales.z);

    // dL/dD_k = (R^T G R)_kk ; dL/dR = (G + G^T) R D
    const Mat3<T> rtgr = r.transposed() * grad_sigma * r;
    CovarianceGrads<T> out;
    out.log_scales = {rtgr(0, 0) * T(2) * d0, rtgr(1, 1) * T(2) * d1, rtgr(2, 2) * T(2) * d2};

    const Mat3<T> gsym = grad_sigma + grad_sigma.transposed();
    const Mat3<T> dr = gsym * r * Mat3<T>::diag(d0, d1, d2);

    std::array<T, 4> dq_hat{};
    for (int k = 0; k < 4; ++k) {
        const Mat3<T> p = quat_rot_partial(q, k);
        T s = 0;
        for (int i = 0; i < 9; ++i) s += dr.m[static_cast<size_t>(i)] * p.m[static_cast<size_t>(i)];
        dq_hat[static_cast<size_t>(k)] = s;
    }
    // Through normalization: dq = (I - q q^T) dq_hat / |quat|.
    T proj = 0;
    for (int k = 0; k < 4; ++k) proj += q[static_cast<size_t>(k)] * dq_hat[static_cast<size_t>(k)];
    for (int k = 0; k < 4; ++k)
        out.quat[static_cast<size_t>(k)] = (dq_hat[static_cast<size_t>(k)] - q[static_cast<size_t>(k)] * proj) / qn;
    return out;
}

// ---------------------------------------------------------------------------
// project_gaussian (EWA splatting projection)

/// Screen-space projection of one Gaussian.
template <typename T>
struct ProjectedGaussian {
    T mean_x = 0, mean_y = 0;    // pixels
    T cov_xx = 0, cov_xy = 0, cov_yy = 0; // 2x2 screen covariance
    T depth = 0;                 // camera-space z
};

/// Low-pass floor added to the screen covariance diagonal so sub-pixel
/// splats cannot vanish under discrete sampling.
inline constexpr double kCov2dEps = 0.3;

/// Perspective projection of (mu, Sigma) through `pose` into `cam`.
/// Returns nullopt (a cull signal, not an error) when the camera-space
/// depth falls outside (near, far).
template <typename T>
std::optional<ProjectedGaussian<T>> project_gaussian(const Vec3<T>& mu, const Mat3<T>& sigma,
                                                     const Pose<T>& pose, const Camera& cam,
                                                     T near, T far) {
    const Vec3<T> t = pose.apply(mu);
    if (!(t.z > near) || !(t.z < far)) return std::nullopt;

    const T fx = static_cast<T>(cam.fx), fy = static_cast<T>(cam.fy);
    const T inv_z = T(1) / t.z;

    ProjectedGaussian<T> out;
    out.mean_x = fx * t.x * inv_z + static_cast<T>(cam.cx);
    out.mean_y = fy * t.y * inv_z + static_cast<T>(cam.cy);
    out.depth = t.z;

    // J = [fx/z, 0, -fx x/z^2 ; 0, fy/z, -fy y/z^2], B = J W with W = pose.rot
    const T j00 = fx * inv_z, j02 = -fx * t.x * inv_z * inv_z;
    const T j11 = fy * inv_z, j12 = -fy * t.y * inv_z * inv_z;
    T b[2][3];
    for (int c = 0; c < 3; ++c) {
        b[0][c] = j00 * pose.rot(0, c) + j02 * pose.rot(2, c);
        b[1][c] = j11 * pose.rot(1, c) + j12 * pose.rot(2, c);
    }
    // cov2d = B Sigma B^T + eps I
    T bs[2][3];
    for (int i = 0; i < 2; ++i)
        for (int c = 0; c < 3; ++c)
            bs[i][c] = b[i][0] * sigma(0, c) + b[i][1] * sigma(1, c) + b[i][2] * sigma(2, c);
    const T eps = static_cast<T>(kCov2dEps);
    out.cov_xx = bs[0][0] * b[0][0] + bs[0][1] * b[0][1] + bs[0][2] * b[0][2] + eps;
    out.cov_xy = bs[0][0] * b[1][0] + bs[0][1] * b[1][1] + bs[0][2] * b[1][2];
    out.cov_yy = bs[1][0] * b[1][0] + bs[1][1] * b[1][1] + bs[1][2] * b[1][2] + eps;
    return out;
}

template <typename T>
struct ProjectionGrads {
    Vec3<T> mu{};
    Mat3<T> sigma{}; // cotangent w.r.t. all 9 entries
};

/// VJP of project_gaussian for a non-culled splat. Cotangents:
/// (d_mean_x, d_mean_y), symmetric-packed d_cov (xx, xy, yy — xy counted
/// once), and d_depth.
template <typename T>
ProjectionGrads<T> project_gaussian_vjp(const Vec3<T>& mu, const Mat3<T>& sigma,
                                        const Pose<T>& pose, const Camera& cam, T d_mean_x,
                                        T d_mean_y, T d_cov_xx, T d_cov_xy, T d_cov_yy,
                                        T d_depth) {
    const Vec3<T> t = pose.apply(mu);
    const T fx = static_cast<T>(cam.fx), fy = static_cast<T>(cam.fy);
    const T inv_z = T(1) / t.z;
    const T inv_z2 = inv_z * inv_z;

    const T j00 = fx * inv_z, j02 = -fx * t.x * inv_z2;
    const T j11 = fy * inv_z, j12 = -fy * t.y * inv_z2;
    T b[2][3];
    for (int c = 0; c < 3; ++c) {
        b[0][c] = j00 * pose.rot(0, c) + j02 * pose.rot(2, c);
        b[1][c] = j11 * pose.rot(1, c) + j12 * pose.rot(2, c);
    }

    // The forward emits one packed xy value, so its cotangent occupies a
    // single off-diagonal slot of the 2x2 matrix cotangent G. Callers that
    // differentiate through the full symmetric matrix pass the sum of both
    // off-diagonal cotangents here.
    const T g00 = d_cov_xx, g11 = d_cov_yy, g01 = d_cov_xy, g10 = T(0);

    ProjectionGrads<T> out;

    // dSigma = B^T G B (general, no symmetrization of Sigma itself)
    T gb[2][3]; // G * B
    for (int c = 0; c < 3; ++c) {
        gb[0][c] = g00 * b[0][c] + g01 * b[1][c];
        gb[1][c] = g10 * b[0][c] + g11 * b[1][c];
    }
    for (int rI = 0; rI < 3; ++rI)
        for (int c = 0; c < 3; ++c)
            out.sigma(rI, c) = b[0][rI] * gb[0][c] + b[1][rI] * gb[1][c];

    // dB = G B Sigma^T + G^T B Sigma
    T bst[2][3]; // B * Sigma^T
    T bs[2][3];  // B * Sigma
    for (int i = 0; i < 2; ++i)
        for (int c = 0; c < 3; ++c) {
            bst[i][c] = b[i][0] * sigma(c, 0) + b[i][1] * sigma(c, 1) + b[i][2] * sigma(c, 2);
            bs[i][c] = b[i][0] * sigma(0, c) + b[i][1] * sigma(1, c) + b[i][2] * sigma(2, c);
        }
    T db[2][3];
    for (int c = 0; c < 3; ++c) {
        db[0][c] = g00 * bst[0][c] + g01 * bst[1][c] + g00 * bs[0][c] + g10 * bs[1][c];
        db[1][c] = g10 * bst[0][c] + g11 * bst[1][c] + g01 * bs[0][c] + g11 * bs[1][c];
    }

    // dJ from dB (B = J W): dJ = dB W^T. Only entries (0,0),(0,2),(1,1),(1,2) vary.
    T dj00 = 0, dj02 = 0, dj11 = 0, dj12 = 0;
    for (int c = 0; c < 3; ++c) {
        dj00 += db[0][c] * pose.rot(0, c);
        dj02 += db[0][c] * pose.rot(2, c);
        dj11 += db[1][c] * pose.rot(1, c);
        dj12 += db[1][c] * pose.rot(2, c);
    }

    // Chain J entries and mean/depth into t.
    Vec3<T> dt{};
    dt.x += d_mean_x * fx * inv_z;
    dt.y += d_mean_y * fy * inv_z;
    dt.z += -(d_mean_x * fx * t.x + d_mean_y * fy * t.y) * inv_z2;
    dt.z += d_depth;
    // dJ00/dz = -fx/z^2 ; dJ02/dx = -fx/z^2 ; dJ02/dz = 2 fx x / z^3
    dt.z += dj00 * (-fx * inv_z2);
    dt.x += dj02 * (-fx * inv_z2);
    dt.z += dj02 * (T(2) * fx * t.x * inv_z2 * inv_z);
    dt.z += dj11 * (-fy * inv_z2);
    dt.y += dj12 * (-fy * inv_z2);
    dt.z += dj12 * (T(2) * fy * t.y * inv_z2 * inv_z);

    out.mu = pose.rot.transposed() * dt;
    return out;
}

} // namespace svsplat
