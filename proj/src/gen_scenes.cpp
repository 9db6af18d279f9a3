#include "svsplat/gen_scenes.hpp"

#include "svsplat/rng.hpp"
#include "svsplat/tensor_io.hpp"

#include <algorithm>
#include <cmath>

namespace svsplat {

namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.14159265358979323846;

const Vec3<double> kWallPalette[kWallPaletteSize] = {
    {0.85, 0.80, 0.70}, {0.55, 0.65, 0.85}, {0.75, 0.55, 0.55},
    {0.60, 0.78, 0.62}, {0.80, 0.72, 0.88}, {0.90, 0.85, 0.55},
};

const Vec3<double> kObjectPalette[8] = {
    {0.90, 0.25, 0.20}, {0.20, 0.55, 0.90}, {0.95, 0.75, 0.15}, {0.30, 0.75, 0.35},
    {0.80, 0.35, 0.75}, {0.25, 0.80, 0.80}, {0.95, 0.55, 0.30}, {0.55, 0.45, 0.90},
};

struct Hit {
    double s = -1;      // ray parameter (equals z-depth for our ray setup)
    Vec3<double> normal;
    Vec3<double> albedo;
    bool valid() const { return s > 1e-9; }
};

Hit intersect_sphere(const Vec3<double>& o, const Vec3<double>& d, const SyntheticSphere& sp) {
    Hit h;
    const Vec3<double> oc = o - sp.center;
    const double a = d.dot(d);
    const double b = 2.0 * d.dot(oc);
    const double c = oc.dot(oc) - sp.radius * sp.radius;
    const double disc = b * b - 4 * a * c;
    if (disc < 0) return h;
    const double sq = std::sqrt(disc);
    double s = (-b - sq) / (2 * a);
    if (s <= 1e-9) s = (-b + sq) / (2 * a);
    if (s <= 1e-9) return h;
    h.s = s;
    h.normal = (o + d * s - sp.center).normalized();
    h.albedo = sp.albedo;
    return h;
}

Hit intersect_box(const Vec3<double>& o, const Vec3<double>& d, const SyntheticBox& bx) {
    Hit h;
    double t0 = -1e30, t1 = 1e30;
    int axis0 = -1;
    const double ov[3] = {o.x, o.y, o.z};
    const double dv[3] = {d.x, d.y, d.z};
    const double lov[3] = {bx.lo.x, bx.lo.y, bx.lo.z};
    const double hiv[3] = {bx.hi.x, bx.hi.y, bx.hi.z};
    for (int a = 0; a < 3; ++a) {
        if (dv[a] == 0.0) {
            if (ov[a] < lov[a] || ov[a] > hiv[a]) return h;
            continue;
        }
        double ta = (lov[a] - ov[a]) / dv[a];
        double tb = (hiv[a] - ov[a]) / dv[a];
        if (ta > tb) std::swap(ta, tb);
        if (ta > t0) {
            t0 = ta;
            axis0 = a;
        }
        t1 = std::min(t1, tb);
        if (t0 > t1) return h;
    }
    if (t0 <= 1e-9 || axis0 < 0) return h;
    h.s = t0;
    Vec3<double> n{};
    if (axis0 == 0) n.x = dv[0] > 0 ? -1 : 1;
    if (axis0 == 1) n.y = dv[1] > 0 ? -1 : 1;
    if (axis0 == 2) n.z = dv[2] > 0 ? -1 : 1;
    h.normal = n;
    h.albedo = bx.albedo;
    return h;
}

/// Exit intersection with the inward-facing room cube.
Hit intersect_room(const Vec3<double>& o, const Vec3<double>& d, const SceneModel& m) {
    Hit h;
    double t_exit = 1e30;
    int axis = -1;
    const double ov[3] = {o.x, o.y, o.z};
    const double dv[3] = {d.x, d.y, d.z};
    for (int a = 0; a < 3; ++a) {
        if (dv[a] == 0.0) continue;
        const double ta = (-m.room_half - ov[a]) / dv[a];
        const double tb = (m.room_half - ov[a]) / dv[a];
        const double tfar = std::max(ta, tb);
        if (tfar < t_exit) {
            t_exit = tfar;
            axis = a;
        }
    }
    if (axis < 0) return h;
    h.s = t_exit;
    Vec3<double> n{};
    if (axis == 0) n.x = dv[0] > 0 ? -1 : 1;
    if (axis == 1) n.y = dv[1] > 0 ? -1 : 1;
    if (axis == 2) n.z = dv[2] > 0 ? -1 : 1;
    h.normal = n;
    // subtle per-face tint keeps walls distinguishable
    double tint = 1.0;
    if (axis == 1) tint = n.y > 0 ? 0.8 : 1.1;
    h.albedo = {std::min(1.0, m.wall_albedo.x * tint), std::min(1.0, m.wall_albedo.y * tint),
                std::min(1.0, m.wall_albedo.z * tint)};
    return h;
}

Vec3<double> shade(const Hit& h, const Vec3<double>& light) {
    const double lambert = std::max(0.0, h.normal.dot(light));
    const double k = 0.35 + 0.65 * lambert;
    return {std::min(1.0, h.albedo.x * k), std::min(1.0, h.albedo.y * k),
            std::min(1.0, h.albedo.z * k)};
}

Pose<double> look_at(const Vec3<double>& pos, const Vec3<double>& target) {
    const Vec3<double> fwd = (target - pos).normalized();
    Vec3<double> down{0, -1, 0};
    down = down - fwd * down.dot(fwd);
    if (down.norm() < 1e-9) throw ValidationError("degenerate look-at (viewing straight down)");
    down = down.normalized();
    const Vec3<double> right = down.cross(fwd);
    Pose<double> c2w;
    c2w.rot(0, 0) = right.x;
    c2w.rot(1, 0) = right.y;
    c2w.rot(2, 0) = right.z;
    c2w.rot(0, 1) = down.x;
    c2w.rot(1, 1) = down.y;
    c2w.rot(2, 1) = down.z;
    c2w.rot(0, 2) = fwd.x;
    c2w.rot(1, 2) = fwd.y;
    c2w.rot(2, 2) = fwd.z;
    c2w.trans = pos;
    return c2w;
}

} // namespace

Camera synthetic_camera(const SyntheticSceneSpec& spec) {
    Camera cam;
    cam.width = spec.width;
    cam.height = spec.height;
    cam.fx = 0.75 * static_cast<double>(spec.width);
    cam.fy = cam.fx;
    cam.cx = (static_cast<double>(spec.width) - 1.0) / 2.0;
    cam.cy = (static_cast<double>(spec.height) - 1.0) / 2.0;
    cam.validate();
    return cam;
}

SceneModel build_scene_model(const SyntheticSceneSpec& spec, int scene_index) {
    SceneModel m;
    Rng rng = Rng(spec.seed).split("scene").split(static_cast<uint64_t>(scene_index));
    m.wall_class = static_cast<int>(rng.index(kWallPaletteSize));
    m.wall_albedo = kWallPalette[m.wall_class];
    m.theta0 = 2.0 * kPi * static_cast<double>(scene_index) / std::max(1, spec.count) +
               rng.uniform(-0.15, 0.15);

    for (int i = 0; i < spec.objects; ++i) {
        const Vec3<double> albedo = kObjectPalette[rng.index(8)];
        const Vec3<double> center{rng.uniform(-1.0, 1.0), rng.uniform(-0.6, 0.6),
                                  rng.uniform(-1.0, 1.0)};
        if (i % 2 == 0) {
            m.spheres.push_back({center, rng.uniform(0.25, 0.5), albedo});
        } else {
            const Vec3<double> half{rng.uniform(0.2, 0.45), rng.uniform(0.2, 0.45),
                                    rng.uniform(0.2, 0.45)};
            m.boxes.push_back({center - half, center + half, albedo});
        }
    }
    return m;
}

Pose<double> orbit_pose(const SyntheticSceneSpec& spec, const SceneModel& model,
                        int frame_offset) {
    const double theta =
        model.theta0 + static_cast<double>(frame_offset) * spec.frame_step_deg * kPi / 180.0;
    const Vec3<double> pos{spec.orbit_radius * std::sin(theta), spec.orbit_height,
                           spec.orbit_radius * std::cos(theta)};
    return look_at(pos, {0, 0, 0});
}

void render_synthetic(const SceneModel& model, const Pose<double>& world_from_cam,
                      const Camera& cam, TArr<double>& image, TArr<double>& depth) {
    const int64_t h = cam.height, w = cam.width;
    image = TArr<double>({h, w, 3});
    depth = TArr<double>({h, w});
    const Vec3<double> origin = world_from_cam.trans;
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            const Vec3<double> dir_cam{(static_cast<double>(x) - cam.cx) / cam.fx,
                                       (static_cast<double>(y) - cam.cy) / cam.fy, 1.0};
            const Vec3<double> dir = world_from_cam.rot * dir_cam; // s equals z-depth
            Hit best = intersect_room(origin, dir, model);
            for (const auto& sp : model.spheres) {
                const Hit hit = intersect_sphere(origin, dir, sp);
                if (hit.valid() && (!best.valid() || hit.s < best.s)) best = hit;
            }
            for (const auto& bx : model.boxes) {
                const Hit hit = intersect_box(origin, dir, bx);
                if (hit.valid() && (!best.valid() || hit.s < best.s)) best = hit;
            }
            if (!best.valid())
                throw StateError("synthetic ray escaped the room (generator bug)");
            const Vec3<double> c = shade(best, model.light);
            image.at(y, x, 0) = c.x;
            image.at(y, x, 1) = c.y;
            image.at(y, x, 2) = c.z;
            depth.at(y, x) = best.s;
        }
}

TArr<double> synthetic_tokens(const SyntheticSceneSpec& spec, const SceneModel& model,
                              int scene_index) {
    Rng rng = Rng(spec.seed).split("tokens").split(static_cast<uint64_t>(scene_index));
    TArr<double> tokens({spec.token_count, spec.token_dim});
    for (int64_t i = 0; i < spec.token_count; ++i)
        for (int64_t j = 0; j < spec.token_dim; ++j) {
            double v = 0.1 * rng.normal();
            if (j == model.wall_class % spec.token_dim) v += 1.0;
            tokens.at(i, j) = v;
        }
    return tokens;
}

void gen_scenes(const SyntheticSceneSpec& spec, const fs::path& out_dir) {
    if (spec.count < 1) throw ValidationError("scene count must be >= 1");
    fs::create_directories(out_dir);
    const Camera cam = synthetic_camera(spec);

    TArr<double> k({3, 3});
    k.at(0, 0) = cam.fx;
    k.at(1, 1) = cam.fy;
    k.at(0, 2) = cam.cx;
    k.at(1, 2) = cam.cy;
    k.at(2, 2) = 1.0;

    for (int s = 0; s < spec.count; ++s) {
        const SceneModel model = build_scene_model(spec, s);
        char name[32];
        std::snprintf(name, sizeof(name), "scene_%03d", s);
        const fs::path dir = out_dir / name;
        fs::create_directories(dir);

        const Pose<double> src = orbit_pose(spec, model, 0);
        TArr<double> image, depth;
        render_synthetic(model, src, cam, image, depth);
        write_tensor(dir / "image.ctst", Tensor::from_array(image, spec.precision));
        write_tensor(dir / "depth.ctst", Tensor::from_array(depth, spec.precision));
        write_tensor(dir / "intrinsics.ctst", Tensor::from_f64(k));
        write_tensor(dir / "pose.ctst", Tensor::from_f64(pose_to_matrix(src)));
        write_tensor(dir / "text_tokens.ctst",
                     Tensor::from_array(synthetic_tokens(spec, model, s), spec.precision));

        for (size_t t = 0; t < spec.target_offsets.size(); ++t) {
            char tname[16];
            std::snprintf(tname, sizeof(tname), "%03zu", t);
            const fs::path tdir = dir / "targets" / tname;
            fs::create_directories(tdir);
            const Pose<double> pose = orbit_pose(spec, model, spec.target_offsets[t]);
            TArr<double> timg, tdepth;
            render_synthetic(model, pose, cam, timg, tdepth);
            write_tensor(tdir / "image.ctst", Tensor::from_array(timg, spec.precision));
            write_tensor(tdir / "pose.ctst", Tensor::from_f64(pose_to_matrix(pose)));
        }
    }
}

} // namespace svsplat
