#include "svsplat/scene.hpp"

#include "svsplat/errors.hpp"
#include "svsplat/tensor_io.hpp"

#include <algorithm>

namespace svsplat {

namespace fs = std::filesystem;

namespace {

Tensor read_required(const fs::path& dir, const char* name) {
    const fs::path p = dir / name;
    if (!fs::exists(p)) throw MissingInput("missing input file: " + p.string());
    return read_tensor(p);
}

void require_dims(const Tensor& t, const Shape& dims, const std::string& what) {
    if (t.dims() != dims)
        throw ValidationError(what + " has dims " + shape_str(t.dims()) + ", expected " +
                              shape_str(dims));
}

} // namespace

Pose<double> pose_from_matrix(const TArr<double>& m) {
    if (m.dims != Shape{4, 4}) throw ValidationError("pose matrix must be (4,4)");
    const double want_bottom[4] = {0, 0, 0, 1};
    for (int j = 0; j < 4; ++j)
        if (m.at(3, j) != want_bottom[j])
            throw ValidationError("pose bottom row must be (0,0,0,1)");
    Pose<double> p;
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) p.rot(i, j) = m.at(i, j);
        p.trans = {m.at(0, 3), m.at(1, 3), m.at(2, 3)};
    }
    if (std::abs(p.rot.det() - 1.0) > 1e-4)
        throw ValidationError("pose rotation block is not a proper rotation (|det R - 1| > 1e-4)");
    return p;
}

TArr<double> pose_to_matrix(const Pose<double>& pose) {
    TArr<double> m({4, 4});
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) m.at(i, j) = pose.rot(i, j);
    m.at(0, 3) = pose.trans.x;
    m.at(1, 3) = pose.trans.y;
    m.at(2, 3) = pose.trans.z;
    m.at(3, 3) = 1.0;
    return m;
}

Pose<double> relative_pose(const Pose<double>& world_from_source,
                           const Pose<double>& world_from_target) {
    return world_from_target.inverse().compose(world_from_source);
}

Scene load_scene(const fs::path& dir) {
    if (!fs::exists(dir)) throw MissingInput("missing scene directory: " + dir.string());

    const Tensor image_t = read_required(dir, "image.ctst");
    if (image_t.dims().size() != 3 || image_t.dims()[2] != 3)
        throw ValidationError("image.ctst must be (H,W,3)");
    const int64_t h = image_t.dims()[0], w = image_t.dims()[1];

    const Tensor depth_t = read_required(dir, "depth.ctst");
    require_dims(depth_t, {h, w}, "depth.ctst");
    const Tensor intr_t = read_required(dir, "intrinsics.ctst");
    require_dims(intr_t, {3, 3}, "intrinsics.ctst");
    const Tensor pose_t = read_required(dir, "pose.ctst");
    require_dims(pose_t, {4, 4}, "pose.ctst");
    const Tensor tokens_t = read_required(dir, "text_tokens.ctst");
    if (tokens_t.dims().size() != 2 || tokens_t.dims()[0] < 1 || tokens_t.dims()[1] < 1)
        throw ValidationError("text_tokens.ctst must be (Nc,Dc)");
    if (!tokens_t.all_finite()) throw ValidationError("text_tokens.ctst contains non-finite values");

    Scene s;
    s.dir = dir;
    s.image = image_t.to_f64();
    s.depth = depth_t.to_f64();
    s.text_tokens = tokens_t;

    for (double v : s.image.v)
        if (!(v >= 0.0 && v <= 1.0))
            throw ValidationError("image values must lie in [0,1]");
    for (double v : s.depth.v)
        if (!(v > 0.0)) throw ValidationError("depth values must be strictly positive");

    const TArr<double> k = intr_t.to_f64();
    if (k.at(0, 1) != 0 || k.at(1, 0) != 0 || k.at(2, 0) != 0 || k.at(2, 1) != 0 ||
        k.at(2, 2) != 1)
        throw ValidationError("intrinsics must be [[fx,0,cx],[0,fy,cy],[0,0,1]]");
    s.cam = Camera{k.at(0, 0), k.at(1, 1), k.at(0, 2), k.at(1, 2), w, h};
    s.cam.validate();

    s.world_from_cam = pose_from_matrix(pose_t.to_f64());

    const fs::path points_path = dir / "points.ctst";
    if (fs::exists(points_path)) {
        const Tensor pts = read_tensor(points_path);
        if (pts.dims().size() != 2 || pts.dims()[1] != 3)
            throw ValidationError("points.ctst must be (N,3)");
        s.point_override = pts.to_f64();
    }
    return s;
}

std::vector<TargetView> load_targets(const fs::path& scene_dir) {
    std::vector<TargetView> out;
    const fs::path root = scene_dir / "targets";
    if (!fs::exists(root)) return out;
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
        TargetView t;
        const Tensor img = read_required(d, "image.ctst");
        if (img.dims().size() != 3 || img.dims()[2] != 3)
            throw ValidationError("target image must be (H,W,3): " + d.string());
        t.image = img.to_f64();
        t.world_from_cam = pose_from_matrix(read_required(d, "pose.ctst").to_f64());
        out.push_back(std::move(t));
    }
    return out;
}

std::vector<fs::path> list_scene_dirs(const fs::path& root) {
    if (!fs::exists(root)) throw MissingInput("missing scene root: " + root.string());
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory() && fs::exists(e.path() / "image.ctst")) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    return dirs;
}

} // namespace svsplat
