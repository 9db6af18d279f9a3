#pragma once

#include "svsplat/geometry.hpp"
#include "svsplat/tensor.hpp"

#include <filesystem>
#include <optional>
#include <vector>

namespace svsplat {

/// One ingestion unit: source image, depth, camera, guidance-token file,
/// plus any target views found next to it. Masters are kept in f64; the
/// pipeline converts to its working precision at use.
struct Scene {
    std::filesystem::path dir;
    TArr<double> image;  // (H,W,3) in [0,1]
    TArr<double> depth;  // (H,W), strictly positive
    Camera cam;
    Pose<double> world_from_cam; // camera-to-world
    Tensor text_tokens;          // (Nc, Dc), opaque
    std::optional<TArr<double>> point_override; // optional (N,3) cloud

    int64_t height() const { return image.dim(0); }
    int64_t width() const { return image.dim(1); }
};

struct TargetView {
    TArr<double> image;
    Pose<double> world_from_cam;
};

/// Load and validate a scene directory (image.ctst, depth.ctst,
/// intrinsics.ctst, pose.ctst, text_tokens.ctst, optional points.ctst).
Scene load_scene(const std::filesystem::path& dir);

/// Load target views from <scene>/targets/NNN/{image,pose}.ctst, ordered
/// by directory name.
std::vector<TargetView> load_targets(const std::filesystem::path& scene_dir);

/// Parse a stored 4x4 camera-to-world matrix into a pose, validating the
/// bottom row and that the rotation block is a proper rotation.
Pose<double> pose_from_matrix(const TArr<double>& m);

/// 4x4 matrix for storage.
TArr<double> pose_to_matrix(const Pose<double>& pose);

/// Relative transform mapping source-camera coordinates to target-camera
/// coordinates.
Pose<double> relative_pose(const Pose<double>& world_from_source,
                           const Pose<double>& world_from_target);

/// Scene directories directly under `root`, sorted by name.
std::vector<std::filesystem::path> list_scene_dirs(const std::filesystem::path& root);

} // namespace svsplat
