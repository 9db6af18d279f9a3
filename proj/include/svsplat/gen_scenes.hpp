#pragma once

#include "svsplat/geometry.hpp"
#include "svsplat/scene.hpp"
#include "svsplat/tensor.hpp"

#include <filesystem>
#include <vector>

namespace svsplat {

/// Recipe for the analytic scene generator: diffuse boxes and spheres
/// inside a closed room, rendered by exact ray casting with per-pixel
/// z-depth. Target views sit a few frames away along a camera orbit.
struct SyntheticSceneSpec {
    uint64_t seed = 0;
    int count = 4;   // scenes to emit
    int objects = 3; // spheres/boxes per scene
    double orbit_radius = 2.0;
    double orbit_height = 0.3;
    double frame_step_deg = 0.75;
    std::vector<int> target_offsets = {-10, -5, 5, 10};
    int64_t height = 64, width = 96;
    int64_t token_count = 8;
    int64_t token_dim = 16;
    Dtype precision = Dtype::F32;
};

struct SyntheticSphere {
    Vec3<double> center;
    double radius;
    Vec3<double> albedo;
};

struct SyntheticBox {
    Vec3<double> lo, hi;
    Vec3<double> albedo;
};

struct SceneModel {
    std::vector<SyntheticSphere> spheres;
    std::vector<SyntheticBox> boxes;
    Vec3<double> wall_albedo;
    int wall_class = 0; // palette index; drives the token file
    double room_half = 3.0;
    Vec3<double> light = Vec3<double>(0.3, 0.9, 0.2).normalized();
    double theta0 = 0.0;
};

inline constexpr int kWallPaletteSize = 6;

Camera synthetic_camera(const SyntheticSceneSpec& spec);
SceneModel build_scene_model(const SyntheticSceneSpec& spec, int scene_index);

/// Camera-to-world pose on the orbit, `frame_offset` frames from the
/// scene's source angle.
Pose<double> orbit_pose(const SyntheticSceneSpec& spec, const SceneModel& model,
                        int frame_offset);

/// Exact render: image (H,W,3) in [0,1] and strictly positive z-depth (H,W).
void render_synthetic(const SceneModel& model, const Pose<double>& world_from_cam,
                      const Camera& cam, TArr<double>& image, TArr<double>& depth);

/// Class-correlated token file content: each row is a one-hot wall-class
/// vector plus seeded noise. The pipeline treats these as opaque.
TArr<double> synthetic_tokens(const SyntheticSceneSpec& spec, const SceneModel& model,
                              int scene_index);

/// Emit `spec.count` scene directories under out_dir.
void gen_scenes(const SyntheticSceneSpec& spec, const std::filesystem::path& out_dir);

} // namespace svsplat
