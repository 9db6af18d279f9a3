#pragma once

#include "svsplat/tensor.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace svsplat {

/// Pipeline configuration. Defaults are the published model constants
/// (3 layers, 8 heads, gamma 0.5, two Gaussian sets per pixel, loss
/// weights 1 / 0.85 / 0.01) at desk-scale resolution.
struct Config {
    int64_t image_height = 64;
    int64_t image_width = 96;
    int levels = 3;
    int heads = 8;
    double gamma = 0.5;
    int gaussians_per_pixel = 2;
    int sh_degree = 1;
    double lambda_l1 = 1.0;
    double lambda_ssim = 0.85;
    double lambda_lpips = 0.01;
    bool use_contextual = true;
    bool use_spatial = true;
    int64_t n_points = 256;
    double near = 0.01;
    double far = 100.0;
    Dtype precision = Dtype::F32;

    // Architecture knobs beyond the headline constants.
    std::vector<int> level_widths = {32, 64, 128};
    int64_t token_dim = 16;       // contextual token width Dc
    int64_t point_token_dim = 64; // spatial token width Ds
    int ffn_ratio = 4;
    double dropout = 0.1;
    std::string attention_scale = "per_head"; // or "full_dim"
    double lr = 3e-4;
    double offset_bound = 0.05; // meters, tanh bound on 3D center offsets
    int threads = 0;            // 0 = automatic

    int sh_coeff_count() const { return (sh_degree + 1) * (sh_degree + 1); }

    /// Throws ConfigError when any invariant is violated.
    void validate() const;

    /// Round-trip-exact key=value serialization (sorted keys).
    std::string to_text() const;
    void save(const std::filesystem::path& path) const;

    static Config from_text(const std::string& text);
    static Config load(const std::filesystem::path& path);

    /// Apply one "key=value" override (CLI).
    void set(const std::string& key, const std::string& value);

    bool operator==(const Config&) const = default;
};

std::string format_double(double x); // shortest round-trip decimal

} // namespace svsplat
