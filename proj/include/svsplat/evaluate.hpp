#pragma once

#include <filesystem>
#include <string>

namespace svsplat {

struct EvalReport {
    std::string text; // metric=value lines, sorted by filename
    double mean_psnr = 0;
    double mean_ssim = 0;
    int64_t pairs = 0;
};

/// Compare matching .ctst images in two directories; per-image and mean
/// PSNR/SSIM. File sets must match by name.
EvalReport evaluate(const std::filesystem::path& pred_dir,
                    const std::filesystem::path& gt_dir);

} // namespace svsplat
