#include "svsplat/evaluate.hpp"

#include "svsplat/config.hpp"
#include "svsplat/errors.hpp"
#include "svsplat/losses.hpp"
#include "svsplat/tensor_io.hpp"

#include <algorithm>
#include <sstream>
#include <vector>

namespace svsplat {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> list_ctst(const fs::path& dir) {
    if (!fs::exists(dir)) throw MissingInput("missing directory: " + dir.string());
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".ctst")
            names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    return names;
}

} // namespace

EvalReport evaluate(const fs::path& pred_dir, const fs::path& gt_dir) {
    const auto pred_names = list_ctst(pred_dir);
    const auto gt_names = list_ctst(gt_dir);
    if (pred_names.size() != gt_names.size())
        throw ValidationError("evaluate: directories hold " + std::to_string(pred_names.size()) +
                              " vs " + std::to_string(gt_names.size()) + " images");
    if (pred_names != gt_names)
        throw ValidationError("evaluate: file names do not match between directories");
    if (pred_names.empty()) throw ValidationError("evaluate: no .ctst images found");

    std::ostringstream os;
    double psnr_sum = 0, ssim_sum = 0;
    for (const auto& name : pred_names) {
        const TArr<double> a = read_tensor(pred_dir / name).to_f64();
        const TArr<double> b = read_tensor(gt_dir / name).to_f64();
        const double p = psnr(a, b);
        const double s = ssim(a, b);
        psnr_sum += p;
        ssim_sum += s;
        os << name << ".psnr=" << format_double(p) << "\n";
        os << name << ".ssim=" << format_double(s) << "\n";
    }
    EvalReport r;
    r.pairs = static_cast<int64_t>(pred_names.size());
    r.mean_psnr = psnr_sum / static_cast<double>(r.pairs);
    r.mean_ssim = ssim_sum / static_cast<double>(r.pairs);
    os << "mean.psnr=" << format_double(r.mean_psnr) << "\n";
    os << "mean.ssim=" << format_double(r.mean_ssim) << "\n";
    r.text = os.str();
    return r;
}

} // namespace svsplat
