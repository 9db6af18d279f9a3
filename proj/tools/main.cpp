#include "svsplat/checkpoint.hpp"
#include "svsplat/config.hpp"
#include "svsplat/errors.hpp"
#include "svsplat/evaluate.hpp"
#include "svsplat/gen_scenes.hpp"
#include "svsplat/gradcheck.hpp"
#include "svsplat/pipeline.hpp"
#include "svsplat/tensor_io.hpp"
#include "svsplat/threading.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace svsplat;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    uint64_t seed = 0;
    std::string out;
    int threads = -1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "key=value config file");
    cmd->add_option("--set", args.overrides, "config override key=value (repeatable)");
    cmd->add_option("--seed", args.seed, "random seed");
    cmd->add_option("--out", args.out, "output path");
    cmd->add_option("--threads", args.threads, "worker threads (0 = auto)");
}

Config resolve_config(const CommonArgs& args, const Config& base = Config{}) {
    Config cfg = base;
    if (!args.config_path.empty()) cfg = Config::load(args.config_path);
    for (const auto& kv : args.overrides) {
        const size_t eq = kv.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    cfg.validate();
    return cfg;
}

void apply_threads(const CommonArgs& args, const Config& cfg) {
    set_num_threads(args.threads >= 0 ? args.threads : cfg.threads);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os << text;
}

std::vector<int> parse_index_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(std::stoi(item));
    return out;
}

Pose<double> target_pose_of(const Scene& scene, const std::vector<TargetView>& targets,
                            const std::string& spec_item) {
    if (spec_item == "source") return scene.world_from_cam;
    const size_t k = static_cast<size_t>(std::stoul(spec_item));
    if (k >= targets.size())
        throw UsageError("target index " + spec_item + " out of range (scene has " +
                         std::to_string(targets.size()) + " targets)");
    return targets[k].world_from_cam;
}

template <typename T>
int run_train(const Config& cfg, const fs::path& scenes_root, const fs::path& out_dir,
              uint64_t seed, int64_t steps, const std::vector<int>& target_filter,
              double stop_psnr, int64_t eval_every, const fs::path& log_path) {
    std::vector<Scene> scenes;
    std::vector<std::vector<TargetView>> targets;
    for (const auto& dir : list_scene_dirs(scenes_root)) {
        scenes.push_back(load_scene(dir));
        targets.push_back(load_targets(dir));
    }
    if (scenes.empty()) throw MissingInput("no scenes under " + scenes_root.string());

    TrainOptions opt;
    opt.steps = steps;
    opt.seed = seed;
    opt.target_filter = target_filter;
    opt.stop_at_psnr = stop_psnr;
    opt.eval_every = eval_every;

    fs::create_directories(out_dir);
    auto res = train_toy<T>(cfg, scenes, targets, opt, [&](const std::string& dump) {
        write_text(out_dir / "nan_dump.txt", dump + "\n");
    });

    std::ostringstream log;
    log << "step\tl1\tssim_loss\tlpips_loss\ttotal\n";
    for (const auto& entry : res.log)
        log << entry.step << "\t" << format_double(static_cast<double>(entry.loss.l1)) << "\t"
            << format_double(static_cast<double>(entry.loss.ssim_loss)) << "\t"
            << format_double(static_cast<double>(entry.loss.lpips_loss)) << "\t"
            << format_double(static_cast<double>(entry.loss.total)) << "\n";
    write_text(log_path, log.str());

    save_params(out_dir, res.params, cfg, res.steps_run);
    std::cout << "trained " << res.steps_run << " steps";
    if (res.final_mean_psnr >= 0)
        std::cout << ", mean train-target psnr " << format_double(res.final_mean_psnr) << " dB";
    std::cout << "\n";
    return 0;
}

template <typename T>
int run_render(const CheckpointData& ckpt, const Config& cfg, const fs::path& scenes_root,
               const std::string& scene_name, const std::string& targets_spec,
               const fs::path& out_dir, const fs::path& gt_dir, bool write_transmittance) {
    Params<T> params = load_params<T>(ckpt);
    fs::create_directories(out_dir);
    if (!gt_dir.empty()) fs::create_directories(gt_dir);

    std::vector<fs::path> dirs;
    if (!scene_name.empty()) {
        dirs.push_back(scenes_root / scene_name);
    } else {
        dirs = list_scene_dirs(scenes_root);
    }
    if (dirs.empty()) throw MissingInput("no scenes under " + scenes_root.string());

    for (const auto& dir : dirs) {
        const Scene scene = load_scene(dir);
        const auto targets = load_targets(dir);
        std::vector<std::string> items;
        if (targets_spec == "all") {
            for (size_t k = 0; k < targets.size(); ++k) items.push_back(std::to_string(k));
        } else {
            std::stringstream ss(targets_spec);
            std::string item;
            while (std::getline(ss, item, ','))
                if (!item.empty()) items.push_back(item);
        }
        for (const auto& item : items) {
            const Pose<double> pose = target_pose_of(scene, targets, item);
            const auto result = forward<T>(scene, params, cfg, pose);
            const std::string stem = dir.filename().string() + "__t" + item;
            write_tensor(out_dir / (stem + ".ctst"),
                         Tensor::from_array(result.image, cfg.precision));
            if (write_transmittance)
                write_tensor(out_dir / (stem + ".transmittance.ctst"),
                             Tensor::from_array(result.render.transmittance, cfg.precision));
            if (!gt_dir.empty()) {
                const TArr<double>& gt = item == "source"
                                             ? scene.image
                                             : targets[std::stoul(item)].image;
                write_tensor(gt_dir / (stem + ".ctst"), Tensor::from_array(gt, cfg.precision));
            }
        }
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"feed-forward single-view Gaussian splatting pipeline"};
    app.require_subcommand(1);

    // gen-scenes
    CommonArgs gen_args;
    SyntheticSceneSpec spec;
    std::string offsets_csv;
    auto* gen = app.add_subcommand("gen-scenes", "emit synthetic scene directories");
    add_common(gen, gen_args);
    gen->add_option("--count", spec.count, "number of scenes");
    gen->add_option("--objects", spec.objects, "objects per scene");
    gen->add_option("--orbit-radius", spec.orbit_radius, "camera orbit radius (m)");
    gen->add_option("--frame-step-deg", spec.frame_step_deg, "orbit degrees per frame");
    gen->add_option("--offsets", offsets_csv, "target frame offsets, e.g. -10,-5,5,10");

    // train-toy
    CommonArgs train_args;
    std::string train_scenes;
    int64_t train_steps = 2000;
    std::string train_targets_csv;
    double stop_psnr = 0;
    int64_t eval_every = 100;
    std::string loss_log;
    auto* train = app.add_subcommand("train-toy", "overfit the model on synthetic scenes");
    add_common(train, train_args);
    train->add_option("--scenes", train_scenes, "scene root directory")->required();
    train->add_option("--steps", train_steps, "optimization steps");
    train->add_option("--train-targets", train_targets_csv,
                      "comma-separated target indices to train on (default all)");
    train->add_option("--target-psnr", stop_psnr, "stop once mean train-target PSNR reaches this");
    train->add_option("--eval-every", eval_every, "PSNR probe interval for --target-psnr");
    train->add_option("--log", loss_log, "loss log path (default <out>/losses.txt)");

    // render
    CommonArgs render_args;
    std::string render_ckpt, render_scenes, render_scene, render_targets = "all";
    std::string render_gt;
    bool render_trans = false;
    auto* render = app.add_subcommand("render", "render views from a checkpoint");
    add_common(render, render_args);
    render->add_option("--checkpoint", render_ckpt, "checkpoint directory")->required();
    render->add_option("--scenes", render_scenes, "scene root directory")->required();
    render->add_option("--scene", render_scene, "render a single scene by directory name");
    render->add_option("--targets", render_targets,
                       "'all', 'source', or comma-separated target indices");
    render->add_option("--gt-out", render_gt, "also copy matching ground-truth images here");
    render->add_flag("--transmittance", render_trans, "write transmittance maps");

    // eval
    CommonArgs eval_args;
    std::string eval_pred, eval_gt;
    auto* evalc = app.add_subcommand("eval", "PSNR/SSIM report over two image directories");
    add_common(evalc, eval_args);
    evalc->add_option("--pred", eval_pred, "predicted image directory")->required();
    evalc->add_option("--gt", eval_gt, "ground-truth image directory")->required();

    // gradcheck
    CommonArgs gc_args;
    std::string gc_component;
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    add_common(gc, gc_args);
    gc->add_option("component", gc_component,
                   "geometry | point_encoder | transformer | heads | rasterizer | losses | "
                   "end_to_end")
        ->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) {
            const Config cfg = resolve_config(gen_args);
            apply_threads(gen_args, cfg);
            if (gen_args.out.empty()) throw UsageError("gen-scenes requires --out");
            spec.seed = gen_args.seed;
            spec.height = cfg.image_height;
            spec.width = cfg.image_width;
            spec.token_dim = cfg.token_dim;
            spec.precision = cfg.precision;
            if (!offsets_csv.empty()) {
                spec.target_offsets.clear();
                for (int v : parse_index_list(offsets_csv)) spec.target_offsets.push_back(v);
            }
            gen_scenes(spec, gen_args.out);
            std::cout << "wrote " << spec.count << " scenes to " << gen_args.out << "\n";
            return 0;
        }
        if (train->parsed()) {
            const Config cfg = resolve_config(train_args);
            apply_threads(train_args, cfg);
            if (train_args.out.empty()) throw UsageError("train-toy requires --out");
            const fs::path out_dir = train_args.out;
            const fs::path log_path = loss_log.empty() ? out_dir / "losses.txt" : fs::path(loss_log);
            fs::create_directories(out_dir);
            const auto filter =
                train_targets_csv.empty() ? std::vector<int>{} : parse_index_list(train_targets_csv);
            if (cfg.precision == Dtype::F64)
                return run_train<double>(cfg, train_scenes, out_dir, train_args.seed, train_steps,
                                         filter, stop_psnr, eval_every, log_path);
            return run_train<float>(cfg, train_scenes, out_dir, train_args.seed, train_steps,
                                    filter, stop_psnr, eval_every, log_path);
        }
        if (render->parsed()) {
            const CheckpointData ckpt = load_checkpoint(render_ckpt);
            Config cfg = ckpt.config;
            if (!render_args.config_path.empty() || !render_args.overrides.empty())
                cfg = resolve_config(render_args, ckpt.config);
            apply_threads(render_args, cfg);
            if (render_args.out.empty()) throw UsageError("render requires --out");
            if (cfg.precision == Dtype::F64)
                return run_render<double>(ckpt, cfg, render_scenes, render_scene, render_targets,
                                          render_args.out, render_gt, render_trans);
            return run_render<float>(ckpt, cfg, render_scenes, render_scene, render_targets,
                                     render_args.out, render_gt, render_trans);
        }
        if (evalc->parsed()) {
            const EvalReport report = evaluate(eval_pred, eval_gt);
            std::cout << report.text;
            if (!eval_args.out.empty()) write_text(eval_args.out, report.text);
            return 0;
        }
        if (gc->parsed()) {
            const auto report = gradcheck_component(gc_component, gc_args.seed);
            std::cout << report.to_text();
            if (!gc_args.out.empty()) write_text(gc_args.out, report.to_text());
            return report.passed() ? 0 : 1;
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
