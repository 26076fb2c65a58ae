// freeedit: dataset generation, training, editing, mask propagation,
// evaluation, flow estimation, and threshold ablation in one binary.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "freeedit/pipeline.hpp"

namespace fs = std::filesystem;
using namespace freeedit;

namespace {

struct GlobalOpts {
    std::uint64_t seed = 0;
    int threads = 1;
    std::string precision = "f32";
    bool debug = false;
};

// populate a temp dir, then swap it into place so readers never see a
// half-written output
void atomic_dir(const fs::path& final, const std::function<void(const fs::path&)>& fill) {
    fs::path tmp = final;
    tmp += ".tmp";
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    fill(tmp);
    fs::remove_all(final);
    fs::rename(tmp, final);
}

void atomic_file(const fs::path& final, const std::function<void(const fs::path&)>& write) {
    fs::path tmp = final;
    tmp += ".tmp";
    if (final.has_parent_path()) fs::create_directories(final.parent_path());
    write(tmp);
    fs::rename(tmp, final);
}

std::string flow_file_name(std::size_t k) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "flow_%04zu.flo", k);
    return buf;
}

std::string mask_file_name(std::size_t k) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "mask_%04zu.png", k);
    return buf;
}

void save_scene(const SyntheticScene& scene, const fs::path& dir) {
    save_frames(scene.source, dir / "source");
    save_image_png(scene.edited_first, dir / "edited_first.png");
    fs::create_directories(dir / "flow");
    for (std::size_t k = 0; k < scene.gt_flow.size(); ++k)
        write_flow(scene.gt_flow[k], dir / "flow" / flow_file_name(k));
    fs::create_directories(dir / "gt_masks");
    for (std::size_t k = 0; k < scene.gt_edit_masks.size(); ++k)
        save_mask_png(scene.gt_edit_masks[k], dir / "gt_masks" / mask_file_name(k));
}

FlowSequence load_flow_dir(const fs::path& dir, std::size_t count) {
    FlowSequence flows;
    for (std::size_t k = 0; k < count; ++k) flows.push_back(read_flow(dir / flow_file_name(k)));
    return flows;
}

MaskSequence load_mask_dir(const fs::path& dir, std::size_t count) {
    MaskSequence masks;
    for (std::size_t k = 0; k < count; ++k)
        masks.push_back(load_mask_png(dir / mask_file_name(k), static_cast<int>(k)));
    return masks;
}

// --flow lk | gt | file:<dir>; gt reads <scene>/flow
void apply_flow_choice(EditJob& job, const std::string& choice, const fs::path& scene_dir) {
    if (choice == "lk") {
        job.flow_source = FlowSource::Lk;
    } else if (choice == "gt") {
        job.flow_source = FlowSource::Gt;
        job.provided_flow = load_flow_dir(scene_dir / "flow", job.source.size() - 1);
    } else if (choice.rfind("file:", 0) == 0) {
        job.flow_source = FlowSource::File;
        job.flow_dir = choice.substr(5);
    } else {
        throw ConfigError("--flow must be lk, gt, or file:<dir>");
    }
}

int parse_inversion(const std::string& choice) {
    if (choice == "euler") return 0;
    if (choice.rfind("fixedpoint:", 0) == 0) {
        int m = std::stoi(choice.substr(11));
        if (m < 1) throw ConfigError("--inversion fixedpoint:<m> needs m >= 1");
        return m;
    }
    throw ConfigError("--inversion must be euler or fixedpoint:<m>");
}

InjectionKind parse_injection(const std::string& s) {
    if (s == "ree") return InjectionKind::Ree;
    if (s == "vanilla") return InjectionKind::Vanilla;
    if (s == "none") return InjectionKind::None;
    throw ConfigError("--injection must be ree, vanilla, or none");
}

// ------------------------------------------------------------ subcommands ----

struct GenDataOpts {
    std::string out;
    std::string config;
    int count = 1;
    int height = 16, width = 16, frames = 9;
    int shapes = 1;
    std::string recipe = "recolor";
    float texture = 0.3f;
    float edit_noise = 0.0f;
};

int run_gen_data(const GlobalOpts& g, const GenDataOpts& o) {
    SceneConfig cfg;
    if (!o.config.empty()) {
        cfg = parse_scene_config(o.config);
    } else {
        cfg.height = o.height;
        cfg.width = o.width;
        cfg.frames = o.frames;
        cfg.shape_count = o.shapes;
        cfg.texture = o.texture;
        cfg.edit_noise = o.edit_noise;
        if (o.recipe == "recolor")
            cfg.recipe = EditRecipe::Recolor;
        else if (o.recipe == "remove")
            cfg.recipe = EditRecipe::Remove;
        else if (o.recipe == "add")
            cfg.recipe = EditRecipe::Add;
        else
            throw ConfigError("--recipe must be recolor, remove, or add");
    }
    atomic_dir(o.out, [&](const fs::path& tmp) {
        for (int s = 0; s < o.count; ++s) {
            char name[32];
            std::snprintf(name, sizeof(name), "scene_%03d", s);
            auto scene = gen_moving_shapes(cfg, g.seed + static_cast<std::uint64_t>(s));
            save_scene(scene, tmp / name);
        }
    });
    std::cout << "wrote " << o.count << " scene(s) to " << o.out << "\n";
    return 0;
}

struct TrainOpts {
    std::string scenes;
    std::string out;
    int steps = 400;
    double lr = 2e-3;
    int batch = 2;
    int patch = 4, r = 2, n = 4;
    int dim = 0;
    int blocks = 4, heads = 4, mlp_ratio = 4;
    std::string optimizer = "gd";
};

std::vector<fs::path> scene_dirs(const fs::path& root) {
    std::vector<fs::path> dirs;
    if (fs::exists(root / "source")) {
        dirs.push_back(root);
    } else {
        for (const auto& e : fs::directory_iterator(root))
            if (e.is_directory() && fs::exists(e.path() / "source")) dirs.push_back(e.path());
        std::sort(dirs.begin(), dirs.end());
    }
    if (dirs.empty()) throw ConfigError("no scenes found under " + root.string());
    return dirs;
}

template <typename T>
int run_train(const GlobalOpts& g, const TrainOpts& o) {
    std::vector<SyntheticScene> scenes;
    for (const auto& d : scene_dirs(o.scenes)) {
        SyntheticScene s;
        s.source = load_frames(d / "source");
        scenes.push_back(std::move(s));
    }
    Geometry geom;
    geom.H = scenes[0].source[0].h;
    geom.W = scenes[0].source[0].w;
    geom.p = o.patch;
    geom.r = o.r;
    geom.n = o.n;
    geom.c = o.dim;
    geom.validate();
    if (static_cast<int>(scenes[0].source.size()) != geom.frame_count())
        throw ConfigError("scene has " + std::to_string(scenes[0].source.size()) +
                          " frames but geometry expects " + std::to_string(geom.frame_count()));
    ModelConfig mcfg;
    mcfg.blocks = o.blocks;
    mcfg.heads = o.heads;
    mcfg.mlp_ratio = o.mlp_ratio;
    mcfg.tokenizer_seed = g.seed + 1;
    TrainConfig tcfg;
    tcfg.steps = o.steps;
    tcfg.lr = o.lr;
    tcfg.batch = o.batch;
    tcfg.seed = g.seed;
    if (o.optimizer == "adam")
        tcfg.optimizer = Optimizer::Adam;
    else if (o.optimizer != "gd")
        throw ConfigError("optimizer must be gd or adam");
    std::vector<double> curve;
    auto model = train_toy<T>(scenes, geom, mcfg, tcfg, &curve);
    atomic_dir(o.out, [&](const fs::path& tmp) {
        save_model(model, tmp);
        std::ofstream os(tmp / "loss_curve.txt");
        for (std::size_t i = 0; i < curve.size(); ++i) os << i << " " << curve[i] << "\n";
    });
    std::cout << "trained " << o.steps << " step(s), final loss " << model.loss_final << ", saved "
              << o.out << "\n";
    return 0;
}

struct EditOpts {
    std::string model;
    std::string scene;
    std::string out;
    float thr = 35.0f;
    int steps = 50;
    double cfg_edit = 3.0;
    double cfg_invert = 1.0;
    double cfg_recon = 3.0;
    std::string injection = "ree";
    std::string flow = "lk";
    std::string downsample = "max";
    std::string inversion = "euler";
    float lambda_scale = 1.0f;
    int dilate = 0;
    float tau = 1.0f;
    bool self_recon = false;
};

template <typename T>
EditJob build_edit_job(const EditOpts& o) {
    EditJob job;
    job.source = load_frames(fs::path(o.scene) / "source");
    job.edited_first = load_image_png(fs::path(o.scene) / "edited_first.png");
    apply_flow_choice(job, o.flow, o.scene);
    job.thr = o.thr;
    job.steps = o.steps;
    job.cfg_edit = o.cfg_edit;
    job.cfg_invert = o.cfg_invert;
    job.cfg_recon = o.cfg_recon;
    job.policy = parse_injection(o.injection);
    if (o.downsample == "max")
        job.downsample = DownsampleMode::Max;
    else if (o.downsample == "mean")
        job.downsample = DownsampleMode::Mean;
    else
        throw ConfigError("--downsample must be max or mean");
    job.fixedpoint_iters = parse_inversion(o.inversion);
    job.lambda_scale = o.lambda_scale;
    job.dilate_radius = o.dilate;
    job.occlusion_tau = o.tau;
    return job;
}

template <typename T>
int run_edit(const GlobalOpts& g, const EditOpts& o) {
    auto model = load_model<T>(o.model);
    EditJob job = build_edit_job<T>(o);
    job.seed = g.seed;
    MaskSequence gt;
    if (fs::exists(fs::path(o.scene) / "gt_masks")) {
        gt = load_mask_dir(fs::path(o.scene) / "gt_masks", job.source.size());
        job.gt_edit_masks = &gt;
    }
    EditResult res = o.self_recon ? self_reconstruct(model, job) : edit_video(model, job);
    atomic_dir(o.out, [&](const fs::path& tmp) {
        save_frames(res.edited, tmp / "edited");
        save_frames(res.reconstructed, tmp / "reconstructed");
        fs::create_directories(tmp / "masks");
        for (std::size_t k = 0; k < res.masks.size(); ++k)
            save_mask_png(res.masks[k], tmp / "masks" / mask_file_name(k));
        write_tensor(res.lambda.lam, tmp / "lambda.ftc");
        write_report(res.report, tmp / "report.txt");
        if (!res.warnings.empty()) {
            std::ofstream os(tmp / "warnings.txt");
            for (const auto& w : res.warnings) os << w << "\n";
        }
    });
    for (const auto& w : res.warnings) std::cerr << "warning: " << w << "\n";
    std::cout << "warp_error=" << res.report.warp_error << " psnr=" << res.report.psnr
              << " ssim=" << res.report.ssim;
    if (res.report.psnr_plus) std::cout << " psnr_plus=" << *res.report.psnr_plus;
    if (res.report.iou) std::cout << " iou=" << *res.report.iou;
    std::cout << "\nwrote " << o.out << "\n";
    return 0;
}

struct PropagateOpts {
    std::string scene;
    std::string out;
    float thr = 35.0f;
    std::string flow = "lk";
    int dilate = 0;
    float tau = 1.0f;
    int patch = 4, r = 2;
    std::string downsample = "max";
};

int run_propagate(const GlobalOpts&, const PropagateOpts& o) {
    EditJob job;
    job.source = load_frames(fs::path(o.scene) / "source");
    job.edited_first = load_image_png(fs::path(o.scene) / "edited_first.png");
    apply_flow_choice(job, o.flow, o.scene);
    job.occlusion_tau = o.tau;
    FlowSequence flows;
    std::vector<OcclusionMask> occs;
    resolve_flow(job, flows, occs);
    DiffMap d = diff_map(job.source[0], job.edited_first);
    Mask m0 = threshold_mask(d, o.thr);
    MaskSequence masks = propagate(m0, flows, &occs, o.dilate);
    DownsampleMode mode = o.downsample == "mean" ? DownsampleMode::Mean : DownsampleMode::Max;
    TokenMask tm = downsample_flatten(compress_temporal(masks, o.r), o.patch, mode);
    Lambda lam = modulation_weights(tm);
    atomic_dir(o.out, [&](const fs::path& tmp) {
        for (std::size_t k = 0; k < masks.size(); ++k)
            save_mask_png(masks[k], tmp / mask_file_name(k));
        write_tensor(tm.tm, tmp / "token_mask.ftc");
        write_tensor(lam.lam, tmp / "lambda.ftc");
    });
    std::size_t area = 0;
    for (const auto& m : masks) area += m.area();
    std::cout << "propagated " << masks.size() << " mask(s), total area " << area << ", wrote "
              << o.out << "\n";
    return 0;
}

struct EvalOpts {
    std::string output;
    std::string reference;
    std::string masks;
    std::string flow;  // optional dir of source flow for warp error
    std::string out = "report.txt";
};

int run_eval(const GlobalOpts&, const EvalOpts& o) {
    VideoFrames a = load_frames(o.output);
    VideoFrames b = load_frames(o.reference);
    MetricReport r;
    r.psnr = video_psnr(a, b);
    r.ssim = video_ssim(a, b);
    if (!o.flow.empty()) {
        FlowSequence flows = load_flow_dir(o.flow, a.size() - 1);
        std::vector<OcclusionMask> occs;
        for (const auto& f : flows) occs.push_back(detail::oob_occlusion(f));
        r.warp_error = warp_error(a, flows, &occs);
    }
    if (!o.masks.empty()) {
        MaskSequence masks = load_mask_dir(o.masks, a.size());
        r.psnr_plus = masked_psnr(a, b, masks);
        r.ssim_plus = masked_ssim(a, b, masks);
        if (!o.flow.empty()) {
            FlowSequence flows = load_flow_dir(o.flow, a.size() - 1);
            std::vector<OcclusionMask> occs;
            for (const auto& f : flows) occs.push_back(detail::oob_occlusion(f));
            r.warp_error_plus = warp_error(a, flows, &occs, &masks);
        }
    }
    atomic_file(o.out, [&](const fs::path& tmp) { write_report(r, tmp); });
    std::cout << "psnr=" << r.psnr << " ssim=" << r.ssim;
    if (!o.flow.empty()) std::cout << " warp_error=" << r.warp_error;
    std::cout << "\nwrote " << o.out << "\n";
    return 0;
}

struct FlowOpts {
    std::string frames;
    std::string out;
    int levels = 3, window = 7, iterations = 3;
    float tau = 1.0f;
};

int run_flow(const GlobalOpts&, const FlowOpts& o) {
    VideoFrames frames = load_frames(o.frames);
    FlowParams fp;
    fp.levels = o.levels;
    fp.window = o.window;
    fp.iterations = o.iterations;
    FlowSequence flows = estimate_sequence(frames.frames, fp);
    atomic_dir(o.out, [&](const fs::path& tmp) {
        for (std::size_t k = 0; k < flows.size(); ++k) {
            write_flow(flows[k], tmp / flow_file_name(k));
            FlowField bwd = estimate_flow(frames[k + 1], frames[k], fp);
            OcclusionMask occ = fb_consistency(flows[k], bwd, o.tau);
            Mask om;
            om.m = occ.occluded;
            char buf[32];
            std::snprintf(buf, sizeof(buf), "occ_%04zu.png", k);
            save_mask_png(om, tmp / buf);
        }
    });
    std::cout << "estimated " << flows.size() << " field(s), wrote " << o.out << "\n";
    return 0;
}

struct AblateOpts {
    EditOpts edit;
    std::vector<float> thrs = {5.0f, 35.0f, 65.0f};
};

template <typename T>
int run_ablate(const GlobalOpts& g, const AblateOpts& o) {
    auto model = load_model<T>(o.edit.model);
    MaskSequence gt;
    atomic_dir(o.edit.out, [&](const fs::path& tmp) {
        std::ofstream table(tmp / "table.txt");
        table << "# thr mask_area warp_error psnr_plus ssim_plus\n";
        for (float thr : o.thrs) {
            EditOpts eo = o.edit;
            eo.thr = thr;
            EditJob job = build_edit_job<T>(eo);
            job.seed = g.seed;
            EditResult res = edit_video(model, job);
            std::size_t area = 0;
            for (const auto& m : res.masks) area += m.area();
            table << thr << " " << area << " " << res.report.warp_error << " "
                  << (res.report.psnr_plus ? *res.report.psnr_plus : -1.0) << " "
                  << (res.report.ssim_plus ? *res.report.ssim_plus : -1.0) << "\n";
            char buf[32];
            std::snprintf(buf, sizeof(buf), "thr_%g", double(thr));
            fs::create_directories(tmp / buf);
            for (std::size_t k = 0; k < res.masks.size(); ++k)
                save_mask_png(res.masks[k], tmp / buf / mask_file_name(k));
        }
    });
    std::cout << "wrote " << o.edit.out << "/table.txt\n";
    return 0;
}

template <typename F32, typename F64>
int dispatch_precision(const GlobalOpts& g, F32&& f32, F64&& f64) {
    if (g.precision == "f32") return f32();
    if (g.precision == "f64") return f64();
    throw ConfigError("--precision must be f32 or f64");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"image-driven video editing via lambda-modulated attention injection"};
    app.require_subcommand(1);

    GlobalOpts g;
    app.add_option("--seed", g.seed, "master random seed")->capture_default_str();
    app.add_option("--threads", g.threads, "worker threads (execution is serial)")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    app.add_option("--precision", g.precision, "f32 or f64")->capture_default_str();
    app.add_flag("--debug", g.debug, "verbose diagnostics");

    GenDataOpts gen;
    auto* cgen = app.add_subcommand("gen-data", "generate synthetic moving-shape scenes");
    cgen->add_option("--out", gen.out)->required();
    cgen->add_option("--count", gen.count)->capture_default_str();
    cgen->add_option("--config", gen.config, "scene config file (overrides shape flags)");
    cgen->add_option("--height", gen.height)->capture_default_str();
    cgen->add_option("--width", gen.width)->capture_default_str();
    cgen->add_option("--frames", gen.frames)->capture_default_str();
    cgen->add_option("--shapes", gen.shapes)->capture_default_str();
    cgen->add_option("--recipe", gen.recipe, "recolor, remove, or add")->capture_default_str();
    cgen->add_option("--texture", gen.texture)->capture_default_str();
    cgen->add_option("--edit-noise", gen.edit_noise)->capture_default_str();

    TrainOpts tr;
    auto* ctr = app.add_subcommand("train", "train the toy velocity model");
    ctr->add_option("--scenes", tr.scenes)->required();
    ctr->add_option("--out", tr.out)->required();
    ctr->add_option("--steps", tr.steps)->capture_default_str();
    ctr->add_option("--lr", tr.lr)->capture_default_str();
    ctr->add_option("--batch", tr.batch)->capture_default_str();
    ctr->add_option("--optimizer", tr.optimizer, "gd or adam")->capture_default_str();
    ctr->add_option("--patch", tr.patch)->capture_default_str();
    ctr->add_option("-r,--ratio", tr.r, "temporal compression ratio")->capture_default_str();
    ctr->add_option("-n,--latent-frames", tr.n)->capture_default_str();
    ctr->add_option("--dim", tr.dim, "channel dim (0 = r*p*p*3)")->capture_default_str();
    ctr->add_option("--blocks", tr.blocks)->capture_default_str();
    ctr->add_option("--heads", tr.heads)->capture_default_str();
    ctr->add_option("--mlp-ratio", tr.mlp_ratio)->capture_default_str();

    EditOpts ed;
    auto* ced = app.add_subcommand("edit", "invert, reconstruct, and edit a scene");
    auto add_edit_flags = [](CLI::App* c, EditOpts& e) {
        c->add_option("--model", e.model)->required();
        c->add_option("--scene", e.scene)->required();
        c->add_option("--out", e.out)->required();
        c->add_option("--thr", e.thr, "first-frame difference threshold")->capture_default_str();
        c->add_option("--steps", e.steps)->capture_default_str();
        c->add_option("--cfg-edit", e.cfg_edit)->capture_default_str();
        c->add_option("--cfg-invert", e.cfg_invert)->capture_default_str();
        c->add_option("--cfg-recon", e.cfg_recon)->capture_default_str();
        c->add_option("--injection", e.injection, "ree, vanilla, or none")->capture_default_str();
        c->add_option("--flow", e.flow, "lk, gt, or file:<dir>")->capture_default_str();
        c->add_option("--downsample", e.downsample, "max or mean")->capture_default_str();
        c->add_option("--inversion", e.inversion, "euler or fixedpoint:<m>")
            ->capture_default_str();
        c->add_option("--lambda-scale", e.lambda_scale)->capture_default_str();
        c->add_option("--dilate", e.dilate)->capture_default_str();
        c->add_option("--tau", e.tau, "forward-backward occlusion threshold")
            ->capture_default_str();
    };
    add_edit_flags(ced, ed);
    ced->add_flag("--self-reconstruct", ed.self_recon,
                  "replace the edited first frame with the source one");

    PropagateOpts pr;
    auto* cpr = app.add_subcommand("propagate-mask", "propagate the first-frame editing mask");
    cpr->add_option("--scene", pr.scene)->required();
    cpr->add_option("--out", pr.out)->required();
    cpr->add_option("--thr", pr.thr)->capture_default_str();
    cpr->add_option("--flow", pr.flow, "lk, gt, or file:<dir>")->capture_default_str();
    cpr->add_option("--dilate", pr.dilate)->capture_default_str();
    cpr->add_option("--tau", pr.tau)->capture_default_str();
    cpr->add_option("--patch", pr.patch)->capture_default_str();
    cpr->add_option("-r,--ratio", pr.r)->capture_default_str();
    cpr->add_option("--downsample", pr.downsample)->capture_default_str();

    EvalOpts ev;
    auto* cev = app.add_subcommand("eval", "metrics between two frame directories");
    cev->add_option("--output", ev.output)->required();
    cev->add_option("--reference", ev.reference)->required();
    cev->add_option("--masks", ev.masks, "editing masks for the + variants");
    cev->add_option("--flow", ev.flow, "flow dir for warp error");
    cev->add_option("--out", ev.out)->capture_default_str();

    FlowOpts fl;
    auto* cfl = app.add_subcommand("flow", "estimate optical flow for a frame directory");
    cfl->add_option("--frames", fl.frames)->required();
    cfl->add_option("--out", fl.out)->required();
    cfl->add_option("--levels", fl.levels)->capture_default_str();
    cfl->add_option("--window", fl.window)->capture_default_str();
    cfl->add_option("--iterations", fl.iterations)->capture_default_str();
    cfl->add_option("--tau", fl.tau)->capture_default_str();

    AblateOpts ab;
    auto* cab = app.add_subcommand("ablate-thr", "sweep thr and tabulate the tradeoff");
    add_edit_flags(cab, ab.edit);
    cab->add_option("--thr-list", ab.thrs, "thresholds to sweep")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (g.threads > 1 && g.debug)
            std::cerr << "note: execution is serial; --threads recorded only\n";
        if (*cgen) return run_gen_data(g, gen);
        if (*ctr)
            return dispatch_precision(
                g, [&] { return run_train<float>(g, tr); },
                [&] { return run_train<double>(g, tr); });
        if (*ced)
            return dispatch_precision(
                g, [&] { return run_edit<float>(g, ed); },
                [&] { return run_edit<double>(g, ed); });
        if (*cpr) return run_propagate(g, pr);
        if (*cev) return run_eval(g, ev);
        if (*cfl) return run_flow(g, fl);
        if (*cab)
            return dispatch_precision(
                g, [&] { return run_ablate<float>(g, ab); },
                [&] { return run_ablate<double>(g, ab); });
        return 1;
    } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const GeometryError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        if (g.debug) throw;
        return 2;
    }
}
