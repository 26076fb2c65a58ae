#ifndef FREEEDIT_PIPELINE_HPP
#define FREEEDIT_PIPELINE_HPP

#include <chrono>
#include <string>
#include <vector>

#include "freeedit/errors.hpp"
#include "freeedit/flow.hpp"
#include "freeedit/injection.hpp"
#include "freeedit/maskprop.hpp"
#include "freeedit/metrics.hpp"
#include "freeedit/rfnet.hpp"
#include "freeedit/sampler.hpp"
#include "freeedit/videoio.hpp"

namespace freeedit {

enum class FlowSource { Lk, Gt, File };

struct EditJob {
    VideoFrames source;
    Image edited_first;
    FlowSource flow_source = FlowSource::Lk;
    FlowSequence provided_flow;       // gt or file source
    std::filesystem::path flow_dir;   // file source
    FlowParams flow_params;
    float occlusion_tau = 1.0f;
    float thr = 35.0f;
    int steps = 50;
    double cfg_edit = 3.0;
    double cfg_invert = 1.0;
    double cfg_recon = 3.0;  // reconstruction runs at the editing scale
    int fixedpoint_iters = 0;
    InjectionKind policy = InjectionKind::Ree;
    DownsampleMode downsample = DownsampleMode::Max;
    int dilate_radius = 0;
    float lambda_scale = 1.0f;
    std::uint64_t seed = 0;
    const MaskSequence* gt_edit_masks = nullptr;  // metrics only
};

struct EditResult {
    VideoFrames edited;
    VideoFrames reconstructed;
    MaskSequence masks;
    Lambda lambda;
    MetricReport report;
    std::vector<std::string> warnings;
};

namespace detail {

// out-of-bounds-only occlusion, used with exact (ground-truth) flow
inline OcclusionMask oob_occlusion(const FlowField& f) {
    OcclusionMask occ(f.h(), f.w());
    for (int y = 0; y < f.h(); ++y)
        for (int x = 0; x < f.w(); ++x) {
            float tx = x + f.fx.at(y, x), ty = y + f.fy.at(y, x);
            if (tx < 0 || tx > f.w() - 1 || ty < 0 || ty > f.h() - 1)
                occ.occluded.at(y, x) = 1.0f;
        }
    return occ;
}

struct StageTimer {
    std::map<std::string, double>& out;
    std::string name;
    std::chrono::steady_clock::time_point start;
    StageTimer(std::map<std::string, double>& o, std::string n)
        : out(o), name(std::move(n)), start(std::chrono::steady_clock::now()) {}
    ~StageTimer() {
        out[name] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

}  // namespace detail

// Flow + occlusion for a job. Lk flow pairs with forward-backward
// occlusion; exact flow needs only the out-of-bounds rule.
inline void resolve_flow(const EditJob& job, FlowSequence& flows,
                         std::vector<OcclusionMask>& occs) {
    if (job.flow_source == FlowSource::Lk) {
        flows = estimate_sequence(job.source.frames, job.flow_params);
        occs.clear();
        for (std::size_t k = 0; k + 1 < job.source.size(); ++k) {
            FlowField bwd = estimate_flow(job.source[k + 1], job.source[k], job.flow_params);
            occs.push_back(fb_consistency(flows[k], bwd, job.occlusion_tau));
        }
    } else if (job.flow_source == FlowSource::Gt) {
        if (job.provided_flow.size() != job.source.size() - 1)
            throw ContractError("resolve_flow: provided flow count != frames - 1");
        flows = job.provided_flow;
        occs.clear();
        for (const auto& f : flows) occs.push_back(detail::oob_occlusion(f));
    } else {
        flows.clear();
        occs.clear();
        for (std::size_t k = 0; k + 1 < job.source.size(); ++k) {
            char name[32];
            std::snprintf(name, sizeof(name), "flow_%04zu.flo", k);
            flows.push_back(read_flow(job.flow_dir / name));
            occs.push_back(detail::oob_occlusion(flows.back()));
        }
    }
}

// Stages 1-5 of the editing pipeline: lambda construction, inversion,
// reconstruction with capture, editing with injection, decode.
template <typename T = float>
EditResult edit_video(const ModelParams<T>& model, const EditJob& job) {
    const Geometry& g = model.geom;
    if (static_cast<int>(job.source.size()) != g.frame_count())
        throw GeometryError("edit_video: source frame count != 1 + r*n");
    if (!job.edited_first.same_dims(job.source[0]))
        throw GeometryError("edit_video: edited_first dimensions mismatch");
    if (job.thr < 0) throw ContractError("edit_video: thr must be >= 0");

    EditResult res;
    auto& times = res.report.timings_sec;

    // stage 1: masks and modulation weights
    FlowSequence flows;
    std::vector<OcclusionMask> occs;
    {
        detail::StageTimer t(times, "mask_pipeline");
        resolve_flow(job, flows, occs);
        DiffMap d = diff_map(job.source[0], job.edited_first);
        Mask m0 = threshold_mask(d, job.thr);
        res.masks = propagate(m0, flows, &occs, job.dilate_radius);
        auto compressed = compress_temporal(res.masks, g.r);
        TokenMask tm = downsample_flatten(compressed, g.p, job.downsample);
        res.lambda = modulation_weights(tm);
        if (job.lambda_scale != 1.0f)
            for (auto& v : res.lambda.lam.data) v *= job.lambda_scale;
        bool all_edit = true;
        for (float v : res.lambda.lam.data) all_edit = all_edit && v == 0.0f;
        if (all_edit && job.policy == InjectionKind::Vanilla)
            res.warnings.push_back(
                "mask covers every token but policy is vanilla; injection will fight the edit");
    }

    Tokenizer<T> tok(g, model.cfg.tokenizer_seed);
    Tensor<T> z0 = tok.patchify(job.source);
    const std::size_t l = z0.dims[1], c = z0.dims[2];
    Tensor<T> cond_src({l, c});
    for (std::size_t i = 0; i < cond_src.data.size(); ++i) cond_src.data[i] = z0.data[i];
    Tensor<T> cond_edit = tok.encode_first_frame(job.edited_first);

    Schedule sch = make_schedule(job.steps);

    // stage 2: ODE inversion of the source, cfg 1, hooks off
    Tensor<T> z1;
    {
        detail::StageTimer t(times, "inversion");
        GuidanceConfig gc{job.cfg_invert};
        auto vfn = model_velocity(model, cond_src, gc);
        z1 = invert(vfn, z0, cond_src, sch, job.fixedpoint_iters).final_state();
    }

    // stage 3: reconstruction pass, capturing Q/K at every (block, step)
    AttentionCache<T> cache(model.cfg.blocks, job.steps);
    {
        detail::StageTimer t(times, "reconstruction");
        GuidanceConfig gc{job.cfg_recon};
        AttentionHooks<T> hooks;
        hooks.mode = HookMode::Capture;
        hooks.cache = &cache;
        auto vfn = model_velocity(model, cond_src, gc, &hooks);
        auto traj = sample(vfn, z1, cond_src, sch);
        res.reconstructed = tok.unpatchify(traj.final_state());
    }
    cache.lock();

    // stage 4: editing pass from the same z1, injecting per policy
    {
        detail::StageTimer t(times, "editing");
        GuidanceConfig gc{job.cfg_edit};
        InjectionPolicy pol;
        pol.kind = job.policy;
        if (pol.kind == InjectionKind::Ree) {
            pol.lambda = res.lambda;
            pol.validate(z0.dims[0], l);
        }
        AttentionHooks<T> hooks;
        if (pol.kind != InjectionKind::None) {
            hooks.mode = HookMode::Inject;
            hooks.cache = &cache;
            hooks.policy = &pol;
        }
        auto vfn = model_velocity(model, cond_edit, gc, &hooks);
        auto traj = sample(vfn, z1, cond_edit, sch);
        res.edited = tok.unpatchify(traj.final_state());
    }

    // stage 5: metrics on the decoded output
    {
        detail::StageTimer t(times, "metrics");
        for (auto& f : res.edited.frames)
            for (auto& v : f.px) v = std::clamp(v, 0.0f, 1.0f);
        for (auto& f : res.reconstructed.frames)
            for (auto& v : f.px) v = std::clamp(v, 0.0f, 1.0f);
        res.report.warp_error = warp_error(res.edited, flows, &occs);
        res.report.ssim = video_ssim(res.edited, job.source);
        res.report.psnr = video_psnr(res.edited, job.source);
        bool has_non_edit = true, has_any = false;
        for (const auto& m : res.masks) {
            if (m.area() == m.m.v.size()) has_non_edit = false;
            if (m.area() > 0) has_any = true;
        }
        (void)has_any;
        if (has_non_edit) {
            res.report.warp_error_plus = warp_error(res.edited, flows, &occs, &res.masks);
            res.report.psnr_plus = masked_psnr(res.edited, job.source, res.masks);
            res.report.ssim_plus = masked_ssim(res.edited, job.source, res.masks);
        }
        if (job.gt_edit_masks) res.report.iou = mask_iou(res.masks, *job.gt_edit_masks);
    }
    return res;
}

template <typename T = float>
EditResult self_reconstruct(const ModelParams<T>& model, EditJob job) {
    job.edited_first = job.source[0];
    job.policy = InjectionKind::Vanilla;
    return edit_video(model, job);
}

}  // namespace freeedit

#endif
