#ifndef FREEEDIT_METRICS_HPP
#define FREEEDIT_METRICS_HPP

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "freeedit/errors.hpp"
#include "freeedit/flow.hpp"
#include "freeedit/maskprop.hpp"
#include "freeedit/videoio.hpp"

namespace freeedit {

constexpr double kPsnrCap = 99.0;

struct MetricReport {
    double warp_error = 0;
    double ssim = 0;
    double psnr = 0;
    std::optional<double> warp_error_plus;
    std::optional<double> ssim_plus;
    std::optional<double> psnr_plus;
    std::optional<double> iou;
    std::map<std::string, double> timings_sec;
};

namespace detail {

inline double psnr_from_mse(double mse) {
    if (mse < 1e-10) return kPsnrCap;
    double v = 10.0 * std::log10(1.0 / mse);
    return v > kPsnrCap ? kPsnrCap : v;
}

inline Image bilinear_rgb(const Image& img, float y, float x) {
    Image out(1, 1);
    float xc = std::clamp(x, 0.0f, float(img.w - 1));
    float yc = std::clamp(y, 0.0f, float(img.h - 1));
    int x0 = static_cast<int>(std::floor(xc)), y0 = static_cast<int>(std::floor(yc));
    int x1 = std::min(x0 + 1, img.w - 1), y1 = std::min(y0 + 1, img.h - 1);
    float ax = xc - x0, ay = yc - y0;
    for (int c = 0; c < 3; ++c)
        out.at(0, 0, c) = (1 - ay) * ((1 - ax) * img.at(y0, x0, c) + ax * img.at(y0, x1, c)) +
                          ay * ((1 - ax) * img.at(y1, x0, c) + ax * img.at(y1, x1, c));
    return out;
}

// 11-tap Gaussian, sigma 1.5, normalized
inline const std::vector<double>& ssim_kernel() {
    static const std::vector<double> k = [] {
        std::vector<double> v(11);
        double sum = 0;
        for (int i = 0; i < 11; ++i) {
            double d = i - 5;
            v[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
            sum += v[i];
        }
        for (auto& x : v) x /= sum;
        return v;
    }();
    return k;
}

inline Plane gauss_blur(const Plane& p) {
    const auto& k = ssim_kernel();
    Plane tmp(p.h, p.w), out(p.h, p.w);
    for (int y = 0; y < p.h; ++y)
        for (int x = 0; x < p.w; ++x) {
            double s = 0;
            for (int i = -5; i <= 5; ++i)
                s += k[i + 5] * p.at(y, std::clamp(x + i, 0, p.w - 1));
            tmp.at(y, x) = static_cast<float>(s);
        }
    for (int y = 0; y < p.h; ++y)
        for (int x = 0; x < p.w; ++x) {
            double s = 0;
            for (int i = -5; i <= 5; ++i)
                s += k[i + 5] * tmp.at(std::clamp(y + i, 0, p.h - 1), x);
            out.at(y, x) = static_cast<float>(s);
        }
    return out;
}

}  // namespace detail

// Per-pixel SSIM map on luma, window 11 Gaussian sigma 1.5, K1=0.01,
// K2=0.03, dynamic range 1.
inline Plane ssim_map(const Image& a, const Image& b) {
    if (!a.same_dims(b)) throw ContractError("ssim: dimensions differ");
    Plane ga = detail::to_gray(a), gb = detail::to_gray(b);
    Plane ga2(a.h, a.w), gb2(a.h, a.w), gab(a.h, a.w);
    for (std::size_t i = 0; i < ga.v.size(); ++i) {
        ga2.v[i] = ga.v[i] * ga.v[i];
        gb2.v[i] = gb.v[i] * gb.v[i];
        gab.v[i] = ga.v[i] * gb.v[i];
    }
    Plane mu_a = detail::gauss_blur(ga), mu_b = detail::gauss_blur(gb);
    Plane s_a2 = detail::gauss_blur(ga2), s_b2 = detail::gauss_blur(gb2);
    Plane s_ab = detail::gauss_blur(gab);
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    Plane out(a.h, a.w);
    for (std::size_t i = 0; i < out.v.size(); ++i) {
        double ma = mu_a.v[i], mb = mu_b.v[i];
        double va = s_a2.v[i] - ma * ma;
        double vb = s_b2.v[i] - mb * mb;
        double cov = s_ab.v[i] - ma * mb;
        out.v[i] = static_cast<float>(((2 * ma * mb + c1) * (2 * cov + c2)) /
                                      ((ma * ma + mb * mb + c1) * (va + vb + c2)));
    }
    return out;
}

inline double ssim(const Image& a, const Image& b) {
    Plane m = ssim_map(a, b);
    double s = 0;
    for (float v : m.v) s += v;
    return s / static_cast<double>(m.v.size());
}

inline double mse(const Image& a, const Image& b) {
    if (!a.same_dims(b)) throw ContractError("mse: dimensions differ");
    double s = 0;
    for (std::size_t i = 0; i < a.px.size(); ++i) {
        double d = double(a.px[i]) - b.px[i];
        s += d * d;
    }
    return s / static_cast<double>(a.px.size());
}

inline double psnr(const Image& a, const Image& b) { return detail::psnr_from_mse(mse(a, b)); }

// Temporal consistency: edited frame k, pushed forward by source flow k,
// against edited frame k+1, as mean MSE over valid pixels. A pixel is
// valid when in bounds and, when an occlusion mask is given, not occluded.
// An optional mask sequence restricts to mask==0 (non-editing) pixels.
inline double warp_error(const VideoFrames& edited, const FlowSequence& flows,
                         const std::vector<OcclusionMask>* occs = nullptr,
                         const MaskSequence* exclude = nullptr) {
    if (edited.size() != flows.size() + 1)
        throw ContractError("warp_error: flow count must be frames - 1");
    if (occs && occs->size() != flows.size())
        throw ContractError("warp_error: occlusion count mismatch");
    if (exclude && exclude->size() != edited.size())
        throw ContractError("warp_error: mask count mismatch");
    double sum = 0;
    std::size_t count = 0;
    for (std::size_t k = 0; k < flows.size(); ++k) {
        const Image& cur = edited[k];
        const Image& nxt = edited[k + 1];
        const FlowField& f = flows[k];
        if (cur.h != f.h() || cur.w != f.w())
            throw GeometryError("warp_error: flow/frame dimensions differ");
        for (int y = 0; y < cur.h; ++y)
            for (int x = 0; x < cur.w; ++x) {
                if (occs && (*occs)[k].occluded.at(y, x) != 0) continue;
                if (exclude && (*exclude)[k].m.at(y, x) != 0) continue;
                float tx = x + f.fx.at(y, x), ty = y + f.fy.at(y, x);
                if (tx < 0 || tx > cur.w - 1 || ty < 0 || ty > cur.h - 1) continue;
                Image tgt = detail::bilinear_rgb(nxt, ty, tx);
                for (int c = 0; c < 3; ++c) {
                    double d = double(cur.at(y, x, c)) - tgt.at(0, 0, c);
                    sum += d * d;
                }
                count += 3;
            }
    }
    if (count == 0) throw ContractError("warp_error: no valid pixels");
    return sum / static_cast<double>(count);
}

// Fidelity restricted to mask==0 pixels, aggregated across all frames.
inline double masked_psnr(const VideoFrames& a, const VideoFrames& b, const MaskSequence& masks) {
    if (a.size() != b.size() || a.size() != masks.size())
        throw ContractError("masked_psnr: length mismatch");
    double sum = 0;
    std::size_t count = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        if (!a[k].same_dims(b[k])) throw ContractError("masked_psnr: dimensions differ");
        for (int y = 0; y < a[k].h; ++y)
            for (int x = 0; x < a[k].w; ++x) {
                if (masks[k].m.at(y, x) != 0) continue;
                for (int c = 0; c < 3; ++c) {
                    double d = double(a[k].at(y, x, c)) - b[k].at(y, x, c);
                    sum += d * d;
                }
                count += 3;
            }
    }
    if (count == 0) throw ContractError("masked_psnr: empty non-editing region");
    return detail::psnr_from_mse(sum / static_cast<double>(count));
}

inline double masked_ssim(const VideoFrames& a, const VideoFrames& b, const MaskSequence& masks) {
    if (a.size() != b.size() || a.size() != masks.size())
        throw ContractError("masked_ssim: length mismatch");
    double sum = 0;
    std::size_t count = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        Plane m = ssim_map(a[k], b[k]);
        for (int y = 0; y < m.h; ++y)
            for (int x = 0; x < m.w; ++x) {
                if (masks[k].m.at(y, x) != 0) continue;
                sum += m.at(y, x);
                ++count;
            }
    }
    if (count == 0) throw ContractError("masked_ssim: empty non-editing region");
    return sum / static_cast<double>(count);
}

// Mean IoU over frames; empty-vs-empty counts as 1.
inline double mask_iou(const MaskSequence& a, const MaskSequence& b) {
    if (a.size() != b.size()) throw ContractError("mask_iou: length mismatch");
    if (a.empty()) throw ContractError("mask_iou: empty sequences");
    double total = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        if (!a[k].m.same_dims(b[k].m)) throw ContractError("mask_iou: dimensions differ");
        std::size_t inter = 0, uni = 0;
        for (std::size_t i = 0; i < a[k].m.v.size(); ++i) {
            bool av = a[k].m.v[i] != 0, bv = b[k].m.v[i] != 0;
            inter += (av && bv);
            uni += (av || bv);
        }
        total += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    }
    return total / static_cast<double>(a.size());
}

inline double iou_single(const Mask& a, const Mask& b) {
    MaskSequence sa{a}, sb{b};
    return mask_iou(sa, sb);
}

// accumulates in the same element order as masked_psnr so an all-zero mask
// reproduces this value bitwise
inline double video_psnr(const VideoFrames& a, const VideoFrames& b) {
    if (a.size() != b.size()) throw ContractError("video_psnr: length mismatch");
    double sum = 0;
    std::size_t count = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        if (!a[k].same_dims(b[k])) throw ContractError("video_psnr: dimensions differ");
        for (std::size_t i = 0; i < a[k].px.size(); ++i) {
            double d = double(a[k].px[i]) - b[k].px[i];
            sum += d * d;
        }
        count += a[k].px.size();
    }
    return detail::psnr_from_mse(sum / static_cast<double>(count));
}

inline double video_ssim(const VideoFrames& a, const VideoFrames& b) {
    if (a.size() != b.size()) throw ContractError("video_ssim: length mismatch");
    double s = 0;
    for (std::size_t k = 0; k < a.size(); ++k) s += ssim(a[k], b[k]);
    return s / static_cast<double>(a.size());
}

inline void write_report(const MetricReport& r, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write report: " + path.string());
    os << "# warp_error excludes occluded pixels (forward-backward rule)\n";
    os << "warp_error=" << r.warp_error << "\n";
    os << "ssim=" << r.ssim << "\n";
    os << "psnr=" << r.psnr << "\n";
    if (r.warp_error_plus) os << "warp_error_plus=" << *r.warp_error_plus << "\n";
    if (r.ssim_plus) os << "ssim_plus=" << *r.ssim_plus << "\n";
    if (r.psnr_plus) os << "psnr_plus=" << *r.psnr_plus << "\n";
    if (r.iou) os << "iou=" << *r.iou << "\n";
    for (const auto& [k, v] : r.timings_sec) os << "time_" << k << "=" << v << "\n";
}

}  // namespace freeedit

#endif
