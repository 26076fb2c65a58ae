#ifndef FREEEDIT_FLOW_HPP
#define FREEEDIT_FLOW_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "freeedit/errors.hpp"
#include "freeedit/image.hpp"
#include "freeedit/tensor.hpp"

namespace freeedit {

// Dense displacement field between two consecutive frames, in pixels.
// fx is horizontal (+x right), fy vertical (+y down).
struct FlowField {
    Plane fx;
    Plane fy;

    FlowField() = default;
    FlowField(int h, int w) : fx(h, w), fy(h, w) {}

    int h() const { return fx.h; }
    int w() const { return fx.w; }

    bool finite() const {
        for (float v : fx.v)
            if (!std::isfinite(v)) return false;
        for (float v : fy.v)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// Entry k maps frame k -> frame k+1.
using FlowSequence = std::vector<FlowField>;

struct OcclusionMask {
    Plane occluded;  // values in {0,1}

    OcclusionMask() = default;
    OcclusionMask(int h, int w) : occluded(h, w) {}
};

struct FlowParams {
    int levels = 3;      // pyramid levels
    int window = 7;      // odd window edge
    int iterations = 3;  // warp iterations per level
    float damping = 1e-3f;  // Tikhonov damping on the normal equations
};

namespace detail {

inline float luma(const Image& img, int y, int x) {
    // ITU-R 601 weights
    return 0.299f * img.at(y, x, 0) + 0.587f * img.at(y, x, 1) + 0.114f * img.at(y, x, 2);
}

inline Plane to_gray(const Image& img) {
    Plane g(img.h, img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) g.at(y, x) = luma(img, y, x);
    return g;
}

inline float sample_clamped(const Plane& p, int y, int x) {
    y = std::clamp(y, 0, p.h - 1);
    x = std::clamp(x, 0, p.w - 1);
    return p.at(y, x);
}

// Bilinear lookup with edge clamping.
inline float sample_bilinear(const Plane& p, float y, float x) {
    float xc = std::clamp(x, 0.0f, float(p.w - 1));
    float yc = std::clamp(y, 0.0f, float(p.h - 1));
    int x0 = static_cast<int>(std::floor(xc));
    int y0 = static_cast<int>(std::floor(yc));
    int x1 = std::min(x0 + 1, p.w - 1);
    int y1 = std::min(y0 + 1, p.h - 1);
    float ax = xc - x0, ay = yc - y0;
    return (1 - ay) * ((1 - ax) * p.at(y0, x0) + ax * p.at(y0, x1)) +
           ay * ((1 - ax) * p.at(y1, x0) + ax * p.at(y1, x1));
}

inline Plane downsample2(const Plane& p) {
    int h = std::max(1, p.h / 2), w = std::max(1, p.w / 2);
    Plane out(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            float s = sample_clamped(p, 2 * y, 2 * x) + sample_clamped(p, 2 * y, 2 * x + 1) +
                      sample_clamped(p, 2 * y + 1, 2 * x) + sample_clamped(p, 2 * y + 1, 2 * x + 1);
            out.at(y, x) = 0.25f * s;
        }
    return out;
}

}  // namespace detail

// Pyramidal Lucas-Kanade. Per-window least squares with Tikhonov damping;
// untextured windows fall back to zero flow through the damping term.
inline FlowField estimate_flow(const Image& a, const Image& b, const FlowParams& params = {}) {
    if (!a.same_dims(b)) throw GeometryError("estimate_flow: frame dimensions differ");
    if (params.levels < 1 || params.window < 1 || params.window % 2 == 0)
        throw ContractError("estimate_flow: levels >= 1 and odd window required");

    std::vector<Plane> pyr_a, pyr_b;
    pyr_a.push_back(detail::to_gray(a));
    pyr_b.push_back(detail::to_gray(b));
    for (int l = 1; l < params.levels; ++l) {
        if (pyr_a.back().h < 4 || pyr_a.back().w < 4) break;
        pyr_a.push_back(detail::downsample2(pyr_a.back()));
        pyr_b.push_back(detail::downsample2(pyr_b.back()));
    }

    int coarsest = static_cast<int>(pyr_a.size()) - 1;
    FlowField flow(pyr_a[coarsest].h, pyr_a[coarsest].w);

    int rad = params.window / 2;
    for (int level = coarsest; level >= 0; --level) {
        const Plane& ga = pyr_a[level];
        const Plane& gb = pyr_b[level];
        if (level != coarsest) {
            // upsample previous level's flow, scaling displacements by 2
            FlowField up(ga.h, ga.w);
            for (int y = 0; y < ga.h; ++y)
                for (int x = 0; x < ga.w; ++x) {
                    up.fx.at(y, x) = 2.0f * detail::sample_bilinear(flow.fx, y * 0.5f, x * 0.5f);
                    up.fy.at(y, x) = 2.0f * detail::sample_bilinear(flow.fy, y * 0.5f, x * 0.5f);
                }
            flow = std::move(up);
        }

        for (int iter = 0; iter < params.iterations; ++iter) {
            FlowField next = flow;
            for (int y = 0; y < ga.h; ++y) {
                for (int x = 0; x < ga.w; ++x) {
                    float u = flow.fx.at(y, x);
                    float v = flow.fy.at(y, x);
                    float a11 = params.damping, a12 = 0, a22 = params.damping;
                    float b1 = 0, b2 = 0;
                    for (int dy = -rad; dy <= rad; ++dy) {
                        for (int dx = -rad; dx <= rad; ++dx) {
                            int yy = y + dy, xx = x + dx;
                            float ix = 0.5f * (detail::sample_clamped(ga, yy, xx + 1) -
                                               detail::sample_clamped(ga, yy, xx - 1));
                            float iy = 0.5f * (detail::sample_clamped(ga, yy + 1, xx) -
                                               detail::sample_clamped(ga, yy - 1, xx));
                            float warped = detail::sample_bilinear(gb, yy + v, xx + u);
                            float it = warped - detail::sample_clamped(ga, yy, xx);
                            a11 += ix * ix;
                            a12 += ix * iy;
                            a22 += iy * iy;
                            b1 -= ix * it;
                            b2 -= iy * it;
                        }
                    }
                    float det = a11 * a22 - a12 * a12;
                    if (det > 0) {
                        next.fx.at(y, x) = u + (a22 * b1 - a12 * b2) / det;
                        next.fy.at(y, x) = v + (a11 * b2 - a12 * b1) / det;
                    }
                }
            }
            flow = std::move(next);
        }
    }

    if (!flow.finite()) throw NumericalError("estimate_flow produced non-finite values");
    return flow;
}

template <typename Frames>
FlowSequence estimate_sequence(const Frames& frames, const FlowParams& params = {}) {
    if (frames.size() < 2) throw ContractError("estimate_sequence: need >= 2 frames");
    FlowSequence seq;
    seq.reserve(frames.size() - 1);
    for (std::size_t k = 0; k + 1 < frames.size(); ++k)
        seq.push_back(estimate_flow(frames[k], frames[k + 1], params));
    return seq;
}

// Forward-backward consistency. A pixel is occluded when the forward flow
// maps it out of bounds, or the round trip fwd + bwd(x+fwd) exceeds tau.
inline OcclusionMask fb_consistency(const FlowField& fwd, const FlowField& bwd, float tau = 1.0f) {
    if (fwd.h() != bwd.h() || fwd.w() != bwd.w())
        throw GeometryError("fb_consistency: dimensions differ");
    if (!(tau > 0)) throw ContractError("fb_consistency: tau must be > 0");
    OcclusionMask occ(fwd.h(), fwd.w());
    for (int y = 0; y < fwd.h(); ++y) {
        for (int x = 0; x < fwd.w(); ++x) {
            float tx = x + fwd.fx.at(y, x);
            float ty = y + fwd.fy.at(y, x);
            if (tx < 0 || tx > fwd.w() - 1 || ty < 0 || ty > fwd.h() - 1) {
                occ.occluded.at(y, x) = 1.0f;
                continue;
            }
            float rx = fwd.fx.at(y, x) + detail::sample_bilinear(bwd.fx, ty, tx);
            float ry = fwd.fy.at(y, x) + detail::sample_bilinear(bwd.fy, ty, tx);
            if (std::sqrt(rx * rx + ry * ry) > tau) occ.occluded.at(y, x) = 1.0f;
        }
    }
    return occ;
}

// FLO1 container: magic "FLO1", u32 LE width, u32 LE height, then H*W
// interleaved (fx, fy) float32 LE, row-major.
inline void write_flow(const FlowField& f, const std::filesystem::path& path) {
    if (!f.finite()) throw ContractError("write_flow: field contains non-finite values");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path.string());
    os.write("FLO1", 4);
    detail::put_u32le(os, static_cast<std::uint32_t>(f.w()));
    detail::put_u32le(os, static_cast<std::uint32_t>(f.h()));
    for (int y = 0; y < f.h(); ++y)
        for (int x = 0; x < f.w(); ++x) {
            float pair[2] = {f.fx.at(y, x), f.fy.at(y, x)};
            os.write(reinterpret_cast<const char*>(pair), 8);
        }
    if (!os) throw IoError("write failed: " + path.string());
}

inline FlowField read_flow(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for read: " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "FLO1", 4) != 0) throw FormatError("bad magic tag");
    std::uint32_t w = detail::get_u32le(is);
    std::uint32_t h = detail::get_u32le(is);
    FlowField f(static_cast<int>(h), static_cast<int>(w));
    for (std::uint32_t y = 0; y < h; ++y)
        for (std::uint32_t x = 0; x < w; ++x) {
            float pair[2];
            is.read(reinterpret_cast<char*>(pair), 8);
            if (static_cast<std::size_t>(is.gcount()) != 8)
                throw FormatError("truncated payload");
            f.fx.at(y, x) = pair[0];
            f.fy.at(y, x) = pair[1];
        }
    return f;
}

}  // namespace freeedit

#endif
