#ifndef FREEEDIT_MASKPROP_HPP
#define FREEEDIT_MASKPROP_HPP

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "freeedit/errors.hpp"
#include "freeedit/flow.hpp"
#include "freeedit/image.hpp"
#include "freeedit/tensor.hpp"

namespace freeedit {

// Per-pixel edit magnitude on the 8-bit [0,255] scale.
struct DiffMap {
    Plane d;
};

// Binary editing mask; 1 marks edited pixels ({0,255} at PNG export).
struct Mask {
    Plane m;
    int frame_index = 0;

    int h() const { return m.h; }
    int w() const { return m.w; }

    std::size_t area() const {
        std::size_t n = 0;
        for (float v : m.v) n += (v != 0.0f);
        return n;
    }
};

using MaskSequence = std::vector<Mask>;

// Temporally compressed, token-resolution mask: (1+n) x l, values in {0,1}.
struct TokenMask {
    Tensor<float> tm;  // dims {1+n, l}
};

// Modulation weights, (1+n) x l x 1, broadcast over channels and heads.
struct Lambda {
    Tensor<float> lam;  // dims {1+n, l, 1}
};

enum class DownsampleMode { Max, Mean };
enum class ChunkIndexing { ChunkRelative, Literal };

// Edit magnitude: 255 * max-over-channels |edited - src|.
inline DiffMap diff_map(const Image& src_first, const Image& edited_first) {
    if (!src_first.same_dims(edited_first)) throw GeometryError("diff_map: dimensions differ");
    DiffMap out;
    out.d = Plane(src_first.h, src_first.w);
    for (int y = 0; y < src_first.h; ++y)
        for (int x = 0; x < src_first.w; ++x) {
            float m = 0;
            for (int c = 0; c < 3; ++c)
                m = std::max(m, std::fabs(edited_first.at(y, x, c) - src_first.at(y, x, c)));
            out.d.at(y, x) = 255.0f * m;
        }
    return out;
}

// Strict threshold: 1 iff d > thr.
inline Mask threshold_mask(const DiffMap& d, float thr) {
    if (thr < 0) throw ContractError("threshold_mask: thr must be >= 0");
    Mask out;
    out.m = Plane(d.d.h, d.d.w);
    out.frame_index = 0;
    for (std::size_t i = 0; i < d.d.v.size(); ++i) out.m.v[i] = d.d.v[i] > thr ? 1.0f : 0.0f;
    return out;
}

inline Mask dilate(const Mask& m, int radius) {
    if (radius <= 0) return m;
    Mask out = m;
    for (int y = 0; y < m.h(); ++y)
        for (int x = 0; x < m.w(); ++x) {
            float v = 0;
            for (int dy = -radius; dy <= radius && v == 0; ++dy)
                for (int dx = -radius; dx <= radius; ++dx) {
                    int yy = y + dy, xx = x + dx;
                    if (yy >= 0 && yy < m.h() && xx >= 0 && xx < m.w() && m.m.at(yy, xx) != 0) {
                        v = 1;
                        break;
                    }
                }
            out.m.at(y, x) = v;
        }
    return out;
}

// Forward splatting: each set source pixel marks round(x+fx, y+fy) in the
// target; conflicts OR-combine; occluded targets are forced to 0.
inline Mask warp_mask(const Mask& m, const FlowField& f, const OcclusionMask* occ = nullptr) {
    if (m.h() != f.h() || m.w() != f.w()) throw GeometryError("warp_mask: dimensions differ");
    if (occ && (occ->occluded.h != m.h() || occ->occluded.w != m.w()))
        throw GeometryError("warp_mask: occlusion dimensions differ");
    Mask out;
    out.m = Plane(m.h(), m.w());
    out.frame_index = m.frame_index + 1;
    for (int y = 0; y < m.h(); ++y)
        for (int x = 0; x < m.w(); ++x) {
            if (m.m.at(y, x) == 0) continue;
            int tx = static_cast<int>(std::lround(x + f.fx.at(y, x)));
            int ty = static_cast<int>(std::lround(y + f.fy.at(y, x)));
            if (tx < 0 || tx >= m.w() || ty < 0 || ty >= m.h()) continue;
            out.m.at(ty, tx) = 1.0f;
        }
    if (occ)
        for (std::size_t i = 0; i < out.m.v.size(); ++i)
            if (occ->occluded.v[i] != 0) out.m.v[i] = 0.0f;
    return out;
}

// Autoregressive propagation of the first-frame mask over the whole video.
inline MaskSequence propagate(const Mask& m0, const FlowSequence& flows,
                              const std::vector<OcclusionMask>* occs = nullptr,
                              int dilate_radius = 0) {
    if (occs && occs->size() != flows.size())
        throw ContractError("propagate: occlusion count != flow count");
    MaskSequence seq;
    seq.reserve(flows.size() + 1);
    Mask cur = dilate_radius > 0 ? dilate(m0, dilate_radius) : m0;
    cur.frame_index = 0;
    seq.push_back(cur);
    for (std::size_t k = 0; k < flows.size(); ++k) {
        cur = warp_mask(cur, flows[k], occs ? &(*occs)[k] : nullptr);
        seq.push_back(cur);
    }
    return seq;
}

// Chunk representative selection. Chunk-relative mode picks frame
// (k-1)*r + ceil(r/2) for chunk k in 1..n; literal mode picks ceil(r/2)*k.
inline std::vector<Mask> compress_temporal(const MaskSequence& ms, int r,
                                           ChunkIndexing indexing = ChunkIndexing::ChunkRelative) {
    if (r < 1) throw ContractError("compress_temporal: r >= 1 required");
    if (ms.empty() || (ms.size() - 1) % static_cast<std::size_t>(r) != 0)
        throw ContractError("compress_temporal: length must be 1 + r*n");
    std::size_t n = (ms.size() - 1) / static_cast<std::size_t>(r);
    std::size_t half = static_cast<std::size_t>((r + 1) / 2);  // ceil(r/2)
    std::vector<Mask> out;
    out.reserve(1 + n);
    out.push_back(ms[0]);
    for (std::size_t k = 1; k <= n; ++k) {
        std::size_t idx = indexing == ChunkIndexing::ChunkRelative ? (k - 1) * r + half : half * k;
        if (idx >= ms.size()) idx = ms.size() - 1;  // literal mode can overrun for r > 2
        out.push_back(ms[idx]);
    }
    return out;
}

// Patch pooling down to token resolution, then row-major flatten to l per
// latent frame. Max mode sets a token when any pixel of its patch is set;
// mean mode when the patch mean exceeds 0.5 (strict).
inline TokenMask downsample_flatten(const std::vector<Mask>& cm, int patch,
                                    DownsampleMode mode = DownsampleMode::Max) {
    if (cm.empty()) throw ContractError("downsample_flatten: empty input");
    int h = cm[0].h(), w = cm[0].w();
    if (patch < 1 || h % patch != 0 || w % patch != 0)
        throw GeometryError("downsample_flatten: patch must divide H and W");
    int gh = h / patch, gw = w / patch;
    std::size_t l = static_cast<std::size_t>(gh) * gw;
    TokenMask out;
    out.tm = Tensor<float>({cm.size(), l});
    for (std::size_t fi = 0; fi < cm.size(); ++fi) {
        if (cm[fi].h() != h || cm[fi].w() != w)
            throw GeometryError("downsample_flatten: mixed mask dimensions");
        for (int gy = 0; gy < gh; ++gy)
            for (int gx = 0; gx < gw; ++gx) {
                float acc = 0;
                for (int dy = 0; dy < patch; ++dy)
                    for (int dx = 0; dx < patch; ++dx)
                        acc += cm[fi].m.at(gy * patch + dy, gx * patch + dx);
                float tok;
                if (mode == DownsampleMode::Max)
                    tok = acc > 0 ? 1.0f : 0.0f;
                else
                    tok = (acc / (patch * patch)) > 0.5f ? 1.0f : 0.0f;
                out.tm.at(fi, static_cast<std::size_t>(gy) * gw + gx) = tok;
            }
    }
    return out;
}

// lambda = 1 - token mask; editing tokens get 0, non-editing tokens 1.
inline Lambda modulation_weights(const TokenMask& tm) {
    for (float v : tm.tm.data)
        if (v != 0.0f && v != 1.0f) throw ContractError("modulation_weights: non-binary input");
    Lambda out;
    out.lam = Tensor<float>({tm.tm.dims[0], tm.tm.dims[1], 1});
    for (std::size_t i = 0; i < tm.tm.data.size(); ++i) out.lam.data[i] = 1.0f - tm.tm.data[i];
    return out;
}

inline void save_mask_png(const Mask& m, const std::filesystem::path& path) {
    std::vector<std::uint8_t> rows(m.m.v.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = m.m.v[i] != 0 ? 255 : 0;
    write_png(path, rows.data(), m.h(), m.w(), 1);
}

inline Mask load_mask_png(const std::filesystem::path& path, int frame_index = 0) {
    int h = 0, w = 0;
    auto rows = read_png(path, h, w, 1);
    Mask m;
    m.m = Plane(h, w);
    m.frame_index = frame_index;
    for (std::size_t i = 0; i < rows.size(); ++i) m.m.v[i] = rows[i] >= 128 ? 1.0f : 0.0f;
    return m;
}

}  // namespace freeedit

#endif
