#ifndef FREEEDIT_RFNET_HPP
#define FREEEDIT_RFNET_HPP

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "freeedit/errors.hpp"
#include "freeedit/injection.hpp"
#include "freeedit/tensor.hpp"
#include "freeedit/videoio.hpp"

namespace freeedit {

// ---------------------------------------------------------------- linalg ----

namespace nn {

// C = A(BxK) * B(KxN)
template <typename T>
Tensor<T> matmul(const Tensor<T>& A, const Tensor<T>& B) {
    const std::size_t M = A.dims[0], K = A.dims[1], N = B.dims[1];
    if (B.dims[0] != K) throw ContractError("matmul: inner dims differ");
    Tensor<T> C({M, N});
    for (std::size_t i = 0; i < M; ++i)
        for (std::size_t k = 0; k < K; ++k) {
            const T a = A.data[i * K + k];
            if (a == T(0)) continue;
            const T* brow = &B.data[k * N];
            T* crow = &C.data[i * N];
            for (std::size_t j = 0; j < N; ++j) crow[j] += a * brow[j];
        }
    return C;
}

// C = A^T(MxK->KxM is input A KxM? no): A is (K x M), returns (M x N) = A^T * B
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& A, const Tensor<T>& B) {
    const std::size_t K = A.dims[0], M = A.dims[1], N = B.dims[1];
    if (B.dims[0] != K) throw ContractError("matmul_tn: inner dims differ");
    Tensor<T> C({M, N});
    for (std::size_t k = 0; k < K; ++k) {
        const T* arow = &A.data[k * M];
        const T* brow = &B.data[k * N];
        for (std::size_t i = 0; i < M; ++i) {
            const T a = arow[i];
            if (a == T(0)) continue;
            T* crow = &C.data[i * N];
            for (std::size_t j = 0; j < N; ++j) crow[j] += a * brow[j];
        }
    }
    return C;
}

// C = A(MxK) * B^T where B is (N x K)
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& A, const Tensor<T>& B) {
    const std::size_t M = A.dims[0], K = A.dims[1], N = B.dims[0];
    if (B.dims[1] != K) throw ContractError("matmul_nt: inner dims differ");
    Tensor<T> C({M, N});
    for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < N; ++j) {
            const T* arow = &A.data[i * K];
            const T* brow = &B.data[j * K];
            T s = 0;
            for (std::size_t k = 0; k < K; ++k) s += arow[k] * brow[k];
            C.data[i * N + j] = s;
        }
    return C;
}

template <typename T>
T gelu(T x) {
    const T k = T(0.7978845608028654);  // sqrt(2/pi)
    T inner = k * (x + T(0.044715) * x * x * x);
    return T(0.5) * x * (T(1) + std::tanh(inner));
}

template <typename T>
T gelu_grad(T x) {
    const T k = T(0.7978845608028654);
    T x3 = x * x * x;
    T inner = k * (x + T(0.044715) * x3);
    T th = std::tanh(inner);
    T sech2 = T(1) - th * th;
    return T(0.5) * (T(1) + th) + T(0.5) * x * sech2 * k * (T(1) + T(0.134145) * x * x);
}

}  // namespace nn

// ------------------------------------------------------------- tokenizer ----

// Fixed orthogonal c x c matrix from a seeded Gaussian + modified
// Gram-Schmidt, generated in double for stability.
inline Tensor<double> make_orthogonal(std::size_t c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Tensor<double> E({c, c});
    for (auto& v : E.data) v = gauss(rng);
    for (std::size_t i = 0; i < c; ++i) {
        double* vi = &E.data[i * c];
        for (std::size_t j = 0; j < i; ++j) {
            const double* vj = &E.data[j * c];
            double dot = 0;
            for (std::size_t k = 0; k < c; ++k) dot += vi[k] * vj[k];
            for (std::size_t k = 0; k < c; ++k) vi[k] -= dot * vj[k];
        }
        double norm = 0;
        for (std::size_t k = 0; k < c; ++k) norm += vi[k] * vi[k];
        norm = std::sqrt(norm);
        if (norm < 1e-8) throw NumericalError("make_orthogonal: degenerate basis vector");
        for (std::size_t k = 0; k < c; ++k) vi[k] /= norm;
    }
    return E;
}

// Invertible linear tokenizer. Latent frame 0 holds frame 0 alone (patch
// vector zero-padded to c); latent frame k holds the r raw frames of chunk
// k. Pixels enter as 2v-1. token = E * pad(u).
template <typename T = float>
struct Tokenizer {
    Geometry geom;
    Tensor<T> E;  // c x c orthogonal
    std::uint64_t seed = 0;

    Tokenizer() = default;
    Tokenizer(const Geometry& g, std::uint64_t tok_seed) : geom(g), seed(tok_seed) {
        geom.validate();
        auto Ed = make_orthogonal(static_cast<std::size_t>(geom.channels()), tok_seed);
        E = Tensor<T>({Ed.dims[0], Ed.dims[1]});
        for (std::size_t i = 0; i < Ed.data.size(); ++i) E.data[i] = static_cast<T>(Ed.data[i]);
    }

    // gather the raw-pixel vector feeding one token, length <= c
    std::vector<T> patch_vector(const VideoFrames& v, int latent, int gy, int gx) const {
        const int p = geom.p;
        std::vector<T> u;
        int first = latent == 0 ? 0 : 1 + (latent - 1) * geom.r;
        int count = latent == 0 ? 1 : geom.r;
        u.reserve(std::size_t(count) * p * p * 3);
        for (int f = 0; f < count; ++f) {
            const Image& img = v[first + f];
            for (int dy = 0; dy < p; ++dy)
                for (int dx = 0; dx < p; ++dx)
                    for (int ch = 0; ch < 3; ++ch)
                        u.push_back(T(2) * static_cast<T>(img.at(gy * p + dy, gx * p + dx, ch)) -
                                    T(1));
        }
        return u;
    }

    Tensor<T> patchify(const VideoFrames& v) const {
        if (static_cast<int>(v.size()) != geom.frame_count())
            throw GeometryError("patchify: frame count != 1 + r*n");
        v.check_uniform();
        if (v[0].h != geom.H || v[0].w != geom.W)
            throw GeometryError("patchify: frame dimensions mismatch geometry");
        const std::size_t c = static_cast<std::size_t>(geom.channels());
        const std::size_t l = static_cast<std::size_t>(geom.tokens_per_frame());
        const int gw = geom.W / geom.p;
        Tensor<T> z({static_cast<std::size_t>(geom.latent_frames()), l, c});
        std::vector<T> token(c);
        for (int lf = 0; lf < geom.latent_frames(); ++lf)
            for (int gy = 0; gy < geom.H / geom.p; ++gy)
                for (int gx = 0; gx < gw; ++gx) {
                    auto u = patch_vector(v, lf, gy, gx);
                    for (std::size_t i = 0; i < c; ++i) {
                        T s = 0;
                        const T* row = &E.data[i * c];
                        for (std::size_t k = 0; k < u.size(); ++k) s += row[k] * u[k];
                        token[i] = s;
                    }
                    std::size_t tok = static_cast<std::size_t>(gy) * gw + gx;
                    for (std::size_t i = 0; i < c; ++i) z.at(lf, tok, i) = token[i];
                }
        return z;
    }

    // clean latent-frame-0 tokens (l x c) for a single conditioning image
    Tensor<T> encode_first_frame(const Image& img) const {
        if (img.h != geom.H || img.w != geom.W)
            throw GeometryError("encode_first_frame: dimensions mismatch geometry");
        const std::size_t c = static_cast<std::size_t>(geom.channels());
        const std::size_t l = static_cast<std::size_t>(geom.tokens_per_frame());
        const int gw = geom.W / geom.p, p = geom.p;
        Tensor<T> cond({l, c});
        std::vector<T> u;
        u.reserve(std::size_t(p) * p * 3);
        for (int gy = 0; gy < geom.H / p; ++gy)
            for (int gx = 0; gx < gw; ++gx) {
                u.clear();
                for (int dy = 0; dy < p; ++dy)
                    for (int dx = 0; dx < p; ++dx)
                        for (int ch = 0; ch < 3; ++ch)
                            u.push_back(T(2) * static_cast<T>(img.at(gy * p + dy, gx * p + dx, ch)) -
                                        T(1));
                std::size_t tok = static_cast<std::size_t>(gy) * gw + gx;
                for (std::size_t i = 0; i < c; ++i) {
                    T s = 0;
                    const T* row = &E.data[i * c];
                    for (std::size_t k = 0; k < u.size(); ++k) s += row[k] * u[k];
                    cond.at(tok, i) = s;
                }
            }
        return cond;
    }

    VideoFrames unpatchify(const Tensor<T>& z) const {
        const std::size_t c = static_cast<std::size_t>(geom.channels());
        const std::size_t l = static_cast<std::size_t>(geom.tokens_per_frame());
        if (z.rank() != 3 || z.dims[0] != static_cast<std::size_t>(geom.latent_frames()) ||
            z.dims[1] != l || z.dims[2] != c)
            throw GeometryError("unpatchify: tensor shape mismatch geometry");
        VideoFrames v;
        v.frames.assign(geom.frame_count(), Image(geom.H, geom.W));
        const int gw = geom.W / geom.p, p = geom.p;
        std::vector<T> u(c);
        for (int lf = 0; lf < geom.latent_frames(); ++lf)
            for (int gy = 0; gy < geom.H / p; ++gy)
                for (int gx = 0; gx < gw; ++gx) {
                    std::size_t tok = static_cast<std::size_t>(gy) * gw + gx;
                    // u = E^T * token
                    for (std::size_t k = 0; k < c; ++k) u[k] = 0;
                    for (std::size_t i = 0; i < c; ++i) {
                        const T zi = z.at(lf, tok, i);
                        const T* row = &E.data[i * c];
                        for (std::size_t k = 0; k < c; ++k) u[k] += row[k] * zi;
                    }
                    int first = lf == 0 ? 0 : 1 + (lf - 1) * geom.r;
                    int count = lf == 0 ? 1 : geom.r;
                    std::size_t idx = 0;
                    for (int f = 0; f < count; ++f)
                        for (int dy = 0; dy < p; ++dy)
                            for (int dx = 0; dx < p; ++dx)
                                for (int ch = 0; ch < 3; ++ch)
                                    v[first + f].at(gy * p + dy, gx * p + dx, ch) =
                                        static_cast<float>((u[idx++] + T(1)) / T(2));
                }
        return v;
    }
};

// Eq-style straight interpolation z_t = (1-t) z0 + t z1.
template <typename T>
Tensor<T> rf_forward(const Tensor<T>& z0, const Tensor<T>& z1, T t) {
    if (!z0.same_shape(z1)) throw ContractError("rf_forward: shape mismatch");
    Tensor<T> zt = z0;
    for (std::size_t i = 0; i < zt.data.size(); ++i)
        zt.data[i] = (T(1) - t) * z0.data[i] + t * z1.data[i];
    return zt;
}

// ----------------------------------------------------------------- model ----

struct ModelConfig {
    int blocks = 4;
    int heads = 4;
    int mlp_ratio = 4;
    std::uint64_t tokenizer_seed = 1234;
};

enum class HookMode { Off, Capture, Inject };

template <typename T = float>
struct AttentionHooks {
    HookMode mode = HookMode::Off;
    AttentionCache<T>* cache = nullptr;
    const InjectionPolicy* policy = nullptr;  // inject mode
    int step_index = -1;                      // schedule step key
};

template <typename T = float>
struct BlockParams {
    Tensor<T> ln1_g, ln1_b;
    Tensor<T> wq, wk, wv, wo;  // c x c
    Tensor<T> ln2_g, ln2_b;
    Tensor<T> w1, b1;  // c x hidden, hidden
    Tensor<T> w2, b2;  // hidden x c, c
};

template <typename T = float>
struct ModelParams {
    ModelConfig cfg;
    Geometry geom;
    Tensor<T> emb_w, emb_b;    // c x c, c
    Tensor<T> time_w, time_b;  // c x c, c (applied to the sinusoidal vector)
    Tensor<T> pos;             // (1+n)*l x c learned positional embedding
    std::vector<BlockParams<T>> blk;
    Tensor<T> lnf_g, lnf_b;
    Tensor<T> head_w, head_b;  // c x c, c
    double loss_final = -1.0;
    std::uint64_t train_seed = 0;

    int channels() const { return geom.channels(); }
    int head_dim() const { return geom.channels() / cfg.heads; }

    template <typename Fn>
    void for_each(Fn fn) {
        fn("emb_w", emb_w);
        fn("emb_b", emb_b);
        fn("time_w", time_w);
        fn("time_b", time_b);
        fn("pos", pos);
        for (std::size_t b = 0; b < blk.size(); ++b) {
            const std::string pre = "blk" + std::to_string(b) + ".";
            fn(pre + "ln1_g", blk[b].ln1_g);
            fn(pre + "ln1_b", blk[b].ln1_b);
            fn(pre + "wq", blk[b].wq);
            fn(pre + "wk", blk[b].wk);
            fn(pre + "wv", blk[b].wv);
            fn(pre + "wo", blk[b].wo);
            fn(pre + "ln2_g", blk[b].ln2_g);
            fn(pre + "ln2_b", blk[b].ln2_b);
            fn(pre + "w1", blk[b].w1);
            fn(pre + "b1", blk[b].b1);
            fn(pre + "w2", blk[b].w2);
            fn(pre + "b2", blk[b].b2);
        }
        fn("lnf_g", lnf_g);
        fn("lnf_b", lnf_b);
        fn("head_w", head_w);
        fn("head_b", head_b);
    }
};

template <typename T>
ModelParams<T> init_model(const Geometry& geom, const ModelConfig& cfg, std::uint64_t seed) {
    geom.validate();
    const std::size_t c = static_cast<std::size_t>(geom.channels());
    if (c % static_cast<std::size_t>(cfg.heads) != 0)
        throw ContractError("init_model: heads must divide channels");
    const std::size_t hidden = c * static_cast<std::size_t>(cfg.mlp_ratio);
    std::mt19937_64 rng(seed);
    auto gauss_fill = [&](Tensor<T>& t, std::vector<std::size_t> dims, double scale) {
        t = Tensor<T>(std::move(dims));
        std::normal_distribution<double> d(0.0, scale);
        for (auto& v : t.data) v = static_cast<T>(d(rng));
    };
    auto const_fill = [&](Tensor<T>& t, std::vector<std::size_t> dims, T val) {
        t = Tensor<T>(std::move(dims));
        for (auto& v : t.data) v = val;
    };
    ModelParams<T> p;
    p.cfg = cfg;
    p.geom = geom;
    const double ws = 1.0 / std::sqrt(static_cast<double>(c));
    gauss_fill(p.emb_w, {c, c}, ws);
    const_fill(p.emb_b, {c}, T(0));
    gauss_fill(p.time_w, {c, c}, ws);
    const_fill(p.time_b, {c}, T(0));
    const std::size_t tokens =
        static_cast<std::size_t>(geom.latent_frames()) * geom.tokens_per_frame();
    gauss_fill(p.pos, {tokens, c}, 0.02);
    p.blk.resize(cfg.blocks);
    for (auto& b : p.blk) {
        const_fill(b.ln1_g, {c}, T(1));
        const_fill(b.ln1_b, {c}, T(0));
        gauss_fill(b.wq, {c, c}, ws);
        gauss_fill(b.wk, {c, c}, ws);
        gauss_fill(b.wv, {c, c}, ws);
        gauss_fill(b.wo, {c, c}, ws * 0.5);
        const_fill(b.ln2_g, {c}, T(1));
        const_fill(b.ln2_b, {c}, T(0));
        gauss_fill(b.w1, {c, hidden}, ws);
        const_fill(b.b1, {hidden}, T(0));
        gauss_fill(b.w2, {hidden, c}, 1.0 / std::sqrt(static_cast<double>(hidden)) * 0.5);
        const_fill(b.b2, {c}, T(0));
    }
    const_fill(p.lnf_g, {c}, T(1));
    const_fill(p.lnf_b, {c}, T(0));
    gauss_fill(p.head_w, {c, c}, ws * 0.1);
    const_fill(p.head_b, {c}, T(0));
    return p;
}

// Single-head scaled dot-product attention over the full token sequence:
// softmax(Q K^T / sqrt(d)) V. Q, K, V are tokens x d.
template <typename T>
Tensor<T> attention(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V) {
    if (Q.rank() != 2 || !Q.same_shape(K) || !Q.same_shape(V) || Q.dims[1] == 0)
        throw ContractError("attention: Q, K, V must share a tokens x d shape, d > 0");
    const std::size_t tokens = Q.dims[0], d = Q.dims[1];
    const T inv_sqrt_d = T(1) / std::sqrt(T(d));
    Tensor<T> out({tokens, d});
    std::vector<T> row(tokens);
    for (std::size_t i = 0; i < tokens; ++i) {
        T maxv = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < tokens; ++j) {
            T s = 0;
            for (std::size_t k = 0; k < d; ++k) s += Q.data[i * d + k] * K.data[j * d + k];
            row[j] = s * inv_sqrt_d;
            if (row[j] > maxv) maxv = row[j];
        }
        T denom = 0;
        for (std::size_t j = 0; j < tokens; ++j) {
            row[j] = std::exp(row[j] - maxv);
            denom += row[j];
        }
        for (std::size_t j = 0; j < tokens; ++j) {
            const T p = row[j] / denom;
            for (std::size_t k = 0; k < d; ++k) out.data[i * d + k] += p * V.data[j * d + k];
        }
    }
    return out;
}

// ----------------------------------------------------------- forward pass ----

namespace nn {

constexpr double kLnEps = 1e-5;

template <typename T>
struct LnTape {
    Tensor<T> xhat;    // rows x c
    std::vector<T> invstd;  // per row
};

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& g, const Tensor<T>& b, LnTape<T>* tape) {
    const std::size_t rows = x.dims[0], c = x.dims[1];
    Tensor<T> y({rows, c});
    if (tape) {
        tape->xhat = Tensor<T>({rows, c});
        tape->invstd.resize(rows);
    }
    for (std::size_t i = 0; i < rows; ++i) {
        const T* xr = &x.data[i * c];
        T mu = 0;
        for (std::size_t j = 0; j < c; ++j) mu += xr[j];
        mu /= T(c);
        T var = 0;
        for (std::size_t j = 0; j < c; ++j) {
            T d = xr[j] - mu;
            var += d * d;
        }
        var /= T(c);
        T invstd = T(1) / std::sqrt(var + T(kLnEps));
        for (std::size_t j = 0; j < c; ++j) {
            T xh = (xr[j] - mu) * invstd;
            if (tape) tape->xhat.data[i * c + j] = xh;
            y.data[i * c + j] = g.data[j] * xh + b.data[j];
        }
        if (tape) tape->invstd[i] = invstd;
    }
    return y;
}

template <typename T>
void layer_norm_backward(const Tensor<T>& dy, const LnTape<T>& tape, const Tensor<T>& g,
                         Tensor<T>& dx, Tensor<T>& dg, Tensor<T>& db) {
    const std::size_t rows = dy.dims[0], c = dy.dims[1];
    for (std::size_t i = 0; i < rows; ++i) {
        const T* dyr = &dy.data[i * c];
        const T* xh = &tape.xhat.data[i * c];
        T sum_dyg = 0, sum_dyg_xh = 0;
        for (std::size_t j = 0; j < c; ++j) {
            T dyg = dyr[j] * g.data[j];
            sum_dyg += dyg;
            sum_dyg_xh += dyg * xh[j];
            dg.data[j] += dyr[j] * xh[j];
            db.data[j] += dyr[j];
        }
        const T invstd = tape.invstd[i];
        for (std::size_t j = 0; j < c; ++j) {
            T dyg = dyr[j] * g.data[j];
            dx.data[i * c + j] +=
                invstd * (dyg - sum_dyg / T(c) - xh[j] * sum_dyg_xh / T(c));
        }
    }
}

}  // namespace nn

template <typename T>
struct BlockTape {
    Tensor<T> x_in;  // block input
    nn::LnTape<T> ln1;
    Tensor<T> xn1;        // ln1 output
    Tensor<T> Q, K, V;    // post-hook Q/K as used by attention
    std::vector<Tensor<T>> P;  // per-head softmax probs, T x T
    Tensor<T> attn_cat;   // concatenated head outputs
    Tensor<T> x_mid;      // after attention residual
    nn::LnTape<T> ln2;
    Tensor<T> xn2;
    Tensor<T> h_pre;  // pre-activation
    Tensor<T> h_act;
};

template <typename T>
struct ForwardTape {
    Tensor<T> x_emb_in;  // conditioned token input (z with frame 0 clamped)
    std::vector<T> temb_sin;
    std::vector<BlockTape<T>> blocks;
    nn::LnTape<T> lnf;
    Tensor<T> x_final;  // pre-final-norm activations
    Tensor<T> xnf;
    bool hooks_off = true;
};

template <typename T>
std::vector<T> sinusoidal_embedding(T t, std::size_t c) {
    std::vector<T> se(c, T(0));
    const std::size_t half = c / 2;
    const T s = t * T(1000);
    for (std::size_t i = 0; i < half; ++i) {
        T freq = std::exp(-std::log(T(10000)) * T(i) / T(half));
        se[2 * i] = std::sin(s * freq);
        se[2 * i + 1] = std::cos(s * freq);
    }
    return se;
}

// Velocity prediction v_theta(z_t, t) with latent frame 0 clamped to the
// clean condition tokens before the transformer runs. cond is l x c; an
// empty cond means the null condition (zero tokens).
template <typename T>
Tensor<T> forward_velocity(const ModelParams<T>& p, const Tensor<T>& z, const Tensor<T>& cond,
                           T t, AttentionHooks<T>& hooks, ForwardTape<T>* tape = nullptr) {
    const std::size_t F = static_cast<std::size_t>(p.geom.latent_frames());
    const std::size_t l = static_cast<std::size_t>(p.geom.tokens_per_frame());
    const std::size_t c = static_cast<std::size_t>(p.channels());
    if (z.rank() != 3 || z.dims[0] != F || z.dims[1] != l || z.dims[2] != c)
        throw GeometryError("forward_velocity: z shape mismatch");
    if (cond.numel() != 0 && (cond.rank() != 2 || cond.dims[0] != l || cond.dims[1] != c))
        throw GeometryError("forward_velocity: cond must be l x c (or empty for null)");
    if (!(t >= T(0) && t <= T(1))) throw ContractError("forward_velocity: t outside [0,1]");
    if (hooks.mode == HookMode::Inject && (!hooks.cache || !hooks.policy))
        throw ContractError("forward_velocity: inject mode without cache/policy");
    if (hooks.mode == HookMode::Capture && !hooks.cache)
        throw ContractError("forward_velocity: capture mode without cache");

    const std::size_t tokens = F * l;
    const int heads = p.cfg.heads;
    const std::size_t d = static_cast<std::size_t>(p.head_dim());
    const T inv_sqrt_d = T(1) / std::sqrt(T(d));

    // clean-token combination: overwrite latent frame 0 with the condition
    Tensor<T> x({tokens, c});
    for (std::size_t tok = 0; tok < tokens; ++tok)
        for (std::size_t j = 0; j < c; ++j)
            x.data[tok * c + j] = tok < l ? (cond.numel() ? cond.data[tok * c + j] : T(0))
                                          : z.data[tok * c + j];
    if (tape) {
        tape->x_emb_in = x;
        tape->hooks_off = hooks.mode == HookMode::Off;
        tape->blocks.resize(p.cfg.blocks);
    }

    // token embedding + time embedding broadcast to every token
    auto se = sinusoidal_embedding(t, c);
    if (tape) tape->temb_sin = se;
    std::vector<T> temb(c);
    for (std::size_t i = 0; i < c; ++i) {
        T s = p.time_b.data[i];
        for (std::size_t k = 0; k < c; ++k) s += se[k] * p.time_w.data[k * c + i];
        temb[i] = s;
    }
    Tensor<T> h = nn::matmul(x, p.emb_w);
    for (std::size_t tok = 0; tok < tokens; ++tok)
        for (std::size_t j = 0; j < c; ++j)
            h.data[tok * c + j] += p.emb_b.data[j] + temb[j] + p.pos.data[tok * c + j];

    for (int b = 0; b < p.cfg.blocks; ++b) {
        const BlockParams<T>& bp = p.blk[b];
        BlockTape<T>* bt = tape ? &tape->blocks[b] : nullptr;
        if (bt) bt->x_in = h;

        Tensor<T> xn1 = nn::layer_norm(h, bp.ln1_g, bp.ln1_b, bt ? &bt->ln1 : nullptr);
        Tensor<T> Q = nn::matmul(xn1, bp.wq);
        Tensor<T> K = nn::matmul(xn1, bp.wk);
        Tensor<T> V = nn::matmul(xn1, bp.wv);

        if (hooks.mode == HookMode::Capture) {
            hooks.cache->store(b, hooks.step_index, Q, K);
        } else if (hooks.mode == HookMode::Inject && hooks.policy->applies(b, hooks.step_index)) {
            const auto& entry = hooks.cache->fetch(b, hooks.step_index);
            if (hooks.policy->kind == InjectionKind::Vanilla)
                vanilla_inject(Q, K, entry);
            else
                ree_inject(Q, K, entry, hooks.policy->lambda);
        }
        if (bt) {
            bt->xn1 = xn1;
            bt->Q = Q;
            bt->K = K;
            bt->V = V;
            bt->P.resize(heads);
        }

        Tensor<T> attn_cat({tokens, c});
        for (int hh = 0; hh < heads; ++hh) {
            const std::size_t off = static_cast<std::size_t>(hh) * d;
            Tensor<T> P({tokens, tokens});
            for (std::size_t i = 0; i < tokens; ++i) {
                T maxv = -std::numeric_limits<T>::infinity();
                T* prow = &P.data[i * tokens];
                const T* qrow = &Q.data[i * c + off];
                for (std::size_t j = 0; j < tokens; ++j) {
                    const T* krow = &K.data[j * c + off];
                    T s = 0;
                    for (std::size_t k = 0; k < d; ++k) s += qrow[k] * krow[k];
                    s *= inv_sqrt_d;
                    prow[j] = s;
                    if (s > maxv) maxv = s;
                }
                T denom = 0;
                for (std::size_t j = 0; j < tokens; ++j) {
                    prow[j] = std::exp(prow[j] - maxv);
                    denom += prow[j];
                }
                for (std::size_t j = 0; j < tokens; ++j) prow[j] /= denom;
            }
            for (std::size_t i = 0; i < tokens; ++i) {
                const T* prow = &P.data[i * tokens];
                T* orow = &attn_cat.data[i * c + off];
                for (std::size_t j = 0; j < tokens; ++j) {
                    const T pij = prow[j];
                    if (pij == T(0)) continue;
                    const T* vrow = &V.data[j * c + off];
                    for (std::size_t k = 0; k < d; ++k) orow[k] += pij * vrow[k];
                }
            }
            if (bt) bt->P[hh] = std::move(P);
        }
        if (bt) bt->attn_cat = attn_cat;

        Tensor<T> attn_out = nn::matmul(attn_cat, bp.wo);
        for (std::size_t i = 0; i < h.data.size(); ++i) h.data[i] += attn_out.data[i];
        if (bt) bt->x_mid = h;

        Tensor<T> xn2 = nn::layer_norm(h, bp.ln2_g, bp.ln2_b, bt ? &bt->ln2 : nullptr);
        Tensor<T> pre = nn::matmul(xn2, bp.w1);
        const std::size_t hidden = bp.b1.dims[0];
        for (std::size_t i = 0; i < tokens; ++i)
            for (std::size_t j = 0; j < hidden; ++j) pre.data[i * hidden + j] += bp.b1.data[j];
        Tensor<T> act = pre;
        for (auto& v : act.data) v = nn::gelu(v);
        if (bt) {
            bt->xn2 = xn2;
            bt->h_pre = pre;
            bt->h_act = act;
        }
        Tensor<T> mlp_out = nn::matmul(act, bp.w2);
        for (std::size_t i = 0; i < tokens; ++i)
            for (std::size_t j = 0; j < c; ++j) mlp_out.data[i * c + j] += bp.b2.data[j];
        for (std::size_t i = 0; i < h.data.size(); ++i) h.data[i] += mlp_out.data[i];
    }

    if (tape) tape->x_final = h;
    Tensor<T> xnf = nn::layer_norm(h, p.lnf_g, p.lnf_b, tape ? &tape->lnf : nullptr);
    if (tape) tape->xnf = xnf;
    Tensor<T> v = nn::matmul(xnf, p.head_w);
    for (std::size_t i = 0; i < tokens; ++i)
        for (std::size_t j = 0; j < c; ++j) v.data[i * c + j] += p.head_b.data[j];

    for (T val : v.data)
        if (!std::isfinite(val)) throw NumericalError("forward_velocity: non-finite output");
    Tensor<T> out = v;
    out.dims = {F, l, c};
    return out;
}

// -------------------------------------------------------------- backward ----

// Gradients of the velocity output w.r.t. every parameter group. dOut has
// the flattened tokens x c shape; hooks must have been off on the forward.
template <typename T>
void backward_velocity(const ModelParams<T>& p, const ForwardTape<T>& tape, Tensor<T> dOut,
                       ModelParams<T>& grads) {
    if (!tape.hooks_off) throw ContractError("backward_velocity: tape recorded with hooks on");
    const std::size_t c = static_cast<std::size_t>(p.channels());
    const std::size_t tokens = tape.x_final.dims[0];
    const int heads = p.cfg.heads;
    const std::size_t d = static_cast<std::size_t>(p.head_dim());
    const T inv_sqrt_d = T(1) / std::sqrt(T(d));
    dOut.dims = {tokens, c};

    // head
    for (std::size_t i = 0; i < tokens; ++i)
        for (std::size_t j = 0; j < c; ++j) grads.head_b.data[j] += dOut.data[i * c + j];
    grads.head_w += nn::matmul_tn(tape.xnf, dOut);
    Tensor<T> dxnf = nn::matmul_nt(dOut, p.head_w);

    Tensor<T> dh({tokens, c});
    nn::layer_norm_backward(dxnf, tape.lnf, p.lnf_g, dh, grads.lnf_g, grads.lnf_b);

    for (int b = p.cfg.blocks - 1; b >= 0; --b) {
        const BlockParams<T>& bp = p.blk[b];
        BlockParams<T>& gb = grads.blk[b];
        const BlockTape<T>& bt = tape.blocks[b];
        const std::size_t hidden = bp.b1.dims[0];

        // mlp branch: h += act*w2 + b2
        for (std::size_t i = 0; i < tokens; ++i)
            for (std::size_t j = 0; j < c; ++j) gb.b2.data[j] += dh.data[i * c + j];
        gb.w2 += nn::matmul_tn(bt.h_act, dh);
        Tensor<T> dact = nn::matmul_nt(dh, bp.w2);
        Tensor<T> dpre = dact;
        for (std::size_t i = 0; i < dpre.data.size(); ++i)
            dpre.data[i] = dact.data[i] * nn::gelu_grad(bt.h_pre.data[i]);
        for (std::size_t i = 0; i < tokens; ++i)
            for (std::size_t j = 0; j < hidden; ++j) gb.b1.data[j] += dpre.data[i * hidden + j];
        gb.w1 += nn::matmul_tn(bt.xn2, dpre);
        Tensor<T> dxn2 = nn::matmul_nt(dpre, bp.w1);
        nn::layer_norm_backward(dxn2, bt.ln2, bp.ln2_g, dh, gb.ln2_g, gb.ln2_b);

        // attention branch: h += attn_cat * wo
        gb.wo += nn::matmul_tn(bt.attn_cat, dh);
        Tensor<T> dcat = nn::matmul_nt(dh, bp.wo);

        Tensor<T> dQ({tokens, c}), dK({tokens, c}), dV({tokens, c});
        for (int hh = 0; hh < heads; ++hh) {
            const std::size_t off = static_cast<std::size_t>(hh) * d;
            const Tensor<T>& P = bt.P[hh];
            // dV_h = P^T dO_h ; dP = dO_h V_h^T
            Tensor<T> dP({tokens, tokens});
            for (std::size_t i = 0; i < tokens; ++i) {
                const T* prow = &P.data[i * tokens];
                const T* dorow = &dcat.data[i * c + off];
                T* dprow = &dP.data[i * tokens];
                for (std::size_t j = 0; j < tokens; ++j) {
                    const T* vrow = &bt.V.data[j * c + off];
                    T s = 0;
                    for (std::size_t k = 0; k < d; ++k) s += dorow[k] * vrow[k];
                    dprow[j] = s;
                    T* dvrow = &dV.data[j * c + off];
                    const T pij = prow[j];
                    for (std::size_t k = 0; k < d; ++k) dvrow[k] += pij * dorow[k];
                }
            }
            // softmax backward to logits, then to Q/K
            for (std::size_t i = 0; i < tokens; ++i) {
                const T* prow = &P.data[i * tokens];
                T* dprow = &dP.data[i * tokens];
                T dot = 0;
                for (std::size_t j = 0; j < tokens; ++j) dot += dprow[j] * prow[j];
                for (std::size_t j = 0; j < tokens; ++j)
                    dprow[j] = prow[j] * (dprow[j] - dot);
            }
            for (std::size_t i = 0; i < tokens; ++i) {
                const T* dsrow = &dP.data[i * tokens];
                const T* qrow = &bt.Q.data[i * c + off];
                T* dqrow = &dQ.data[i * c + off];
                for (std::size_t j = 0; j < tokens; ++j) {
                    const T ds = dsrow[j] * inv_sqrt_d;
                    if (ds == T(0)) continue;
                    const T* krow = &bt.K.data[j * c + off];
                    T* dkrow = &dK.data[j * c + off];
                    for (std::size_t k = 0; k < d; ++k) {
                        dqrow[k] += ds * krow[k];
                        dkrow[k] += ds * qrow[k];
                    }
                }
            }
        }

        gb.wq += nn::matmul_tn(bt.xn1, dQ);
        gb.wk += nn::matmul_tn(bt.xn1, dK);
        gb.wv += nn::matmul_tn(bt.xn1, dV);
        Tensor<T> dxn1 = nn::matmul_nt(dQ, bp.wq);
        dxn1 += nn::matmul_nt(dK, bp.wk);
        dxn1 += nn::matmul_nt(dV, bp.wv);
        nn::layer_norm_backward(dxn1, bt.ln1, bp.ln1_g, dh, gb.ln1_g, gb.ln1_b);
    }

    // embedding + time + positional embedding
    grads.pos += dh;
    for (std::size_t i = 0; i < tokens; ++i)
        for (std::size_t j = 0; j < c; ++j) grads.emb_b.data[j] += dh.data[i * c + j];
    grads.emb_w += nn::matmul_tn(tape.x_emb_in, dh);
    // temb was broadcast over tokens: accumulate row sums then outer with se
    std::vector<T> dtemb(c, T(0));
    for (std::size_t i = 0; i < tokens; ++i)
        for (std::size_t j = 0; j < c; ++j) dtemb[j] += dh.data[i * c + j];
    for (std::size_t j = 0; j < c; ++j) grads.time_b.data[j] += dtemb[j];
    for (std::size_t k = 0; k < c; ++k)
        for (std::size_t j = 0; j < c; ++j)
            grads.time_w.data[k * c + j] += tape.temb_sin[k] * dtemb[j];
}

// -------------------------------------------------------------- training ----

enum class Optimizer { Gd, Adam };

struct TrainConfig {
    int steps = 400;
    int batch = 2;
    double lr = 2e-3;
    double cond_dropout = 0.1;
    std::uint64_t seed = 0;
    Optimizer optimizer = Optimizer::Gd;  // Gd keeps updates state-free
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
};

// Velocity-matching loss on one (z0, z1, t) triple; frame 0 is excluded.
template <typename T>
T velocity_loss(const ModelParams<T>& p, const Tensor<T>& z0, const Tensor<T>& z1,
                const Tensor<T>& cond, T t, ModelParams<T>* grads = nullptr) {
    const std::size_t l = static_cast<std::size_t>(p.geom.tokens_per_frame());
    const std::size_t c = static_cast<std::size_t>(p.channels());
    Tensor<T> zt = rf_forward(z0, z1, t);
    AttentionHooks<T> hooks;
    ForwardTape<T> tape;
    Tensor<T> v = forward_velocity(p, zt, cond, t, hooks, grads ? &tape : nullptr);
    const std::size_t total = v.numel();
    const std::size_t skip = l * c;  // latent frame 0
    const T denom = T(total - skip);
    T loss = 0;
    Tensor<T> dv = v;
    for (std::size_t i = 0; i < total; ++i) {
        if (i < skip) {
            dv.data[i] = 0;
            continue;
        }
        T target = z1.data[i] - z0.data[i];
        T diff = v.data[i] - target;
        loss += diff * diff;
        dv.data[i] = T(2) * diff / denom;
    }
    loss /= denom;
    if (grads) backward_velocity(p, tape, dv, *grads);
    return loss;
}

template <typename T>
ModelParams<T> zero_like(const ModelParams<T>& p) {
    ModelParams<T> g = p;
    g.for_each([](const std::string&, Tensor<T>& t) {
        for (auto& v : t.data) v = T(0);
    });
    return g;
}

// Plain gradient descent on Eq-style velocity regression with uniform t and
// 10% condition dropout. Deterministic for a fixed seed, single-threaded.
template <typename T>
ModelParams<T> train_toy(const std::vector<SyntheticScene>& scenes, const Geometry& geom,
                         const ModelConfig& mcfg, const TrainConfig& tcfg,
                         std::vector<double>* loss_curve = nullptr) {
    if (scenes.empty()) throw ContractError("train_toy: empty dataset");
    Tokenizer<T> tok(geom, mcfg.tokenizer_seed);
    std::vector<Tensor<T>> z0s;
    std::vector<Tensor<T>> conds;
    for (const auto& s : scenes) {
        z0s.push_back(tok.patchify(s.source));
        Tensor<T> cond({z0s.back().dims[1], z0s.back().dims[2]});
        for (std::size_t i = 0; i < cond.data.size(); ++i) cond.data[i] = z0s.back().data[i];
        conds.push_back(std::move(cond));
    }

    ModelParams<T> p = init_model<T>(geom, mcfg, tcfg.seed);
    p.train_seed = tcfg.seed;
    std::mt19937_64 rng(tcfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick(0, scenes.size() - 1);

    Tensor<T> empty_cond;
    ModelParams<T> m1 = zero_like(p), m2 = zero_like(p);  // adam moments
    std::vector<Tensor<T>*> pw, gw, mw, vw;
    double last = 0;
    for (int step = 0; step < tcfg.steps; ++step) {
        ModelParams<T> grads = zero_like(p);
        double batch_loss = 0;
        for (int bi = 0; bi < tcfg.batch; ++bi) {
            std::size_t si = pick(rng);
            Tensor<T> z1 = z0s[si];
            for (auto& v : z1.data) v = static_cast<T>(gauss(rng));
            T t = static_cast<T>(unif(rng));
            bool drop = unif(rng) < tcfg.cond_dropout;
            T loss = velocity_loss(p, z0s[si], z1, drop ? empty_cond : conds[si], t, &grads);
            if (!std::isfinite(static_cast<double>(loss)))
                throw TrainingError("divergent loss at step " + std::to_string(step));
            batch_loss += static_cast<double>(loss);
        }
        batch_loss /= tcfg.batch;
        last = batch_loss;
        if (loss_curve) loss_curve->push_back(batch_loss);

        pw.clear();
        gw.clear();
        mw.clear();
        vw.clear();
        p.for_each([&](const std::string&, Tensor<T>& t) { pw.push_back(&t); });
        grads.for_each([&](const std::string&, Tensor<T>& t) { gw.push_back(&t); });
        m1.for_each([&](const std::string&, Tensor<T>& t) { mw.push_back(&t); });
        m2.for_each([&](const std::string&, Tensor<T>& t) { vw.push_back(&t); });
        if (tcfg.optimizer == Optimizer::Gd) {
            const T scale = static_cast<T>(tcfg.lr / tcfg.batch);
            for (std::size_t k = 0; k < pw.size(); ++k)
                for (std::size_t i = 0; i < pw[k]->data.size(); ++i)
                    pw[k]->data[i] -= scale * gw[k]->data[i];
        } else {
            const double bc1 = 1.0 - std::pow(tcfg.beta1, step + 1);
            const double bc2 = 1.0 - std::pow(tcfg.beta2, step + 1);
            for (std::size_t k = 0; k < pw.size(); ++k)
                for (std::size_t i = 0; i < pw[k]->data.size(); ++i) {
                    const double g = double(gw[k]->data[i]) / tcfg.batch;
                    const double m = tcfg.beta1 * mw[k]->data[i] + (1 - tcfg.beta1) * g;
                    const double v = tcfg.beta2 * vw[k]->data[i] + (1 - tcfg.beta2) * g * g;
                    mw[k]->data[i] = static_cast<T>(m);
                    vw[k]->data[i] = static_cast<T>(v);
                    pw[k]->data[i] -= static_cast<T>(
                        tcfg.lr * (m / bc1) / (std::sqrt(v / bc2) + tcfg.adam_eps));
                }
        }
    }
    p.loss_final = last;
    return p;
}

// ------------------------------------------------------------ checkpoint ----

template <typename T>
void save_model(const ModelParams<T>& p, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    ModelParams<T>& mp = const_cast<ModelParams<T>&>(p);
    mp.for_each([&](const std::string& name, Tensor<T>& t) {
        write_tensor(t, dir / (name + ".ftc"));
    });
    std::ofstream os(dir / "manifest.txt");
    if (!os) throw IoError("cannot write manifest");
    os << "blocks=" << p.cfg.blocks << "\n";
    os << "heads=" << p.cfg.heads << "\n";
    os << "mlp_ratio=" << p.cfg.mlp_ratio << "\n";
    os << "dim=" << p.channels() << "\n";
    os << "patch=" << p.geom.p << "\n";
    os << "height=" << p.geom.H << "\n";
    os << "width=" << p.geom.W << "\n";
    os << "r=" << p.geom.r << "\n";
    os << "n=" << p.geom.n << "\n";
    os << "tokenizer_seed=" << p.cfg.tokenizer_seed << "\n";
    os << "seed=" << p.train_seed << "\n";
    os << "loss_final=" << p.loss_final << "\n";
}

template <typename T = float>
ModelParams<T> load_model(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.txt");
    if (!is) throw IoError("cannot read manifest in " + dir.string());
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(is, line)) {
        auto eq = line.find('=');
        if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    Geometry g;
    g.H = std::stoi(kv.at("height"));
    g.W = std::stoi(kv.at("width"));
    g.r = std::stoi(kv.at("r"));
    g.n = std::stoi(kv.at("n"));
    g.p = std::stoi(kv.at("patch"));
    g.c = std::stoi(kv.at("dim"));
    ModelConfig cfg;
    cfg.blocks = std::stoi(kv.at("blocks"));
    cfg.heads = std::stoi(kv.at("heads"));
    cfg.mlp_ratio = std::stoi(kv.at("mlp_ratio"));
    cfg.tokenizer_seed = std::stoull(kv.at("tokenizer_seed"));
    ModelParams<T> p = init_model<T>(g, cfg, 0);
    p.train_seed = kv.count("seed") ? std::stoull(kv.at("seed")) : 0;
    p.loss_final = kv.count("loss_final") ? std::stod(kv.at("loss_final")) : -1.0;
    p.for_each([&](const std::string& name, Tensor<T>& t) {
        Tensor<T> loaded = read_tensor<T>(dir / (name + ".ftc"));
        if (!loaded.same_shape(t)) throw FormatError("checkpoint shape mismatch for " + name);
        t = std::move(loaded);
    });
    return p;
}

}  // namespace freeedit

#endif
