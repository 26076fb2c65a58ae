#ifndef FREEEDIT_INJECTION_HPP
#define FREEEDIT_INJECTION_HPP

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "freeedit/errors.hpp"
#include "freeedit/maskprop.hpp"
#include "freeedit/tensor.hpp"

namespace freeedit {

// Q/K record of the reconstruction branch, keyed by (block, schedule step).
// Write-once per key during capture; read-only once locked for editing.
template <typename T = float>
struct AttentionCache {
    struct Entry {
        Tensor<T> Q, K;  // (1+n)*l x c, all heads concatenated
        bool set = false;
        int reads = 0;
    };

    int blocks = 0;
    int steps = 0;
    std::vector<Entry> entries;
    bool locked = false;

    AttentionCache() = default;
    AttentionCache(int B, int N) : blocks(B), steps(N), entries(std::size_t(B) * N) {}

    std::size_t key(int b, int i) const {
        if (b < 0 || b >= blocks || i < 0 || i >= steps)
            throw ContractError("cache key out of range (b=" + std::to_string(b) +
                                ", i=" + std::to_string(i) + ")");
        return std::size_t(b) * steps + i;
    }

    void store(int b, int i, Tensor<T> Q, Tensor<T> K) {
        if (locked) throw ContractError("cache write after lock");
        Entry& e = entries[key(b, i)];
        if (e.set)
            throw ContractError("double write to cache key (b=" + std::to_string(b) +
                                ", i=" + std::to_string(i) + ")");
        e.Q = std::move(Q);
        e.K = std::move(K);
        e.set = true;
    }

    const Entry& fetch(int b, int i) {
        Entry& e = entries[key(b, i)];
        if (!e.set)
            throw CacheMissError("no cache entry for (b=" + std::to_string(b) +
                                 ", i=" + std::to_string(i) + ")");
        ++e.reads;
        return e;
    }

    void lock() { locked = true; }

    bool fully_populated() const {
        for (const auto& e : entries)
            if (!e.set) return false;
        return true;
    }
};

enum class InjectionKind { None, Vanilla, Ree };

struct InjectionPolicy {
    InjectionKind kind = InjectionKind::None;
    Lambda lambda;                          // required for ree
    std::optional<std::set<int>> blocks;    // nullopt = all
    std::optional<std::set<int>> steps;     // nullopt = all

    bool applies(int b, int i) const {
        if (kind == InjectionKind::None) return false;
        if (blocks && !blocks->count(b)) return false;
        if (steps && !steps->count(i)) return false;
        return true;
    }

    void validate(std::size_t latent_frames, std::size_t tokens_per_frame) const {
        if (kind != InjectionKind::Ree) return;
        if (lambda.lam.rank() != 3 || lambda.lam.dims[0] != latent_frames ||
            lambda.lam.dims[1] != tokens_per_frame || lambda.lam.dims[2] != 1)
            throw ContractError("ree policy requires lambda shaped (1+n) x l x 1");
        for (float v : lambda.lam.data)
            if (!(v >= 0.0f && v <= 1.0f)) throw ContractError("lambda outside [0,1]");
    }
};

// Eq-style wholesale replacement: cached Q/K supersede the editing branch's.
template <typename T>
void vanilla_inject(Tensor<T>& Q, Tensor<T>& K, const typename AttentionCache<T>::Entry& e) {
    if (!Q.same_shape(e.Q) || !K.same_shape(e.K))
        throw ContractError("vanilla_inject: shape mismatch with cached entry");
    Q = e.Q;
    K = e.K;
}

// Per-token convex blend: Qbar = lam*Q + (1-lam)*Qtilde, lam shared across
// channels (and hence heads). Endpoints return the operands bitwise.
template <typename T>
void ree_inject(Tensor<T>& Q, Tensor<T>& K, const typename AttentionCache<T>::Entry& e,
                const Lambda& lambda) {
    if (!Q.same_shape(e.Q) || !K.same_shape(e.K))
        throw ContractError("ree_inject: shape mismatch with cached entry");
    const std::size_t tokens = Q.dims[0];
    const std::size_t channels = Q.dims[1];
    if (lambda.lam.numel() * 1 != lambda.lam.dims[0] * lambda.lam.dims[1] ||
        lambda.lam.dims[0] * lambda.lam.dims[1] != tokens)
        throw ContractError("ree_inject: lambda token count mismatch");
    for (float v : lambda.lam.data)
        if (!(v >= 0.0f && v <= 1.0f)) throw ContractError("ree_inject: lambda outside [0,1]");
    for (std::size_t tok = 0; tok < tokens; ++tok) {
        const T lam = static_cast<T>(lambda.lam.data[tok]);
        if (lam == T(0)) continue;  // keep the editing branch's rows untouched
        T* qrow = &Q.data[tok * channels];
        T* krow = &K.data[tok * channels];
        const T* cq = &e.Q.data[tok * channels];
        const T* ck = &e.K.data[tok * channels];
        if (lam == T(1)) {
            for (std::size_t c = 0; c < channels; ++c) {
                qrow[c] = cq[c];
                krow[c] = ck[c];
            }
        } else {
            for (std::size_t c = 0; c < channels; ++c) {
                qrow[c] = lam * cq[c] + (T(1) - lam) * qrow[c];
                krow[c] = lam * ck[c] + (T(1) - lam) * krow[c];
            }
        }
    }
}

}  // namespace freeedit

#endif
