#ifndef FREEEDIT_SAMPLER_HPP
#define FREEEDIT_SAMPLER_HPP

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "freeedit/errors.hpp"
#include "freeedit/rfnet.hpp"

namespace freeedit {

// Uniform descending knots t_i = i/N, from 1 to 0.
struct Schedule {
    std::vector<double> knots;  // size N+1, knots[0] = 1, knots[N] = 0

    int steps() const { return static_cast<int>(knots.size()) - 1; }
    // t_i in the paper's ascending indexing, i in 0..N
    double t(int i) const { return knots[static_cast<std::size_t>(steps() - i)]; }
};

inline Schedule make_schedule(int N) {
    if (N < 1) throw ContractError("make_schedule: N >= 1 required");
    Schedule s;
    s.knots.resize(N + 1);
    for (int i = 0; i <= N; ++i) s.knots[i] = double(N - i) / N;
    s.knots.front() = 1.0;
    s.knots.back() = 0.0;
    return s;
}

struct GuidanceConfig {
    double cfg_scale = 1.0;

    void validate() const {
        if (!(cfg_scale >= 0) || !std::isfinite(cfg_scale))
            throw ContractError("cfg_scale must be finite and >= 0");
    }
};

template <typename T = float>
struct Trajectory {
    std::vector<std::pair<T, Tensor<T>>> states;

    const Tensor<T>& final_state() const { return states.back().second; }
};

// Velocity callable: (state, t, schedule step index) -> velocity tensor.
template <typename T>
using VelocityFn = std::function<Tensor<T>(const Tensor<T>&, T, int)>;

// CFG over the first-frame condition: v_u + s*(v_c - v_u), null condition
// = zero cond tokens. Scale 1 skips the unconditional pass entirely so it
// is bitwise the plain conditional forward. Hooks apply to the conditional
// pass only.
template <typename T>
Tensor<T> guided_velocity(const ModelParams<T>& p, const Tensor<T>& z, const Tensor<T>& cond,
                          T t, const GuidanceConfig& g, AttentionHooks<T>& hooks) {
    g.validate();
    if (g.cfg_scale == 1.0) return forward_velocity(p, z, cond, t, hooks);
    Tensor<T> empty;
    AttentionHooks<T> off;
    Tensor<T> vu = forward_velocity(p, z, empty, t, off);
    if (g.cfg_scale == 0.0) return vu;
    Tensor<T> vc = forward_velocity(p, z, cond, t, hooks);
    const T s = static_cast<T>(g.cfg_scale);
    for (std::size_t i = 0; i < vc.data.size(); ++i)
        vc.data[i] = vu.data[i] + s * (vc.data[i] - vu.data[i]);
    return vc;
}

template <typename T>
VelocityFn<T> model_velocity(const ModelParams<T>& p, const Tensor<T>& cond,
                             const GuidanceConfig& g, AttentionHooks<T>* hooks = nullptr) {
    return [&p, cond, g, hooks](const Tensor<T>& z, T t, int step) {
        AttentionHooks<T> local;
        AttentionHooks<T>& h = hooks ? *hooks : local;
        h.step_index = step;
        return guided_velocity(p, z, cond, t, g, h);
    };
}

namespace detail {

template <typename T>
void clamp_frame0(Tensor<T>& z, const Tensor<T>& cond) {
    if (cond.numel() == 0) return;
    const std::size_t lc = z.dims[1] * z.dims[2];
    for (std::size_t i = 0; i < lc; ++i) z.data[i] = cond.data[i];
}

template <typename T>
void check_finite(const Tensor<T>& z, const char* what, int step) {
    for (T v : z.data)
        if (!std::isfinite(v))
            throw NumericalError(std::string(what) + ": non-finite state at step " +
                                 std::to_string(step));
}

}  // namespace detail

// Euler sampling z_{t_{i-1}} = z_{t_i} + (t_{i-1} - t_i) v(z_{t_i}, t_i),
// descending from t=1 to t=0. Velocity evaluations at step i use schedule
// key i-1, so a full pass touches keys 0..N-1 densely.
template <typename T>
Trajectory<T> sample(const VelocityFn<T>& vfn, Tensor<T> z1, const Tensor<T>& cond,
                     const Schedule& sch) {
    Trajectory<T> traj;
    detail::clamp_frame0(z1, cond);
    traj.states.emplace_back(T(1), z1);
    Tensor<T> z = std::move(z1);
    const int N = sch.steps();
    for (int i = N; i >= 1; --i) {
        const T ti = static_cast<T>(sch.t(i));
        const T tprev = static_cast<T>(sch.t(i - 1));
        Tensor<T> v = vfn(z, ti, i - 1);
        const T dt = tprev - ti;  // negative
        for (std::size_t j = 0; j < z.data.size(); ++j) z.data[j] += dt * v.data[j];
        detail::clamp_frame0(z, cond);
        detail::check_finite(z, "sample", i);
        traj.states.emplace_back(tprev, z);
    }
    return traj;
}

// Reverse Euler inversion z_{t_i} = z_{t_{i-1}} + (t_i - t_{i-1})
// v(z_{t_{i-1}}, t_{i-1}), ascending from t=0 to t=1. fixedpoint_iters > 0
// re-evaluates v at the current estimate of z_{t_i} (at time t_i), solving
// the sampling step's implicit inverse to tighten round trips.
template <typename T>
Trajectory<T> invert(const VelocityFn<T>& vfn, Tensor<T> z0, const Tensor<T>& cond,
                     const Schedule& sch, int fixedpoint_iters = 0) {
    Trajectory<T> traj;
    detail::clamp_frame0(z0, cond);
    traj.states.emplace_back(T(0), z0);
    Tensor<T> z = std::move(z0);
    const int N = sch.steps();
    for (int i = 1; i <= N; ++i) {
        const T tprev = static_cast<T>(sch.t(i - 1));
        const T ti = static_cast<T>(sch.t(i));
        const T dt = ti - tprev;  // positive
        Tensor<T> v = vfn(z, tprev, i - 1);
        Tensor<T> znext = z;
        for (std::size_t j = 0; j < znext.data.size(); ++j) znext.data[j] += dt * v.data[j];
        detail::clamp_frame0(znext, cond);
        for (int it = 0; it < fixedpoint_iters; ++it) {
            Tensor<T> vr = vfn(znext, ti, i - 1);
            znext = z;
            for (std::size_t j = 0; j < znext.data.size(); ++j)
                znext.data[j] += dt * vr.data[j];
            detail::clamp_frame0(znext, cond);
        }
        detail::check_finite(znext, "invert", i);
        z = std::move(znext);
        traj.states.emplace_back(ti, z);
    }
    return traj;
}

}  // namespace freeedit

#endif
