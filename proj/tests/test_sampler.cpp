#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "freeedit/sampler.hpp"

using namespace freeedit;

// dyadic random values keep additions exact in the telescoping tests
static Tensor<double> dyadic_tensor(std::vector<std::size_t> dims, unsigned seed) {
    Tensor<double> t(std::move(dims));
    std::mt19937 rng(seed);
    std::uniform_int_distribution<int> d(-64, 64);
    for (auto& v : t.data) v = d(rng) / 32.0;
    return t;
}

TEST_CASE("schedule knots are uniform with exact endpoints") {
    Schedule s = make_schedule(50);
    REQUIRE(s.knots.size() == 51);
    REQUIRE(s.knots.front() == 1.0);
    REQUIRE(s.knots.back() == 0.0);
    for (int i = 1; i <= 50; ++i)
        REQUIRE(s.knots[i - 1] - s.knots[i] == Catch::Approx(1.0 / 50).margin(1e-12));
    for (std::size_t i = 1; i < s.knots.size(); ++i) REQUIRE(s.knots[i] < s.knots[i - 1]);

    Schedule one = make_schedule(1);
    REQUIRE(one.knots == std::vector<double>{1.0, 0.0});
    REQUIRE_THROWS_AS(make_schedule(0), ContractError);
}

TEST_CASE("constant velocity field telescopes exactly") {
    // dyadic schedule (N=4) and dyadic values: every update is exact
    Schedule sch = make_schedule(4);
    Tensor<double> z1 = dyadic_tensor({2, 3, 4}, 1);
    Tensor<double> k = dyadic_tensor({2, 3, 4}, 2);
    VelocityFn<double> vfn = [&](const Tensor<double>&, double, int) { return k; };
    Tensor<double> none;

    auto traj = sample(vfn, z1, none, sch);
    REQUIRE(traj.states.size() == 5);
    const auto& z0 = traj.final_state();
    for (std::size_t i = 0; i < z0.data.size(); ++i)
        REQUIRE(z0.data[i] == z1.data[i] - k.data[i]);

    // round trip: invert then sample is the exact identity
    auto up = invert(vfn, z0, none, sch);
    for (std::size_t i = 0; i < up.final_state().data.size(); ++i)
        REQUIRE(up.final_state().data[i] == z1.data[i]);
    auto down = sample(vfn, up.final_state(), none, sch);
    REQUIRE(down.final_state().data == z0.data);
}

TEST_CASE("single step is one Euler update") {
    Schedule sch = make_schedule(1);
    Tensor<double> z1({4});
    z1.data = {1, 2, 3, 4};
    Tensor<double> k({4});
    k.data = {0.5, 0.5, 0.5, 0.5};
    VelocityFn<double> vfn = [&](const Tensor<double>&, double, int) { return k; };
    Tensor<double> none;
    auto traj = sample(vfn, z1, none, sch);
    for (std::size_t i = 0; i < 4; ++i) REQUIRE(traj.final_state().data[i] == z1.data[i] - 0.5);
}

TEST_CASE("linear field round trip matches the closed-form shrinkage") {
    const int N = 50;
    Schedule sch = make_schedule(N);
    VelocityFn<double> vfn = [](const Tensor<double>& z, double, int) { return z; };
    Tensor<double> z0({3, 2, 2});
    std::mt19937 rng(3);
    std::uniform_real_distribution<double> d(0.5, 2.0);
    for (auto& v : z0.data) v = d(rng);
    Tensor<double> none;
    auto z1 = invert(vfn, z0, none, sch).final_state();
    auto back = sample(vfn, z1, none, sch).final_state();
    const double factor = std::pow(1.0 - 1.0 / double(N) / double(N), N);
    REQUIRE(factor == Catch::Approx(0.980198).margin(1e-5));
    for (std::size_t i = 0; i < z0.data.size(); ++i)
        REQUIRE(std::fabs(back.data[i] / z0.data[i] - factor) <= 1e-9);
}

TEST_CASE("fixed-point inversion tightens the round trip for a nonlinear field") {
    const int N = 20;
    Schedule sch = make_schedule(N);
    VelocityFn<double> vfn = [](const Tensor<double>& z, double, int) {
        Tensor<double> v = z;
        for (auto& x : v.data) x = std::sin(x);
        return v;
    };
    Tensor<double> z0({8});
    std::mt19937 rng(4);
    std::uniform_real_distribution<double> d(-1, 1);
    for (auto& v : z0.data) v = d(rng);
    Tensor<double> none;
    auto err = [&](int fp_iters) {
        auto z1 = invert(vfn, z0, none, sch, fp_iters).final_state();
        auto back = sample(vfn, z1, none, sch).final_state();
        double e = 0;
        for (std::size_t i = 0; i < z0.data.size(); ++i)
            e += std::fabs(back.data[i] - z0.data[i]);
        return e;
    };
    REQUIRE(err(3) < err(0));
}

TEST_CASE("frame 0 stays clamped to the condition at every state") {
    Schedule sch = make_schedule(8);
    Tensor<double> z1({3, 2, 2});
    std::mt19937 rng(5);
    std::uniform_real_distribution<double> d(-1, 1);
    for (auto& v : z1.data) v = d(rng);
    Tensor<double> cond({2, 2});
    cond.data = {9, 8, 7, 6};
    VelocityFn<double> vfn = [&](const Tensor<double>& z, double, int) {
        Tensor<double> v = z;
        for (auto& x : v.data) x = 0.1 * x;
        return v;
    };
    for (const auto& [t, z] : sample(vfn, z1, cond, sch).states)
        for (std::size_t i = 0; i < 4; ++i) REQUIRE(z.data[i] == cond.data[i]);
    Tensor<double> z0 = z1;
    for (const auto& [t, z] : invert(vfn, z0, cond, sch).states)
        for (std::size_t i = 0; i < 4; ++i) REQUIRE(z.data[i] == cond.data[i]);
}

TEST_CASE("cfg combines velocities linearly") {
    // hand-set constants: v_cond = 2, v_uncond = 1, scale 3 -> 1 + 3*(2-1) = 4
    // exercised through guided_velocity's formula via a tiny real model
    Geometry g;
    g.H = 4;
    g.W = 4;
    g.p = 2;
    g.r = 1;
    g.n = 1;
    ModelConfig mc;
    mc.blocks = 1;
    mc.heads = 2;
    mc.mlp_ratio = 2;
    ModelParams<double> p = init_model<double>(g, mc, 3);
    Tensor<double> z({2, 4, 12});
    std::mt19937 rng(6);
    std::uniform_real_distribution<double> d(-1, 1);
    for (auto& v : z.data) v = d(rng);
    Tensor<double> cond({4, 12});
    for (auto& v : cond.data) v = d(rng);
    Tensor<double> empty;
    AttentionHooks<double> hooks;

    auto vc = forward_velocity(p, z, cond, 0.5, hooks);
    auto vu = forward_velocity(p, z, empty, 0.5, hooks);

    GuidanceConfig g1{1.0};
    auto out1 = guided_velocity(p, z, cond, 0.5, g1, hooks);
    REQUIRE(out1.data == vc.data);  // bitwise identity at scale 1

    GuidanceConfig g0{0.0};
    auto out0 = guided_velocity(p, z, cond, 0.5, g0, hooks);
    REQUIRE(out0.data == vu.data);

    GuidanceConfig g3{3.0};
    auto out3 = guided_velocity(p, z, cond, 0.5, g3, hooks);
    for (std::size_t i = 0; i < out3.data.size(); ++i)
        REQUIRE(out3.data[i] ==
                Catch::Approx(vu.data[i] + 3.0 * (vc.data[i] - vu.data[i])).margin(1e-12));
}

TEST_CASE("nan states are reported with their step index") {
    Schedule sch = make_schedule(4);
    Tensor<double> z1({2});
    z1.data = {1, 1};
    VelocityFn<double> vfn = [](const Tensor<double>& z, double, int) {
        Tensor<double> v = z;
        for (auto& x : v.data) x = std::numeric_limits<double>::quiet_NaN();
        return v;
    };
    Tensor<double> none;
    REQUIRE_THROWS_AS(sample(vfn, z1, none, sch), NumericalError);
    REQUIRE_THROWS_AS(invert(vfn, z1, none, sch), NumericalError);
}
