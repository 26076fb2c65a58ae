#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <random>

#include "freeedit/flow.hpp"

using namespace freeedit;
namespace fs = std::filesystem;

static fs::path tmpdir() {
    auto p = fs::temp_directory_path() / "fe_flow_tests";
    fs::create_directories(p);
    return p;
}

// smooth textured test image: white noise blurred once
static Image textured(int h, int w, unsigned seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<float> d(0, 1);
    Image noise(h, w);
    for (auto& v : noise.px) v = d(rng);
    Image out(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                float s = 0;
                int cnt = 0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int yy = y + dy, xx = x + dx;
                        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                        s += noise.at(yy, xx, c);
                        ++cnt;
                    }
                out.at(y, x, c) = s / cnt;
            }
    return out;
}

static Image shifted(const Image& src, int sx, int sy) {
    Image out(src.h, src.w);
    for (int y = 0; y < src.h; ++y)
        for (int x = 0; x < src.w; ++x) {
            int yy = std::clamp(y - sy, 0, src.h - 1);
            int xx = std::clamp(x - sx, 0, src.w - 1);
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = src.at(yy, xx, c);
        }
    return out;
}

// independent oracle: exhaustive integer-shift SSD matching over +-5
static std::pair<int, int> best_integer_shift(const Image& a, const Image& b) {
    double best = 1e30;
    std::pair<int, int> arg{0, 0};
    const int m = 8;
    for (int sy = -5; sy <= 5; ++sy)
        for (int sx = -5; sx <= 5; ++sx) {
            double ssd = 0;
            for (int y = m; y < a.h - m; ++y)
                for (int x = m; x < a.w - m; ++x)
                    for (int c = 0; c < 3; ++c) {
                        double d = a.at(y, x, c) - b.at(y + sy, x + sx, c);
                        ssd += d * d;
                    }
            if (ssd < best) {
                best = ssd;
                arg = {sx, sy};
            }
        }
    return arg;
}

static double interior_epe(const FlowField& f, float gx, float gy, int margin) {
    double s = 0;
    int n = 0;
    for (int y = margin; y < f.h() - margin; ++y)
        for (int x = margin; x < f.w() - margin; ++x) {
            double dx = f.fx.at(y, x) - gx, dy = f.fy.at(y, x) - gy;
            s += std::sqrt(dx * dx + dy * dy);
            ++n;
        }
    return s / n;
}

TEST_CASE("pure +3 shift is recovered within half a pixel") {
    Image a = textured(64, 64, 11);
    Image b = shifted(a, 3, 0);
    auto oracle = best_integer_shift(a, b);
    REQUIRE(oracle.first == 3);
    REQUIRE(oracle.second == 0);
    FlowField f = estimate_flow(a, b);
    REQUIRE(interior_epe(f, 3, 0, 8) <= 0.5);
}

TEST_CASE("identical frames give zero flow") {
    Image a = textured(32, 32, 5);
    FlowField f = estimate_flow(a, a);
    for (float v : f.fx.v) REQUIRE(std::fabs(v) < 1e-4f);
    for (float v : f.fy.v) REQUIRE(std::fabs(v) < 1e-4f);
}

TEST_CASE("untextured frames damp to zero flow") {
    Image a(32, 32, 0.5f), b(32, 32, 0.5f);
    FlowField f = estimate_flow(a, b);
    for (float v : f.fx.v) REQUIRE(v == 0.0f);
    for (float v : f.fy.v) REQUIRE(v == 0.0f);
}

TEST_CASE("dimension mismatch is a geometry error") {
    REQUIRE_THROWS_AS(estimate_flow(Image(8, 8), Image(16, 16)), GeometryError);
}

TEST_CASE("shift property: all |s| <= 4 within half a pixel on interior") {
    Image base = textured(64, 64, 21);
    for (int s = -4; s <= 4; ++s) {
        FlowField fx = estimate_flow(base, shifted(base, s, 0));
        REQUIRE(interior_epe(fx, float(s), 0, 8) <= 0.5);
        FlowField fy = estimate_flow(base, shifted(base, 0, s));
        REQUIRE(interior_epe(fy, 0, float(s), 8) <= 0.5);
    }
}

TEST_CASE("estimate_sequence emits frames-1 fields and zeros for static video") {
    std::vector<Image> frames(9, textured(32, 32, 2));
    auto seq = estimate_sequence(frames);
    REQUIRE(seq.size() == 8);
    for (const auto& f : seq) {
        for (float v : f.fx.v) REQUIRE(std::fabs(v) < 1e-4f);
        for (float v : f.fy.v) REQUIRE(std::fabs(v) < 1e-4f);
    }
    std::vector<Image> one(1, frames[0]);
    REQUIRE_THROWS_AS(estimate_sequence(one), ContractError);
}

TEST_CASE("exact inverse flows are never occluded") {
    FlowField fwd(16, 16), bwd(16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 12; ++x) {
            fwd.fx.at(y, x) = 2;
            bwd.fx.at(y, x + 2) = -2;
        }
    OcclusionMask occ = fb_consistency(fwd, bwd, 0.5f);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 12; ++x) REQUIRE(occ.occluded.at(y, x) == 0.0f);
}

TEST_CASE("out-of-bounds targets are occluded") {
    FlowField fwd(8, 8), bwd(8, 8);
    fwd.fx.at(4, 7) = 3;  // lands at x=10
    OcclusionMask occ = fb_consistency(fwd, bwd, 1.0f);
    REQUIRE(occ.occluded.at(4, 7) == 1.0f);
    REQUIRE(occ.occluded.at(4, 0) == 0.0f);
}

TEST_CASE("inconsistent backward flow occludes everything in bounds") {
    FlowField fwd(8, 8), bwd(8, 8);
    for (auto& v : fwd.fx.v) v = 2;
    OcclusionMask occ = fb_consistency(fwd, bwd, 1.0f);
    for (float v : occ.occluded.v) REQUIRE(v == 1.0f);  // |2+0| > 1 everywhere
}

TEST_CASE("flow io: bitwise round trip over random fields") {
    std::mt19937 rng(99);
    std::uniform_int_distribution<int> dim(1, 12);
    std::uniform_real_distribution<float> val(-30, 30);
    auto path = tmpdir() / "f.flo";
    for (int it = 0; it < 110; ++it) {
        FlowField f(dim(rng), dim(rng));
        for (auto& v : f.fx.v) v = val(rng);
        for (auto& v : f.fy.v) v = val(rng);
        write_flow(f, path);
        FlowField back = read_flow(path);
        REQUIRE(back.fx.v == f.fx.v);
        REQUIRE(back.fy.v == f.fy.v);
    }
}

TEST_CASE("flow io rejects truncation and non-finite values") {
    auto path = tmpdir() / "bad.flo";
    {
        std::ofstream os(path, std::ios::binary);
        os << "FLO1";
        detail::put_u32le(os, 64);
        detail::put_u32le(os, 64);
        float one[2] = {0, 0};
        os.write(reinterpret_cast<const char*>(one), 8);
    }
    REQUIRE_THROWS_AS(read_flow(path), FormatError);

    FlowField f(4, 4);
    f.fx.at(0, 0) = std::nanf("");
    REQUIRE_THROWS_AS(write_flow(f, path), ContractError);
}
