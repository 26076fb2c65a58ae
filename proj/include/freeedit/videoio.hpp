#ifndef FREEEDIT_VIDEOIO_HPP
#define FREEEDIT_VIDEOIO_HPP

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "freeedit/errors.hpp"
#include "freeedit/flow.hpp"
#include "freeedit/image.hpp"
#include "freeedit/maskprop.hpp"

namespace freeedit {

// Token-grid geometry shared by the tokenizer, sampler, and mask pipeline.
// A (1+r*n)-frame video maps to (1+n) latent frames of l tokens each.
struct Geometry {
    int H = 16;
    int W = 16;
    int r = 2;  // raw frames per latent chunk
    int n = 4;  // latent chunks after frame 0
    int p = 4;  // spatial patch edge
    int c = 0;  // token channels; 0 means r*p*p*3 (smallest invertible width)

    int frame_count() const { return 1 + r * n; }
    int tokens_per_frame() const { return (H / p) * (W / p); }
    int latent_frames() const { return 1 + n; }
    int channels() const { return c > 0 ? c : r * p * p * 3; }

    void validate() const {
        if (r < 1 || n < 1) throw GeometryError("r >= 1 and n >= 1 required");
        if (p < 1 || H % p != 0 || W % p != 0) throw GeometryError("p must divide H and W");
        if (channels() < r * p * p * 3)
            throw GeometryError("c must be >= r*p*p*3 for an invertible tokenizer");
    }
};

struct VideoFrames {
    std::vector<Image> frames;

    std::size_t size() const { return frames.size(); }
    const Image& operator[](std::size_t i) const { return frames[i]; }
    Image& operator[](std::size_t i) { return frames[i]; }

    void check_uniform() const {
        if (frames.empty()) throw ContractError("empty VideoFrames");
        for (const auto& f : frames)
            if (!f.same_dims(frames[0])) throw GeometryError("mixed frame dimensions");
    }
};

inline std::string frame_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%04d.png", index);
    return buf;
}

inline void save_frames(const VideoFrames& v, const std::filesystem::path& dir) {
    v.check_uniform();
    std::filesystem::create_directories(dir);
    for (std::size_t i = 0; i < v.size(); ++i)
        save_image_png(v.frames[i], dir / frame_name(static_cast<int>(i)));
}

inline VideoFrames load_frames(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    int count = 0;
    while (std::filesystem::exists(dir / frame_name(count))) ++count;
    if (count == 0) throw IoError("no frame_0000.png in " + dir.string());
    // gap detection: any higher-numbered frame after the contiguous run
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        int idx = -1;
        if (std::sscanf(name.c_str(), "frame_%d.png", &idx) == 1 && idx >= count)
            throw FormatError("gap in frame sequence before " + name);
    }
    VideoFrames v;
    v.frames.reserve(count);
    for (int i = 0; i < count; ++i) v.frames.push_back(load_image_png(dir / frame_name(i)));
    v.check_uniform();
    return v;
}

enum class EditRecipe { Recolor, Remove, Add };

struct ShapeSpec {
    int size = 8;
    int x0 = 0, y0 = 0;  // top-left at frame 0
    int vx = 0, vy = 0;  // pixels per frame
    float color[3] = {1, 0, 0};
};

struct SceneConfig {
    int height = 16;
    int width = 16;
    int frames = 9;  // 1 + r*n
    int shape_count = 1;
    int edit_shape = 0;
    float edit_color[3] = {0, 0, 1};
    EditRecipe recipe = EditRecipe::Recolor;
    float texture = 0.3f;     // multiplicative shape texture amplitude
    float edit_noise = 0.0f;  // additive noise on the edited first frame
    bool keep_in_bounds = true;
    std::vector<ShapeSpec> shapes;  // explicit; randomized per seed when empty
};

// Moving-shapes scene with analytically known flow and editing masks.
struct SyntheticScene {
    VideoFrames source;
    Image edited_first;
    FlowSequence gt_flow;
    MaskSequence gt_edit_masks;
    std::uint64_t seed = 0;
    std::vector<ShapeSpec> shapes;
};

namespace detail {

inline bool parse_rgb(const std::string& s, float out[3]) {
    return std::sscanf(s.c_str(), "%f,%f,%f", &out[0], &out[1], &out[2]) == 3;
}

}  // namespace detail

// Flat key=value scene file. Keys: height, width, frames, shapes, edit_shape,
// edit_color, velocities, plus recipe/texture/edit_noise/sizes/positions/colors.
inline SceneConfig parse_scene_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open scene config: " + path.string());
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("scene config line without '=': " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    SceneConfig cfg;
    auto geti = [&](const char* k, int& dst) {
        if (kv.count(k)) dst = std::stoi(kv[k]);
    };
    geti("height", cfg.height);
    geti("width", cfg.width);
    geti("frames", cfg.frames);
    geti("shapes", cfg.shape_count);
    geti("edit_shape", cfg.edit_shape);
    if (kv.count("edit_color") && !detail::parse_rgb(kv["edit_color"], cfg.edit_color))
        throw FormatError("bad edit_color");
    if (kv.count("recipe")) {
        const std::string& r = kv["recipe"];
        if (r == "recolor")
            cfg.recipe = EditRecipe::Recolor;
        else if (r == "remove")
            cfg.recipe = EditRecipe::Remove;
        else if (r == "add")
            cfg.recipe = EditRecipe::Add;
        else
            throw FormatError("unknown recipe: " + r);
    }
    if (kv.count("texture")) cfg.texture = std::stof(kv["texture"]);
    if (kv.count("edit_noise")) cfg.edit_noise = std::stof(kv["edit_noise"]);
    if (kv.count("in_bounds")) cfg.keep_in_bounds = std::stoi(kv["in_bounds"]) != 0;
    auto split = [](const std::string& s) {
        std::vector<std::string> parts;
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ';')) parts.push_back(item);
        return parts;
    };
    if (kv.count("velocities")) {
        auto parts = split(kv["velocities"]);
        cfg.shapes.resize(std::max(cfg.shapes.size(), parts.size()));
        for (std::size_t i = 0; i < parts.size(); ++i)
            if (std::sscanf(parts[i].c_str(), "%d,%d", &cfg.shapes[i].vx, &cfg.shapes[i].vy) != 2)
                throw FormatError("bad velocity entry: " + parts[i]);
    }
    if (kv.count("sizes")) {
        auto parts = split(kv["sizes"]);
        cfg.shapes.resize(std::max(cfg.shapes.size(), parts.size()));
        for (std::size_t i = 0; i < parts.size(); ++i) cfg.shapes[i].size = std::stoi(parts[i]);
    }
    if (kv.count("positions")) {
        auto parts = split(kv["positions"]);
        cfg.shapes.resize(std::max(cfg.shapes.size(), parts.size()));
        for (std::size_t i = 0; i < parts.size(); ++i)
            if (std::sscanf(parts[i].c_str(), "%d,%d", &cfg.shapes[i].x0, &cfg.shapes[i].y0) != 2)
                throw FormatError("bad position entry: " + parts[i]);
    }
    if (kv.count("colors")) {
        auto parts = split(kv["colors"]);
        cfg.shapes.resize(std::max(cfg.shapes.size(), parts.size()));
        for (std::size_t i = 0; i < parts.size(); ++i)
            if (!detail::parse_rgb(parts[i], cfg.shapes[i].color))
                throw FormatError("bad color entry: " + parts[i]);
    }
    if (!cfg.shapes.empty()) cfg.shape_count = static_cast<int>(cfg.shapes.size());
    return cfg;
}

inline SyntheticScene gen_moving_shapes(const SceneConfig& cfg, std::uint64_t seed) {
    if (cfg.height < 2 || cfg.width < 2 || cfg.frames < 2 || cfg.shape_count < 1)
        throw ConfigError("gen_moving_shapes: degenerate scene config");
    if (cfg.edit_shape < 0 || cfg.edit_shape >= cfg.shape_count)
        throw ConfigError("gen_moving_shapes: edit_shape out of range");

    std::mt19937_64 rng(seed);
    std::vector<ShapeSpec> shapes = cfg.shapes;
    shapes.resize(cfg.shape_count);
    bool randomized = cfg.shapes.empty();
    for (int s = 0; s < cfg.shape_count; ++s) {
        ShapeSpec& sp = shapes[s];
        if (randomized) {
            std::uniform_int_distribution<int> size_d(std::min(4, cfg.height / 2),
                                                      std::max(4, std::min(cfg.height, cfg.width) / 2));
            sp.size = size_d(rng);
            std::uniform_int_distribution<int> vel_d(-2, 2);
            sp.vx = vel_d(rng);
            sp.vy = vel_d(rng);
            if (sp.vx == 0 && sp.vy == 0) sp.vx = 1;
            std::uniform_real_distribution<float> col_d(0.2f, 1.0f);
            for (int c = 0; c < 3; ++c) sp.color[c] = col_d(rng);
            int last = cfg.frames - 1;
            int lox, hix, loy, hiy;
            for (;;) {
                lox = std::max(0, -sp.vx * last);
                hix = cfg.width - sp.size - std::max(0, sp.vx * last);
                loy = std::max(0, -sp.vy * last);
                hiy = cfg.height - sp.size - std::max(0, sp.vy * last);
                if (!cfg.keep_in_bounds || (hix >= lox && hiy >= loy)) break;
                // shrink the velocity toward zero until the trajectory fits
                if (sp.vx == 0 && sp.vy == 0)
                    throw ConfigError("gen_moving_shapes: shape trajectory cannot stay in bounds");
                if (std::abs(sp.vx) >= std::abs(sp.vy))
                    sp.vx -= sp.vx > 0 ? 1 : -1;
                else
                    sp.vy -= sp.vy > 0 ? 1 : -1;
            }
            if (!cfg.keep_in_bounds) {
                lox = 0;
                hix = cfg.width - sp.size;
                loy = 0;
                hiy = cfg.height - sp.size;
            }
            sp.x0 = std::uniform_int_distribution<int>(lox, hix)(rng);
            sp.y0 = std::uniform_int_distribution<int>(loy, hiy)(rng);
        }
        if (sp.size < 1 || sp.size > std::min(cfg.height, cfg.width))
            throw ConfigError("gen_moving_shapes: shape exceeds canvas");
    }

    // per-shape texture pattern in shape-local coordinates, moving with it
    std::vector<std::vector<float>> tex(shapes.size());
    for (std::size_t s = 0; s < shapes.size(); ++s) {
        tex[s].resize(std::size_t(shapes[s].size) * shapes[s].size);
        std::uniform_real_distribution<float> t_d(1.0f - cfg.texture, 1.0f + cfg.texture);
        for (auto& v : tex[s]) v = t_d(rng);
    }

    auto shape_pixel = [&](int s, int ly, int lx) {
        const ShapeSpec& sp = shapes[s];
        float t = tex[s][std::size_t(ly) * sp.size + lx];
        Image px(1, 1);
        for (int c = 0; c < 3; ++c) px.at(0, 0, c) = std::clamp(sp.color[c] * t, 0.0f, 1.0f);
        return px;
    };

    // topmost shape at a pixel for frame k, or -1 for background; with the
    // add recipe the edited shape exists only in the edited first frame
    auto top_shape = [&](int k, int y, int x) {
        for (int s = cfg.shape_count - 1; s >= 0; --s) {
            if (cfg.recipe == EditRecipe::Add && s == cfg.edit_shape) continue;
            const ShapeSpec& sp = shapes[s];
            int sx = sp.x0 + sp.vx * k, sy = sp.y0 + sp.vy * k;
            if (x >= sx && x < sx + sp.size && y >= sy && y < sy + sp.size) return s;
        }
        return -1;
    };

    SyntheticScene scene;
    scene.seed = seed;
    scene.shapes = shapes;
    scene.source.frames.assign(cfg.frames, Image(cfg.height, cfg.width, 0.0f));
    scene.gt_edit_masks.assign(cfg.frames, Mask{});
    for (int k = 0; k < cfg.frames; ++k) {
        Image& frame = scene.source.frames[k];
        Mask& mask = scene.gt_edit_masks[k];
        mask.m = Plane(cfg.height, cfg.width);
        mask.frame_index = k;
        for (int y = 0; y < cfg.height; ++y)
            for (int x = 0; x < cfg.width; ++x) {
                int s = top_shape(k, y, x);
                if (s < 0) continue;
                const ShapeSpec& sp = shapes[s];
                int lx = x - (sp.x0 + sp.vx * k), ly = y - (sp.y0 + sp.vy * k);
                Image px = shape_pixel(s, ly, lx);
                for (int c = 0; c < 3; ++c) frame.at(y, x, c) = px.at(0, 0, c);
                if (s == cfg.edit_shape && cfg.recipe != EditRecipe::Add) mask.m.at(y, x) = 1.0f;
            }
        if (cfg.recipe == EditRecipe::Add) {
            // added shape is static; its mask is the frame-0 placement
            const ShapeSpec& sp = shapes[cfg.edit_shape];
            for (int y = sp.y0; y < std::min(cfg.height, sp.y0 + sp.size); ++y)
                for (int x = sp.x0; x < std::min(cfg.width, sp.x0 + sp.size); ++x)
                    mask.m.at(std::max(y, 0), std::max(x, 0)) = 1.0f;
        }
    }

    // exact scripted flow: shape velocity on covered pixels, zero on background
    scene.gt_flow.assign(cfg.frames - 1, FlowField(cfg.height, cfg.width));
    for (int k = 0; k + 1 < cfg.frames; ++k)
        for (int y = 0; y < cfg.height; ++y)
            for (int x = 0; x < cfg.width; ++x) {
                int s = top_shape(k, y, x);
                if (s < 0) continue;
                scene.gt_flow[k].fx.at(y, x) = static_cast<float>(shapes[s].vx);
                scene.gt_flow[k].fy.at(y, x) = static_cast<float>(shapes[s].vy);
            }

    // edit recipe applied to frame 0
    scene.edited_first = scene.source.frames[0];
    const ShapeSpec& esp = shapes[cfg.edit_shape];
    if (cfg.recipe == EditRecipe::Recolor) {
        for (int y = 0; y < cfg.height; ++y)
            for (int x = 0; x < cfg.width; ++x) {
                if (scene.gt_edit_masks[0].m.at(y, x) == 0) continue;
                int lx = x - esp.x0, ly = y - esp.y0;
                float t = tex[cfg.edit_shape][std::size_t(ly) * esp.size + lx];
                for (int c = 0; c < 3; ++c)
                    scene.edited_first.at(y, x, c) = std::clamp(cfg.edit_color[c] * t, 0.0f, 1.0f);
            }
    } else if (cfg.recipe == EditRecipe::Remove) {
        for (int y = 0; y < cfg.height; ++y)
            for (int x = 0; x < cfg.width; ++x)
                if (scene.gt_edit_masks[0].m.at(y, x) != 0)
                    for (int c = 0; c < 3; ++c) scene.edited_first.at(y, x, c) = 0.0f;
    } else {
        for (int y = 0; y < cfg.height; ++y)
            for (int x = 0; x < cfg.width; ++x)
                if (scene.gt_edit_masks[0].m.at(y, x) != 0) {
                    int lx = x - esp.x0, ly = y - esp.y0;
                    float t = tex[cfg.edit_shape][std::size_t(ly) * esp.size + lx];
                    for (int c = 0; c < 3; ++c)
                        scene.edited_first.at(y, x, c) =
                            std::clamp(cfg.edit_color[c] * t, 0.0f, 1.0f);
                }
    }
    if (cfg.edit_noise > 0) {
        std::normal_distribution<float> noise(0.0f, cfg.edit_noise);
        for (auto& v : scene.edited_first.px) v = std::clamp(v + noise(rng), 0.0f, 1.0f);
    }
    return scene;
}

}  // namespace freeedit

#endif
