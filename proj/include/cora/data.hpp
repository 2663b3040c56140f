#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cora/error.hpp"
#include "cora/grid.hpp"
#include "cora/instructgen.hpp"
#include "cora/maskgeo.hpp"
#include "cora/rng.hpp"

namespace cora {

struct ShapesWorldConfig {
    int height = 32;
    int width = 32;
    int n_images = 0;
    std::vector<std::uint8_t> classes = {shape_class::Circle, shape_class::Square, shape_class::Triangle,
                                         shape_class::Bar};
    int min_objects = 2;
    int max_objects = 4;
    int min_size = 7;
    int max_size = 12;
    double color_jitter = 0.15; // per-object, per-channel uniform offset
    double pixel_noise = 0.06;  // per-pixel gaussian sigma
    int patch_multiple = 4;
    int color_modes = 1;     // colour clusters per class; 1 = the fixed class colours
    double mode_skew = 1.0;  // Zipf exponent over a class's colour modes
    std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const ShapesWorldConfig& c) {
    return {{"height", c.height},
            {"width", c.width},
            {"n_images", c.n_images},
            {"classes", c.classes},
            {"min_objects", c.min_objects},
            {"max_objects", c.max_objects},
            {"min_size", c.min_size},
            {"max_size", c.max_size},
            {"color_jitter", c.color_jitter},
            {"pixel_noise", c.pixel_noise},
            {"patch_multiple", c.patch_multiple},
            {"color_modes", c.color_modes},
            {"mode_skew", c.mode_skew},
            {"seed", c.seed}};
}

inline void validate(const ShapesWorldConfig& c) {
    auto bad = [](const std::string& m) { fail(ErrorCode::ConfigError, m); };
    if (c.height <= 0 || c.width <= 0) bad("image size must be positive");
    if (c.patch_multiple < 1 || c.height % c.patch_multiple || c.width % c.patch_multiple)
        bad("image size must be divisible by the patch size " + std::to_string(c.patch_multiple));
    if (c.n_images < 0) bad("n_images must be >= 0");
    if (c.classes.empty()) bad("at least one class required");
    for (auto cls : c.classes)
        if (!shapes_world_classes().count(cls)) bad("unknown shapes-world class " + std::to_string(cls));
    if (c.min_objects < 1 || c.max_objects < c.min_objects) bad("bad object count range");
    if (c.min_size < 3 || c.max_size < c.min_size) bad("bad object size range");
    if (c.max_size > std::min(c.width, c.height)) bad("max_size exceeds image size");
    if (c.color_jitter < 0 || c.pixel_noise < 0) bad("noise parameters must be >= 0");
    if (c.color_modes < 1 || c.color_modes > 16) bad("color_modes must be in [1,16]");
    if (c.mode_skew < 0) bad("mode_skew must be >= 0");
}

struct Sample {
    std::string id;
    Raster image; // RGB
    LabelMap labels;
};

namespace detail {

inline constexpr std::array<std::array<double, 3>, 4> kClassColor = {{
    {0.85, 0.30, 0.30}, // circle
    {0.30, 0.80, 0.35}, // square
    {0.35, 0.40, 0.90}, // triangle
    {0.85, 0.80, 0.30}, // bar
}};

using Rgb = std::array<double, 3>;

/// Colour modes per class. Mode 0 is the class's base colour; further modes are drawn
/// from the dataset seed, kept saturated and at least 0.25 away from every other class's modes.
inline std::array<std::vector<Rgb>, 4> palette(const ShapesWorldConfig& cfg) {
    std::array<std::vector<Rgb>, 4> pal;
    for (int c = 0; c < 4; ++c) pal[c].push_back(kClassColor[c]);
    Rng rng(derive_seed(cfg.seed, {0xC0104}));
    auto dist = [](const Rgb& a, const Rgb& b) {
        return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
    };
    for (int m = 1; m < cfg.color_modes; ++m)
        for (int c = 0; c < 4; ++c) {
            Rgb col{};
            for (int attempt = 0; attempt < 1000; ++attempt) {
                for (auto& v : col) v = rng.uniform(0.1, 0.95);
                if (*std::max_element(col.begin(), col.end()) < 0.55) continue;
                bool ok = true;
                for (int o = 0; o < 4 && ok; ++o)
                    if (o != c)
                        for (const auto& q : pal[o]) ok = ok && dist(col, q) >= 0.25;
                if (ok) break;
            }
            pal[c].push_back(col);
        }
    return pal;
}

/// Rasterizes one shape of `cls` with nominal size `s` whose bounding square starts at (x0, y0).
inline BinaryMask rasterize(std::uint8_t cls, int s, int x0, int y0, bool vertical, int w, int h) {
    BinaryMask m(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double px = x + 0.5 - x0, py = y + 0.5 - y0;
            bool in = false;
            switch (cls) {
            case shape_class::Circle: {
                const double r = s / 2.0;
                in = (px - r) * (px - r) + (py - r) * (py - r) <= r * r;
                break;
            }
            case shape_class::Square: in = px >= 0 && px < s && py >= 0 && py < s; break;
            case shape_class::Triangle: {
                const double half = 0.5 * s * (py / s);
                in = py >= 0 && py <= s && std::abs(px - s / 2.0) <= half;
                break;
            }
            case shape_class::Bar: {
                const int thick = std::max(2, s / 3);
                const double off = (s - thick) / 2.0;
                in = vertical ? (px >= off && px < off + thick && py >= 0 && py < s)
                              : (py >= off && py < off + thick && px >= 0 && px < s);
                break;
            }
            default: break;
            }
            m(x, y) = in;
        }
    return m;
}

} // namespace detail

/// Renders image `index` of a shapes-world dataset; depends only on (cfg, index).
inline Sample render_shapes_world(const ShapesWorldConfig& cfg, int index) {
    Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(index)}));
    const int w = cfg.width, h = cfg.height;
    char id[16];
    std::snprintf(id, sizeof id, "%06d", index);
    Sample s{id, Raster{w, h, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h * 3)}, LabelMap(w, h, kVoid)};

    std::vector<double> rgb(static_cast<std::size_t>(w) * h * 3);
    const double bg = rng.uniform(0.10, 0.35);
    for (auto& v : rgb) v = bg;

    const auto pal = detail::palette(cfg);
    std::vector<double> mode_weight(static_cast<std::size_t>(cfg.color_modes));
    double total_weight = 0.0;
    for (int m = 0; m < cfg.color_modes; ++m) total_weight += mode_weight[m] = std::pow(m + 1.0, -cfg.mode_skew);

    BinaryMask occupied(w, h);
    const int n_obj = rng.range(cfg.min_objects, cfg.max_objects);
    for (int o = 0; o < n_obj; ++o) {
        const auto cls = cfg.classes[rng.below(cfg.classes.size())];
        const int size = rng.range(cfg.min_size, cfg.max_size);
        const bool vertical = rng.bernoulli(0.5);
        std::size_t mode = 0;
        if (cfg.color_modes > 1) {
            double u = rng.uniform() * total_weight;
            while (mode + 1 < mode_weight.size() && u >= mode_weight[mode]) u -= mode_weight[mode++];
        }
        std::array<double, 3> color{};
        for (int c = 0; c < 3; ++c) color[c] = pal[cls][mode][c] + rng.uniform(-cfg.color_jitter, cfg.color_jitter);
        for (int attempt = 0; attempt < 40; ++attempt) {
            const int x0 = rng.range(0, w - size);
            const int y0 = rng.range(0, h - size);
            auto mask = detail::rasterize(cls, size, x0, y0, vertical, w, h);
            if (count_set(mask) < kDefaultMinArea) continue;
            // keep a one pixel void gap to every earlier object
            const auto halo = dilate4(mask);
            bool clash = false;
            for (std::size_t i = 0; i < halo.size() && !clash; ++i) clash = halo.data[i] && occupied.data[i];
            if (clash) continue;
            for (std::size_t i = 0; i < mask.size(); ++i) {
                if (!mask.data[i]) continue;
                occupied.data[i] = 1;
                s.labels.data[i] = cls;
                for (int c = 0; c < 3; ++c) rgb[i * 3 + c] = color[c];
            }
            break;
        }
    }
    for (std::size_t i = 0; i < rgb.size(); ++i) {
        const double v = rgb[i] + cfg.pixel_noise * rng.normal();
        s.image.data[i] = pnm::quantize(v);
    }
    return s;
}

/// Generated or loaded dataset held in memory.
struct Dataset {
    std::vector<Sample> samples;
    ClassLexicon lexicon;
    int height = 0;
    int width = 0;

    std::size_t size() const { return samples.size(); }
};

inline Dataset generate_shapes_world(const ShapesWorldConfig& cfg) {
    validate(cfg);
    Dataset ds;
    ds.lexicon = shapes_world_lexicon(cfg.classes);
    ds.height = cfg.height;
    ds.width = cfg.width;
    ds.samples.reserve(static_cast<std::size_t>(cfg.n_images));
    for (int i = 0; i < cfg.n_images; ++i) ds.samples.push_back(render_shapes_world(cfg, i));
    return ds;
}

inline std::string image_rel_path(const std::string& id) { return "images/" + id + ".ppm"; }
inline std::string label_rel_path(const std::string& id) { return "labels/" + id + ".pgm"; }

/// Writes images/, labels/, manifest.json and lexicon.json under `dir`.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& ds, const nlohmann::json& config = {}) {
    std::filesystem::create_directories(dir / "images");
    std::filesystem::create_directories(dir / "labels");
    nlohmann::json images = nlohmann::json::array();
    for (const auto& s : ds.samples) {
        pnm::write(dir / image_rel_path(s.id), s.image);
        pnm::write_label_map(dir / label_rel_path(s.id), s.labels);
        images.push_back({{"id", s.id}, {"image", image_rel_path(s.id)}, {"label", label_rel_path(s.id)}});
    }
    nlohmann::json manifest = {{"format", "shapes-world"},
                               {"height", ds.height},
                               {"width", ds.width},
                               {"n_images", ds.samples.size()},
                               {"images", images},
                               {"config", config}};
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
    ds.lexicon.save(dir / "lexicon.json");
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) fail(ErrorCode::DataError, "no manifest.json in " + dir.string());
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::ParseError, "manifest.json: " + std::string(e.what()));
    }
    Dataset ds;
    ds.lexicon = ClassLexicon::load(dir / "lexicon.json");
    ds.height = manifest.value("height", 0);
    ds.width = manifest.value("width", 0);
    for (const auto& e : manifest.at("images")) {
        Sample s;
        s.id = e.at("id").get<std::string>();
        s.image = pnm::read(dir / e.at("image").get<std::string>());
        s.labels = pnm::read_label_map(dir / e.at("label").get<std::string>());
        if (s.image.width != s.labels.width || s.image.height != s.labels.height)
            fail(ErrorCode::DataError, "image and label dims differ for " + s.id);
        for (auto v : s.labels.data)
            if (v != kVoid && !ds.lexicon.contains(v))
                fail(ErrorCode::DataError, "label " + std::to_string(v) + " in " + s.id + " missing from lexicon");
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

struct SplitManifest {
    std::vector<std::string> labeled;
    std::vector<std::string> unlabeled;
    double ratio = 0.0;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const {
        return {{"labeled", labeled}, {"unlabeled", unlabeled}, {"ratio", ratio}, {"seed", seed}};
    }
    static SplitManifest from_json(const nlohmann::json& j) {
        return {j.at("labeled").get<std::vector<std::string>>(), j.at("unlabeled").get<std::vector<std::string>>(),
                j.at("ratio").get<double>(), j.at("seed").get<std::uint64_t>()};
    }
};

/// Seeded shuffle, then the first round(ratio * n) ids are labeled. Both lists are returned sorted.
inline SplitManifest make_split(const std::vector<std::string>& ids, double ratio, std::uint64_t seed) {
    if (ids.empty()) fail(ErrorCode::EmptyDataset, "cannot split an empty dataset");
    if (!(ratio >= 0.0 && ratio <= 1.0)) fail(ErrorCode::ConfigError, "split ratio must be in [0,1]");
    auto order = ids;
    Rng rng(derive_seed(seed, {0x5b17}));
    rng.shuffle(order);
    const auto n_lab = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(ids.size())));
    SplitManifest m;
    m.labeled.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_lab));
    m.unlabeled.assign(order.begin() + static_cast<std::ptrdiff_t>(n_lab), order.end());
    std::sort(m.labeled.begin(), m.labeled.end());
    std::sort(m.unlabeled.begin(), m.unlabeled.end());
    m.ratio = ratio;
    m.seed = seed;
    return m;
}

inline SplitManifest make_split(const Dataset& ds, double ratio, std::uint64_t seed) {
    std::vector<std::string> ids;
    for (const auto& s : ds.samples) ids.push_back(s.id);
    return make_split(ids, ratio, seed);
}

struct InstructionBundle {
    InstructionSet semantic;
    InstructionSet attribute;
    InstructionSet conditional;
};

/// Per-image seed used for instruction generation; image i of a dataset always gets the same one.
inline std::uint64_t instruction_seed(std::uint64_t seed, std::size_t image_index) {
    return derive_seed(seed, {0x1A57, image_index});
}

/// All three instruction sets for the listed images. Images with fewer than two
/// objects contribute no conditional instructions.
inline InstructionBundle generate_instructions(const Dataset& ds, const std::vector<std::size_t>& indices,
                                               std::uint64_t seed, std::size_t pairs, const GenOptions& opts = {}) {
    InstructionBundle b;
    for (auto i : indices) {
        const auto& s = ds.samples.at(i);
        const auto ref = image_rel_path(s.id);
        const auto sd = instruction_seed(seed, i);
        b.semantic.append(gen_semantic(s.labels, ds.lexicon, sd, ref));
        b.attribute.append(gen_attribute(s.labels, ds.lexicon, sd, ref));
        try {
            b.conditional.append(gen_conditional(s.labels, ds.lexicon, sd, pairs, ref, opts));
        } catch (const Error& e) {
            if (e.code() != ErrorCode::InsufficientObjects) throw;
        }
    }
    return b;
}

} // namespace cora
