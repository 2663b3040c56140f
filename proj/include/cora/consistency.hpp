#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cora/error.hpp"
#include "cora/grid.hpp"
#include "cora/instructgen.hpp"
#include "cora/maskgeo.hpp"
#include "cora/model.hpp"
#include "cora/rng.hpp"

namespace cora {

/// Soft predictions of the frozen model under the k-1 auxiliary query rephrasings.
struct PredictionStack {
    std::vector<SoftMask> preds;
    std::uint8_t class_id = 0;
    std::vector<std::size_t> query_ids;
};

/// Population variance across the stack at each pixel. Shifted by the first
/// prediction so identical predictions give exactly zero.
inline Grid<double> pixel_variance(const PredictionStack& stack) {
    if (stack.preds.empty()) fail(ErrorCode::EmptyStack, "prediction stack is empty");
    const auto& first = stack.preds.front();
    for (const auto& p : stack.preds) require_same_dims(first, p, "pixel_variance");
    const double n = static_cast<double>(stack.preds.size());
    Grid<double> var(first.width, first.height);
    for (std::size_t i = 0; i < first.size(); ++i) {
        const double shift = first.data[i];
        double s1 = 0.0, s2 = 0.0;
        for (const auto& p : stack.preds) {
            const double dlt = p.data[i] - shift;
            s1 += dlt;
            s2 += dlt * dlt;
        }
        var.data[i] = std::max(0.0, (s2 - s1 * s1 / n) / n);
    }
    return var;
}

enum class WeightMode { Literal, InverseExp, InverseLinear };

inline std::string_view to_string(WeightMode m) {
    switch (m) {
    case WeightMode::Literal: return "literal";
    case WeightMode::InverseExp: return "inverse_exp";
    case WeightMode::InverseLinear: return "inverse_linear";
    }
    return "?";
}

inline WeightMode weight_mode_from_string(std::string_view s) {
    for (auto m : {WeightMode::Literal, WeightMode::InverseExp, WeightMode::InverseLinear})
        if (to_string(m) == s) return m;
    fail(ErrorCode::ConfigError, "unknown weight mode '" + std::string(s) + "'");
}

inline constexpr double kDefaultV0 = 0.05;

struct WeightMap {
    int width = 0;
    int height = 0;
    Grid<double> weights;
    Grid<double> raw_variance;
    WeightMode mode = WeightMode::InverseExp;
    double v0 = kDefaultV0;

    double mean() const {
        if (weights.data.empty()) return 0.0;
        double s = 0.0;
        for (double w : weights.data) s += w;
        return s / static_cast<double>(weights.size());
    }
};

/// Literal: w = var. InverseExp: w = exp(-var / v0). InverseLinear: w = clamp(1 - 4 var, 0, 1).
inline WeightMap variance_to_weight(const Grid<double>& var, WeightMode mode, double v0 = kDefaultV0) {
    if (mode == WeightMode::InverseExp && !(v0 > 0.0)) fail(ErrorCode::BadScale, "v0 must be > 0");
    WeightMap wm{var.width, var.height, Grid<double>(var.width, var.height), var, mode, v0};
    for (std::size_t i = 0; i < var.size(); ++i) {
        const double v = var.data[i];
        switch (mode) {
        case WeightMode::Literal: wm.weights.data[i] = v; break;
        case WeightMode::InverseExp: wm.weights.data[i] = std::exp(-v / v0); break;
        case WeightMode::InverseLinear: wm.weights.data[i] = std::clamp(1.0 - 4.0 * v, 0.0, 1.0); break;
        }
    }
    return wm;
}

inline WeightMap uniform_weights(int width, int height) {
    return {width, height, Grid<double>(width, height, 1.0), Grid<double>(width, height, 0.0), WeightMode::InverseExp,
            kDefaultV0};
}

/// Writes `<path>` as an 8-bit PGM and `<path minus extension>.json` with {min, max, mode, v0}.
inline void save_weight_map(const std::filesystem::path& path, const WeightMap& wm) {
    pnm::write_soft(path, wm.weights);
    double lo = 0.0, hi = 0.0;
    if (!wm.weights.data.empty()) {
        const auto [mn, mx] = std::minmax_element(wm.weights.data.begin(), wm.weights.data.end());
        lo = *mn;
        hi = *mx;
    }
    auto side = path;
    side.replace_extension(".json");
    std::ofstream out(side);
    out << nlohmann::json{{"min", lo}, {"max", hi}, {"mode", to_string(wm.mode)}, {"v0", wm.v0}}.dump(2) << '\n';
}

struct ConsistencyConfig {
    WeightMode mode = WeightMode::InverseExp;
    double v0 = kDefaultV0;
};

struct UnlabeledSample {
    const Image& image;
    const LabelMap& pseudo_labels; // output of the off-the-shelf pseudo-labeler
    std::uint8_t class_id;
};

struct WeightedPseudo {
    std::string query;
    std::size_t live_query_index = 0;
    BinaryMask pseudo_mask;
    WeightMap weights;
    PredictionStack stack;
};

/// Reserves query[live] for the live pass and runs the other K-1 queries
/// through the frozen parameters to build the pixel weight map.
inline WeightedPseudo build_weighted_pseudo(const UnlabeledSample& sample, const QueryDatabase& db,
                                            const ModelParams& frozen, std::size_t live_query_index,
                                            const ConsistencyConfig& cfg) {
    const auto& queries = db.for_class(sample.class_id);
    if (live_query_index >= queries.size())
        fail(ErrorCode::ConfigError, "live query index " + std::to_string(live_query_index) + " out of range");
    WeightedPseudo out;
    out.query = queries[live_query_index];
    out.live_query_index = live_query_index;
    out.pseudo_mask = class_mask(sample.pseudo_labels, sample.class_id);
    out.stack.class_id = sample.class_id;
    for (std::size_t j = 0; j < queries.size(); ++j) {
        if (j == live_query_index) continue;
        out.stack.preds.push_back(forward(frozen, sample.image, queries[j]).soft_mask);
        out.stack.query_ids.push_back(j);
    }
    out.weights = variance_to_weight(pixel_variance(out.stack), cfg.mode, cfg.v0);
    return out;
}

// ---------------------------------------------------------------------------
// Stand-in for an off-the-shelf semi-supervised segmenter.

struct PseudoNoise {
    double flip_rate = 0.0;
    int boundary_erode_dilate = 0;   // max radius in px
    std::uint64_t seed = 0;
    double dilate_prob = 0.5;        // chance a perturbed component grows rather than shrinks
    std::vector<std::uint8_t> classes; // flip candidates; empty = classes present in the map
};


/// Corrupts a ground-truth map: per-component class flips with probability
/// `flip_rate`, then per-component erosion or dilation by 1..boundary px.
/// Dilation only claims void pixels. Deterministic per seed.
inline LabelMap noisy_oracle_pseudo_labeler(const LabelMap& gt, const PseudoNoise& noise) {
    if (!(noise.flip_rate >= 0.0 && noise.flip_rate <= 1.0)) fail(ErrorCode::ConfigError, "flip_rate must be in [0,1]");
    if (noise.boundary_erode_dilate < 0) fail(ErrorCode::ConfigError, "boundary perturbation must be >= 0");
    const auto comps = extract_instances(gt, 1);
    std::vector<std::uint8_t> candidates = noise.classes;
    if (candidates.empty()) {
        std::set<std::uint8_t> seen;
        for (auto v : gt.data)
            if (v != kVoid) seen.insert(v);
        candidates.assign(seen.begin(), seen.end());
    }

    LabelMap out = gt;
    std::vector<std::uint8_t> new_class(comps.size());
    for (std::size_t i = 0; i < comps.size(); ++i) {
        Rng rng(derive_seed(noise.seed, {0xF11A, i}));
        new_class[i] = comps[i].class_id;
        std::vector<std::uint8_t> others;
        for (auto c : candidates)
            if (c != comps[i].class_id) others.push_back(c);
        if (rng.bernoulli(noise.flip_rate) && !others.empty()) new_class[i] = others[rng.below(others.size())];
        for (std::size_t p = 0; p < gt.size(); ++p)
            if (comps[i].mask.data[p]) out.data[p] = new_class[i];
    }
    if (noise.boundary_erode_dilate == 0) return out;

    const LabelMap flipped = out;
    for (std::size_t i = 0; i < comps.size(); ++i) {
        Rng rng(derive_seed(noise.seed, {0xB0DE, i}));
        const int radius = rng.range(1, noise.boundary_erode_dilate);
        const bool grow = rng.bernoulli(noise.dilate_prob);
        BinaryMask m = comps[i].mask;
        for (int r = 0; r < radius; ++r) m = grow ? dilate4(m) : erode4(m);
        for (std::size_t p = 0; p < gt.size(); ++p) {
            if (grow && m.data[p] && flipped.data[p] == kVoid && out.data[p] == kVoid) out.data[p] = new_class[i];
            if (!grow && comps[i].mask.data[p] && !m.data[p]) out.data[p] = kVoid;
        }
    }
    return out;
}

} // namespace cora
