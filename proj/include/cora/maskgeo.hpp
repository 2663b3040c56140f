#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string_view>
#include <tuple>
#include <vector>

#include "cora/error.hpp"
#include "cora/grid.hpp"

namespace cora {

struct Point {
    double x = 0.0;
    double y = 0.0;
    friend bool operator==(const Point&, const Point&) = default;
};

/// Inclusive pixel bounds.
struct BBox {
    int x_min = 0;
    int y_min = 0;
    int x_max = -1;
    int y_max = -1;
    friend bool operator==(const BBox&, const BBox&) = default;
};

struct ObjectInstance {
    std::uint8_t class_id = 0;
    BinaryMask mask;
    Point centroid;
    BBox bbox;
    std::size_t area = 0;
};

enum class SpatialRelation { LeftOf, RightOf, Above, Below, NextTo };

inline std::string_view to_string(SpatialRelation r) {
    switch (r) {
    case SpatialRelation::LeftOf: return "left_of";
    case SpatialRelation::RightOf: return "right_of";
    case SpatialRelation::Above: return "above";
    case SpatialRelation::Below: return "below";
    case SpatialRelation::NextTo: return "next_to";
    }
    return "?";
}

inline SpatialRelation relation_from_string(std::string_view s) {
    for (auto r : {SpatialRelation::LeftOf, SpatialRelation::RightOf, SpatialRelation::Above, SpatialRelation::Below,
                   SpatialRelation::NextTo})
        if (to_string(r) == s) return r;
    fail(ErrorCode::ParseError, "unknown spatial relation '" + std::string(s) + "'");
}

/// Phrase inserted between target and anchor descriptions in conditional queries.
inline std::string_view relation_phrase(SpatialRelation r) {
    switch (r) {
    case SpatialRelation::LeftOf: return "to the left of";
    case SpatialRelation::RightOf: return "to the right of";
    case SpatialRelation::Above: return "above";
    case SpatialRelation::Below: return "below";
    case SpatialRelation::NextTo: return "next to";
    }
    return "?";
}

inline constexpr std::size_t kDefaultMinArea = 4;
inline constexpr double kDefaultNextToDist = 3.0;

/// Rebuilds centroid, bbox and area from a mask. Throws DataError on an empty mask.
inline ObjectInstance instance_from_mask(BinaryMask mask, std::uint8_t class_id) {
    ObjectInstance inst;
    inst.class_id = class_id;
    inst.bbox = {mask.width, mask.height, -1, -1};
    double sx = 0.0, sy = 0.0;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x) {
            if (!mask(x, y)) continue;
            ++inst.area;
            sx += x;
            sy += y;
            inst.bbox.x_min = std::min(inst.bbox.x_min, x);
            inst.bbox.y_min = std::min(inst.bbox.y_min, y);
            inst.bbox.x_max = std::max(inst.bbox.x_max, x);
            inst.bbox.y_max = std::max(inst.bbox.y_max, y);
        }
    if (inst.area == 0) fail(ErrorCode::DataError, "instance mask is empty");
    inst.centroid = {sx / static_cast<double>(inst.area), sy / static_cast<double>(inst.area)};
    inst.mask = std::move(mask);
    return inst;
}

/// One instance per 4-connected component of each non-void class, dropping
/// components smaller than `min_area`. Ordered by (class_id, y_min, x_min),
/// ties broken by the component's first pixel in raster order.
inline std::vector<ObjectInstance> extract_instances(const LabelMap& map, std::size_t min_area = kDefaultMinArea) {
    if (min_area < 1) fail(ErrorCode::ConfigError, "min_area must be >= 1");
    const int w = map.width, h = map.height;
    std::vector<int> comp(map.size(), -1);
    struct Found {
        ObjectInstance inst;
        std::size_t first_pixel;
    };
    std::vector<Found> found;
    std::vector<int> stack;
    int next_id = 0;
    for (int y0 = 0; y0 < h; ++y0) {
        for (int x0 = 0; x0 < w; ++x0) {
            const std::size_t seed = static_cast<std::size_t>(y0) * w + x0;
            const auto cls = map.data[seed];
            if (cls == kVoid || comp[seed] >= 0) continue;
            BinaryMask mask(w, h);
            stack.assign(1, static_cast<int>(seed));
            comp[seed] = next_id;
            while (!stack.empty()) {
                const int p = stack.back();
                stack.pop_back();
                const int px = p % w, py = p / w;
                mask.data[p] = 1;
                const int nbr[4][2] = {{px - 1, py}, {px + 1, py}, {px, py - 1}, {px, py + 1}};
                for (const auto& n : nbr) {
                    if (!map.inside(n[0], n[1])) continue;
                    const int q = n[1] * w + n[0];
                    if (comp[q] < 0 && map.data[q] == cls) {
                        comp[q] = next_id;
                        stack.push_back(q);
                    }
                }
            }
            ++next_id;
            auto inst = instance_from_mask(std::move(mask), cls);
            if (inst.area >= min_area) found.push_back({std::move(inst), seed});
        }
    }
    std::sort(found.begin(), found.end(), [](const Found& a, const Found& b) {
        return std::tie(a.inst.class_id, a.inst.bbox.y_min, a.inst.bbox.x_min, a.first_pixel) <
               std::tie(b.inst.class_id, b.inst.bbox.y_min, b.inst.bbox.x_min, b.first_pixel);
    });
    std::vector<ObjectInstance> out;
    out.reserve(found.size());
    for (auto& f : found) out.push_back(std::move(f.inst));
    return out;
}

/// Euclidean distance between two boxes measured in empty pixel rows/columns
/// separating them; 0 when they touch or overlap.
inline double bbox_gap(const BBox& a, const BBox& b) {
    const int dx = std::max(0, std::max(a.x_min - b.x_max, b.x_min - a.x_max) - 1);
    const int dy = std::max(0, std::max(a.y_min - b.y_max, b.y_min - a.y_max) - 1);
    return std::hypot(static_cast<double>(dx), static_cast<double>(dy));
}

inline bool bboxes_overlap(const BBox& a, const BBox& b) {
    return a.x_min <= b.x_max && b.x_min <= a.x_max && a.y_min <= b.y_max && b.y_min <= a.y_max;
}

/// Spatial relation of `target` relative to `anchor` in image coordinates
/// (x right, y down). NextTo wins when the box gap is below `next_to_dist`.
inline SpatialRelation relation_of(const ObjectInstance& target, const ObjectInstance& anchor,
                                   double next_to_dist = kDefaultNextToDist) {
    if (target.centroid == anchor.centroid && bboxes_overlap(target.bbox, anchor.bbox))
        fail(ErrorCode::DegenerateGeometry, "target and anchor share a centroid and overlap");
    if (bbox_gap(target.bbox, anchor.bbox) < next_to_dist) return SpatialRelation::NextTo;
    const double dx = target.centroid.x - anchor.centroid.x;
    const double dy = target.centroid.y - anchor.centroid.y;
    if (std::abs(dx) >= std::abs(dy)) return dx > 0 ? SpatialRelation::RightOf : SpatialRelation::LeftOf;
    return dy > 0 ? SpatialRelation::Below : SpatialRelation::Above;
}

/// One step of 4-neighbourhood dilation.
inline BinaryMask dilate4(const BinaryMask& m) {
    BinaryMask out = m;
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            if (!m(x, y) && ((x > 0 && m(x - 1, y)) || (x + 1 < m.width && m(x + 1, y)) || (y > 0 && m(x, y - 1)) ||
                             (y + 1 < m.height && m(x, y + 1))))
                out(x, y) = 1;
    return out;
}


/// One step of 4-neighbourhood erosion; pixels on the image border erode.
inline BinaryMask erode4(const BinaryMask& m) {
    BinaryMask out = m;
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            if (m(x, y) && (x == 0 || !m(x - 1, y) || x + 1 == m.width || !m(x + 1, y) || y == 0 || !m(x, y - 1) ||
                            y + 1 == m.height || !m(x, y + 1)))
                out(x, y) = 0;
    return out;
}

/// |a ∩ b| / |a ∪ b|, 1.0 when both are empty.
inline double mask_iou(const BinaryMask& a, const BinaryMask& b) {
    require_same_dims(a, b, "mask_iou");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool x = a.data[i] != 0, y = b.data[i] != 0;
        inter += x && y;
        uni += x || y;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

} // namespace cora
