#include <catch_amalgamated.hpp>

#include <set>

#include "support.hpp"

using namespace cora;
using Catch::Approx;

namespace {

LabelMap filled(int w, int h, std::uint8_t v) { return LabelMap(w, h, v); }

/// Components by repeated min-label relaxation; slow on purpose, shares no code with the library.
std::vector<std::set<int>> oracle_components(const LabelMap& m, std::size_t min_area) {
    const int w = m.width, h = m.height;
    std::vector<int> lab(m.size());
    for (int i = 0; i < static_cast<int>(m.size()); ++i) lab[i] = m.data[i] == kVoid ? -1 : i;
    bool changed = true;
    while (changed) {
        changed = false;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const int i = y * w + x;
                if (lab[i] < 0) continue;
                const int nx[4] = {x - 1, x + 1, x, x};
                const int ny[4] = {y, y, y - 1, y + 1};
                for (int k = 0; k < 4; ++k) {
                    if (nx[k] < 0 || ny[k] < 0 || nx[k] >= w || ny[k] >= h) continue;
                    const int j = ny[k] * w + nx[k];
                    if (m.data[j] == m.data[i] && lab[j] < lab[i]) {
                        lab[i] = lab[j];
                        changed = true;
                    }
                }
            }
    }
    std::map<int, std::set<int>> groups;
    for (int i = 0; i < static_cast<int>(m.size()); ++i)
        if (lab[i] >= 0) groups[lab[i]].insert(i);
    std::vector<std::set<int>> out;
    for (auto& [k, g] : groups)
        if (g.size() >= min_area) out.push_back(g);
    return out;
}

std::set<int> pixels_of(const BinaryMask& m) {
    std::set<int> s;
    for (int i = 0; i < static_cast<int>(m.size()); ++i)
        if (m.data[i]) s.insert(i);
    return s;
}

LabelMap random_blobs(int w, int h, std::uint64_t seed) {
    Rng rng(seed);
    LabelMap m(w, h, kVoid);
    const int n = rng.range(1, 6);
    for (int k = 0; k < n; ++k) {
        const auto cls = static_cast<std::uint8_t>(rng.below(3));
        const int bw = rng.range(1, 5), bh = rng.range(1, 5);
        const int x0 = rng.range(0, w - bw), y0 = rng.range(0, h - bh);
        for (int y = y0; y < y0 + bh; ++y)
            for (int x = x0; x < x0 + bw; ++x) m(x, y) = cls;
    }
    return m;
}

ObjectInstance box_instance(int w, int h, int x0, int y0, int x1, int y1, std::uint8_t cls = 0) {
    BinaryMask m(w, h);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) m(x, y) = 1;
    return instance_from_mask(std::move(m), cls);
}

SpatialRelation oracle_relation(const ObjectInstance& t, const ObjectInstance& a, double next_to) {
    // gap in empty rows / columns between inclusive boxes
    int gx = 0, gy = 0;
    if (t.bbox.x_min > a.bbox.x_max) gx = t.bbox.x_min - a.bbox.x_max - 1;
    else if (a.bbox.x_min > t.bbox.x_max) gx = a.bbox.x_min - t.bbox.x_max - 1;
    if (t.bbox.y_min > a.bbox.y_max) gy = t.bbox.y_min - a.bbox.y_max - 1;
    else if (a.bbox.y_min > t.bbox.y_max) gy = a.bbox.y_min - t.bbox.y_max - 1;
    if (std::sqrt(double(gx * gx + gy * gy)) < next_to) return SpatialRelation::NextTo;
    const double dx = t.centroid.x - a.centroid.x, dy = t.centroid.y - a.centroid.y;
    if (dx * dx >= dy * dy) return dx > 0 ? SpatialRelation::RightOf : SpatialRelation::LeftOf;
    return dy > 0 ? SpatialRelation::Below : SpatialRelation::Above;
}

} // namespace

TEST_CASE("extract_instances on trivial maps", "[maskgeo]") {
    CHECK(extract_instances(filled(4, 4, kVoid)).empty());

    const auto all = extract_instances(filled(4, 4, 1));
    REQUIRE(all.size() == 1);
    CHECK(all[0].class_id == 1);
    CHECK(all[0].area == 16);
    CHECK(all[0].centroid.x == 1.5);
    CHECK(all[0].centroid.y == 1.5);
    CHECK(all[0].bbox == BBox{0, 0, 3, 3});
}

TEST_CASE("two corner blocks give two instances", "[maskgeo]") {
    LabelMap m(6, 6, kVoid);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x) {
            m(x, y) = 2;
            m(x + 4, y + 4) = 2;
        }
    const auto inst = extract_instances(m);
    REQUIRE(inst.size() == 2);
    CHECK(inst[0].area == 4);
    CHECK(inst[1].area == 4);
    CHECK(inst[0].bbox == BBox{0, 0, 1, 1});
    CHECK(inst[1].bbox == BBox{4, 4, 5, 5});
}

TEST_CASE("diagonal neighbours are separate under 4-connectivity", "[maskgeo]") {
    LabelMap m(2, 2, kVoid);
    m(0, 0) = 1;
    m(1, 1) = 1;
    CHECK(extract_instances(m, 1).size() == 2);
    CHECK(extract_instances(m, 2).empty());
    CHECK_THROWS_MATCHES(extract_instances(m, 0), Error,
                         Catch::Matchers::Predicate<Error>([](const Error& e) { return e.code() == ErrorCode::ConfigError; }));
}

TEST_CASE("extract_instances agrees with the relaxation oracle", "[maskgeo]") {
    for (std::uint64_t seed = 0; seed < 60; ++seed) {
        const auto m = random_blobs(12, 10, seed);
        const std::size_t min_area = 1 + seed % 4;
        const auto got = extract_instances(m, min_area);
        auto want = oracle_components(m, min_area);

        std::set<std::set<int>> got_sets, want_sets(want.begin(), want.end());
        for (const auto& inst : got) {
            got_sets.insert(pixels_of(inst.mask));
            // instance invariants
            CHECK(inst.area == count_set(inst.mask));
            CHECK(inst.centroid.x >= inst.bbox.x_min);
            CHECK(inst.centroid.x <= inst.bbox.x_max);
            CHECK(inst.centroid.y >= inst.bbox.y_min);
            CHECK(inst.centroid.y <= inst.bbox.y_max);
            for (int i : pixels_of(inst.mask)) CHECK(m.data[i] == inst.class_id);
        }
        CHECK(got_sets == want_sets);
        for (std::size_t i = 1; i < got.size(); ++i) {
            const auto& a = got[i - 1];
            const auto& b = got[i];
            CHECK(std::tie(a.class_id, a.bbox.y_min, a.bbox.x_min) <= std::tie(b.class_id, b.bbox.y_min, b.bbox.x_min));
        }
        // deterministic replay
        const auto again = extract_instances(m, min_area);
        REQUIRE(again.size() == got.size());
        for (std::size_t i = 0; i < got.size(); ++i) CHECK(again[i].mask == got[i].mask);
    }
}

TEST_CASE("relation_of hand cases", "[maskgeo]") {
    // centroids (20,10) vs (10,10), boxes far apart
    const auto anchor = box_instance(32, 32, 9, 9, 11, 11);
    const auto right = box_instance(32, 32, 19, 9, 21, 11);
    CHECK(relation_of(right, anchor) == SpatialRelation::RightOf);
    CHECK(relation_of(anchor, right) == SpatialRelation::LeftOf);

    // (10,2) vs (10,10): smaller y is above
    const auto up = box_instance(32, 32, 9, 1, 11, 3);
    CHECK(relation_of(up, anchor) == SpatialRelation::Above);
    CHECK(relation_of(anchor, up) == SpatialRelation::Below);

    // touching boxes
    const auto touching = box_instance(32, 32, 12, 9, 14, 11);
    CHECK(relation_of(touching, anchor) == SpatialRelation::NextTo);

    CHECK_THROWS_AS(relation_of(anchor, anchor), Error);
}

TEST_CASE("relation_of matches an independent rule on random pairs", "[maskgeo]") {
    Rng rng(4242);
    int checked = 0, flips = 0;
    for (int trial = 0; trial < 100; ++trial) {
        auto make = [&] {
            const int w = rng.range(1, 6), h = rng.range(1, 6);
            const int x = rng.range(0, 32 - w), y = rng.range(0, 32 - h);
            return box_instance(32, 32, x, y, x + w - 1, y + h - 1, static_cast<std::uint8_t>(rng.below(4)));
        };
        const auto t = make();
        const auto a = make();
        const double nt = rng.uniform(0.0, 5.0);
        if (t.centroid == a.centroid && bboxes_overlap(t.bbox, a.bbox)) continue;
        const auto r = relation_of(t, a, nt);
        CHECK(r == oracle_relation(t, a, nt));
        ++checked;
        // anti-symmetry away from NextTo
        if (r != SpatialRelation::NextTo && std::abs(t.centroid.x - a.centroid.x) != std::abs(t.centroid.y - a.centroid.y)) {
            const auto back = relation_of(a, t, nt);
            const auto expected = r == SpatialRelation::LeftOf    ? SpatialRelation::RightOf
                                  : r == SpatialRelation::RightOf ? SpatialRelation::LeftOf
                                  : r == SpatialRelation::Above   ? SpatialRelation::Below
                                                                  : SpatialRelation::Above;
            CHECK(back == expected);
            ++flips;
        }
    }
    CHECK(checked >= 95);
    CHECK(flips > 10);
}

TEST_CASE("mask_iou", "[maskgeo]") {
    BinaryMask a(4, 4), b(4, 4);
    a(0, 0) = a(1, 0) = a(0, 1) = a(1, 1) = 1;
    CHECK(mask_iou(a, a) == 1.0);

    BinaryMask far(4, 4);
    far(3, 3) = 1;
    CHECK(mask_iou(a, far) == 0.0);

    // same block shifted right by one: overlap 2, union 6
    b(1, 0) = b(2, 0) = b(1, 1) = b(2, 1) = 1;
    CHECK(mask_iou(a, b) == Approx(1.0 / 3.0).epsilon(1e-15));

    CHECK(mask_iou(BinaryMask(3, 3), BinaryMask(3, 3)) == 1.0);
    CHECK_THROWS_AS(mask_iou(BinaryMask(3, 3), BinaryMask(3, 4)), Error);
}

TEST_CASE("dilate and erode are 4-neighbourhood steps", "[maskgeo]") {
    BinaryMask m(5, 5);
    m(2, 2) = 1;
    const auto d = dilate4(m);
    CHECK(count_set(d) == 5);
    CHECK(d(2, 1) == 1);
    CHECK(d(1, 1) == 0);
    CHECK(erode4(d) == m);
}
