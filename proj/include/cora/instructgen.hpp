#pragma once

#include <array>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cora/error.hpp"
#include "cora/grid.hpp"
#include "cora/maskgeo.hpp"
#include "cora/rng.hpp"

namespace cora {

inline constexpr std::size_t kDefaultQueriesPerClass = 7;
inline constexpr std::string_view kSsegToken = "<SSEG>";

/// Lowercase alphanumeric word tokens.
inline std::vector<std::string> word_tokens(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

/// True when every word of `phrase` occurs as a contiguous run of whole words in `text`.
inline bool contains_whole_word(std::string_view text, std::string_view phrase) {
    const auto hay = word_tokens(text);
    const auto needle = word_tokens(phrase);
    if (needle.empty() || needle.size() > hay.size()) return false;
    for (std::size_t i = 0; i + needle.size() <= hay.size(); ++i)
        if (std::equal(needle.begin(), needle.end(), hay.begin() + static_cast<std::ptrdiff_t>(i))) return true;
    return false;
}

inline std::string fill_template(std::string_view tmpl, std::string_view value) {
    std::string out(tmpl);
    const auto pos = out.find("{}");
    if (pos != std::string::npos) out.replace(pos, 2, value);
    return out;
}

inline const std::vector<std::string>& semantic_templates() {
    static const std::vector<std::string> t = {
        "Segment the {} in this image.",
        "Can you segment the {}?",
        "Please segment the {} in this image.",
        "Where is the {}? Please output a segmentation mask.",
        "Highlight the {} in the picture.",
        "Show me the {}.",
    };
    return t;
}

inline const std::vector<std::string>& attribute_templates() {
    static const std::vector<std::string> t = {
        "Can you segment the {}?",
        "Segment the {} in this image.",
        "Please segment the {}.",
        "Which region shows the {}? Please segment it.",
        "Highlight the {} in the picture.",
    };
    return t;
}

inline std::string answer_for(std::string_view class_name) {
    return "Sure, it is the " + std::string(class_name) + ": " + std::string(kSsegToken) + ".";
}

// ---------------------------------------------------------------------------
// Class lexicon

struct ClassEntry {
    std::string name;
    std::vector<std::string> attributes;
    friend bool operator==(const ClassEntry&, const ClassEntry&) = default;
};

class ClassLexicon {
public:
    ClassLexicon() = default;

    /// Validates and builds a lexicon. Throws ConstructionError when a class has
    /// fewer than `min_attributes` phrases, a phrase repeats (within or across
    /// classes), a phrase names its own class, or two classes share a name.
    static ClassLexicon create(std::map<std::uint8_t, ClassEntry> entries,
                               std::size_t min_attributes = kDefaultQueriesPerClass) {
        std::set<std::string> names, phrases;
        for (const auto& [id, e] : entries) {
            if (id == kVoid) fail(ErrorCode::ConstructionError, "class id 255 is reserved for void");
            if (word_tokens(e.name).empty()) fail(ErrorCode::ConstructionError, "class " + std::to_string(id) + " has no name");
            if (!names.insert(e.name).second) fail(ErrorCode::ConstructionError, "duplicate class name '" + e.name + "'");
            if (e.attributes.size() < min_attributes)
                fail(ErrorCode::ConstructionError, "class '" + e.name + "' has " + std::to_string(e.attributes.size()) +
                                                       " attributes, need " + std::to_string(min_attributes));
            for (const auto& a : e.attributes) {
                if (word_tokens(a).empty()) fail(ErrorCode::ConstructionError, "empty attribute for '" + e.name + "'");
                if (!phrases.insert(a).second) fail(ErrorCode::ConstructionError, "attribute phrase '" + a + "' is not unique");
                if (contains_whole_word(a, e.name))
                    fail(ErrorCode::ConstructionError, "attribute '" + a + "' names its class '" + e.name + "'");
            }
            for (const auto& t : attribute_templates())
                if (contains_whole_word(t, e.name))
                    fail(ErrorCode::ConstructionError, "class name '" + e.name + "' collides with an attribute template");
        }
        ClassLexicon lex;
        lex.entries_ = std::move(entries);
        return lex;
    }

    const std::map<std::uint8_t, ClassEntry>& entries() const { return entries_; }
    bool contains(std::uint8_t id) const { return entries_.count(id) != 0; }
    std::size_t size() const { return entries_.size(); }

    const ClassEntry& at(std::uint8_t id) const {
        auto it = entries_.find(id);
        if (it == entries_.end()) fail(ErrorCode::UnknownClass, "class id " + std::to_string(id) + " not in lexicon");
        return it->second;
    }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [id, e] : entries_) j[std::to_string(id)] = {{"name", e.name}, {"attributes", e.attributes}};
        return j;
    }

    static ClassLexicon from_json(const nlohmann::json& j, std::size_t min_attributes = kDefaultQueriesPerClass) {
        if (!j.is_object()) fail(ErrorCode::ParseError, "lexicon must be a JSON object");
        std::map<std::uint8_t, ClassEntry> entries;
        for (const auto& [key, val] : j.items()) {
            int id = -1;
            try {
                id = std::stoi(key);
            } catch (const std::exception&) {
                fail(ErrorCode::ParseError, "lexicon key '" + key + "' is not a class id");
            }
            if (id < 0 || id > 254) fail(ErrorCode::ParseError, "lexicon key '" + key + "' out of range");
            try {
                entries[static_cast<std::uint8_t>(id)] = {val.at("name").get<std::string>(),
                                                          val.at("attributes").get<std::vector<std::string>>()};
            } catch (const nlohmann::json::exception& e) {
                fail(ErrorCode::ParseError, "lexicon entry '" + key + "': " + e.what());
            }
        }
        return create(std::move(entries), min_attributes);
    }

    static ClassLexicon load(const std::filesystem::path& path, std::size_t min_attributes = kDefaultQueriesPerClass) {
        std::ifstream in(path);
        if (!in) fail(ErrorCode::IoError, "cannot open lexicon " + path.string());
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorCode::ParseError, "lexicon " + path.string() + ": " + e.what());
        }
        return from_json(j, min_attributes);
    }

    void save(const std::filesystem::path& path) const {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        std::ofstream out(path);
        out << to_json().dump(2) << '\n';
    }

private:
    std::map<std::uint8_t, ClassEntry> entries_;
};

namespace shape_class {
inline constexpr std::uint8_t Circle = 0;
inline constexpr std::uint8_t Square = 1;
inline constexpr std::uint8_t Triangle = 2;
inline constexpr std::uint8_t Bar = 3;
} // namespace shape_class

inline const std::map<std::uint8_t, ClassEntry>& shapes_world_classes() {
    static const std::map<std::uint8_t, ClassEntry> classes = {
        {shape_class::Circle,
         {"circle",
          {"round object with no corners", "perfectly curved disc", "coin shaped region", "wheel like form",
           "object that looks like a full moon", "smooth blob bounded by a single curve", "flat orb"}}},
        {shape_class::Square,
         {"square",
          {"four sided shape with equal sides", "box with right angles", "tile shaped block", "chessboard cell patch",
           "equal sided quadrilateral", "blocky regular shape", "object shaped like a dice face"}}},
        {shape_class::Triangle,
         {"triangle",
          {"three cornered shape", "pointed shape with a flat base", "shape with exactly three edges",
           "wedge shaped object", "arrowhead like form", "pyramid outline", "object that narrows to a single apex"}}},
        {shape_class::Bar,
         {"bar",
          {"long thin strip", "elongated rectangle", "stick shaped object", "narrow stripe", "plank like piece",
           "shape much longer than it is wide", "slender rod"}}},
    };
    return classes;
}

/// Lexicon restricted to the given shapes-world class ids.
inline ClassLexicon shapes_world_lexicon(const std::vector<std::uint8_t>& class_ids = {0, 1, 2, 3}) {
    std::map<std::uint8_t, ClassEntry> entries;
    for (auto id : class_ids) {
        auto it = shapes_world_classes().find(id);
        if (it == shapes_world_classes().end()) fail(ErrorCode::UnknownClass, "no shapes-world class " + std::to_string(id));
        entries.insert(*it);
    }
    return ClassLexicon::create(std::move(entries));
}

// ---------------------------------------------------------------------------
// Instructions

enum class InstructionKind { Semantic, Attribute, Conditional };

inline std::string_view to_string(InstructionKind k) {
    switch (k) {
    case InstructionKind::Semantic: return "semantic";
    case InstructionKind::Attribute: return "attribute";
    case InstructionKind::Conditional: return "conditional";
    }
    return "?";
}

inline InstructionKind kind_from_string(std::string_view s) {
    for (auto k : {InstructionKind::Semantic, InstructionKind::Attribute, InstructionKind::Conditional})
        if (to_string(k) == s) return k;
    fail(ErrorCode::ParseError, "unknown instruction kind '" + std::string(s) + "'");
}

/// Normalized (x_min, y_min, x_max, y_max) in [0,1], measured on pixel edges.
using NormBBox = std::array<double, 4>;

inline NormBBox normalize_bbox(const BBox& b, int width, int height) {
    return {static_cast<double>(b.x_min) / width, static_cast<double>(b.y_min) / height,
            static_cast<double>(b.x_max + 1) / width, static_cast<double>(b.y_max + 1) / height};
}

struct Instruction {
    std::string id;
    std::string image_ref;
    InstructionKind kind = InstructionKind::Semantic;
    std::uint8_t target_class = 0;
    std::string target_mask_ref;
    std::string query_text;
    std::string answer_text;
    std::optional<std::uint8_t> anchor_class;
    std::optional<std::string> anchor_mask_ref;
    std::optional<NormBBox> anchor_bbox;
    std::optional<SpatialRelation> relation;

    friend bool operator==(const Instruction&, const Instruction&) = default;
};

inline std::size_t count_occurrences(std::string_view text, std::string_view needle) {
    std::size_t n = 0;
    for (auto pos = text.find(needle); pos != std::string_view::npos; pos = text.find(needle, pos + needle.size())) ++n;
    return n;
}

/// Returns an empty string when the record is well-formed, else the violated invariant.
inline std::string instruction_violation(const Instruction& in) {
    const bool conditional = in.kind == InstructionKind::Conditional;
    const int anchors = in.anchor_class.has_value() + in.anchor_mask_ref.has_value() + in.anchor_bbox.has_value() +
                        in.relation.has_value();
    if (conditional && anchors != 4) return "conditional instruction lacks anchor fields";
    if (!conditional && anchors != 0) return "non-conditional instruction carries anchor fields";
    if (count_occurrences(in.answer_text, kSsegToken) != 1) return "answer_text must contain exactly one <SSEG>";
    if (in.anchor_bbox)
        for (double v : *in.anchor_bbox)
            if (!(v >= 0.0 && v <= 1.0)) return "anchor_bbox outside [0,1]";
    return {};
}

inline nlohmann::ordered_json to_json(const Instruction& in) {
    nlohmann::ordered_json j;
    j["id"] = in.id;
    j["image_ref"] = in.image_ref;
    j["kind"] = to_string(in.kind);
    j["target_class"] = in.target_class;
    j["target_mask_ref"] = in.target_mask_ref;
    j["query_text"] = in.query_text;
    j["answer_text"] = in.answer_text;
    j["anchor_class"] = in.anchor_class ? nlohmann::ordered_json(*in.anchor_class) : nlohmann::ordered_json(nullptr);
    j["anchor_mask_ref"] = in.anchor_mask_ref ? nlohmann::ordered_json(*in.anchor_mask_ref) : nlohmann::ordered_json(nullptr);
    j["anchor_bbox"] = in.anchor_bbox ? nlohmann::ordered_json(*in.anchor_bbox) : nlohmann::ordered_json(nullptr);
    j["relation"] = in.relation ? nlohmann::ordered_json(to_string(*in.relation)) : nlohmann::ordered_json(nullptr);
    return j;
}

inline Instruction instruction_from_json(const nlohmann::json& j) {
    Instruction in;
    in.id = j.at("id").get<std::string>();
    in.image_ref = j.at("image_ref").get<std::string>();
    in.kind = kind_from_string(j.at("kind").get<std::string>());
    in.target_class = j.at("target_class").get<std::uint8_t>();
    in.target_mask_ref = j.at("target_mask_ref").get<std::string>();
    in.query_text = j.at("query_text").get<std::string>();
    in.answer_text = j.at("answer_text").get<std::string>();
    auto opt = [&](const char* key) -> const nlohmann::json* {
        auto it = j.find(key);
        return (it == j.end() || it->is_null()) ? nullptr : &*it;
    };
    if (auto* v = opt("anchor_class")) in.anchor_class = v->get<std::uint8_t>();
    if (auto* v = opt("anchor_mask_ref")) in.anchor_mask_ref = v->get<std::string>();
    if (auto* v = opt("anchor_bbox")) in.anchor_bbox = v->get<NormBBox>();
    if (auto* v = opt("relation")) in.relation = relation_from_string(v->get<std::string>());
    return in;
}

inline void write_instructions(const std::vector<Instruction>& instrs, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
    for (const auto& in : instrs) out << to_json(in).dump() << '\n';
}

/// Throws ParseError carrying the 1-based line number of the first bad record.
inline std::vector<Instruction> read_instructions(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
    std::vector<Instruction> out;
    std::string line;
    long lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto rec = instruction_from_json(nlohmann::json::parse(line));
            if (auto why = instruction_violation(rec); !why.empty()) throw Error(ErrorCode::ParseError, why, lineno);
            out.push_back(std::move(rec));
        } catch (const Error& e) {
            throw Error(ErrorCode::ParseError, path.string() + ":" + std::to_string(lineno) + ": " + e.what(), lineno);
        } catch (const std::exception& e) {
            throw Error(ErrorCode::ParseError, path.string() + ":" + std::to_string(lineno) + ": " + e.what(), lineno);
        }
    }
    return out;
}

/// Generated instructions together with the masks their refs point at.
struct InstructionSet {
    std::vector<Instruction> instructions;
    std::map<std::string, BinaryMask> masks;

    void append(InstructionSet other) {
        for (auto& i : other.instructions) instructions.push_back(std::move(i));
        for (auto& [k, v] : other.masks) masks.insert_or_assign(k, std::move(v));
    }

    /// Writes `<dir>/<jsonl_name>` and every mask under `dir`.
    void save(const std::filesystem::path& dir, const std::string& jsonl_name) const {
        write_instructions(instructions, dir / jsonl_name);
        for (const auto& [ref, mask] : masks) pnm::write_mask(dir / ref, mask);
    }
};

struct GenOptions {
    std::size_t min_area = kDefaultMinArea;
    double next_to_dist = kDefaultNextToDist;
};

namespace detail {
inline std::string stem_of(const std::string& image_ref) {
    if (image_ref.empty()) return "image";
    return std::filesystem::path(image_ref).stem().string();
}

inline std::vector<std::uint8_t> present_classes(const LabelMap& map, const ClassLexicon& lexicon) {
    std::set<std::uint8_t> seen;
    for (auto v : map.data)
        if (v != kVoid) seen.insert(v);
    for (auto c : seen) lexicon.at(c);
    return {seen.begin(), seen.end()};
}

inline std::string class_mask_ref(const std::string& stem, std::uint8_t cls) {
    return "masks/" + stem + "/class_" + std::to_string(cls) + ".pgm";
}

enum Stream : std::uint64_t { SemanticStream = 1, AttributeStream = 2, ConditionalStream = 3, QueryDbStream = 4 };
} // namespace detail

/// One instruction per class present; the query fills a seeded template with the class name.
inline InstructionSet gen_semantic(const LabelMap& map, const ClassLexicon& lexicon, std::uint64_t rng_seed,
                                   const std::string& image_ref = {}) {
    InstructionSet out;
    const auto stem = detail::stem_of(image_ref);
    for (auto cls : detail::present_classes(map, lexicon)) {
        Rng rng(derive_seed(rng_seed, {detail::SemanticStream, cls}));
        const auto& name = lexicon.at(cls).name;
        const auto& tmpl = semantic_templates()[rng.below(semantic_templates().size())];
        Instruction in;
        in.id = stem + ":semantic:" + std::to_string(cls);
        in.image_ref = image_ref;
        in.kind = InstructionKind::Semantic;
        in.target_class = cls;
        in.target_mask_ref = detail::class_mask_ref(stem, cls);
        in.query_text = fill_template(tmpl, name);
        in.answer_text = answer_for(name);
        out.masks.insert_or_assign(in.target_mask_ref, class_mask(map, cls));
        out.instructions.push_back(std::move(in));
    }
    return out;
}

/// One instruction per class present; the query names the class only through a seeded attribute phrase.
inline InstructionSet gen_attribute(const LabelMap& map, const ClassLexicon& lexicon, std::uint64_t rng_seed,
                                    const std::string& image_ref = {}) {
    InstructionSet out;
    const auto stem = detail::stem_of(image_ref);
    for (auto cls : detail::present_classes(map, lexicon)) {
        Rng rng(derive_seed(rng_seed, {detail::AttributeStream, cls}));
        const auto& entry = lexicon.at(cls);
        const auto& attr = entry.attributes[rng.below(entry.attributes.size())];
        const auto& tmpl = attribute_templates()[rng.below(attribute_templates().size())];
        Instruction in;
        in.id = stem + ":attribute:" + std::to_string(cls);
        in.image_ref = image_ref;
        in.kind = InstructionKind::Attribute;
        in.target_class = cls;
        in.target_mask_ref = detail::class_mask_ref(stem, cls);
        in.query_text = fill_template(tmpl, attr);
        in.answer_text = answer_for(entry.name);
        out.masks.insert_or_assign(in.target_mask_ref, class_mask(map, cls));
        out.instructions.push_back(std::move(in));
    }
    return out;
}

inline std::string conditional_query(std::string_view target_desc, SpatialRelation rel, std::string_view anchor_desc) {
    return "Can you segment the " + std::string(target_desc) + " that is " + std::string(relation_phrase(rel)) +
           " the " + std::string(anchor_desc) + "?";
}

/// Up to `pairs` instructions over distinct (target, anchor) instance pairs drawn
/// without replacement. Pairs whose geometry is degenerate are skipped.
inline InstructionSet gen_conditional(const LabelMap& map, const ClassLexicon& lexicon, std::uint64_t rng_seed,
                                      std::size_t pairs, const std::string& image_ref = {}, const GenOptions& opts = {}) {
    if (pairs < 1) fail(ErrorCode::ConfigError, "pairs must be >= 1");
    detail::present_classes(map, lexicon);
    const auto instances = extract_instances(map, opts.min_area);
    if (instances.size() < 2)
        fail(ErrorCode::InsufficientObjects, "need >= 2 instances, found " + std::to_string(instances.size()));

    std::vector<std::pair<std::size_t, std::size_t>> candidates;
    for (std::size_t t = 0; t < instances.size(); ++t)
        for (std::size_t a = 0; a < instances.size(); ++a)
            if (t != a) candidates.emplace_back(t, a);
    Rng rng(derive_seed(rng_seed, {detail::ConditionalStream}));
    rng.shuffle(candidates);

    InstructionSet out;
    const auto stem = detail::stem_of(image_ref);
    auto inst_ref = [&](std::size_t i) { return "masks/" + stem + "/inst_" + std::to_string(i) + ".pgm"; };
    for (const auto& [t, a] : candidates) {
        if (out.instructions.size() >= pairs) break;
        const auto& target = instances[t];
        const auto& anchor = instances[a];
        SpatialRelation rel;
        try {
            rel = relation_of(target, anchor, opts.next_to_dist);
        } catch (const Error& e) {
            if (e.code() == ErrorCode::DegenerateGeometry) continue;
            throw;
        }
        const auto& tname = lexicon.at(target.class_id).name;
        const auto& aname = lexicon.at(anchor.class_id).name;
        Instruction in;
        in.id = stem + ":conditional:" + std::to_string(t) + "-" + std::to_string(a);
        in.image_ref = image_ref;
        in.kind = InstructionKind::Conditional;
        in.target_class = target.class_id;
        in.target_mask_ref = inst_ref(t);
        in.query_text = conditional_query(tname, rel, aname);
        in.answer_text = answer_for(tname);
        in.anchor_class = anchor.class_id;
        in.anchor_mask_ref = inst_ref(a);
        in.anchor_bbox = normalize_bbox(anchor.bbox, map.width, map.height);
        in.relation = rel;
        out.masks.insert_or_assign(inst_ref(t), target.mask);
        out.masks.insert_or_assign(inst_ref(a), anchor.mask);
        out.instructions.push_back(std::move(in));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Per-class query database for unlabeled images

struct QueryDatabase {
    std::size_t K = 0;
    std::map<std::uint8_t, std::vector<std::string>> queries;

    const std::vector<std::string>& for_class(std::uint8_t cls) const {
        auto it = queries.find(cls);
        if (it == queries.end() || it->second.size() != K)
            fail(ErrorCode::MissingClassQueries, "no " + std::to_string(K) + " queries for class " + std::to_string(cls));
        return it->second;
    }

    nlohmann::json to_json() const {
        nlohmann::json q = nlohmann::json::object();
        for (const auto& [cls, v] : queries) q[std::to_string(cls)] = v;
        return {{"K", K}, {"queries", q}};
    }

    static QueryDatabase from_json(const nlohmann::json& j) {
        QueryDatabase db;
        try {
            db.K = j.at("K").get<std::size_t>();
            for (const auto& [key, val] : j.at("queries").items())
                db.queries[static_cast<std::uint8_t>(std::stoi(key))] = val.get<std::vector<std::string>>();
        } catch (const std::exception& e) {
            fail(ErrorCode::ParseError, std::string("query database: ") + e.what());
        }
        for (const auto& [cls, v] : db.queries)
            if (v.size() != db.K || std::set<std::string>(v.begin(), v.end()).size() != v.size())
                fail(ErrorCode::ParseError, "query database: class " + std::to_string(cls) + " needs K distinct queries");
        return db;
    }

    void save(const std::filesystem::path& path) const {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        std::ofstream out(path);
        out << to_json().dump(2) << '\n';
    }

    static QueryDatabase load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
        try {
            return from_json(nlohmann::json::parse(in));
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorCode::ParseError, path.string() + ": " + e.what());
        }
    }
};

/// K distinct queries per class from the cross product templates x attribute phrases,
/// selected by a seeded shuffle.
inline QueryDatabase build_query_db(const ClassLexicon& lexicon, std::size_t K, std::uint64_t rng_seed,
                                    const std::vector<std::string>& templates = attribute_templates()) {
    if (K < 2) fail(ErrorCode::ConfigError, "K must be >= 2");
    QueryDatabase db;
    db.K = K;
    for (const auto& [cls, entry] : lexicon.entries()) {
        std::vector<std::string> pool;
        std::set<std::string> seen;
        for (const auto& attr : entry.attributes)
            for (const auto& t : templates)
                if (auto q = fill_template(t, attr); seen.insert(q).second) pool.push_back(std::move(q));
        if (pool.size() < K)
            fail(ErrorCode::InsufficientAttributes, "class '" + entry.name + "' yields " + std::to_string(pool.size()) +
                                                        " distinct queries, need " + std::to_string(K));
        Rng rng(derive_seed(rng_seed, {detail::QueryDbStream, cls}));
        rng.shuffle(pool);
        pool.resize(K);
        db.queries[cls] = std::move(pool);
    }
    return db;
}

} // namespace cora
