// cora: dataset generation, instruction synthesis, pseudo-label weighting,
// three-stage training, evaluation and checkpoint inspection.
//
// Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 non-finite numerics.
// Errors go to stderr as one JSON line {"code": ..., "message": ...}.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cora/cora.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// --config reader: a JSON object whose keys are flag names (dashes or underscores);
/// nested objects address subcommands, e.g. {"seed": 3, "train": {"batch-size": 4}}.
class JsonConfig : public CLI::Config {
public:
    std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}"; }

    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        json j;
        try {
            input >> j;
        } catch (const json::exception& e) {
            throw CLI::ConfigError(std::string("config is not valid JSON: ") + e.what());
        }
        if (!j.is_object()) throw CLI::ConfigError("config must be a JSON object");
        std::vector<CLI::ConfigItem> items;
        collect(j, {}, items);
        return items;
    }

private:
    static std::string kebab(std::string s) {
        std::replace(s.begin(), s.end(), '_', '-');
        return s;
    }

    static std::string scalar(const json& v) {
        if (v.is_string()) return v.get<std::string>();
        if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
        return v.dump();
    }

    static void collect(const json& obj, const std::vector<std::string>& parents, std::vector<CLI::ConfigItem>& out) {
        for (const auto& [key, v] : obj.items()) {
            if (v.is_object()) {
                auto p = parents;
                p.push_back(key);
                collect(v, p, out);
                continue;
            }
            CLI::ConfigItem item;
            item.parents = parents;
            item.name = kebab(key);
            if (v.is_array())
                for (const auto& e : v) item.inputs.push_back(scalar(e));
            else
                item.inputs.push_back(scalar(v));
            out.push_back(std::move(item));
        }
    }
};

int exit_code_for(cora::ErrorCode c) {
    using cora::ErrorCode;
    switch (c) {
    case ErrorCode::ConfigError: return 1;
    case ErrorCode::NonFinite: return 3;
    default: return 2;
    }
}

void report(std::string_view code, const std::string& message) {
    std::cerr << json{{"code", code}, {"message", message}}.dump() << std::endl;
}

void write_json(const fs::path& path, const json& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) cora::fail(cora::ErrorCode::IoError, "cannot write " + path.string());
    out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) cora::fail(cora::ErrorCode::IoError, "cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        cora::fail(cora::ErrorCode::ParseError, path.string() + ": " + e.what());
    }
}

struct Globals {
    std::uint64_t seed = 0;
    int threads = 1;
};

std::vector<std::size_t> indices_of(const cora::Dataset& ds, const std::vector<std::string>& ids) {
    std::map<std::string, std::size_t> by_id;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) by_id[ds.samples[i].id] = i;
    std::vector<std::size_t> out;
    for (const auto& id : ids) {
        auto it = by_id.find(id);
        if (it == by_id.end()) cora::fail(cora::ErrorCode::DataError, "split references unknown image " + id);
        out.push_back(it->second);
    }
    return out;
}

std::vector<std::size_t> all_indices(const cora::Dataset& ds) {
    std::vector<std::size_t> out(ds.samples.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
    return out;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
    std::string out;
    int n = 100;
    int height = 32;
    int width = 32;
    std::vector<int> classes = {0, 1, 2, 3};
    int min_objects = 2;
    int max_objects = 4;
    int min_size = 7;
    int max_size = 12;
    double color_jitter = 0.15;
    double pixel_noise = 0.06;
    int color_modes = 1;
    double mode_skew = 1.0;
    int patch = 4;
};

void add_gen_data(CLI::App& app, GenDataArgs& a) {
    app.add_option("--out", a.out, "Output dataset directory")->required();
    app.add_option("--n", a.n, "Number of images");
    app.add_option("--height", a.height, "Image height");
    app.add_option("--width", a.width, "Image width");
    app.add_option("--classes", a.classes, "Shape classes (0 circle, 1 square, 2 triangle, 3 bar)");
    app.add_option("--min-objects", a.min_objects, "Fewest objects per image");
    app.add_option("--max-objects", a.max_objects, "Most objects per image");
    app.add_option("--min-size", a.min_size, "Smallest shape size in px");
    app.add_option("--max-size", a.max_size, "Largest shape size in px");
    app.add_option("--color-jitter", a.color_jitter, "Per-object colour offset range");
    app.add_option("--pixel-noise", a.pixel_noise, "Per-pixel gaussian noise sigma");
    app.add_option("--color-modes", a.color_modes, "Colour clusters per class (1 = fixed class colours)");
    app.add_option("--mode-skew", a.mode_skew, "Zipf exponent over a class's colour modes");
    app.add_option("--patch", a.patch, "Model patch size the image dims must divide");
}

int run_gen_data(const GenDataArgs& a, const Globals& g) {
    cora::ShapesWorldConfig cfg;
    cfg.n_images = a.n;
    cfg.height = a.height;
    cfg.width = a.width;
    cfg.classes.clear();
    for (int c : a.classes) {
        if (c < 0 || c > 254) cora::fail(cora::ErrorCode::ConfigError, "class id out of range");
        cfg.classes.push_back(static_cast<std::uint8_t>(c));
    }
    cfg.min_objects = a.min_objects;
    cfg.max_objects = a.max_objects;
    cfg.min_size = a.min_size;
    cfg.max_size = a.max_size;
    cfg.color_jitter = a.color_jitter;
    cfg.pixel_noise = a.pixel_noise;
    cfg.color_modes = a.color_modes;
    cfg.mode_skew = a.mode_skew;
    cfg.patch_multiple = a.patch;
    cfg.seed = g.seed;
    const auto ds = cora::generate_shapes_world(cfg);
    cora::write_dataset(a.out, ds, cora::to_json(cfg));
    std::cout << "wrote " << ds.size() << " images to " << a.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct GenInstrArgs {
    std::string data;
    std::string out;
    std::string split_file;
    std::size_t pairs = 2;
    std::size_t min_area = cora::kDefaultMinArea;
    double next_to_dist = cora::kDefaultNextToDist;
};

void add_gen_instructions(CLI::App& app, GenInstrArgs& a) {
    app.add_option("--data", a.data, "Dataset directory")->required();
    app.add_option("--out", a.out, "Output directory for JSONL files and masks")->required();
    app.add_option("--split-file", a.split_file, "Split manifest; only its labeled images are used");
    app.add_option("--pairs", a.pairs, "Conditional instructions per image");
    app.add_option("--min-area", a.min_area, "Smallest instance area in px");
    app.add_option("--next-to-dist", a.next_to_dist, "Box gap below which objects are 'next to' each other");
}

int run_gen_instructions(const GenInstrArgs& a, const Globals& g) {
    const auto ds = cora::load_dataset(a.data);
    const auto idx = a.split_file.empty()
                         ? all_indices(ds)
                         : indices_of(ds, cora::SplitManifest::from_json(read_json(a.split_file)).labeled);
    const auto b = cora::generate_instructions(ds, idx, g.seed, a.pairs, {a.min_area, a.next_to_dist});
    b.semantic.save(a.out, "semantic.jsonl");
    b.attribute.save(a.out, "attribute.jsonl");
    b.conditional.save(a.out, "conditional.jsonl");
    std::cout << b.semantic.instructions.size() << " semantic, " << b.attribute.instructions.size() << " attribute, "
              << b.conditional.instructions.size() << " conditional instructions in " << a.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct QueryDbArgs {
    std::string lexicon;
    std::string out;
    std::size_t k = cora::kDefaultQueriesPerClass;
};

void add_build_querydb(CLI::App& app, QueryDbArgs& a) {
    app.add_option("--lexicon", a.lexicon, "Class lexicon JSON")->required();
    app.add_option("--out", a.out, "Output query database JSON")->required();
    app.add_option("--k", a.k, "Queries per class");
}

int run_build_querydb(const QueryDbArgs& a, const Globals& g) {
    const auto lex = cora::ClassLexicon::load(a.lexicon, 0);
    const auto db = cora::build_query_db(lex, a.k, g.seed);
    db.save(a.out);
    std::cout << "query database with K=" << db.K << " for " << db.queries.size() << " classes written to " << a.out
              << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct PseudoArgs {
    std::string data;
    std::string out;
    std::string split_file;
    double flip_rate = 0.05;
    int boundary = 2;
    double dilate_prob = 0.5;
};

void add_pseudo_label(CLI::App& app, PseudoArgs& a) {
    app.add_option("--data", a.data, "Dataset directory")->required();
    app.add_option("--out", a.out, "Output directory (labels/NNNNNN.pgm)")->required();
    app.add_option("--split-file", a.split_file, "Split manifest; only its unlabeled images are labeled");
    app.add_option("--flip-rate", a.flip_rate, "Per-object probability of a wrong class");
    app.add_option("--boundary", a.boundary, "Largest per-object erosion/dilation radius in px");
    app.add_option("--dilate-prob", a.dilate_prob, "Chance a perturbed object grows rather than shrinks");
}

int run_pseudo_label(const PseudoArgs& a, const Globals& g) {
    const auto ds = cora::load_dataset(a.data);
    const auto idx = a.split_file.empty()
                         ? all_indices(ds)
                         : indices_of(ds, cora::SplitManifest::from_json(read_json(a.split_file)).unlabeled);
    cora::PseudoNoise noise{a.flip_rate, a.boundary, 0, a.dilate_prob, {}};
    for (const auto& [cls, e] : ds.lexicon.entries()) noise.classes.push_back(cls);
    json ids = json::array();
    for (auto i : idx) {
        noise.seed = cora::derive_seed(g.seed, {0x95E0, i});
        const auto& s = ds.samples[i];
        cora::pnm::write_label_map(fs::path(a.out) / cora::label_rel_path(s.id),
                                   cora::noisy_oracle_pseudo_labeler(s.labels, noise));
        ids.push_back(s.id);
    }
    write_json(fs::path(a.out) / "pseudo.json",
               {{"labeler", "noisy-oracle"},
                {"flip_rate", a.flip_rate},
                {"boundary", a.boundary},
                {"dilate_prob", a.dilate_prob},
                {"seed", g.seed},
                {"images", ids}});
    std::cout << "pseudo-labeled " << idx.size() << " images into " << a.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct FilterArgs {
    std::string stack;
    std::string out;
    std::string mode = "inverse_exp";
    double v0 = cora::kDefaultV0;
};

void add_filter_weights(CLI::App& app, FilterArgs& a) {
    app.add_option("--stack", a.stack, "Directory of soft-mask PGMs (one per rephrasing), read in name order")
        ->required();
    app.add_option("--out", a.out, "Output weight map PGM (a .json sidecar is written next to it)")->required();
    app.add_option("--mode", a.mode, "literal | inverse_exp | inverse_linear");
    app.add_option("--v0", a.v0, "Variance scale for inverse_exp");
}

int run_filter_weights(const FilterArgs& a, const Globals&) {
    if (!fs::is_directory(a.stack)) cora::fail(cora::ErrorCode::IoError, "no such directory " + a.stack);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(a.stack))
        if (e.is_regular_file() && e.path().extension() == ".pgm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    cora::PredictionStack stack;
    for (const auto& f : files) stack.preds.push_back(cora::pnm::read_soft(f));
    const auto wm = cora::variance_to_weight(cora::pixel_variance(stack), cora::weight_mode_from_string(a.mode), a.v0);
    cora::save_weight_map(a.out, wm);
    std::cout << "weight map from " << files.size() << " predictions, mean " << wm.mean() << ", written to " << a.out
              << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string data;
    std::string out;
    std::string stage = "all";
    std::optional<double> split;
    std::string split_file;
    std::string init;
    std::string instructions;
    std::string querydb;
    std::string pseudo;
    long iterations = 100;
    int batch_size = 8;
    double lr = 2e-5;
    double weight_decay = 0.01;
    double alpha = 1.0;
    double sigma = 0.001;
    double tau = 0.07;
    bool unnormalized_pixel_loss = false;
    std::size_t k = cora::kDefaultQueriesPerClass;
    std::string weight_mode = "inverse_exp";
    double v0 = cora::kDefaultV0;
    std::size_t bank_capacity = cora::kDefaultBankCapacity;
    std::size_t n_neg = cora::kDefaultNegatives;
    long snapshot_refresh = 50;
    long checkpoint_every = 500;
    std::size_t pairs = 2;
    double flip_rate = 0.05;
    int boundary = 2;
    double dilate_prob = 0.5;
    int d = 16;
    int d_q = 16;
    int hidden = 32;
    int hash_size = 256;
    int patch = 4;
    bool no_cvi = false;
    bool no_ocpl = false;
    bool no_tfca = false;
    bool no_unlabeled = false;
};

void add_train(CLI::App& app, TrainArgs& a) {
    app.add_option("--data", a.data, "Dataset directory")->required();
    app.add_option("--out", a.out, "Run directory")->required();
    app.add_option("--stage", a.stage, "1 | 2 | 3 | all")->check(CLI::IsMember({"1", "2", "3", "all"}));
    auto* split = app.add_option("--split", a.split, "Labeled fraction; the split is drawn with --seed");
    app.add_option("--split-file", a.split_file, "Existing split manifest")->excludes(split);
    app.add_option("--init", a.init, "Checkpoint to start from (required for --stage 2 or 3)");
    app.add_option("--instructions", a.instructions,
                   "Directory from gen-instructions; generated in memory from the split when omitted");
    app.add_option("--querydb", a.querydb, "Query database JSON; built from the lexicon when omitted");
    app.add_option("--pseudo", a.pseudo, "Directory from pseudo-label; noisy oracle in memory when omitted");
    app.add_option("--iterations", a.iterations, "Iterations per stage");
    app.add_option("--batch-size", a.batch_size, "Batch size");
    app.add_option("--lr", a.lr, "AdamW learning rate");
    app.add_option("--weight-decay", a.weight_decay, "AdamW decoupled weight decay");
    app.add_option("--alpha", a.alpha, "Text (class) loss weight");
    app.add_option("--sigma", a.sigma, "Unlabeled branch weight");
    app.add_option("--tau", a.tau, "Contrastive temperature");
    app.add_flag("--unnormalized-pixel-loss", a.unnormalized_pixel_loss, "Unnormalized pixel-weighted loss");
    app.add_option("--k", a.k, "Query rephrasings per class");
    app.add_option("--weight-mode", a.weight_mode, "literal | inverse_exp | inverse_linear");
    app.add_option("--v0", a.v0, "Variance scale for inverse_exp");
    app.add_option("--bank-capacity", a.bank_capacity, "Token bank entries per class");
    app.add_option("--n-neg", a.n_neg, "Negatives per contrastive anchor");
    app.add_option("--snapshot-refresh", a.snapshot_refresh, "Steps between frozen snapshot refreshes");
    app.add_option("--checkpoint-every", a.checkpoint_every, "Steps between intermediate checkpoints");
    app.add_option("--pairs", a.pairs, "Conditional instructions per labeled image");
    app.add_option("--flip-rate", a.flip_rate, "Noisy-oracle class flip rate");
    app.add_option("--boundary", a.boundary, "Noisy-oracle largest boundary perturbation in px");
    app.add_option("--dilate-prob", a.dilate_prob, "Noisy-oracle growth probability");
    app.add_option("--d", a.d, "Token / feature width");
    app.add_option("--d-q", a.d_q, "Query embedding width");
    app.add_option("--hidden", a.hidden, "Token MLP hidden width");
    app.add_option("--hash-size", a.hash_size, "Query word hash buckets");
    app.add_option("--patch", a.patch, "Patch size");
    app.add_flag("--no-cvi", a.no_cvi, "Skip stage 2 (conditional instructions)");
    app.add_flag("--no-ocpl", a.no_ocpl, "Uniform pseudo-label weights instead of consistency weights");
    app.add_flag("--no-tfca", a.no_tfca, "Drop the token contrastive term");
    app.add_flag("--no-unlabeled", a.no_unlabeled, "Stage 3 on labeled batches only");
}

cora::TrainConfig train_config(const TrainArgs& a, const Globals& g, const cora::ClassLexicon& lex) {
    cora::TrainConfig c;
    c.iterations_per_stage = a.iterations;
    c.batch_size = a.batch_size;
    c.learning_rate = a.lr;
    c.adamw.weight_decay = a.weight_decay;
    c.loss.alpha = a.alpha;
    c.loss.sigma = a.sigma;
    c.loss.tau = a.tau;
    c.loss.unnormalized_pixel_loss = a.unnormalized_pixel_loss;
    c.K = a.k;
    c.consistency = {cora::weight_mode_from_string(a.weight_mode), a.v0};
    c.bank_capacity = a.bank_capacity;
    c.n_neg = a.n_neg;
    c.snapshot_refresh = a.snapshot_refresh;
    c.checkpoint_every = a.checkpoint_every;
    c.conditional_pairs = a.pairs;
    c.pseudo_noise = {a.flip_rate, a.boundary, 0, a.dilate_prob, {}};
    c.dims.d = a.d;
    c.dims.d_q = a.d_q;
    c.dims.hidden = a.hidden;
    c.dims.hash_size = a.hash_size;
    c.dims.patch = a.patch;
    int max_class = 0;
    for (const auto& [cls, e] : lex.entries()) max_class = std::max(max_class, static_cast<int>(cls));
    c.dims.n_classes = max_class + 1;
    c.seed = g.seed;
    c.threads = g.threads;
    c.use_cvi = !a.no_cvi;
    c.use_ocpl = !a.no_ocpl;
    c.use_tfca = !a.no_tfca;
    c.use_unlabeled = !a.no_unlabeled;
    cora::validate(c);
    return c;
}

std::string ckpt_name(int stage, long it) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "ckpt_s%d_%06ld.bin", stage, it);
    return buf;
}

int run_train(const TrainArgs& a, const Globals& g) {
    const auto ds = cora::load_dataset(a.data);
    if (ds.samples.empty()) cora::fail(cora::ErrorCode::EmptyDataset, "dataset " + a.data + " is empty");
    auto cfg = train_config(a, g, ds.lexicon);

    cora::SplitManifest split;
    if (!a.split_file.empty())
        split = cora::SplitManifest::from_json(read_json(a.split_file));
    else
        split = cora::make_split(ds, a.split.value_or(0.125), g.seed);

    int first = 1, last = 3;
    if (a.stage != "all") first = last = std::stoi(a.stage);
    if (first > 1 && a.init.empty())
        cora::fail(cora::ErrorCode::ConfigError, "--stage " + a.stage + " needs --init <checkpoint>");

    auto td = cora::prepare_training_data(ds, split, cfg);
    const auto index = cora::image_index_by_ref(ds);
    if (!a.instructions.empty()) {
        const fs::path dir = a.instructions;
        td.stage1 = cora::items_from(cora::load_instruction_set(dir, "semantic.jsonl"), index);
        for (auto& it : cora::items_from(cora::load_instruction_set(dir, "attribute.jsonl"), index))
            td.stage1.push_back(std::move(it));
        td.stage2 = cora::items_from(cora::load_instruction_set(dir, "conditional.jsonl"), index);
    }
    if (!a.querydb.empty()) td.db = cora::QueryDatabase::load(a.querydb);
    if (!a.pseudo.empty()) {
        td.pseudo_labels.resize(td.images.size());
        for (auto i : td.unlabeled)
            td.pseudo_labels[i] = cora::pnm::read_label_map(fs::path(a.pseudo) / cora::label_rel_path(ds.samples[i].id));
    }

    cora::ModelParams params;
    if (a.init.empty()) {
        params = cora::init_params(cfg.dims, g.seed);
    } else {
        params = cora::load_checkpoint(a.init, cfg.dims).params;
    }

    const fs::path out = a.out;
    fs::create_directories(out);
    json config_json = {{"train", cora::to_json(cfg)},
                        {"data", a.data},
                        {"stage", a.stage},
                        {"init", a.init},
                        {"instructions", a.instructions},
                        {"querydb", a.querydb},
                        {"pseudo", a.pseudo}};
    write_json(out / "config.json", config_json);
    write_json(out / "split.json", split.to_json());

    std::ofstream log(out / "log.jsonl", std::ios::binary);
    cora::StageHooks hooks;
    hooks.on_log = [&](const json& rec) {
        log << rec.dump() << '\n';
        const long it = rec.at("it").get<long>();
        if (it == 0 || (it + 1) % 50 == 0 || it + 1 == cfg.iterations_per_stage)
            std::cout << "stage " << rec.at("stage").get<int>() << " it " << it + 1 << "/" << cfg.iterations_per_stage
                      << " loss " << rec.at("loss").get<double>() << "\n";
    };
    hooks.on_checkpoint = [&](int stage, long it, const cora::ModelParams& p) {
        cora::save_checkpoint(out / ckpt_name(stage, it), p, {cfg.dims, cfg.seed, stage, it});
    };
    const auto summaries = cora::run_stages(params, td, cfg, first, last, hooks);
    log.close();
    const int final_stage = summaries.empty() ? first : summaries.back().stage;
    cora::save_checkpoint(out / "ckpt_final.bin", params, {cfg.dims, cfg.seed, final_stage, cfg.iterations_per_stage});

    // Held-out report: semantic queries on the unlabeled images, scored against their true label maps.
    cora::round_to_float(params);
    auto eval_idx = td.unlabeled.empty() ? td.labeled : td.unlabeled;
    const auto eval_items = cora::semantic_items(ds, eval_idx, g.seed);
    auto report = cora::evaluate_ciou(params, td.images, eval_items);
    report.stage = final_stage;
    report.iteration = cfg.iterations_per_stage;
    json m = report.to_json();
    m["eval_set"] = td.unlabeled.empty() ? "labeled-semantic" : "unlabeled-semantic";
    json stages = json::array();
    for (const auto& s : summaries)
        stages.push_back({{"stage", s.stage},
                          {"iterations", s.iterations},
                          {"first_loss", s.first_loss},
                          {"last_loss", s.last_loss},
                          {"auxiliary_passes", s.auxiliary_passes}});
    m["stages"] = stages;
    write_json(out / "metrics.json", m);
    std::cout << "held-out cIoU " << report.ciou << " over " << report.n_pairs << " pairs\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string ckpt;
    std::string set;
    std::string data;
    std::string out;
};

void add_eval(CLI::App& app, EvalArgs& a) {
    app.add_option("--ckpt", a.ckpt, "Checkpoint")->required();
    app.add_option("--set", a.set, "Instruction JSONL; mask refs resolve against its directory")->required();
    app.add_option("--data", a.data, "Dataset directory image refs resolve against (default: the set's directory)");
    app.add_option("--out", a.out, "metrics.json path (default: next to the set)");
}

int run_eval(const EvalArgs& a, const Globals&) {
    const fs::path set_path = a.set;
    const fs::path set_dir = set_path.has_parent_path() ? set_path.parent_path() : fs::path(".");
    const auto set = cora::load_instruction_set(set_dir, set_path.filename().string());
    const fs::path data_dir = a.data.empty() ? set_dir : fs::path(a.data);
    const auto ck = cora::load_checkpoint(a.ckpt);

    std::vector<cora::Image> images;
    std::map<std::string, std::size_t> index;
    for (const auto& in : set.instructions) {
        if (index.count(in.image_ref)) continue;
        index[in.image_ref] = images.size();
        images.push_back(cora::to_image(cora::pnm::read(data_dir / in.image_ref)));
    }
    auto report = cora::evaluate_ciou(ck.params, images, cora::items_from(set, index));
    report.stage = ck.header.stage;
    report.iteration = ck.header.iteration;
    const fs::path out = a.out.empty() ? set_dir / "metrics.json" : fs::path(a.out);
    write_json(out, report.to_json());
    std::cout << "cIoU " << report.ciou << " over " << report.n_pairs << " pairs -> " << out.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct InspectArgs {
    std::string ckpt;
};

int run_inspect(const InspectArgs& a, const Globals&) {
    const auto ck = cora::load_checkpoint(a.ckpt);
    json tensors = json::array();
    for (int t = 0; t < cora::kTensorCount; ++t) {
        const auto tensor = static_cast<cora::Tensor>(t);
        const auto v = ck.params.tensor(tensor);
        double sq = 0.0, lo = 0.0, hi = 0.0;
        if (!v.empty()) lo = hi = v[0];
        for (double x : v) {
            sq += x * x;
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
        const auto& s = ck.params.shape(tensor);
        tensors.push_back({{"name", cora::kTensorNames[t]},
                           {"rows", s.rows},
                           {"cols", s.cols},
                           {"min", lo},
                           {"max", hi},
                           {"rms", v.empty() ? 0.0 : std::sqrt(sq / static_cast<double>(v.size()))}});
    }
    std::cout << json{{"dims", cora::to_json(ck.header.dims)},
                      {"seed", ck.header.seed},
                      {"stage", ck.header.stage},
                      {"iteration", ck.header.iteration},
                      {"parameter_count", ck.params.size()},
                      {"tensors", tensors}}
                     .dump(2)
              << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"cora: semi-supervised query-conditioned segmentation pipeline"};
    app.option_defaults()->always_capture_default();
    app.config_formatter(std::make_shared<JsonConfig>());
    app.allow_config_extras(CLI::config_extras_mode::error);
    app.require_subcommand(1);
    app.fallthrough();

    Globals g;
    app.add_option("--seed", g.seed, "Base seed for every random stream");
    app.add_option("--threads", g.threads, "Worker threads; results are bit-reproducible only with 1")
        ->check(CLI::PositiveNumber);
    app.set_config("--config", "", "JSON config; explicit flags override it");

    GenDataArgs gen_data;
    add_gen_data(*app.add_subcommand("gen-data", "Render a shapes-world dataset"), gen_data);
    GenInstrArgs gen_instr;
    add_gen_instructions(*app.add_subcommand("gen-instructions", "Semantic, attribute and conditional instructions"),
                         gen_instr);
    QueryDbArgs qdb;
    add_build_querydb(*app.add_subcommand("build-querydb", "Per-class query rephrasings for unlabeled images"), qdb);
    PseudoArgs pseudo;
    add_pseudo_label(*app.add_subcommand("pseudo-label", "Noisy-oracle pseudo label maps"), pseudo);
    FilterArgs filter;
    add_filter_weights(*app.add_subcommand("filter-weights", "Pixel weight map from a prediction stack"), filter);
    TrainArgs train;
    add_train(*app.add_subcommand("train", "Three-stage training"), train);
    EvalArgs eval;
    add_eval(*app.add_subcommand("eval", "Cumulative IoU of a checkpoint on an instruction set"), eval);
    InspectArgs inspect;
    app.add_subcommand("inspect-ckpt", "Print a checkpoint header and tensor statistics")
        ->add_option("--ckpt", inspect.ckpt, "Checkpoint")
        ->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        report("UsageError", e.what());
        return 1;
    }

    try {
        auto* sub = app.get_subcommands().front();
        const std::string name = sub->get_name();
        if (name == "gen-data") return run_gen_data(gen_data, g);
        if (name == "gen-instructions") return run_gen_instructions(gen_instr, g);
        if (name == "build-querydb") return run_build_querydb(qdb, g);
        if (name == "pseudo-label") return run_pseudo_label(pseudo, g);
        if (name == "filter-weights") return run_filter_weights(filter, g);
        if (name == "train") return run_train(train, g);
        if (name == "eval") return run_eval(eval, g);
        if (name == "inspect-ckpt") return run_inspect(inspect, g);
    } catch (const cora::Error& e) {
        report(cora::to_string(e.code()), e.what());
        return exit_code_for(e.code());
    } catch (const nlohmann::json::exception& e) {
        report("ParseError", e.what());
        return 2;
    } catch (const std::exception& e) {
        report("IoError", e.what());
        return 2;
    }
    return 1;
}
