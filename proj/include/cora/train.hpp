#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "cora/checkpoint.hpp"
#include "cora/consistency.hpp"
#include "cora/data.hpp"
#include "cora/error.hpp"
#include "cora/grid.hpp"
#include "cora/instructgen.hpp"
#include "cora/losses.hpp"
#include "cora/model.hpp"
#include "cora/rng.hpp"
#include "cora/tokenbank.hpp"

namespace cora {

// ---------------------------------------------------------------------------
// Optimizer

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

struct AdamWState {
    ParamBuffer m;
    ParamBuffer v;
    long t = 0;

    AdamWState() = default;
    explicit AdamWState(const ModelDims& dims) : m(dims), v(dims) {}
};

/// Decoupled weight decay Adam with bias correction.
inline void adamw_step(ModelParams& params, const ParamGrads& grads, AdamWState& state, double lr,
                       const AdamWConfig& cfg) {
    if (grads.dims() != params.dims() || state.m.dims() != params.dims() || state.v.dims() != params.dims())
        fail(ErrorCode::ShapeError, "optimizer state, gradients and parameters disagree on dims");
    ++state.t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    auto p = params.values();
    auto g = grads.values();
    auto m = state.m.values();
    auto v = state.v.values();
    for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        p[i] = p[i] * (1.0 - lr * cfg.weight_decay) - lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
    long iterations_per_stage = 100;
    int batch_size = 8;
    double learning_rate = 2e-5;
    AdamWConfig adamw;
    LossConfig loss;
    std::size_t K = kDefaultQueriesPerClass;
    ConsistencyConfig consistency;
    std::size_t bank_capacity = kDefaultBankCapacity;
    std::size_t n_neg = kDefaultNegatives;
    long snapshot_refresh = 50;
    long checkpoint_every = 500;
    std::size_t conditional_pairs = 2; // per labeled image
    PseudoNoise pseudo_noise{0.05, 2, 0, 0.5, {}};
    ModelDims dims;
    std::uint64_t seed = 0;
    int threads = 1;
    // component switches
    bool use_cvi = true;       // stage 2 on conditional instructions
    bool use_ocpl = true;      // consistency weights (off: uniform weights)
    bool use_tfca = true;      // token contrastive term
    bool use_unlabeled = true; // off: stage 3 trains on labeled batches only
};

inline void validate(const TrainConfig& c) {
    auto bad = [](const std::string& m) { fail(ErrorCode::ConfigError, m); };
    if (c.iterations_per_stage < 1) bad("iterations_per_stage must be >= 1");
    if (c.batch_size < 1) bad("batch_size must be >= 1");
    if (!(c.learning_rate > 0)) bad("learning_rate must be > 0");
    if (c.adamw.beta1 < 0 || c.adamw.beta1 >= 1 || c.adamw.beta2 < 0 || c.adamw.beta2 >= 1 || !(c.adamw.eps > 0) ||
        c.adamw.weight_decay < 0)
        bad("invalid AdamW hyperparameters");
    if (c.K < 2) bad("K must be >= 2");
    if (c.snapshot_refresh < 1) bad("snapshot_refresh must be >= 1");
    if (c.checkpoint_every < 1) bad("checkpoint_every must be >= 1");
    if (c.threads < 1) bad("threads must be >= 1");
    if (c.n_neg < 1) bad("n_neg must be >= 1");
    validate(c.loss);
    validate(c.dims);
}

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"iterations_per_stage", c.iterations_per_stage},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"adamw",
             {{"beta1", c.adamw.beta1},
              {"beta2", c.adamw.beta2},
              {"eps", c.adamw.eps},
              {"weight_decay", c.adamw.weight_decay}}},
            {"loss",
             {{"alpha", c.loss.alpha},
              {"sigma", c.loss.sigma},
              {"tau", c.loss.tau},
              {"dice_eps", c.loss.dice_eps},
              {"weight_floor_eps", c.loss.weight_floor_eps},
              {"unnormalized_pixel_loss", c.loss.unnormalized_pixel_loss}}},
            {"K", c.K},
            {"consistency", {{"mode", to_string(c.consistency.mode)}, {"v0", c.consistency.v0}}},
            {"bank_capacity", c.bank_capacity},
            {"n_neg", c.n_neg},
            {"snapshot_refresh", c.snapshot_refresh},
            {"checkpoint_every", c.checkpoint_every},
            {"conditional_pairs", c.conditional_pairs},
            {"pseudo_noise",
             {{"flip_rate", c.pseudo_noise.flip_rate},
              {"boundary_erode_dilate", c.pseudo_noise.boundary_erode_dilate},
              {"dilate_prob", c.pseudo_noise.dilate_prob}}},
            {"dims", to_json(c.dims)},
            {"seed", c.seed},
            {"threads", c.threads},
            {"use_cvi", c.use_cvi},
            {"use_ocpl", c.use_ocpl},
            {"use_tfca", c.use_tfca},
            {"use_unlabeled", c.use_unlabeled}};
}

// ---------------------------------------------------------------------------
// Training data

/// One (image, query, target) pair; anchors set only for conditional items.
struct TrainItem {
    std::size_t image = 0;
    std::string query;
    BinaryMask target;
    std::uint8_t target_class = 0;
    std::optional<BinaryMask> anchor_mask;
    std::optional<NormBBox> anchor_bbox;
};

struct TrainingData {
    ClassLexicon lexicon;
    std::vector<Image> images;
    std::vector<LabelMap> labels;
    std::vector<std::size_t> labeled;   // indices into images
    std::vector<std::size_t> unlabeled; // indices into images
    std::vector<TrainItem> stage1;      // semantic + attribute on labeled images
    std::vector<TrainItem> stage2;      // conditional on labeled images
    QueryDatabase db;
    std::vector<LabelMap> pseudo_labels; // per image; empty = derive with the noisy oracle
};

/// Resolves each instruction's image through `image_index` (image_ref -> index into images).
inline std::vector<TrainItem> items_from(const InstructionSet& set,
                                         const std::map<std::string, std::size_t>& image_index) {
    std::vector<TrainItem> out;
    for (const auto& in : set.instructions) {
        auto img = image_index.find(in.image_ref);
        if (img == image_index.end()) fail(ErrorCode::DataError, "instruction " + in.id + " references unknown image");
        auto mask = [&](const std::string& ref) {
            auto it = set.masks.find(ref);
            if (it == set.masks.end()) fail(ErrorCode::DataError, "instruction " + in.id + " lacks mask " + ref);
            return it->second;
        };
        TrainItem it;
        it.image = img->second;
        it.query = in.query_text;
        it.target = mask(in.target_mask_ref);
        it.target_class = in.target_class;
        if (in.anchor_mask_ref) it.anchor_mask = mask(*in.anchor_mask_ref);
        it.anchor_bbox = in.anchor_bbox;
        out.push_back(std::move(it));
    }
    return out;
}

/// Reads `<dir>/<jsonl_name>` and the masks its records point at.
inline InstructionSet load_instruction_set(const std::filesystem::path& dir, const std::string& jsonl_name) {
    InstructionSet set;
    set.instructions = read_instructions(dir / jsonl_name);
    for (const auto& in : set.instructions) {
        for (const auto* ref : {&in.target_mask_ref, in.anchor_mask_ref ? &*in.anchor_mask_ref : nullptr}) {
            if (!ref || set.masks.count(*ref)) continue;
            set.masks.emplace(*ref, pnm::read_mask(dir / *ref));
        }
    }
    return set;
}

inline std::map<std::string, std::size_t> image_index_by_ref(const Dataset& ds) {
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) index[image_rel_path(ds.samples[i].id)] = i;
    return index;
}

/// One semantic instruction per (image, present class), scored against the true label map.
inline std::vector<TrainItem> semantic_items(const Dataset& ds, const std::vector<std::size_t>& indices,
                                             std::uint64_t seed) {
    InstructionSet set;
    for (auto i : indices)
        set.append(gen_semantic(ds.samples.at(i).labels, ds.lexicon, instruction_seed(seed, i),
                                image_rel_path(ds.samples[i].id)));
    return items_from(set, image_index_by_ref(ds));
}

/// Images, split indices and freshly generated instruction sets for the labeled part.
inline TrainingData prepare_training_data(const Dataset& ds, const SplitManifest& split, const TrainConfig& cfg) {
    TrainingData td;
    td.lexicon = ds.lexicon;
    std::map<std::string, std::size_t> by_id;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        td.images.push_back(to_image(ds.samples[i].image));
        td.labels.push_back(ds.samples[i].labels);
        by_id[ds.samples[i].id] = i;
    }
    auto lookup = [&](const std::string& id) {
        auto it = by_id.find(id);
        if (it == by_id.end()) fail(ErrorCode::DataError, "split references unknown image " + id);
        return it->second;
    };
    for (const auto& id : split.labeled) td.labeled.push_back(lookup(id));
    for (const auto& id : split.unlabeled) td.unlabeled.push_back(lookup(id));
    const auto bundle = generate_instructions(ds, td.labeled, cfg.seed, cfg.conditional_pairs);
    const auto index = image_index_by_ref(ds);
    td.stage1 = items_from(bundle.semantic, index);
    for (auto& it : items_from(bundle.attribute, index)) td.stage1.push_back(std::move(it));
    td.stage2 = items_from(bundle.conditional, index);
    td.db = build_query_db(td.lexicon, cfg.K, cfg.seed);
    return td;
}

// ---------------------------------------------------------------------------
// Metric

struct IouCounts {
    std::size_t intersection = 0;
    std::size_t union_ = 0;
};

inline IouCounts iou_counts(const BinaryMask& pred, const BinaryMask& gt) {
    require_same_dims(pred, gt, "iou_counts");
    IouCounts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool a = pred.data[i] != 0, b = gt.data[i] != 0;
        c.intersection += a && b;
        c.union_ += a || b;
    }
    return c;
}

/// Sum of intersections over sum of unions. Pairs with an empty union are skipped;
/// a set where every pair is skipped scores 1.
inline double cumulative_iou(std::span<const IouCounts> pairs) {
    std::size_t inter = 0, uni = 0;
    for (const auto& p : pairs) {
        if (p.union_ == 0) continue;
        inter += p.intersection;
        uni += p.union_;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline BinaryMask binarize(const SoftMask& m, double threshold = 0.5) {
    BinaryMask b(m.width, m.height);
    for (std::size_t i = 0; i < m.size(); ++i) b.data[i] = m.data[i] > threshold;
    return b;
}

struct MetricReport {
    double ciou = 0.0;
    std::map<std::uint8_t, double> per_class_iou;
    std::size_t n_pairs = 0;
    int stage = 0;
    long iteration = 0;

    nlohmann::json to_json() const {
        nlohmann::json pc = nlohmann::json::object();
        for (const auto& [cls, v] : per_class_iou) pc[std::to_string(cls)] = v;
        return {{"ciou", ciou}, {"per_class_iou", pc}, {"n_pairs", n_pairs}, {"stage", stage}, {"iteration", iteration}};
    }
};

inline MetricReport evaluate_ciou(const ModelParams& params, const std::vector<Image>& images,
                                  const std::vector<TrainItem>& eval_set) {
    if (eval_set.empty()) fail(ErrorCode::EmptyEvalSet, "evaluation set is empty");
    std::vector<IouCounts> all;
    std::map<std::uint8_t, std::vector<IouCounts>> by_class;
    for (const auto& item : eval_set) {
        const auto tr = forward(params, images.at(item.image), item.query,
                                item.anchor_mask ? &*item.anchor_mask : nullptr, item.anchor_bbox);
        const auto c = iou_counts(binarize(tr.soft_mask), item.target);
        all.push_back(c);
        by_class[item.target_class].push_back(c);
    }
    MetricReport r;
    r.ciou = cumulative_iou(all);
    r.n_pairs = all.size();
    for (const auto& [cls, v] : by_class) r.per_class_iou[cls] = cumulative_iou(v);
    return r;
}

// ---------------------------------------------------------------------------
// Stages

struct StageHooks {
    std::function<void(const nlohmann::json&)> on_log;
    std::function<void(int stage, long iteration, const ModelParams&)> on_checkpoint;
};

struct StageSummary {
    int stage = 0;
    long iterations = 0;
    double first_loss = 0.0;
    double last_loss = 0.0;
    std::size_t auxiliary_passes = 0; // frozen forward passes, stage 3 only
};

namespace detail {

template <class Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t)
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = static_cast<std::size_t>(t); i < n; i += static_cast<std::size_t>(threads)) fn(i);
            } catch (...) {
                errors[static_cast<std::size_t>(t)] = std::current_exception();
            }
        });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

struct LabeledResult {
    ParamGrads grads;
    LossValue loss;
    std::vector<double> sseg;
};

inline LabeledResult labeled_pass(const ModelParams& params, const Image& image, const TrainItem& item,
                                  const LossConfig& loss_cfg) {
    const auto tr =
        forward(params, image, item.query, item.anchor_mask ? &*item.anchor_mask : nullptr, item.anchor_bbox);
    LabeledResult r{ParamGrads(params.dims()), labeled_loss(tr, item.target, item.target_class, loss_cfg), tr.sseg};
    backward_into(params, tr, r.loss.d_mask_logits, r.loss.d_response_logits, {}, r.grads);
    return r;
}

inline void check_finite(double v, const char* what) {
    if (!std::isfinite(v)) fail(ErrorCode::NonFinite, std::string(what) + " is not finite");
}

inline nlohmann::json parts_json(const std::map<std::string, double>& parts) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : parts) j[k] = v;
    return j;
}

/// Stage 1 / 2 loop: AdamW on the mean labeled loss of seeded batches.
inline StageSummary run_labeled_stage(int stage, ModelParams& params, const TrainingData& data,
                                      const std::vector<TrainItem>& items, const TrainConfig& cfg,
                                      const StageHooks& hooks) {
    validate(cfg);
    if (items.empty()) fail(ErrorCode::DataError, "stage " + std::to_string(stage) + " has no training items");
    AdamWState opt(params.dims());
    StageSummary summary{stage, cfg.iterations_per_stage, 0.0, 0.0, 0};
    const auto B = static_cast<std::size_t>(cfg.batch_size);
    for (long it = 0; it < cfg.iterations_per_stage; ++it) {
        Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(stage), static_cast<std::uint64_t>(it), 0}));
        std::vector<std::size_t> batch(B);
        for (auto& b : batch) b = static_cast<std::size_t>(rng.below(items.size()));
        std::vector<LabeledResult> results(B);
        parallel_for(B, cfg.threads, [&](std::size_t k) {
            const auto& item = items[batch[k]];
            results[k] = labeled_pass(params, data.images.at(item.image), item, cfg.loss);
        });
        ParamGrads total(params.dims());
        double loss = 0.0;
        std::map<std::string, double> parts;
        for (const auto& r : results) {
            total.add_scaled(r.grads, 1.0 / static_cast<double>(B));
            loss += r.loss.total / static_cast<double>(B);
            for (const auto& [k, v] : r.loss.parts) parts[k] += v / static_cast<double>(B);
        }
        check_finite(loss, "labeled loss");
        adamw_step(params, total, opt, cfg.learning_rate, cfg.adamw);
        if (!params.all_finite()) fail(ErrorCode::NonFinite, "parameters became non-finite");
        if (it == 0) summary.first_loss = loss;
        summary.last_loss = loss;
        if (hooks.on_log) hooks.on_log({{"stage", stage}, {"it", it}, {"loss", loss}, {"parts", parts_json(parts)}});
        if (hooks.on_checkpoint && (it + 1) % cfg.checkpoint_every == 0 && it + 1 < cfg.iterations_per_stage)
            hooks.on_checkpoint(stage, it + 1, params);
    }
    if (hooks.on_checkpoint) hooks.on_checkpoint(stage, cfg.iterations_per_stage, params);
    return summary;
}

inline std::vector<std::uint8_t> classes_present(const LabelMap& m) {
    std::set<std::uint8_t> s;
    for (auto v : m.data)
        if (v != kVoid) s.insert(v);
    return {s.begin(), s.end()};
}

} // namespace detail

/// Semantic + attribute instructions.
inline StageSummary run_stage1(ModelParams& params, const TrainingData& data, const TrainConfig& cfg,
                               const StageHooks& hooks = {}) {
    return detail::run_labeled_stage(1, params, data, data.stage1, cfg, hooks);
}

/// Conditional instructions with the anchor mask channel and box features active.
inline StageSummary run_stage2(ModelParams& params, const TrainingData& data, const TrainConfig& cfg,
                               const StageHooks& hooks = {}) {
    return detail::run_labeled_stage(2, params, data, data.stage2, cfg, hooks);
}

/// Noisy-oracle pseudo label maps for every unlabeled image, one derived seed per image.
inline std::vector<LabelMap> make_pseudo_labels(const TrainingData& data, const TrainConfig& cfg) {
    std::vector<LabelMap> out(data.labels.size());
    for (auto i : data.unlabeled) {
        auto noise = cfg.pseudo_noise;
        noise.seed = derive_seed(cfg.seed, {0x95E0, i});
        if (noise.classes.empty())
            for (const auto& [cls, e] : data.lexicon.entries()) noise.classes.push_back(cls);
        out[i] = noisy_oracle_pseudo_labeler(data.labels[i], noise);
    }
    return out;
}

/// Labeled batches (with DB queries) plus pseudo-labeled unlabeled batches, combined as
/// L^l + sigma (L^u_seg + L^u_t). The bank is cleared and warmed by one labeled pass first.
inline StageSummary run_stage3(ModelParams& params, const TrainingData& data, const TrainConfig& cfg,
                               const StageHooks& hooks = {}) {
    validate(cfg);
    constexpr int stage = 3;
    if (data.labeled.empty()) fail(ErrorCode::DataError, "stage 3 needs labeled images");
    const auto& db = data.db;
    if (db.K != cfg.K)
        fail(ErrorCode::MissingClassQueries, "query database has K=" + std::to_string(db.K) + ", config wants " +
                                                 std::to_string(cfg.K));
    for (const auto& [cls, e] : data.lexicon.entries()) db.for_class(cls);

    // Labeled items: every (labeled image, present class); the query is drawn per use.
    struct LabeledSlot {
        std::size_t image;
        std::uint8_t cls;
    };
    std::vector<LabeledSlot> slots;
    for (auto i : data.labeled)
        for (auto c : detail::classes_present(data.labels[i])) slots.push_back({i, c});
    if (slots.empty()) fail(ErrorCode::DataError, "labeled images contain no objects");

    const bool unlabeled_on = cfg.use_unlabeled && !data.unlabeled.empty();
    std::vector<LabelMap> generated;
    const std::vector<LabelMap>* pseudo = &data.pseudo_labels;
    if (unlabeled_on && data.pseudo_labels.empty()) {
        generated = make_pseudo_labels(data, cfg);
        pseudo = &generated;
    }

    auto make_item = [&](const LabeledSlot& s, std::uint64_t seed) {
        Rng rng(seed);
        const auto& qs = db.for_class(s.cls);
        return TrainItem{s.image, qs[rng.below(qs.size())], class_mask(data.labels[s.image], s.cls), s.cls, {}, {}};
    };

    TokenBank bank(cfg.bank_capacity);
    for (std::size_t k = 0; k < slots.size(); ++k) {
        const auto item = make_item(slots[k], derive_seed(cfg.seed, {stage, 0xBA4C, k}));
        const auto tr = forward(params, data.images.at(item.image), item.query);
        bank.push(tr.token(item.target_class, TokenSource::Labeled));
    }

    ModelParams frozen = params;
    AdamWState opt(params.dims());
    StageSummary summary{stage, cfg.iterations_per_stage, 0.0, 0.0, 0};
    const auto B = static_cast<std::size_t>(cfg.batch_size);
    const double inv_b = 1.0 / static_cast<double>(B);

    for (long it = 0; it < cfg.iterations_per_stage; ++it) {
        if (it > 0 && it % cfg.snapshot_refresh == 0) frozen = params;
        const auto step_seed = derive_seed(cfg.seed, {stage, static_cast<std::uint64_t>(it)});

        // labeled branch
        Rng lrng(derive_seed(step_seed, {0}));
        std::vector<TrainItem> lab_items;
        for (std::size_t k = 0; k < B; ++k) {
            const auto& slot = slots[lrng.below(slots.size())];
            lab_items.push_back(make_item(slot, lrng.next()));
        }
        std::vector<detail::LabeledResult> lab(B);
        detail::parallel_for(B, cfg.threads, [&](std::size_t k) {
            lab[k] = detail::labeled_pass(params, data.images.at(lab_items[k].image), lab_items[k], cfg.loss);
        });
        LossValue lab_mean;
        ParamGrads total(params.dims());
        for (std::size_t k = 0; k < B; ++k) {
            total.add_scaled(lab[k].grads, inv_b);
            lab_mean.total += lab[k].loss.total * inv_b;
            for (const auto& [name, v] : lab[k].loss.parts) lab_mean.parts[name] += v * inv_b;
            bank.push({lab[k].sseg, lab_items[k].target_class, TokenSource::Labeled});
        }

        double unl_seg = 0.0, unl_tok = 0.0;
        nlohmann::json lambda_stats = nullptr;
        if (unlabeled_on) {
            Rng urng(derive_seed(step_seed, {1}));
            struct UnlabeledDraw {
                std::size_t image;
                std::uint8_t cls;
                std::size_t live;
                bool valid;
            };
            std::vector<UnlabeledDraw> draws(B);
            for (auto& d : draws) {
                d.image = data.unlabeled[urng.below(data.unlabeled.size())];
                const auto present = detail::classes_present((*pseudo)[d.image]);
                d.valid = !present.empty();
                d.cls = d.valid ? present[urng.below(present.size())] : 0;
                d.live = static_cast<std::size_t>(urng.below(cfg.K));
            }
            struct UnlabeledResult {
                ForwardTrace trace;
                PixelLoss seg;
                double w_mean = 1.0, w_min = 1.0, w_max = 1.0;
                std::size_t aux = 0;
            };
            std::vector<UnlabeledResult> unl(B);
            detail::parallel_for(B, cfg.threads, [&](std::size_t k) {
                const auto& d = draws[k];
                if (!d.valid) return;
                const auto& image = data.images.at(d.image);
                const UnlabeledSample sample{image, (*pseudo)[d.image], d.cls};
                WeightedPseudo wp;
                if (cfg.use_ocpl) {
                    wp = build_weighted_pseudo(sample, db, frozen, d.live, cfg.consistency);
                    unl[k].aux = wp.stack.preds.size();
                } else {
                    wp.query = db.for_class(d.cls)[d.live];
                    wp.pseudo_mask = class_mask(sample.pseudo_labels, d.cls);
                    wp.weights = uniform_weights(image.width, image.height);
                }
                unl[k].trace = forward(params, image, wp.query);
                unl[k].seg = unlabeled_seg_loss(unl[k].trace.soft_mask, wp.pseudo_mask, wp.weights.weights, cfg.loss);
                const auto [mn, mx] = std::minmax_element(wp.weights.weights.data.begin(), wp.weights.weights.data.end());
                unl[k].w_mean = wp.weights.mean();
                unl[k].w_min = *mn;
                unl[k].w_max = *mx;
            });

            std::vector<SsegToken> anchors;
            std::vector<std::size_t> anchor_of;
            for (std::size_t k = 0; k < B; ++k)
                if (draws[k].valid) {
                    anchors.push_back(unl[k].trace.token(draws[k].cls, TokenSource::Unlabeled));
                    anchor_of.push_back(k);
                }
            std::vector<std::vector<double>> d_tok(B);
            if (cfg.use_tfca && !anchors.empty()) {
                const auto cl = contrastive_loss(anchors, bank, cfg.loss, cfg.n_neg, derive_seed(step_seed, {2}));
                unl_tok = cl.value * inv_b;
                for (std::size_t a = 0; a < anchors.size(); ++a) d_tok[anchor_of[a]] = cl.d_anchors[a];
            }

            std::vector<ParamGrads> ug(B);
            detail::parallel_for(B, cfg.threads, [&](std::size_t k) {
                if (!draws[k].valid) return;
                ug[k] = ParamGrads(params.dims());
                backward_into(params, unl[k].trace, unl[k].seg.d_logits, {}, d_tok[k], ug[k]);
            });
            double w_mean = 0.0, w_min = 1e300, w_max = -1e300;
            std::size_t valid = 0;
            for (std::size_t k = 0; k < B; ++k) {
                if (!draws[k].valid) continue;
                ++valid;
                total.add_scaled(ug[k], cfg.loss.sigma * inv_b);
                unl_seg += unl[k].seg.value * inv_b;
                summary.auxiliary_passes += unl[k].aux;
                w_mean += unl[k].w_mean;
                w_min = std::min(w_min, unl[k].w_min);
                w_max = std::max(w_max, unl[k].w_max);
            }
            if (valid) lambda_stats = {{"mean", w_mean / static_cast<double>(valid)}, {"min", w_min}, {"max", w_max}};
        }

        const double loss = total_loss(lab_mean, unl_seg, unl_tok, cfg.loss);
        adamw_step(params, total, opt, cfg.learning_rate, cfg.adamw);
        if (!params.all_finite()) fail(ErrorCode::NonFinite, "parameters became non-finite");
        if (it == 0) summary.first_loss = loss;
        summary.last_loss = loss;
        if (hooks.on_log) {
            auto parts = detail::parts_json(lab_mean.parts);
            parts["unl_seg"] = unl_seg;
            parts["unl_tok"] = unl_tok;
            hooks.on_log({{"stage", stage}, {"it", it}, {"loss", loss}, {"parts", parts}, {"lambda", lambda_stats}});
        }
        if (hooks.on_checkpoint && (it + 1) % cfg.checkpoint_every == 0 && it + 1 < cfg.iterations_per_stage)
            hooks.on_checkpoint(stage, it + 1, params);
    }
    if (hooks.on_checkpoint) hooks.on_checkpoint(stage, cfg.iterations_per_stage, params);
    return summary;
}

/// Runs stages [first, last] in order; stage 2 is skipped when CVI is off.
inline std::vector<StageSummary> run_stages(ModelParams& params, const TrainingData& data, const TrainConfig& cfg,
                                            int first, int last, const StageHooks& hooks = {}) {
    std::vector<StageSummary> out;
    for (int s = first; s <= last; ++s) {
        if (s == 1) out.push_back(run_stage1(params, data, cfg, hooks));
        if (s == 2 && cfg.use_cvi) out.push_back(run_stage2(params, data, cfg, hooks));
        if (s == 3) out.push_back(run_stage3(params, data, cfg, hooks));
    }
    return out;
}

} // namespace cora
