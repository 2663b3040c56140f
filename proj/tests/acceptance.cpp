// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only if all pass.
//
//   acceptance --cli <path to cora binary> --work <scratch dir> [--only N]

#include <chrono>
#include <cstdio>
#include <iostream>
#include <regex>

#include <sys/wait.h>

#include <CLI11.hpp>

#include "support.hpp"

using namespace cora;
using namespace cora::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

// ---------------------------------------------------------------------------
// 1. analytic gradients of every loss, through the model, against central differences

Outcome gradient_fidelity() {
    const auto dims = tiny_dims(); // d=8, p=4
    const LossConfig cfg;
    constexpr int kTrials = 20;
    const char* names[] = {"bce", "dice", "labeled", "unlabeled_seg", "contrastive"};
    double worst[5] = {0, 0, 0, 0, 0};
    for (int t = 0; t < kTrials; ++t) {
        const auto seed = derive_seed(0xACC1, {static_cast<std::uint64_t>(t)});
        const auto p = random_params(dims, seed);
        const auto img = random_image(16, 16, 3, seed + 1);
        const auto gt = random_mask(16, 16, 0.35, seed + 2);
        const auto w = random_soft(16, 16, seed + 3, 0.0, 1.0);
        const auto cls = static_cast<std::uint8_t>(t % 4);
        const std::string q = "segment the object with three corners";
        const auto tr = forward(p, img, q);

        const auto lb = bce(tr.soft_mask, gt);
        worst[0] = std::max(worst[0], check_gradient(p, backward(p, tr, lb.d_logits, {}, {}), [&](const ModelParams& x) {
                                          return bce(forward(x, img, q).soft_mask, gt).value;
                                      }).rel_error);

        const auto ld = dice_loss(tr.soft_mask, gt, nullptr, cfg.dice_eps);
        worst[1] = std::max(worst[1], check_gradient(p, backward(p, tr, ld.d_logits, {}, {}), [&](const ModelParams& x) {
                                          return dice_loss(forward(x, img, q).soft_mask, gt, nullptr, cfg.dice_eps).value;
                                      }).rel_error);

        const auto ll = labeled_loss(tr, gt, cls, cfg);
        worst[2] = std::max(worst[2], check_gradient(p, backward(p, tr, ll.d_mask_logits, ll.d_response_logits, {}),
                                                     [&](const ModelParams& x) {
                                                         return labeled_loss(forward(x, img, q), gt, cls, cfg).total;
                                                     })
                                          .rel_error);

        const auto lu = unlabeled_seg_loss(tr.soft_mask, gt, w, cfg);
        worst[3] = std::max(worst[3], check_gradient(p, backward(p, tr, lu.d_logits, {}, {}), [&](const ModelParams& x) {
                                          return unlabeled_seg_loss(forward(x, img, q).soft_mask, gt, w, cfg).value;
                                      }).rel_error);

        TokenBank bank(16);
        Rng rng(seed + 4);
        for (int k = 0; k < 24; ++k) {
            std::vector<double> v(dims.d);
            for (auto& x : v) x = rng.uniform(-1, 1);
            bank.push({v, static_cast<std::uint8_t>(k % 4), TokenSource::Labeled});
        }
        const auto tok_seed = seed + 5;
        const auto lc = contrastive_loss({tr.token(cls, TokenSource::Unlabeled)}, bank, cfg, 8, tok_seed);
        worst[4] = std::max(worst[4], check_gradient(p, backward(p, tr, {}, {}, lc.d_anchors[0]), [&](const ModelParams& x) {
                                          return contrastive_loss({forward(x, img, q).token(cls, TokenSource::Unlabeled)},
                                                                  bank, cfg, 8, tok_seed)
                                              .value;
                                      }).rel_error);
    }
    bool ok = true;
    std::string d;
    for (int i = 0; i < 5; ++i) {
        ok = ok && worst[i] < 1e-4;
        d += fmt("%s %.1e ", names[i], worst[i]);
    }
    return {ok, fmt("%d trials per loss, worst rel err: ", kTrials) + d};
}

// ---------------------------------------------------------------------------
// 2. pixel variance against a scalar double loop

Outcome variance_oracle() {
    Rng rng(0xACC2);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int k = rng.range(2, 6);
        const int w = rng.range(1, 12), h = rng.range(1, 12);
        PredictionStack s;
        for (int j = 0; j < k; ++j) s.preds.push_back(random_soft(w, h, rng.next(), 0.0, 1.0));
        const auto var = pixel_variance(s);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double mean = 0.0;
                for (int j = 0; j < k; ++j) mean += s.preds[j](x, y);
                mean /= k;
                double acc = 0.0;
                for (int j = 0; j < k; ++j) acc += (s.preds[j](x, y) - mean) * (s.preds[j](x, y) - mean);
                worst = std::max(worst, std::abs(var(x, y) - acc / k));
            }
    }
    PredictionStack hand;
    for (double v : {0.2, 0.4, 0.6}) hand.preds.push_back(SoftMask(1, 1, v));
    const double hv = pixel_variance(hand).data[0];
    const bool ok = worst <= 1e-12 && std::abs(hv - 0.026667) < 5e-7;
    return {ok, fmt("100 stacks, max |diff| %.1e; {0.2,0.4,0.6} -> %.6f", worst, hv)};
}

// ---------------------------------------------------------------------------
// 3. weighted pseudo-label loss at lambda = 1 and lambda = 0

Outcome weighted_loss_reduction() {
    const LossConfig cfg;
    double worst_one = 0.0, worst_zero = 0.0;
    for (int t = 0; t < 20; ++t) {
        const auto seed = derive_seed(0xACC3, {static_cast<std::uint64_t>(t)});
        const auto pred = random_soft(16, 16, seed);
        const auto pseudo = random_mask(16, 16, 0.3, seed + 1);
        const auto one = unlabeled_seg_loss(pred, pseudo, Grid<double>(16, 16, 1.0), cfg);
        const auto b = bce(pred, pseudo);
        const auto d = dice_loss(pred, pseudo, nullptr, cfg.dice_eps);
        worst_one = std::max(worst_one, std::abs(one.value - (b.value + d.value)));
        for (std::size_t i = 0; i < pred.size(); ++i)
            worst_one = std::max(worst_one, std::abs(one.d_logits.data[i] - (b.d_logits.data[i] + d.d_logits.data[i])));
        const auto zero = unlabeled_seg_loss(pred, pseudo, Grid<double>(16, 16, 0.0), cfg);
        worst_zero = std::max(worst_zero, std::abs(zero.value));
        for (double g : zero.d_logits.data) worst_zero = std::max(worst_zero, std::abs(g));
    }
    return {worst_one <= 1e-12 && worst_zero == 0.0,
            fmt("lambda=1 vs bce+dice max |diff| %.1e (value and grad); lambda=0 max |loss, grad| %.1e", worst_one,
                worst_zero)};
}

// ---------------------------------------------------------------------------
// 4. InfoNCE with equal cosines

Outcome info_nce_closed_form() {
    double worst = 0.0;
    std::string d;
    for (int n : {1, 3, 32}) {
        // v on axis 0; every key at the same angle to v, tilted along its own axis
        const std::size_t dim = static_cast<std::size_t>(n) + 2;
        std::vector<double> v(dim, 0.0);
        v[0] = 0.8;
        auto key = [&](std::size_t axis) {
            std::vector<double> k(dim, 0.0);
            k[0] = 0.6;
            k[axis] = 0.8;
            return k;
        };
        const auto pos = key(1);
        std::vector<std::vector<double>> negs;
        for (int j = 0; j < n; ++j) negs.push_back(key(2 + static_cast<std::size_t>(j)));
        const double loss = info_nce(v, pos, negs, 0.07).value;
        const double err = std::abs(loss - std::log(1.0 + n));
        worst = std::max(worst, err);
        d += fmt("N=%d %.9f ", n, loss);
    }
    return {worst < 1e-9, d + fmt("max |diff| vs ln(1+N) %.1e", worst)};
}

// ---------------------------------------------------------------------------
// 5. cumulative IoU

Outcome ciou_oracle() {
    Rng rng(0xACC5);
    double worst = 0.0;
    for (int set = 0; set < 5; ++set) {
        const auto p = random_params(tiny_dims(), rng.next(), 0.8);
        std::vector<Image> images;
        std::vector<TrainItem> items;
        const int n = rng.range(2, 6);
        for (int i = 0; i < n; ++i) {
            images.push_back(random_image(12, 12, 3, rng.next()));
            TrainItem it;
            it.image = static_cast<std::size_t>(i);
            it.query = "segment the square";
            it.target = random_mask(12, 12, rng.uniform(0.1, 0.6), rng.next());
            items.push_back(std::move(it));
        }
        double inter = 0, uni = 0;
        for (const auto& it : items) {
            const auto soft = forward(p, images[it.image], it.query).soft_mask;
            for (int y = 0; y < 12; ++y)
                for (int x = 0; x < 12; ++x) {
                    const bool a = soft(x, y) > 0.5, b = it.target(x, y) != 0;
                    if (a && b) inter += 1;
                    if (a || b) uni += 1;
                }
        }
        worst = std::max(worst, std::abs(evaluate_ciou(p, images, items).ciou - (uni > 0 ? inter / uni : 1.0)));
    }
    const std::vector<IouCounts> pairs{{2, 4}, {0, 6}};
    const double cum = cumulative_iou(pairs);
    const double mean = (2.0 / 4.0 + 0.0 / 6.0) / 2.0;
    const bool ok = worst <= 1e-12 && std::abs(cum - 0.2) < 1e-15 && std::abs(mean - 0.25) < 1e-15;
    return {ok, fmt("5 random sets max |diff| %.1e; (2,4),(0,6): cumulative %.3f vs mean %.3f", worst, cum, mean)};
}

// ---------------------------------------------------------------------------
// 6. conditional relations and attribute wording on 100 images

SpatialRelation relation_oracle(const BinaryMask& target, const BinaryMask& anchor) {
    // centroids and boxes recomputed here; mirrors the documented rule order
    auto stats = [](const BinaryMask& m) {
        double sx = 0, sy = 0, n = 0;
        int x0 = m.width, y0 = m.height, x1 = -1, y1 = -1;
        for (int y = 0; y < m.height; ++y)
            for (int x = 0; x < m.width; ++x)
                if (m(x, y)) {
                    sx += x;
                    sy += y;
                    n += 1;
                    x0 = std::min(x0, x);
                    y0 = std::min(y0, y);
                    x1 = std::max(x1, x);
                    y1 = std::max(y1, y);
                }
        return std::array<double, 6>{sx / n, sy / n, double(x0), double(y0), double(x1), double(y1)};
    };
    const auto t = stats(target), a = stats(anchor);
    const double dx = t[0] - a[0], dy = t[1] - a[1];
    const double gap_x = std::max({0.0, a[2] - t[4] - 1, t[2] - a[4] - 1});
    const double gap_y = std::max({0.0, a[3] - t[5] - 1, t[3] - a[5] - 1});
    if (std::sqrt(gap_x * gap_x + gap_y * gap_y) < kDefaultNextToDist) return SpatialRelation::NextTo;
    if (std::abs(dx) >= std::abs(dy)) return dx > 0 ? SpatialRelation::RightOf : SpatialRelation::LeftOf;
    return dy > 0 ? SpatialRelation::Below : SpatialRelation::Above;
}

Outcome instruction_soundness() {
    ShapesWorldConfig cfg;
    cfg.n_images = 100;
    cfg.seed = 0xACC6;
    const auto ds = generate_shapes_world(cfg);
    std::size_t cond = 0, cond_bad = 0, oracle_bad = 0, attr = 0, attr_bad = 0;
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const auto& s = ds.samples[i];
        const auto ref = image_rel_path(s.id);
        try {
            const auto set = gen_conditional(s.labels, ds.lexicon, i, 3, ref);
            for (const auto& in : set.instructions) {
                ++cond;
                const auto& tm = set.masks.at(in.target_mask_ref);
                const auto& am = set.masks.at(*in.anchor_mask_ref);
                const auto rel = relation_of(instance_from_mask(tm, in.target_class),
                                             instance_from_mask(am, *in.anchor_class));
                cond_bad += rel != *in.relation;
                oracle_bad += relation_oracle(tm, am) != *in.relation;
            }
        } catch (const Error& e) {
            if (e.code() != ErrorCode::InsufficientObjects) throw;
        }
        for (const auto& in : gen_attribute(s.labels, ds.lexicon, i, ref).instructions) {
            ++attr;
            for (const auto& [cls, entry] : ds.lexicon.entries()) {
                const std::regex word("\\b" + entry.name + "\\b", std::regex::icase);
                attr_bad += std::regex_search(in.query_text, word);
            }
        }
    }
    const bool ok = cond > 0 && cond_bad == 0 && oracle_bad == 0 && attr > 0 && attr_bad == 0;
    return {ok, fmt("%zu conditional (%zu relation mismatches, %zu vs independent rule), %zu attribute (%zu name hits)",
                    cond, cond_bad, oracle_bad, attr, attr_bad)};
}

// ---------------------------------------------------------------------------
// 7. CLI determinism

int run_cli(const std::string& cli, const std::string& args, const fs::path& log) {
    const std::string cmd = cli + " " + args + " >" + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome cli_determinism(const std::string& cli, const fs::path& work) {
    const fs::path root = work / "determinism";
    fs::remove_all(root);
    fs::create_directories(root);
    std::string d;
    bool ok = true;
    for (const char* run : {"a", "b"}) {
        const fs::path r = root / run;
        const auto data = (r / "data").string();
        int rc = run_cli(cli, "--seed 11 gen-data --n 40 --out " + data, root / "log.txt");
        rc |= run_cli(cli, "--seed 11 gen-instructions --data " + data + " --out " + (r / "instr").string(),
                      root / "log.txt");
        // identical --data path for both runs so config.json can match byte for byte
        const fs::path shared = root / "shared_data";
        if (std::string(run) == "a") fs::copy(data, shared, fs::copy_options::recursive);
        rc |= run_cli(cli,
                      "--seed 11 --threads 1 train --data " + shared.string() + " --out " + (r / "run").string() +
                          " --stage all --split 0.25 --iterations 300 --lr 0.005",
                      root / "log.txt");
        if (rc != 0) {
            ok = false;
            d += fmt("run %s exited non-zero; ", run);
        }
    }
    for (const char* part : {"data", "instr", "run"}) {
        const auto a = snapshot_tree(root / "a" / part), b = snapshot_tree(root / "b" / part);
        const bool same = !a.empty() && a == b;
        ok = ok && same;
        d += fmt("%s %s (%zu files) ", part, same ? "identical" : "DIFFERENT", a.size());
    }
    return {ok, d};
}

// ---------------------------------------------------------------------------
// 8. component ablation

struct AblationRegime {
    int train_images = 320; // 40 labeled / 280 unlabeled at 1/8
    int heldout_images = 100;
    double ratio = 0.125;
    int color_modes = 6;
    double mode_skew = 1.5;
    long iterations = 300;
    double lr = 5e-3;
    double sigma = 0.001;
    bool unnormalized_pixel_loss = true; // pixel-summed unlabeled term, so sigma keeps its nominal value
    double tau = 0.07;
    double flip_rate = 0.05;
    int boundary = 2;
    std::uint64_t seed_base = 0xACC8000;
    int seeds = 5;
};

struct Variant {
    const char* name;
    bool cvi, ocpl, tfca, unlabeled;
};

Outcome ablation_trend(const AblationRegime& R) {
    const std::array<Variant, 5> variants = {{{"full", true, true, true, true},
                                              {"labeled-only", false, false, false, false},
                                              {"-CVI", false, true, true, true},
                                              {"-OCPL", true, false, true, true},
                                              {"-TFCA", true, true, false, true}}};
    std::array<std::vector<double>, 5> scores;
    for (int s = 0; s < R.seeds; ++s) {
        ShapesWorldConfig sw;
        sw.n_images = R.train_images + R.heldout_images;
        sw.color_modes = R.color_modes;
        sw.mode_skew = R.mode_skew;
        sw.seed = R.seed_base + static_cast<std::uint64_t>(s);
        const auto ds = generate_shapes_world(sw);
        std::vector<std::string> ids;
        for (int i = 0; i < R.train_images; ++i) ids.push_back(ds.samples[i].id);
        const auto split = make_split(ids, R.ratio, sw.seed);

        // held-out attribute and conditional instructions on unseen images
        InstructionSet held;
        for (int i = R.train_images; i < sw.n_images; ++i) {
            const auto& smp = ds.samples[static_cast<std::size_t>(i)];
            const auto sd = instruction_seed(sw.seed ^ 0xE7A1, static_cast<std::size_t>(i));
            held.append(gen_attribute(smp.labels, ds.lexicon, sd, image_rel_path(smp.id)));
            try {
                held.append(gen_conditional(smp.labels, ds.lexicon, sd, 2, image_rel_path(smp.id)));
            } catch (const Error& e) {
                if (e.code() != ErrorCode::InsufficientObjects) throw;
            }
        }
        const auto eval_items = items_from(held, image_index_by_ref(ds));

        for (std::size_t v = 0; v < variants.size(); ++v) {
            TrainConfig cfg;
            cfg.iterations_per_stage = R.iterations;
            cfg.learning_rate = R.lr;
            cfg.loss.sigma = R.sigma;
            cfg.loss.tau = R.tau;
            cfg.loss.unnormalized_pixel_loss = R.unnormalized_pixel_loss;
            cfg.pseudo_noise.flip_rate = R.flip_rate;
            cfg.pseudo_noise.boundary_erode_dilate = R.boundary;
            cfg.seed = sw.seed;
            cfg.use_cvi = variants[v].cvi;
            cfg.use_ocpl = variants[v].ocpl;
            cfg.use_tfca = variants[v].tfca;
            cfg.use_unlabeled = variants[v].unlabeled;
            const auto td = prepare_training_data(ds, split, cfg);
            auto params = init_params(cfg.dims, sw.seed);
            run_stages(params, td, cfg, 1, 3);
            scores[v].push_back(100.0 * evaluate_ciou(params, td.images, eval_items).ciou);
        }
    }
    std::array<double, 5> med{};
    std::string d;
    for (std::size_t v = 0; v < variants.size(); ++v) {
        med[v] = median(scores[v]);
        d += fmt("%s %.2f ", variants[v].name, med[v]);
    }
    bool ok = med[0] - med[1] >= 2.0;
    for (std::size_t v = 2; v < variants.size(); ++v) ok = ok && med[0] >= med[v];
    return {ok, "median held-out cIoU over " + std::to_string(R.seeds) + " seeds: " + d +
                    fmt("(full - labeled-only = %+.2f)", med[0] - med[1])};
}

// ---------------------------------------------------------------------------
// 9. consistency weights near pseudo-label boundaries

Outcome boundary_weights() {
    std::vector<double> gaps;
    std::string d;
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto seed = 0xACC9000 + s;
        ShapesWorldConfig sw;
        sw.n_images = 120;
        sw.seed = seed;
        const auto ds = generate_shapes_world(sw);
        const auto split = make_split(ds, 1.0 / 3.0, seed);
        TrainConfig cfg;
        cfg.iterations_per_stage = 200;
        cfg.learning_rate = 5e-3;
        cfg.seed = seed;
        const auto td = prepare_training_data(ds, split, cfg);
        auto frozen = init_params(cfg.dims, seed);
        run_stages(frozen, td, cfg, 1, 2);

        double band_sum = 0, band_n = 0, inner_sum = 0, inner_n = 0;
        for (auto i : td.unlabeled) {
            PseudoNoise noise{0.0, 2, derive_seed(seed, {i}), 0.5, {}};
            const auto pseudo = noisy_oracle_pseudo_labeler(td.labels[i], noise);
            for (auto cls : std::set<std::uint8_t>(pseudo.data.begin(), pseudo.data.end())) {
                if (cls == kVoid) continue;
                const UnlabeledSample sample{td.images[i], pseudo, cls};
                const auto wp = build_weighted_pseudo(sample, td.db, frozen, i % cfg.K, ConsistencyConfig{});
                const auto& m = wp.pseudo_mask;
                // within 2 px (4-connected) of the mask boundary: inside the 2-dilation, outside the 2-erosion
                const auto outer = dilate4(dilate4(m)), inner = erode4(erode4(m));
                for (std::size_t p = 0; p < m.size(); ++p) {
                    const double w = wp.weights.weights.data[p];
                    if (outer.data[p] && !inner.data[p]) {
                        band_sum += w;
                        band_n += 1;
                    } else {
                        inner_sum += w;
                        inner_n += 1;
                    }
                }
            }
        }
        const double band = band_sum / band_n, interior = inner_sum / inner_n;
        gaps.push_back(interior - band);
        d += fmt("%.4f/%.4f ", band, interior);
    }
    const double g = median(gaps);
    return {g > 0.0, "boundary/interior mean weight per seed: " + d + fmt("median gap %+.4f", g)};
}

// ---------------------------------------------------------------------------
// 10. checkpoint round trip

Outcome checkpoint_round_trip(const fs::path& work) {
    const fs::path dir = work / "checkpoint";
    fs::create_directories(dir);
    bool identical = true;
    for (std::uint64_t s = 0; s < 5; ++s) {
        ModelDims dims;
        const auto p = random_params(dims, 0xACCA + s);
        save_checkpoint(dir / "a.bin", p, {dims, s, 3, 900});
        const auto ck = load_checkpoint(dir / "a.bin", dims);
        save_checkpoint(dir / "b.bin", ck.params, ck.header);
        identical = identical && read_bytes(dir / "a.bin") == read_bytes(dir / "b.bin");
    }
    ModelDims other;
    other.d += 4;
    std::string code = "none";
    try {
        load_checkpoint(dir / "a.bin", other);
    } catch (const Error& e) {
        code = std::string(to_string(e.code()));
    }
    return {identical && code == "CheckpointMismatch",
            fmt("save-load-save %s over 5 models; mismatched dims -> %s", identical ? "bitwise identical" : "DIFFERS",
                code.c_str())};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::string cli, work = "acceptance_work";
    int only = 0;
    app.add_option("--cli", cli, "Path to the cora CLI binary")->required();
    app.add_option("--work", work, "Scratch directory");
    app.add_option("--only", only, "Run a single criterion (1-10)")->check(CLI::Range(1, 10));
    CLI11_PARSE(app, argc, argv);
    fs::create_directories(work);

    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
        {"gradient fidelity", gradient_fidelity},
        {"variance oracle", variance_oracle},
        {"weighted loss reduction", weighted_loss_reduction},
        {"InfoNCE closed form", info_nce_closed_form},
        {"cIoU correctness", ciou_oracle},
        {"instruction/geometry soundness", instruction_soundness},
        {"CLI determinism", [&] { return cli_determinism(cli, work); }},
        {"ablation trend", [] { return ablation_trend(AblationRegime{}); }},
        {"boundary weights", boundary_weights},
        {"checkpoint round trip", [&] { return checkpoint_round_trip(work); }},
    };

    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        if (only && static_cast<int>(i) + 1 != only) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        failures += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  [" << i + 1 << "] " << criteria[i].first << " (" << fmt("%.1f", secs)
                  << " s): " << o.detail << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
