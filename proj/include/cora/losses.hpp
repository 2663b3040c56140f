#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cora/error.hpp"
#include "cora/grid.hpp"
#include "cora/model.hpp"
#include "cora/tokenbank.hpp"

namespace cora {

struct LossConfig {
    double alpha = 1.0;   // text (class) loss weight
    double sigma = 0.001; // unlabeled branch weight
    double tau = 0.07;    // contrastive temperature
    double dice_eps = 1e-6;
    double weight_floor_eps = 1e-8;
    bool unnormalized_pixel_loss = false; // unnormalized sum_i w_i (BCE_i + Dice) instead of the normalized form
};

inline void validate(const LossConfig& c) {
    if (!(c.alpha >= 0) || !(c.sigma >= 0)) fail(ErrorCode::ConfigError, "alpha and sigma must be >= 0");
    if (!(c.tau > 0)) fail(ErrorCode::ConfigError, "tau must be > 0");
    if (!(c.dice_eps > 0) || !(c.weight_floor_eps > 0)) fail(ErrorCode::ConfigError, "eps values must be > 0");
}

inline constexpr double kProbClamp = 1e-7;

/// A scalar over a mask plus its gradient with respect to the mask logits.
struct PixelLoss {
    double value = 0.0;
    Grid<double> d_logits;
};

struct LossValue {
    double total = 0.0;
    std::map<std::string, double> parts;
    Grid<double> d_mask_logits;
    std::vector<double> d_response_logits;
};

inline double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

inline double bce_term(double p, bool y) {
    const double c = clamp_prob(p);
    return y ? -std::log(c) : -std::log(1.0 - c);
}

/// Mean pixel BCE; gradient (p - y) / N per logit.
inline PixelLoss bce(const SoftMask& pred, const BinaryMask& target) {
    require_same_dims(pred, target, "bce");
    const std::size_t n = pred.size();
    PixelLoss out{0.0, Grid<double>(pred.width, pred.height)};
    if (n == 0) return out;
    const double inv_n = 1.0 / static_cast<double>(n);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const bool y = target.data[i] != 0;
        s += bce_term(pred.data[i], y);
        out.d_logits.data[i] = (pred.data[i] - (y ? 1.0 : 0.0)) * inv_n;
    }
    out.value = s * inv_n;
    return out;
}

/// 1 - (2 S_py + eps) / (S_p + S_y + eps). With weights every sum carries w_i.
inline PixelLoss dice_loss(const SoftMask& pred, const BinaryMask& target, const Grid<double>* weights = nullptr,
                           double eps = 1e-6) {
    require_same_dims(pred, target, "dice_loss");
    if (weights) require_same_dims(pred, *weights, "dice_loss weights");
    const std::size_t n = pred.size();
    double s_py = 0.0, s_p = 0.0, s_y = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double w = weights ? weights->data[i] : 1.0;
        const double p = pred.data[i];
        const double y = target.data[i] ? 1.0 : 0.0;
        s_py += w * p * y;
        s_p += w * p;
        s_y += w * y;
    }
    const double num = 2.0 * s_py + eps;
    const double den = s_p + s_y + eps;
    PixelLoss out{1.0 - num / den, Grid<double>(pred.width, pred.height)};
    // d/dp_i = -(2 w_i y_i den - num w_i) / den^2, then dp/dz = p (1 - p)
    const double inv_den2 = 1.0 / (den * den);
    for (std::size_t i = 0; i < n; ++i) {
        const double w = weights ? weights->data[i] : 1.0;
        const double p = pred.data[i];
        const double y = target.data[i] ? 1.0 : 0.0;
        const double d_p = -(2.0 * w * y * den - num * w) * inv_den2;
        out.d_logits.data[i] = d_p * p * (1.0 - p);
    }
    return out;
}

struct ClassLoss {
    double value = 0.0;
    std::vector<double> d_logits;
};

/// Softmax cross-entropy against a single target index.
inline ClassLoss cross_entropy(std::span<const double> logits, int target) {
    if (target < 0 || static_cast<std::size_t>(target) >= logits.size())
        fail(ErrorCode::UnknownClass, "target class " + std::to_string(target) + " outside response head");
    const double m = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double l : logits) z += std::exp(l - m);
    const double log_z = m + std::log(z);
    ClassLoss out{log_z - logits[target], std::vector<double>(logits.size())};
    for (std::size_t c = 0; c < logits.size(); ++c) out.d_logits[c] = std::exp(logits[c] - log_z);
    out.d_logits[target] -= 1.0;
    return out;
}

/// alpha * CE(response) + BCE + Dice on a labeled pass.
inline LossValue labeled_loss(const ForwardTrace& trace, const BinaryMask& gt_mask, std::uint8_t gt_class,
                              const LossConfig& cfg) {
    const auto b = bce(trace.soft_mask, gt_mask);
    const auto dl = dice_loss(trace.soft_mask, gt_mask, nullptr, cfg.dice_eps);
    const auto ce = cross_entropy(trace.response_logits, gt_class);
    LossValue out;
    out.parts = {{"bce", b.value}, {"dice", dl.value}, {"ce", ce.value}};
    out.total = cfg.alpha * ce.value + b.value + dl.value;
    out.d_mask_logits = b.d_logits;
    for (std::size_t i = 0; i < out.d_mask_logits.size(); ++i) out.d_mask_logits.data[i] += dl.d_logits.data[i];
    out.d_response_logits = ce.d_logits;
    for (auto& g : out.d_response_logits) g *= cfg.alpha;
    return out;
}

/// Pixel-weighted pseudo-label loss. Default form: sum_i w_i BCE_i / max(sum_i w_i, floor)
/// plus w-weighted soft Dice. Weights are constants (no gradient flows into them).
inline PixelLoss unlabeled_seg_loss(const SoftMask& pred, const BinaryMask& pseudo, const Grid<double>& weights,
                                    const LossConfig& cfg) {
    require_same_dims(pred, pseudo, "unlabeled_seg_loss");
    require_same_dims(pred, weights, "unlabeled_seg_loss weights");
    const std::size_t n = pred.size();
    PixelLoss out{0.0, Grid<double>(pred.width, pred.height)};
    double w_sum = 0.0, weighted_bce = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        w_sum += weights.data[i];
        if (weights.data[i] != 0.0) weighted_bce += weights.data[i] * bce_term(pred.data[i], pseudo.data[i] != 0);
    }
    if (cfg.unnormalized_pixel_loss) {
        const auto dl = dice_loss(pred, pseudo, nullptr, cfg.dice_eps);
        out.value = weighted_bce + w_sum * dl.value;
        for (std::size_t i = 0; i < n; ++i) {
            const double y = pseudo.data[i] ? 1.0 : 0.0;
            out.d_logits.data[i] = weights.data[i] * (pred.data[i] - y) + w_sum * dl.d_logits.data[i];
        }
        return out;
    }
    const double norm = 1.0 / std::max(w_sum, cfg.weight_floor_eps);
    const auto dl = dice_loss(pred, pseudo, &weights, cfg.dice_eps);
    out.value = weighted_bce * norm + dl.value;
    for (std::size_t i = 0; i < n; ++i) {
        const double y = pseudo.data[i] ? 1.0 : 0.0;
        out.d_logits.data[i] = weights.data[i] * (pred.data[i] - y) * norm + dl.d_logits.data[i];
    }
    return out;
}

struct TokenLoss {
    double value = 0.0;
    std::vector<double> d_v;
};

inline double norm2(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    const double na = norm2(a), nb = norm2(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (na * nb);
}

/// -log( e^{cos(v,k+)/tau} / (e^{cos(v,k+)/tau} + sum e^{cos(v,k-)/tau}) ) and its gradient in v.
/// Bank vectors are constants.
inline TokenLoss info_nce(std::span<const double> v, std::span<const double> positive,
                          const std::vector<std::vector<double>>& negatives, double tau) {
    const std::size_t d = v.size();
    TokenLoss out{0.0, std::vector<double>(d, 0.0)};
    const double nv = norm2(v);
    if (nv == 0.0) return out;
    std::vector<std::span<const double>> keys;
    keys.push_back(positive);
    for (const auto& n : negatives) keys.emplace_back(n);
    std::vector<double> sims(keys.size());
    for (std::size_t j = 0; j < keys.size(); ++j) {
        if (keys[j].size() != d) fail(ErrorCode::DimensionMismatch, "bank vector width differs from token width");
        sims[j] = cosine(v, keys[j]);
    }
    const double m = *std::max_element(sims.begin(), sims.end()) / tau;
    double z = 0.0;
    for (double s : sims) z += std::exp(s / tau - m);
    const double log_z = m + std::log(z);
    out.value = log_z - sims[0] / tau;
    // dL/ds_j = (softmax_j - [j == 0]) / tau; ds/dv = k/(|v||k|) - s v/|v|^2
    for (std::size_t j = 0; j < keys.size(); ++j) {
        const double nk = norm2(keys[j]);
        if (nk == 0.0) continue;
        const double g = (std::exp(sims[j] / tau - log_z) - (j == 0 ? 1.0 : 0.0)) / tau;
        for (std::size_t i = 0; i < d; ++i)
            out.d_v[i] += g * (keys[j][i] / (nv * nk) - sims[j] * v[i] / (nv * nv));
    }
    return out;
}

struct ContrastiveLoss {
    double value = 0.0;
    std::vector<std::vector<double>> d_anchors;
    std::size_t active = 0; // anchors that had both a positive and a negative
};

/// Sum of InfoNCE terms over unlabeled anchors against the bank; anchors
/// lacking a positive or any negative contribute zero.
inline ContrastiveLoss contrastive_loss(const std::vector<SsegToken>& anchors, const TokenBank& bank,
                                        const LossConfig& cfg, std::size_t n_neg, std::uint64_t seed) {
    validate(cfg);
    ContrastiveLoss out;
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        const auto& v = anchors[a];
        out.d_anchors.emplace_back(v.vec.size(), 0.0);
        const auto draw = bank.sample(v.class_id, n_neg, derive_seed(seed, {a}));
        if (!draw.positive || draw.negatives.empty()) continue;
        auto term = info_nce(v.vec, *draw.positive, draw.negatives, cfg.tau);
        out.value += term.value;
        out.d_anchors.back() = std::move(term.d_v);
        ++out.active;
    }
    return out;
}

/// L^l + sigma (L^u_seg + L^u_t).
inline double total_loss(const LossValue& labeled, double unlab_seg, double unlab_tok, const LossConfig& cfg) {
    if (!std::isfinite(labeled.total) || !std::isfinite(unlab_seg) || !std::isfinite(unlab_tok))
        fail(ErrorCode::NonFinite, "loss component is not finite");
    const double l = labeled.total + cfg.sigma * (unlab_seg + unlab_tok);
    if (!std::isfinite(l)) fail(ErrorCode::NonFinite, "total loss is not finite");
    return l;
}

} // namespace cora
