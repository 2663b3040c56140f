#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cora/error.hpp"
#include "cora/grid.hpp"
#include "cora/instructgen.hpp"
#include "cora/rng.hpp"

namespace cora {

/// Architecture sizes. Parameter count is a pure function of these.
struct ModelDims {
    int channels = 3;   // image channels; one anchor-mask channel is appended
    int patch = 4;      // p
    int d = 16;         // token / feature width
    int d_q = 16;       // query embedding width
    int hidden = 32;    // token MLP hidden width
    int hash_size = 256;
    int n_classes = 4;

    int patch_dim() const { return patch * patch * (channels + 1); }
    int query_in() const { return d_q + 4; }

    friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

inline nlohmann::json to_json(const ModelDims& m) {
    return {{"channels", m.channels}, {"patch", m.patch},         {"d", m.d},
            {"d_q", m.d_q},           {"hidden", m.hidden},       {"hash_size", m.hash_size},
            {"n_classes", m.n_classes}};
}

inline ModelDims dims_from_json(const nlohmann::json& j) {
    ModelDims m;
    m.channels = j.at("channels").get<int>();
    m.patch = j.at("patch").get<int>();
    m.d = j.at("d").get<int>();
    m.d_q = j.at("d_q").get<int>();
    m.hidden = j.at("hidden").get<int>();
    m.hash_size = j.at("hash_size").get<int>();
    m.n_classes = j.at("n_classes").get<int>();
    return m;
}

inline void validate(const ModelDims& m) {
    if (m.channels < 1 || m.patch < 1 || m.d < 1 || m.d_q < 1 || m.hidden < 1 || m.hash_size < 1 || m.n_classes < 1)
        fail(ErrorCode::ConfigError, "model dims must all be positive");
}

/// Tensors in their fixed storage / checkpoint order.
enum class Tensor : int { PatchProj, QueryEmbed, QueryProj, TokenW1, TokenB1, TokenW2, TokenB2, DecodeBias, ResponseHead };
inline constexpr int kTensorCount = 9;

inline constexpr std::array<std::string_view, kTensorCount> kTensorNames = {
    "patch_proj", "query_embed", "query_proj", "token_w1", "token_b1",
    "token_w2",   "token_b2",    "decode_bias", "response_head"};

struct TensorShape {
    int rows = 0;
    int cols = 0;
    std::size_t offset = 0;
    std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

inline std::array<TensorShape, kTensorCount> tensor_layout(const ModelDims& m) {
    std::array<TensorShape, kTensorCount> s{};
    s[0] = {m.patch_dim(), m.d};
    s[1] = {m.hash_size, m.d_q};
    s[2] = {m.query_in(), m.d};
    s[3] = {2 * m.d, m.hidden};
    s[4] = {1, m.hidden};
    s[5] = {m.hidden, m.d};
    s[6] = {1, m.d};
    s[7] = {1, 1};
    s[8] = {m.d, m.n_classes};
    std::size_t off = 0;
    for (auto& t : s) {
        t.offset = off;
        off += t.size();
    }
    return s;
}

inline std::size_t parameter_count(const ModelDims& m) {
    const auto s = tensor_layout(m);
    return s.back().offset + s.back().size();
}

/// Row-major matrix view; rows index the input side, columns the output side.
template <class T>
struct MatView {
    T* data;
    int rows;
    int cols;
    T& operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
    T* row(int r) const { return data + static_cast<std::size_t>(r) * cols; }
};

/// Flat storage of every tensor, shared by parameters, gradients and optimizer moments.
class ParamBuffer {
public:
    ParamBuffer() = default;
    explicit ParamBuffer(const ModelDims& dims) : dims_(dims), layout_(tensor_layout(dims)), values_(parameter_count(dims), 0.0) {}

    const ModelDims& dims() const { return dims_; }
    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }
    std::size_t size() const { return values_.size(); }
    const TensorShape& shape(Tensor t) const { return layout_[static_cast<int>(t)]; }

    MatView<double> mat(Tensor t) {
        const auto& s = shape(t);
        return {values_.data() + s.offset, s.rows, s.cols};
    }
    MatView<const double> mat(Tensor t) const {
        const auto& s = shape(t);
        return {values_.data() + s.offset, s.rows, s.cols};
    }
    std::span<double> tensor(Tensor t) { return std::span<double>(values_).subspan(shape(t).offset, shape(t).size()); }
    std::span<const double> tensor(Tensor t) const {
        return std::span<const double>(values_).subspan(shape(t).offset, shape(t).size());
    }

    double decode_bias() const { return values_[shape(Tensor::DecodeBias).offset]; }
    double& decode_bias() { return values_[shape(Tensor::DecodeBias).offset]; }

    void fill(double v) { std::fill(values_.begin(), values_.end(), v); }
    void scale(double s) {
        for (auto& v : values_) v *= s;
    }
    void add_scaled(const ParamBuffer& other, double s) {
        if (other.dims_ != dims_) fail(ErrorCode::ShapeError, "parameter buffers have different dims");
        for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += s * other.values_[i];
    }
    bool all_finite() const {
        for (double v : values_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    /// FNV-style hash over the raw words; used to tie traces to the parameters that produced them.
    std::uint64_t fingerprint() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (double v : values_) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof bits);
            h = (h ^ bits) * 0x100000001b3ull;
            h ^= h >> 29;
        }
        return h;
    }

    friend bool operator==(const ParamBuffer& a, const ParamBuffer& b) {
        return a.dims_ == b.dims_ && a.values_ == b.values_;
    }

private:
    ModelDims dims_{};
    std::array<TensorShape, kTensorCount> layout_{};
    std::vector<double> values_;
};

struct ModelParams : ParamBuffer {
    using ParamBuffer::ParamBuffer;
};

struct ParamGrads : ParamBuffer {
    using ParamBuffer::ParamBuffer;
};

/// Uniform in [-s, s], s = 1/sqrt(fan_in); biases start at zero.
inline ModelParams init_params(const ModelDims& dims, std::uint64_t seed) {
    validate(dims);
    ModelParams p(dims);
    Rng rng(derive_seed(seed, {0x1417}));
    for (int t = 0; t < kTensorCount; ++t) {
        const auto tensor = static_cast<Tensor>(t);
        if (tensor == Tensor::TokenB1 || tensor == Tensor::TokenB2 || tensor == Tensor::DecodeBias) continue;
        const int fan_in = tensor == Tensor::QueryEmbed ? 1 : p.shape(tensor).rows;
        const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (auto& v : p.tensor(tensor)) v = rng.uniform(-s, s);
    }
    return p;
}

inline nlohmann::json describe(const ModelDims& dims) {
    nlohmann::json tensors = nlohmann::json::array();
    const auto layout = tensor_layout(dims);
    for (int t = 0; t < kTensorCount; ++t)
        tensors.push_back({{"name", kTensorNames[t]}, {"rows", layout[t].rows}, {"cols", layout[t].cols}});
    return {{"dims", to_json(dims)}, {"parameter_count", parameter_count(dims)}, {"tensors", tensors}};
}

// ---------------------------------------------------------------------------

enum class TokenSource { Labeled, Unlabeled };

struct SsegToken {
    std::vector<double> vec;
    std::uint8_t class_id = 0;
    TokenSource source = TokenSource::Labeled;
};

struct QueryEncoding {
    std::vector<double> features;                 // d_q + 4
    std::vector<std::pair<int, double>> buckets;  // (row of query_embed, averaging weight)
};

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

/// Bag-of-buckets average of hashed lowercase word embeddings, followed by the
/// anchor box (zeros when absent).
inline QueryEncoding encode_query_detailed(const ModelParams& params, std::string_view query_text,
                                           const std::optional<NormBBox>& anchor_bbox) {
    const auto& dims = params.dims();
    const auto tokens = word_tokens(query_text);
    if (tokens.empty()) fail(ErrorCode::EmptyQuery, "query has no word tokens");
    std::map<int, int> counts;
    for (const auto& t : tokens) ++counts[static_cast<int>(fnv1a(t) % static_cast<std::uint64_t>(dims.hash_size))];
    QueryEncoding enc;
    enc.features.assign(static_cast<std::size_t>(dims.query_in()), 0.0);
    const auto embed = params.mat(Tensor::QueryEmbed);
    const double n = static_cast<double>(tokens.size());
    for (const auto& [bucket, count] : counts) {
        const double w = count / n;
        enc.buckets.emplace_back(bucket, w);
        for (int k = 0; k < dims.d_q; ++k) enc.features[k] += w * embed(bucket, k);
    }
    if (anchor_bbox)
        for (int k = 0; k < 4; ++k) enc.features[dims.d_q + k] = (*anchor_bbox)[k];
    return enc;
}

inline std::vector<double> encode_query(const ModelParams& params, std::string_view query_text,
                                        const std::optional<NormBBox>& anchor_bbox = std::nullopt) {
    return encode_query_detailed(params, query_text, anchor_bbox).features;
}

struct ForwardTrace {
    int height = 0;
    int width = 0;
    int grid_h = 0;
    int grid_w = 0;
    std::vector<double> patches;        // n_cells x patch_dim
    std::vector<double> feature_grid;   // n_cells x d, row-major over (a, b)
    QueryEncoding query;
    std::vector<double> q;              // d
    std::vector<double> mlp_in;         // [q ; pooled], 2d
    std::vector<double> hidden;         // h
    std::vector<double> sseg;           // d
    std::vector<double> cell_logits;    // n_cells
    Grid<double> mask_logits;
    SoftMask soft_mask;
    std::vector<double> response_logits;
    std::uint64_t params_fingerprint = 0;

    int n_cells() const { return grid_h * grid_w; }

    SsegToken token(std::uint8_t class_id, TokenSource source) const { return {sseg, class_id, source}; }
};

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// Image (H x W x C) plus optional anchor mask -> trace. H and W must be multiples of the patch size.
inline ForwardTrace forward(const ModelParams& params, const Image& image, std::string_view query_text,
                            const BinaryMask* anchor_mask = nullptr,
                            const std::optional<NormBBox>& anchor_bbox = std::nullopt) {
    const auto& dims = params.dims();
    const int p = dims.patch;
    if (image.channels != dims.channels)
        fail(ErrorCode::ShapeError, "image has " + std::to_string(image.channels) + " channels, model expects " +
                                        std::to_string(dims.channels));
    if (image.width <= 0 || image.height <= 0 || image.width % p || image.height % p)
        fail(ErrorCode::ShapeError, "image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                                        " not divisible by patch " + std::to_string(p));
    if (anchor_mask && (anchor_mask->width != image.width || anchor_mask->height != image.height))
        fail(ErrorCode::ShapeError, "anchor mask dims differ from image");

    ForwardTrace tr;
    tr.height = image.height;
    tr.width = image.width;
    tr.grid_h = image.height / p;
    tr.grid_w = image.width / p;
    tr.params_fingerprint = params.fingerprint();
    const int n_cells = tr.n_cells();
    const int pd = dims.patch_dim();
    const int d = dims.d;
    const int C = dims.channels;

    // Patch vectors: (dy, dx, channel) with the anchor channel last.
    tr.patches.assign(static_cast<std::size_t>(n_cells) * pd, 0.0);
    for (int a = 0; a < tr.grid_h; ++a)
        for (int b = 0; b < tr.grid_w; ++b) {
            double* dst = tr.patches.data() + static_cast<std::size_t>(a * tr.grid_w + b) * pd;
            for (int dy = 0; dy < p; ++dy)
                for (int dx = 0; dx < p; ++dx) {
                    const int x = b * p + dx, y = a * p + dy;
                    double* px = dst + (dy * p + dx) * (C + 1);
                    for (int c = 0; c < C; ++c) px[c] = image.at(x, y, c);
                    px[C] = anchor_mask ? ((*anchor_mask)(x, y) ? 1.0 : 0.0) : 0.0;
                }
        }

    const auto P = params.mat(Tensor::PatchProj);
    tr.feature_grid.assign(static_cast<std::size_t>(n_cells) * d, 0.0);
    std::vector<double> pooled(d, 0.0);
    for (int cell = 0; cell < n_cells; ++cell) {
        const double* x = tr.patches.data() + static_cast<std::size_t>(cell) * pd;
        double* f = tr.feature_grid.data() + static_cast<std::size_t>(cell) * d;
        for (int i = 0; i < pd; ++i) {
            const double xi = x[i];
            if (xi == 0.0) continue;
            const double* w = P.row(i);
            for (int k = 0; k < d; ++k) f[k] += xi * w[k];
        }
        for (int k = 0; k < d; ++k) {
            f[k] = std::tanh(f[k]);
            pooled[k] += f[k];
        }
    }
    for (auto& v : pooled) v /= n_cells;

    tr.query = encode_query_detailed(params, query_text, anchor_bbox);
    const auto Q = params.mat(Tensor::QueryProj);
    tr.q.assign(d, 0.0);
    for (int i = 0; i < dims.query_in(); ++i)
        for (int k = 0; k < d; ++k) tr.q[k] += tr.query.features[i] * Q(i, k);
    for (auto& v : tr.q) v = std::tanh(v);

    tr.mlp_in.resize(2 * d);
    std::copy(tr.q.begin(), tr.q.end(), tr.mlp_in.begin());
    std::copy(pooled.begin(), pooled.end(), tr.mlp_in.begin() + d);

    const auto W1 = params.mat(Tensor::TokenW1);
    const auto B1 = params.tensor(Tensor::TokenB1);
    tr.hidden.assign(B1.begin(), B1.end());
    for (int i = 0; i < 2 * d; ++i)
        for (int k = 0; k < dims.hidden; ++k) tr.hidden[k] += tr.mlp_in[i] * W1(i, k);
    for (auto& v : tr.hidden) v = std::tanh(v);

    const auto W2 = params.mat(Tensor::TokenW2);
    const auto B2 = params.tensor(Tensor::TokenB2);
    tr.sseg.assign(B2.begin(), B2.end());
    for (int i = 0; i < dims.hidden; ++i)
        for (int k = 0; k < d; ++k) tr.sseg[k] += tr.hidden[i] * W2(i, k);
    for (auto& v : tr.sseg) v = std::tanh(v);

    const double bias = params.decode_bias();
    tr.cell_logits.assign(n_cells, bias);
    for (int cell = 0; cell < n_cells; ++cell) {
        const double* f = tr.feature_grid.data() + static_cast<std::size_t>(cell) * d;
        double s = 0.0;
        for (int k = 0; k < d; ++k) s += f[k] * tr.sseg[k];
        tr.cell_logits[cell] += s;
    }
    tr.mask_logits = Grid<double>(image.width, image.height);
    tr.soft_mask = SoftMask(image.width, image.height);
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x) {
            const double z = tr.cell_logits[(y / p) * tr.grid_w + x / p];
            tr.mask_logits(x, y) = z;
            tr.soft_mask(x, y) = sigmoid(z);
        }

    const auto R = params.mat(Tensor::ResponseHead);
    tr.response_logits.assign(dims.n_classes, 0.0);
    for (int k = 0; k < d; ++k)
        for (int c = 0; c < dims.n_classes; ++c) tr.response_logits[c] += tr.sseg[k] * R(k, c);
    return tr;
}

/// Adds scale * dLoss/dparams into `grads`. Empty spans stand for zero upstream gradients.
inline void backward_into(const ModelParams& params, const ForwardTrace& tr, const Grid<double>& d_mask_logits,
                          std::span<const double> d_response_logits, std::span<const double> d_sseg_external,
                          ParamGrads& grads, double scale = 1.0) {
    const auto& dims = params.dims();
    if (tr.params_fingerprint != params.fingerprint())
        fail(ErrorCode::TraceMismatch, "trace was produced by different parameters");
    if (grads.dims() != dims) fail(ErrorCode::ShapeError, "gradient buffer dims differ from params");
    const bool has_mask_grad = !d_mask_logits.data.empty();
    if (has_mask_grad && (d_mask_logits.width != tr.width || d_mask_logits.height != tr.height))
        fail(ErrorCode::TraceMismatch, "mask gradient dims differ from trace");
    if (!d_response_logits.empty() && d_response_logits.size() != static_cast<std::size_t>(dims.n_classes))
        fail(ErrorCode::TraceMismatch, "response gradient size differs from n_classes");
    if (!d_sseg_external.empty() && d_sseg_external.size() != static_cast<std::size_t>(dims.d))
        fail(ErrorCode::TraceMismatch, "token gradient size differs from d");

    const int d = dims.d;
    const int p = dims.patch;
    const int pd = dims.patch_dim();
    const int n_cells = tr.n_cells();

    // Nearest-upsampling adjoint: each cell collects its p x p pixels.
    std::vector<double> d_cell(n_cells, 0.0);
    if (has_mask_grad)
        for (int y = 0; y < tr.height; ++y)
            for (int x = 0; x < tr.width; ++x) d_cell[(y / p) * tr.grid_w + x / p] += scale * d_mask_logits(x, y);

    double d_bias = 0.0;
    std::vector<double> d_sseg(d, 0.0);
    std::vector<double> d_feat(static_cast<std::size_t>(n_cells) * d, 0.0);
    for (int cell = 0; cell < n_cells; ++cell) {
        const double g = d_cell[cell];
        if (g == 0.0) continue;
        d_bias += g;
        const double* f = tr.feature_grid.data() + static_cast<std::size_t>(cell) * d;
        double* df = d_feat.data() + static_cast<std::size_t>(cell) * d;
        for (int k = 0; k < d; ++k) {
            df[k] += g * tr.sseg[k];
            d_sseg[k] += g * f[k];
        }
    }
    grads.decode_bias() += d_bias;

    if (!d_response_logits.empty()) {
        const auto R = params.mat(Tensor::ResponseHead);
        auto dR = grads.mat(Tensor::ResponseHead);
        for (int k = 0; k < d; ++k)
            for (int c = 0; c < dims.n_classes; ++c) {
                const double g = scale * d_response_logits[c];
                dR(k, c) += tr.sseg[k] * g;
                d_sseg[k] += R(k, c) * g;
            }
    }
    if (!d_sseg_external.empty())
        for (int k = 0; k < d; ++k) d_sseg[k] += scale * d_sseg_external[k];

    // sseg = tanh(W2^T hidden + b2)
    std::vector<double> d_u2(d);
    for (int k = 0; k < d; ++k) d_u2[k] = d_sseg[k] * (1.0 - tr.sseg[k] * tr.sseg[k]);
    {
        const auto W2 = params.mat(Tensor::TokenW2);
        auto dW2 = grads.mat(Tensor::TokenW2);
        auto dB2 = grads.tensor(Tensor::TokenB2);
        for (int k = 0; k < d; ++k) dB2[k] += d_u2[k];
        std::vector<double> d_hidden(dims.hidden, 0.0);
        for (int i = 0; i < dims.hidden; ++i)
            for (int k = 0; k < d; ++k) {
                dW2(i, k) += tr.hidden[i] * d_u2[k];
                d_hidden[i] += W2(i, k) * d_u2[k];
            }
        // hidden = tanh(W1^T [q; pooled] + b1)
        std::vector<double> d_u1(dims.hidden);
        for (int i = 0; i < dims.hidden; ++i) d_u1[i] = d_hidden[i] * (1.0 - tr.hidden[i] * tr.hidden[i]);
        const auto W1 = params.mat(Tensor::TokenW1);
        auto dW1 = grads.mat(Tensor::TokenW1);
        auto dB1 = grads.tensor(Tensor::TokenB1);
        for (int i = 0; i < dims.hidden; ++i) dB1[i] += d_u1[i];
        std::vector<double> d_in(2 * d, 0.0);
        for (int j = 0; j < 2 * d; ++j)
            for (int i = 0; i < dims.hidden; ++i) {
                dW1(j, i) += tr.mlp_in[j] * d_u1[i];
                d_in[j] += W1(j, i) * d_u1[i];
            }

        // q = tanh(Q^T enc)
        std::vector<double> d_uq(d);
        for (int k = 0; k < d; ++k) d_uq[k] = d_in[k] * (1.0 - tr.q[k] * tr.q[k]);
        const auto Q = params.mat(Tensor::QueryProj);
        auto dQ = grads.mat(Tensor::QueryProj);
        std::vector<double> d_enc(dims.query_in(), 0.0);
        for (int i = 0; i < dims.query_in(); ++i)
            for (int k = 0; k < d; ++k) {
                dQ(i, k) += tr.query.features[i] * d_uq[k];
                d_enc[i] += Q(i, k) * d_uq[k];
            }
        auto dE = grads.mat(Tensor::QueryEmbed);
        for (const auto& [bucket, w] : tr.query.buckets)
            for (int k = 0; k < dims.d_q; ++k) dE(bucket, k) += w * d_enc[k];

        // pooled = mean over cells
        for (int cell = 0; cell < n_cells; ++cell) {
            double* df = d_feat.data() + static_cast<std::size_t>(cell) * d;
            for (int k = 0; k < d; ++k) df[k] += d_in[d + k] / n_cells;
        }
    }

    // feature = tanh(P^T patch)
    auto dP = grads.mat(Tensor::PatchProj);
    for (int cell = 0; cell < n_cells; ++cell) {
        const double* f = tr.feature_grid.data() + static_cast<std::size_t>(cell) * d;
        double* df = d_feat.data() + static_cast<std::size_t>(cell) * d;
        for (int k = 0; k < d; ++k) df[k] *= 1.0 - f[k] * f[k];
        const double* x = tr.patches.data() + static_cast<std::size_t>(cell) * pd;
        for (int i = 0; i < pd; ++i) {
            const double xi = x[i];
            if (xi == 0.0) continue;
            double* row = dP.row(i);
            for (int k = 0; k < d; ++k) row[k] += xi * df[k];
        }
    }
}

inline ParamGrads backward(const ModelParams& params, const ForwardTrace& tr, const Grid<double>& d_mask_logits,
                           std::span<const double> d_response_logits, std::span<const double> d_sseg_external) {
    ParamGrads g(params.dims());
    backward_into(params, tr, d_mask_logits, d_response_logits, d_sseg_external, g);
    return g;
}

} // namespace cora
