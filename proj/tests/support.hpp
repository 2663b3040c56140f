#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include <unistd.h>

#include "cora/cora.hpp"

namespace cora::testing {

/// Small config used by every gradient check: d=8, 16x16 images, p=4.
inline ModelDims tiny_dims() {
    ModelDims d;
    d.patch = 4;
    d.d = 8;
    d.d_q = 8;
    d.hidden = 12;
    d.hash_size = 32;
    d.n_classes = 4;
    return d;
}

inline Image random_image(int w, int h, int c, std::uint64_t seed) {
    Rng rng(seed);
    Image img(w, h, c);
    for (auto& v : img.data) v = rng.uniform();
    return img;
}

inline BinaryMask random_mask(int w, int h, double p, std::uint64_t seed) {
    Rng rng(seed);
    BinaryMask m(w, h);
    for (auto& v : m.data) v = rng.bernoulli(p);
    return m;
}

inline SoftMask random_soft(int w, int h, std::uint64_t seed, double lo = 0.02, double hi = 0.98) {
    Rng rng(seed);
    SoftMask m(w, h);
    for (auto& v : m.data) v = rng.uniform(lo, hi);
    return m;
}

/// init_params scaled up so the tanh layers sit away from their linear regime.
inline ModelParams random_params(const ModelDims& dims, std::uint64_t seed, double scale = 1.5) {
    auto p = init_params(dims, seed);
    p.scale(scale);
    Rng rng(derive_seed(seed, {77}));
    p.decode_bias() = rng.uniform(-0.5, 0.5);
    for (auto& b : p.tensor(Tensor::TokenB1)) b = rng.uniform(-0.2, 0.2);
    for (auto& b : p.tensor(Tensor::TokenB2)) b = rng.uniform(-0.2, 0.2);
    return p;
}

struct GradCheck {
    double rel_error = 0.0;     // ||analytic - numeric|| / max(||analytic||, ||numeric||)
    double max_abs_diff = 0.0;
    double analytic_norm = 0.0;
};

/// Central differences of `loss` over every parameter, compared against `analytic`.
inline GradCheck check_gradient(const ModelParams& params, const ParamGrads& analytic,
                                const std::function<double(const ModelParams&)>& loss, double eps = 1e-3) {
    ModelParams probe = params;
    auto vals = probe.values();
    auto an = analytic.values();
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    GradCheck out;
    for (std::size_t i = 0; i < vals.size(); ++i) {
        const double keep = vals[i];
        vals[i] = keep + eps;
        const double up = loss(probe);
        vals[i] = keep - eps;
        const double down = loss(probe);
        vals[i] = keep;
        const double num = (up - down) / (2.0 * eps);
        diff2 += (num - an[i]) * (num - an[i]);
        a2 += an[i] * an[i];
        n2 += num * num;
        out.max_abs_diff = std::max(out.max_abs_diff, std::abs(num - an[i]));
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-300});
    out.rel_error = std::sqrt(diff2) / denom;
    out.analytic_norm = std::sqrt(a2);
    return out;
}

/// Unique scratch directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("cora_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    std::filesystem::path path_;
};

inline std::string read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Relative path -> file bytes for every regular file below `root`.
inline std::map<std::string, std::string> snapshot_tree(const std::filesystem::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : std::filesystem::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[std::filesystem::relative(e.path(), root).string()] = read_bytes(e.path());
    return out;
}

} // namespace cora::testing
