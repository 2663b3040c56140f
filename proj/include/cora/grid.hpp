#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cora/error.hpp"

namespace cora {

/// Row-major 2-D grid.
template <class T>
struct Grid {
    int width = 0;
    int height = 0;
    std::vector<T> data;

    Grid() = default;
    Grid(int w, int h, T fill = T{}) : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

    std::size_t size() const { return data.size(); }
    T& operator()(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
    const T& operator()(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
    bool inside(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
    bool same_dims(const auto& other) const { return width == other.width && height == other.height; }

    friend bool operator==(const Grid&, const Grid&) = default;
};

inline constexpr std::uint8_t kVoid = 255;

/// Class id per pixel, kVoid for background / ignore.
using LabelMap = Grid<std::uint8_t>;
/// 0/1 per pixel.
using BinaryMask = Grid<std::uint8_t>;
/// Probabilities in [0,1].
using SoftMask = Grid<double>;

template <class A, class B>
void require_same_dims(const Grid<A>& a, const Grid<B>& b, const char* what) {
    if (!a.same_dims(b))
        fail(ErrorCode::DimensionMismatch, std::string(what) + ": " + std::to_string(a.width) + "x" +
                                               std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                                               std::to_string(b.height));
}

inline std::size_t count_set(const BinaryMask& m) {
    std::size_t n = 0;
    for (auto v : m.data) n += v != 0;
    return n;
}

inline BinaryMask class_mask(const LabelMap& map, std::uint8_t class_id) {
    BinaryMask m(map.width, map.height);
    for (std::size_t i = 0; i < map.size(); ++i) m.data[i] = map.data[i] == class_id;
    return m;
}

/// Interleaved H x W x C image with float samples in [0,1].
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, int c) : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, 0.0) {}

    double& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    double at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
};

/// 8-bit interleaved raster as read from / written to PNM.
struct Raster {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<std::uint8_t> data;

    friend bool operator==(const Raster&, const Raster&) = default;
};

inline Image to_image(const Raster& r) {
    Image img(r.width, r.height, r.channels);
    for (std::size_t i = 0; i < r.data.size(); ++i) img.data[i] = r.data[i] / 255.0;
    return img;
}

namespace pnm {

namespace detail {
inline void skip_ws_and_comments(std::istream& in) {
    while (true) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (c == ' ' || c == '\n' || c == '\r' || c == '\t') {
            in.get();
        } else {
            return;
        }
    }
}

inline int read_header_int(std::istream& in, const std::string& path) {
    skip_ws_and_comments(in);
    int v = -1;
    if (!(in >> v) || v < 0) fail(ErrorCode::ParseError, "bad PNM header in " + path);
    return v;
}
} // namespace detail

/// Reads binary P5 (grayscale) or P6 (RGB) with maxval 255.
inline Raster read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
    std::string magic(2, '\0');
    in.read(magic.data(), 2);
    Raster r;
    if (magic == "P5")
        r.channels = 1;
    else if (magic == "P6")
        r.channels = 3;
    else
        fail(ErrorCode::ParseError, "not a binary PGM/PPM: " + path.string());
    r.width = detail::read_header_int(in, path.string());
    r.height = detail::read_header_int(in, path.string());
    const int maxval = detail::read_header_int(in, path.string());
    if (maxval != 255) fail(ErrorCode::ParseError, "maxval must be 255 in " + path.string());
    in.get(); // single whitespace before raster
    r.data.resize(static_cast<std::size_t>(r.width) * r.height * r.channels);
    in.read(reinterpret_cast<char*>(r.data.data()), static_cast<std::streamsize>(r.data.size()));
    if (in.gcount() != static_cast<std::streamsize>(r.data.size()))
        fail(ErrorCode::ParseError, "truncated raster in " + path.string());
    return r;
}

inline void write(const std::filesystem::path& path, const Raster& r) {
    if (r.channels != 1 && r.channels != 3) fail(ErrorCode::ShapeError, "PNM supports 1 or 3 channels");
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
    out << (r.channels == 1 ? "P5" : "P6") << '\n' << r.width << ' ' << r.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(r.data.data()), static_cast<std::streamsize>(r.data.size()));
}

inline Raster from_grid(const Grid<std::uint8_t>& g) { return Raster{g.width, g.height, 1, g.data}; }

inline Grid<std::uint8_t> to_grid(const Raster& r) {
    if (r.channels != 1) fail(ErrorCode::ShapeError, "expected single-channel PGM");
    Grid<std::uint8_t> g(r.width, r.height);
    g.data = r.data;
    return g;
}

inline LabelMap read_label_map(const std::filesystem::path& path) { return to_grid(read(path)); }
inline void write_label_map(const std::filesystem::path& path, const LabelMap& m) { write(path, from_grid(m)); }

/// Binary masks on disk use 0 / 255.
inline void write_mask(const std::filesystem::path& path, const BinaryMask& m) {
    Raster r{m.width, m.height, 1, {}};
    r.data.reserve(m.size());
    for (auto v : m.data) r.data.push_back(v ? 255 : 0);
    write(path, r);
}

inline BinaryMask read_mask(const std::filesystem::path& path) {
    auto g = to_grid(read(path));
    for (auto& v : g.data) v = v >= 128;
    return g;
}

inline std::uint8_t quantize(double v) {
    const double c = std::clamp(v, 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

inline void write_soft(const std::filesystem::path& path, const SoftMask& m) {
    Raster r{m.width, m.height, 1, {}};
    r.data.reserve(m.size());
    for (auto v : m.data) r.data.push_back(quantize(v));
    write(path, r);
}

inline SoftMask read_soft(const std::filesystem::path& path) {
    const auto r = read(path);
    if (r.channels != 1) fail(ErrorCode::ShapeError, "expected single-channel PGM: " + path.string());
    SoftMask m(r.width, r.height);
    for (std::size_t i = 0; i < r.data.size(); ++i) m.data[i] = r.data[i] / 255.0;
    return m;
}

} // namespace pnm
} // namespace cora
