#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cora/error.hpp"
#include "cora/model.hpp"

// Layout (all integers little-endian):
//   "CORA" | u32 version | u32 header_len | header JSON (header_len bytes)
//   | f32 x parameter_count, tensors in kTensorNames order, each row-major.
// Parameters live in double precision in memory and are narrowed to float32 on save.

namespace cora {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointHeader {
    ModelDims dims;
    std::uint64_t seed = 0;
    int stage = 0;
    long iteration = 0;

    friend bool operator==(const CheckpointHeader&, const CheckpointHeader&) = default;
};

struct Checkpoint {
    CheckpointHeader header;
    ModelParams params;
};

namespace detail {
inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
    return v;
}
} // namespace detail

inline std::string encode_checkpoint(const ModelParams& params, const CheckpointHeader& header) {
    if (header.dims != params.dims()) fail(ErrorCode::CheckpointMismatch, "header dims differ from parameter dims");
    nlohmann::json names = nlohmann::json::array();
    for (auto n : kTensorNames) names.push_back(n);
    const nlohmann::json j = {{"dims", to_json(header.dims)},
                              {"n_classes", header.dims.n_classes},
                              {"seed", header.seed},
                              {"stage", header.stage},
                              {"iteration", header.iteration},
                              {"parameter_count", params.size()},
                              {"tensor_order", names}};
    const std::string hdr = j.dump();
    std::string out = "CORA";
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(hdr.size()));
    out += hdr;
    for (double v : params.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
    auto bad = [](const std::string& m) { fail(ErrorCode::CheckpointMismatch, m); };
    if (bytes.size() < 12 || bytes.compare(0, 4, "CORA") != 0) bad("missing CORA magic");
    const auto version = detail::get_u32(bytes, 4);
    if (version != kCheckpointVersion) bad("unsupported checkpoint version " + std::to_string(version));
    const auto hlen = detail::get_u32(bytes, 8);
    if (bytes.size() < 12ull + hlen) bad("truncated header");
    Checkpoint ck;
    try {
        const auto j = nlohmann::json::parse(bytes.substr(12, hlen));
        ck.header.dims = dims_from_json(j.at("dims"));
        ck.header.seed = j.at("seed").get<std::uint64_t>();
        ck.header.stage = j.at("stage").get<int>();
        ck.header.iteration = j.at("iteration").get<long>();
        if (j.at("n_classes").get<int>() != ck.header.dims.n_classes) bad("n_classes disagrees with dims");
        if (j.at("parameter_count").get<std::size_t>() != parameter_count(ck.header.dims))
            bad("parameter_count disagrees with dims");
    } catch (const nlohmann::json::exception& e) {
        bad(std::string("bad header: ") + e.what());
    }
    validate(ck.header.dims);
    ck.params = ModelParams(ck.header.dims);
    const std::size_t body = 12ull + hlen;
    if (bytes.size() != body + 4 * ck.params.size())
        bad("payload holds " + std::to_string((bytes.size() - body) / 4) + " floats, dims require " +
            std::to_string(ck.params.size()));
    auto vals = ck.params.values();
    for (std::size_t i = 0; i < vals.size(); ++i)
        vals[i] = static_cast<double>(std::bit_cast<float>(detail::get_u32(bytes, body + 4 * i)));
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const CheckpointHeader& header) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
    const auto bytes = encode_checkpoint(params, header);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

/// Fails with CheckpointMismatch unless the stored dims equal `expected`.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelDims& expected) {
    auto ck = load_checkpoint(path);
    if (ck.header.dims != expected)
        fail(ErrorCode::CheckpointMismatch, "checkpoint dims " + to_json(ck.header.dims).dump() + " differ from expected " +
                                                to_json(expected).dump());
    return ck;
}

/// Rounds every parameter to float32, matching what a save/load cycle produces.
inline void round_to_float(ModelParams& params) {
    for (auto& v : params.values()) v = static_cast<double>(static_cast<float>(v));
}

} // namespace cora
