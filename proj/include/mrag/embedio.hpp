// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mrag/errors.hpp"
#include "mrag/vecmath.hpp"

namespace mrag::embedio {

using Vec = std::vector<float>;

constexpr int kMaxDim = 4096;

/// A fixed-dimension real vector with an identifier. The unit of all
/// cross-modal math in this library.
struct Embedding {
    std::string id;
    Vec values;

    int dim() const { return static_cast<int>(values.size()); }
};

/// One training instance: an image, one of its captions, and both embeddings.
/// Images with several captions appear as several records sharing image_id.
struct PairRecord {
    std::string image_id;
    std::string caption;
    Embedding image_emb;
    Embedding text_emb;
};

struct PreprocessFlags {
    bool center = true;
    bool normalize = true;
};

/// Mean vectors of the training split plus the flags they were fitted under.
/// Inference-time vectors are always transformed with these statistics;
/// they are never refitted on unseen data.
struct PreprocessStats {
    std::vector<double> image_mean;
    std::vector<double> text_mean;
    PreprocessFlags flags;

    int dim() const { return static_cast<int>(image_mean.size()); }
};

enum class Side { image, text };

inline std::string trim(std::string_view s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

inline void check_finite(std::span<const float> v, const std::string& what) {
    for (float x : v)
        if (!std::isfinite(x)) throw ValueError(what + ": non-finite value in embedding");
}

// ---------------------------------------------------------------------------
// Binary embedding files.
//
// <name>.emb layout: magic "EMB1", u32le dimension d, u32le count n, then
// n*d IEEE-754 32-bit little-endian floats in row-major order.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in, const std::string& what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError(what + ": truncated header");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

inline void put_f64(std::ostream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u32(out, static_cast<std::uint32_t>(bits & 0xffffffffULL));
    put_u32(out, static_cast<std::uint32_t>(bits >> 32));
}

inline double get_f64(std::istream& in, const std::string& what) {
    std::uint64_t lo = get_u32(in, what);
    std::uint64_t hi = get_u32(in, what);
    std::uint64_t bits = lo | (hi << 32);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

constexpr bool host_is_little_endian() {
    return std::endian::native == std::endian::little;
}

} // namespace detail

struct EmbMatrix {
    int dim = 0;
    std::vector<Vec> rows;
};

inline void write_emb(const std::filesystem::path& path, int dim, const std::vector<Vec>& rows) {
    if (dim < 1 || dim > kMaxDim) throw FormatError("write_emb: dimension out of range");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("write_emb: cannot open " + path.string());
    out.write("EMB1", 4);
    detail::put_u32(out, static_cast<std::uint32_t>(dim));
    detail::put_u32(out, static_cast<std::uint32_t>(rows.size()));
    for (const Vec& r : rows) {
        if (static_cast<int>(r.size()) != dim) throw DimensionError("write_emb: row dimension mismatch");
        if constexpr (detail::host_is_little_endian()) {
            out.write(reinterpret_cast<const char*>(r.data()), static_cast<std::streamsize>(r.size() * 4));
        } else {
            for (float x : r) detail::put_f32(out, x);
        }
    }
    if (!out) throw FormatError("write_emb: write failed for " + path.string());
}

inline EmbMatrix read_emb(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("read_emb: cannot open " + path.string());
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "EMB1", 4) != 0)
        throw FormatError("read_emb: bad magic in " + path.string());
    std::uint32_t dim = detail::get_u32(in, path.string());
    std::uint32_t count = detail::get_u32(in, path.string());
    if (dim < 1 || dim > kMaxDim) throw FormatError("read_emb: dimension out of range in " + path.string());
    EmbMatrix m;
    m.dim = static_cast<int>(dim);
    m.rows.resize(count, Vec(dim));
    for (Vec& r : m.rows) {
        if (!in.read(reinterpret_cast<char*>(r.data()), static_cast<std::streamsize>(dim) * 4))
            throw FormatError("read_emb: truncated payload in " + path.string());
        if constexpr (!detail::host_is_little_endian()) {
            for (float& x : r) {
                std::uint32_t bits;
                std::memcpy(&bits, &x, 4);
                bits = __builtin_bswap32(bits);
                std::memcpy(&x, &bits, 4);
            }
        }
        check_finite(r, path.string());
    }
    return m;
}

// ---------------------------------------------------------------------------
// Dataset manifests.
//
// <name>.jsonl: first line {"image_emb": file, "text_emb": file, "dim": d},
// then one {"image_id", "caption", "image_row", "text_row"} object per record.
// Embedding file paths resolve relative to the manifest's directory.
// ---------------------------------------------------------------------------

struct ManifestHeader {
    std::filesystem::path image_emb; // resolved against the manifest directory
    std::filesystem::path text_emb;
    int dim = 0;
};

inline ManifestHeader read_manifest_header(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw FormatError("read_manifest_header: cannot open " + manifest_path.string());
    std::string line;
    if (!std::getline(in, line)) throw FormatError("read_manifest_header: empty manifest");
    nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
    if (header.is_discarded() || !header.is_object() || !header.contains("image_emb") ||
        !header.contains("text_emb") || !header.contains("dim") || !header["dim"].is_number_integer())
        throw FormatError("read_manifest_header: malformed manifest header");
    std::filesystem::path base = manifest_path.parent_path();
    auto resolve = [&](const std::string& p) {
        std::filesystem::path fp(p);
        return fp.is_absolute() ? fp : base / fp;
    };
    ManifestHeader h;
    h.image_emb = resolve(header["image_emb"].get<std::string>());
    h.text_emb = resolve(header["text_emb"].get<std::string>());
    h.dim = header["dim"].get<int>();
    if (h.dim < 1 || h.dim > kMaxDim) throw FormatError("read_manifest_header: dimension out of range");
    return h;
}

inline std::vector<PairRecord> load_dataset(const std::filesystem::path& manifest_path) {
    ManifestHeader header = read_manifest_header(manifest_path);
    EmbMatrix images = read_emb(header.image_emb);
    EmbMatrix texts = read_emb(header.text_emb);
    if (images.dim != header.dim || texts.dim != header.dim)
        throw DimensionError("load_dataset: embedding file dimension disagrees with manifest header");

    std::ifstream in(manifest_path);
    if (!in) throw FormatError("load_dataset: cannot open " + manifest_path.string());
    std::string line;
    std::getline(in, line); // header, already parsed

    std::vector<PairRecord> records;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object())
            throw FormatError("load_dataset: bad JSON at line " + std::to_string(line_no));
        for (const char* key : {"image_id", "caption", "image_row", "text_row"})
            if (!j.contains(key)) throw FormatError("load_dataset: missing field '" + std::string(key) +
                                                    "' at line " + std::to_string(line_no));
        PairRecord rec;
        rec.image_id = j["image_id"].get<std::string>();
        rec.caption = j["caption"].get<std::string>();
        if (trim(rec.caption).empty())
            throw FormatError("load_dataset: empty caption at line " + std::to_string(line_no));
        auto fetch = [&](const EmbMatrix& m, const char* key, const char* what) -> Vec {
            std::int64_t row = j[key].get<std::int64_t>();
            if (row < 0 || row >= static_cast<std::int64_t>(m.rows.size()))
                throw FormatError("load_dataset: " + std::string(what) + " row out of range at line " +
                                  std::to_string(line_no));
            return m.rows[static_cast<std::size_t>(row)];
        };
        rec.image_emb = Embedding{rec.image_id, fetch(images, "image_row", "image")};
        rec.text_emb = Embedding{rec.image_id, fetch(texts, "text_row", "text")};
        records.push_back(std::move(rec));
    }
    return records;
}

/// Writes records as a manifest plus two .emb files (one image row and one
/// text row per record). Round-trips bit-exactly through load_dataset.
inline void write_dataset(const std::filesystem::path& dir, const std::string& name,
                          const std::vector<PairRecord>& records, int dim) {
    std::filesystem::create_directories(dir);
    std::vector<Vec> image_rows, text_rows;
    image_rows.reserve(records.size());
    text_rows.reserve(records.size());
    for (const PairRecord& r : records) {
        if (r.image_emb.dim() != dim || r.text_emb.dim() != dim)
            throw DimensionError("write_dataset: record dimension mismatch");
        image_rows.push_back(r.image_emb.values);
        text_rows.push_back(r.text_emb.values);
    }
    std::string image_file = name + ".images.emb";
    std::string text_file = name + ".texts.emb";
    write_emb(dir / image_file, dim, image_rows);
    write_emb(dir / text_file, dim, text_rows);

    std::ofstream out(dir / (name + ".jsonl"));
    if (!out) throw FormatError("write_dataset: cannot open manifest for writing");
    out << nlohmann::json{{"image_emb", image_file}, {"text_emb", text_file}, {"dim", dim}}.dump() << "\n";
    for (std::size_t i = 0; i < records.size(); ++i) {
        out << nlohmann::json{{"image_id", records[i].image_id},
                              {"caption", records[i].caption},
                              {"image_row", i},
                              {"text_row", i}}
                   .dump()
            << "\n";
    }
}

// ---------------------------------------------------------------------------
// Preprocessing: mean centering and length normalization, in that order.
// ---------------------------------------------------------------------------

inline PreprocessStats fit_preprocess(const std::vector<PairRecord>& records, PreprocessFlags flags) {
    if (records.empty()) throw EmptyDatasetError("fit_preprocess: no records");
    int dim = records.front().image_emb.dim();
    PreprocessStats stats;
    stats.flags = flags;
    stats.image_mean.assign(dim, 0.0);
    stats.text_mean.assign(dim, 0.0);
    for (const PairRecord& r : records) {
        if (r.image_emb.dim() != dim || r.text_emb.dim() != dim)
            throw DimensionError("fit_preprocess: inconsistent dimensions");
        for (int i = 0; i < dim; ++i) {
            stats.image_mean[i] += r.image_emb.values[i];
            stats.text_mean[i] += r.text_emb.values[i];
        }
    }
    double inv = 1.0 / static_cast<double>(records.size());
    for (int i = 0; i < dim; ++i) {
        stats.image_mean[i] *= inv;
        stats.text_mean[i] *= inv;
    }
    return stats;
}

inline Embedding apply_preprocess(const Embedding& v, const PreprocessStats& stats, Side side) {
    if (v.dim() != stats.dim())
        throw DimensionError("apply_preprocess: vector dimension " + std::to_string(v.dim()) +
                             " does not match statistics dimension " + std::to_string(stats.dim()));
    const std::vector<double>& mean = side == Side::image ? stats.image_mean : stats.text_mean;
    std::vector<double> work(v.values.begin(), v.values.end());
    if (stats.flags.center)
        for (std::size_t i = 0; i < work.size(); ++i) work[i] -= mean[i];
    if (stats.flags.normalize) {
        double sq = 0.0;
        for (double x : work) sq += x * x;
        double n = std::sqrt(sq);
        if (n == 0.0) throw DegenerateVectorError("apply_preprocess: zero vector cannot be normalized");
        for (double& x : work) x /= n;
    }
    Embedding out;
    out.id = v.id;
    out.values.resize(work.size());
    std::transform(work.begin(), work.end(), out.values.begin(),
                   [](double x) { return static_cast<float>(x); });
    return out;
}

} // namespace mrag::embedio
