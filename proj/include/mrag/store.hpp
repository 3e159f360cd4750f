// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "mrag/embedio.hpp"
#include "mrag/errors.hpp"
#include "mrag/vecmath.hpp"

namespace mrag::store {

enum class Provenance { original, synthetic };

struct StoreEntry {
    embedio::Vec text_emb;
    std::string caption;
    Provenance provenance = Provenance::original;
    int iteration = 0; // refinement iteration that produced a synthetic entry
};

struct RetrievalHit {
    double similarity = 0.0;
    std::size_t index = 0; // insertion index into the store
    std::string caption;
};

/// Ranked hits, similarity non-increasing, ties broken by insertion index.
using RetrievalResult = std::vector<RetrievalHit>;

/// Exact cosine-similarity search over text embeddings. Immutable once
/// built; append() returns a new store and leaves the old one intact, so
/// concurrent readers of an existing store are always safe.
class VectorStore {
public:
    VectorStore() = default;

    static VectorStore build(std::vector<StoreEntry> entries) {
        VectorStore s;
        s.entries_ = std::move(entries);
        s.validate_and_index();
        return s;
    }

    VectorStore append(const std::vector<StoreEntry>& more) const {
        VectorStore s;
        s.entries_ = entries_;
        s.entries_.insert(s.entries_.end(), more.begin(), more.end());
        s.validate_and_index();
        return s;
    }

    RetrievalResult top_k(std::span<const float> query, int k) const {
        if (k < 1) throw ConfigError("top_k: k must be >= 1");
        if (entries_.empty()) return {};
        if (static_cast<int>(query.size()) != dim_)
            throw DimensionError("top_k: query dimension " + std::to_string(query.size()) +
                                 " does not match store dimension " + std::to_string(dim_));
        double qnorm = norm(query);
        if (qnorm == 0.0) throw DegenerateVectorError("top_k: zero-norm query");

        std::vector<double> sims(entries_.size());
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            double en = norms_[i];
            sims[i] = en == 0.0 ? 0.0 : dot(query, entries_[i].text_emb) / (qnorm * en);
        }
        std::vector<std::size_t> order(entries_.size());
        std::iota(order.begin(), order.end(), 0);
        std::size_t take = std::min(static_cast<std::size_t>(k), order.size());
        auto better = [&](std::size_t a, std::size_t b) {
            if (sims[a] != sims[b]) return sims[a] > sims[b];
            return a < b;
        };
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                          better);
        RetrievalResult out;
        out.reserve(take);
        for (std::size_t r = 0; r < take; ++r)
            out.push_back(RetrievalHit{sims[order[r]], order[r], entries_[order[r]].caption});
        return out;
    }

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    int dim() const { return dim_; }
    const StoreEntry& entry(std::size_t i) const { return entries_.at(i); }
    const std::vector<StoreEntry>& entries() const { return entries_; }

private:
    void validate_and_index() {
        dim_ = entries_.empty() ? 0 : static_cast<int>(entries_.front().text_emb.size());
        norms_.resize(entries_.size());
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (static_cast<int>(entries_[i].text_emb.size()) != dim_)
                throw DimensionError("VectorStore: entry " + std::to_string(i) + " has dimension " +
                                     std::to_string(entries_[i].text_emb.size()) + ", expected " +
                                     std::to_string(dim_));
            norms_[i] = norm(std::span<const float>(entries_[i].text_emb));
        }
    }

    std::vector<StoreEntry> entries_;
    std::vector<double> norms_;
    int dim_ = 0;
};

// ---------------------------------------------------------------------------
// Snapshots: <prefix>.emb with the vectors plus <prefix>.jsonl with one
// {"caption", "provenance"[, "iteration"]} object per entry, same order.
// ---------------------------------------------------------------------------

inline void save_store(const VectorStore& s, const std::filesystem::path& prefix) {
    std::vector<embedio::Vec> rows;
    rows.reserve(s.size());
    for (const StoreEntry& e : s.entries()) rows.push_back(e.text_emb);
    int dim = s.empty() ? 1 : s.dim();
    if (s.empty()) rows.clear();
    embedio::write_emb(prefix.string() + ".emb", dim, rows);

    std::ofstream out(prefix.string() + ".jsonl");
    if (!out) throw FormatError("save_store: cannot open sidecar for writing");
    for (const StoreEntry& e : s.entries()) {
        nlohmann::json j{{"caption", e.caption},
                         {"provenance", e.provenance == Provenance::original ? "original" : "synthetic"}};
        if (e.provenance == Provenance::synthetic) j["iteration"] = e.iteration;
        out << j.dump() << "\n";
    }
}

inline VectorStore load_store(const std::filesystem::path& prefix) {
    embedio::EmbMatrix m = embedio::read_emb(prefix.string() + ".emb");
    std::ifstream in(prefix.string() + ".jsonl");
    if (!in) throw FormatError("load_store: cannot open sidecar " + prefix.string() + ".jsonl");
    std::vector<StoreEntry> entries;
    std::string line;
    while (std::getline(in, line)) {
        if (embedio::trim(line).empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("caption") || !j.contains("provenance"))
            throw FormatError("load_store: bad sidecar line");
        StoreEntry e;
        e.caption = j["caption"].get<std::string>();
        e.provenance =
            j["provenance"].get<std::string>() == "synthetic" ? Provenance::synthetic : Provenance::original;
        e.iteration = j.value("iteration", 0);
        entries.push_back(std::move(e));
    }
    if (entries.size() != m.rows.size())
        throw FormatError("load_store: sidecar entry count does not match embedding count");
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i].text_emb = std::move(m.rows[i]);
    return VectorStore::build(std::move(entries));
}

} // namespace mrag::store
