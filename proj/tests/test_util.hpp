// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures and the independent oracles the test suites check the
// library against. Everything here is deliberately written without the
// library's own solver/search code paths.
#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include "mrag/embedio.hpp"
#include "mrag/genclient.hpp"
#include "mrag/rng.hpp"

namespace testutil {

// ---------------------------------------------------------------------------
// Scratch directories and process helpers.
// ---------------------------------------------------------------------------

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("mrag_" + tag + "_" + std::to_string(::getpid()) + "_" +
                 std::to_string(counter.fetch_add(1)));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

struct CommandResult {
    int exit_code = -1;
    std::string output; // stdout only
};

inline CommandResult run_command(const std::string& command) {
    CommandResult result;
    FILE* pipe = ::popen((command + " 2>/dev/null").c_str(), "r");
    if (!pipe) return result;
    char buf[4096];
    std::size_t n;
    while ((n = ::fread(buf, 1, sizeof buf, pipe)) > 0) result.output.append(buf, n);
    int status = ::pclose(pipe);
    result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return result;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------------------
// Least-squares oracle: per-column solve of the normal equations with plain
// Gaussian elimination (partial pivoting). No shared code with the library.
// ---------------------------------------------------------------------------

using Mat = std::vector<std::vector<double>>;

inline std::vector<double> gauss_solve(Mat a, std::vector<double> b) {
    std::size_t n = a.size();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::fabs(a[r][col]) > std::fabs(a[pivot][col])) pivot = r;
        std::swap(a[col], a[pivot]);
        std::swap(b[col], b[pivot]);
        for (std::size_t r = col + 1; r < n; ++r) {
            double f = a[r][col] / a[col][col];
            for (std::size_t c = col; c < n; ++c) a[r][c] -= f * a[col][c];
            b[r] -= f * b[col];
        }
    }
    std::vector<double> x(n, 0.0);
    for (std::size_t ri = n; ri-- > 0;) {
        double s = b[ri];
        for (std::size_t c = ri + 1; c < n; ++c) s -= a[ri][c] * x[c];
        x[ri] = s / a[ri][ri];
    }
    return x;
}

// Returns L (d x d, row-major) minimizing sum ||L v - e||^2 + lambda ||L||_F^2.
inline Mat oracle_least_squares(const std::vector<mrag::embedio::Vec>& images,
                                const std::vector<mrag::embedio::Vec>& texts, double lambda) {
    std::size_t d = images.front().size();
    Mat gram(d, std::vector<double>(d, 0.0));
    Mat cross(d, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < images.size(); ++i)
        for (std::size_t r = 0; r < d; ++r) {
            for (std::size_t c = 0; c < d; ++c) {
                gram[r][c] += static_cast<double>(images[i][r]) * images[i][c];
                cross[r][c] += static_cast<double>(images[i][r]) * texts[i][c];
            }
        }
    for (std::size_t r = 0; r < d; ++r) gram[r][r] += lambda;

    // Solve (G + lambda I) x = cross_col for every output coordinate; x is
    // the corresponding row of L.
    Mat l(d, std::vector<double>(d, 0.0));
    for (std::size_t out = 0; out < d; ++out) {
        std::vector<double> rhs(d);
        for (std::size_t r = 0; r < d; ++r) rhs[r] = cross[r][out];
        std::vector<double> row = gauss_solve(gram, rhs);
        for (std::size_t c = 0; c < d; ++c) l[out][c] = row[c];
    }
    return l;
}

// ---------------------------------------------------------------------------
// Brute-force retrieval oracle: full O(n d) cosine scan, stable sort.
// ---------------------------------------------------------------------------

struct OracleHit {
    double similarity;
    std::size_t index;
};

inline std::vector<OracleHit> brute_force_topk(const std::vector<mrag::embedio::Vec>& vectors,
                                               const mrag::embedio::Vec& query, int k) {
    double qs = 0.0;
    for (float x : query) qs += static_cast<double>(x) * x;
    double qn = std::sqrt(qs);
    std::vector<OracleHit> hits;
    hits.reserve(vectors.size());
    for (std::size_t i = 0; i < vectors.size(); ++i) {
        double dot = 0.0, ss = 0.0;
        for (std::size_t j = 0; j < query.size(); ++j) {
            dot += static_cast<double>(query[j]) * vectors[i][j];
            ss += static_cast<double>(vectors[i][j]) * vectors[i][j];
        }
        double en = std::sqrt(ss);
        hits.push_back(OracleHit{en == 0.0 || qn == 0.0 ? 0.0 : dot / (qn * en), i});
    }
    std::stable_sort(hits.begin(), hits.end(), [](const OracleHit& a, const OracleHit& b) {
        if (a.similarity != b.similarity) return a.similarity > b.similarity;
        return a.index < b.index;
    });
    if (static_cast<std::size_t>(k) < hits.size()) hits.resize(static_cast<std::size_t>(k));
    return hits;
}

// ---------------------------------------------------------------------------
// Independent CIDEr-D computation over token tuples (no string keys, no
// shared helpers), following the published definition directly.
// ---------------------------------------------------------------------------

using Tokens = std::vector<std::string>;
using Tuple = std::vector<std::string>;

inline std::map<Tuple, int> oracle_ngrams(const Tokens& toks, std::size_t n) {
    std::map<Tuple, int> out;
    for (std::size_t i = 0; i + n <= toks.size(); ++i)
        ++out[Tuple(toks.begin() + static_cast<std::ptrdiff_t>(i),
                    toks.begin() + static_cast<std::ptrdiff_t>(i + n))];
    return out;
}

inline double oracle_cider_d(const Tokens& cand, const std::vector<Tokens>& refs,
                             const std::vector<std::vector<Tokens>>& corpus) {
    double log_m = std::log(static_cast<double>(corpus.size()));
    double total = 0.0;
    for (std::size_t n = 1; n <= 4; ++n) {
        std::map<Tuple, int> df;
        for (const auto& image_refs : corpus) {
            std::set<Tuple> seen;
            for (const Tokens& r : image_refs)
                for (const auto& [gram, cnt] : oracle_ngrams(r, n)) seen.insert(gram);
            for (const Tuple& gram : seen) ++df[gram];
        }
        auto weigh = [&](const std::map<Tuple, int>& counts) {
            std::map<Tuple, double> w;
            double norm2 = 0.0;
            for (const auto& [gram, cnt] : counts) {
                auto it = df.find(gram);
                double dfv = it == df.end() ? 1.0 : static_cast<double>(it->second);
                double idf = log_m - std::log(std::max(1.0, dfv));
                w[gram] = cnt * idf;
                norm2 += w[gram] * w[gram];
            }
            return std::make_pair(w, std::sqrt(norm2));
        };
        auto [cw, cn] = weigh(oracle_ngrams(cand, n));
        double order_avg = 0.0;
        for (const Tokens& ref : refs) {
            auto [rw, rn] = weigh(oracle_ngrams(ref, n));
            double sim = 0.0;
            for (const auto& [gram, w] : cw) {
                auto it = rw.find(gram);
                if (it != rw.end()) sim += std::min(w, it->second) * it->second;
            }
            if (cn > 0.0 && rn > 0.0) sim /= cn * rn;
            double delta = static_cast<double>(cand.size()) - static_cast<double>(ref.size());
            order_avg += sim * std::exp(-delta * delta / 72.0);
        }
        total += order_avg / static_cast<double>(refs.size());
    }
    return 10.0 * total / 4.0;
}

// ---------------------------------------------------------------------------
// Dataset fixtures.
// ---------------------------------------------------------------------------

// Records whose image embedding equals the hash embedding of the caption
// (one caption per image). Under center+normalize preprocessing the image
// and text sides then coincide, so retrieval under an identity-like fitted
// map returns each image's own caption first.
inline std::vector<mrag::embedio::PairRecord> aligned_records(const std::vector<std::string>& captions,
                                                              int dim, const std::string& id_prefix) {
    mrag::genclient::HashEmbedder embedder(dim);
    std::vector<mrag::embedio::PairRecord> records;
    for (std::size_t i = 0; i < captions.size(); ++i) {
        mrag::embedio::Vec text = embedder.embed_one(captions[i]);
        mrag::embedio::PairRecord rec;
        rec.image_id = id_prefix + std::to_string(i);
        rec.caption = captions[i];
        rec.image_emb = mrag::embedio::Embedding{rec.image_id, text};
        rec.text_emb = mrag::embedio::Embedding{rec.image_id, text};
        records.push_back(std::move(rec));
    }
    return records;
}

inline std::vector<std::string> fixture_captions(std::size_t count, const std::string& tag) {
    std::vector<std::string> captions = {
        "a brown dog running on the wet beach",
        "two people waiting near the old station",
        "a red bus driving down a narrow street",
        "a small boat floating by the green river",
        "a grey cat sleeping under a wooden table",
        "children playing football in a sunny park",
        "an old train crossing a high stone bridge",
        "a white horse standing in the deep snow",
        "a young woman reading beside the window",
        "fresh fruit stacked at the busy market",
    };
    std::vector<std::string> out;
    for (std::size_t i = 0; i < count; ++i)
        out.push_back(captions[i % captions.size()] +
                      (i >= captions.size() ? " " + tag + " " + std::to_string(i) : ""));
    return out;
}

inline mrag::embedio::Vec random_unit_vec(mrag::SplitMix64& rng, int dim) {
    mrag::embedio::Vec v(static_cast<std::size_t>(dim));
    double ss = 0.0;
    for (float& x : v) {
        x = static_cast<float>(rng.next_gaussian());
        ss += static_cast<double>(x) * x;
    }
    double n = std::sqrt(ss);
    for (float& x : v) x = static_cast<float>(x / n);
    return v;
}

} // namespace testutil
