// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "mrag/errors.hpp"
#include "mrag/vecmath.hpp"

namespace mrag::metrics {

using TokenSequence = std::vector<std::string>;

enum class MetricId { bleu1, bleu2, bleu3, bleu4, rouge_l, cider_d, clip_score, ref_clip, ndcg };

struct MetricScore {
    MetricId id;
    double value;
};

inline std::string metric_name(MetricId id) {
    switch (id) {
        case MetricId::bleu1: return "bleu@1";
        case MetricId::bleu2: return "bleu@2";
        case MetricId::bleu3: return "bleu@3";
        case MetricId::bleu4: return "bleu@4";
        case MetricId::rouge_l: return "rouge_l";
        case MetricId::cider_d: return "cider_d";
        case MetricId::clip_score: return "clip_score";
        case MetricId::ref_clip: return "ref_clip";
        case MetricId::ndcg: return "ndcg";
    }
    return "?";
}

inline MetricId parse_metric(std::string_view name) {
    for (MetricId id : {MetricId::bleu1, MetricId::bleu2, MetricId::bleu3, MetricId::bleu4,
                        MetricId::rouge_l, MetricId::cider_d, MetricId::clip_score, MetricId::ref_clip,
                        MetricId::ndcg})
        if (metric_name(id) == name) return id;
    throw ConfigError("unknown metric '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Tokenizer: lowercase, ASCII punctuation to spaces, split on whitespace.
// Bytes >= 0x80 pass through untouched so UTF-8 text survives.
// ---------------------------------------------------------------------------

inline TokenSequence tokenize(std::string_view text) {
    TokenSequence tokens;
    std::string current;
    auto flush = [&] {
        if (!current.empty()) {
            tokens.push_back(current);
            current.clear();
        }
    };
    for (unsigned char c : text) {
        if (c >= 0x80) {
            current.push_back(static_cast<char>(c));
        } else if (std::isalnum(c)) {
            current.push_back(static_cast<char>(std::tolower(c)));
        } else {
            flush();
        }
    }
    flush();
    return tokens;
}

namespace detail {

// n-gram keyed by its tokens joined with an unprintable separator.
inline std::string ngram_key(const TokenSequence& tokens, std::size_t start, std::size_t n) {
    std::string key;
    for (std::size_t i = 0; i < n; ++i) {
        if (i) key.push_back('\x1f');
        key += tokens[start + i];
    }
    return key;
}

inline std::unordered_map<std::string, int> ngram_counts(const TokenSequence& tokens, std::size_t n) {
    std::unordered_map<std::string, int> counts;
    if (tokens.size() >= n && n >= 1)
        for (std::size_t i = 0; i + n <= tokens.size(); ++i) ++counts[ngram_key(tokens, i, n)];
    return counts;
}

inline std::size_t lcs_length(const TokenSequence& a, const TokenSequence& b) {
    if (a.empty() || b.empty()) return 0;
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            if (a[i - 1] == b[j - 1])
                cur[j] = prev[j - 1] + 1;
            else
                cur[j] = std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

} // namespace detail

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

enum class BleuSmoothing {
    none,    // zero precision at any order zeroes the score
    epsilon, // zero precisions replaced by 1e-9; keeps per-item filtering non-degenerate
};

constexpr double kBleuEpsilon = 1e-9;

namespace detail {

struct BleuCounts {
    std::array<std::int64_t, 4> matched{};
    std::array<std::int64_t, 4> total{};
    std::int64_t candidate_len = 0;
    std::int64_t reference_len = 0; // closest reference length, ties to the shorter
};

inline BleuCounts bleu_counts(const TokenSequence& candidate, const std::vector<TokenSequence>& references,
                              int max_order) {
    BleuCounts c;
    c.candidate_len = static_cast<std::int64_t>(candidate.size());
    std::int64_t best_len = 0;
    std::int64_t best_diff = -1;
    for (const TokenSequence& ref : references) {
        auto len = static_cast<std::int64_t>(ref.size());
        std::int64_t diff = std::llabs(len - c.candidate_len);
        if (best_diff < 0 || diff < best_diff || (diff == best_diff && len < best_len)) {
            best_diff = diff;
            best_len = len;
        }
    }
    c.reference_len = best_len;
    for (int n = 1; n <= max_order; ++n) {
        auto cand_counts = ngram_counts(candidate, static_cast<std::size_t>(n));
        std::unordered_map<std::string, int> max_ref;
        for (const TokenSequence& ref : references)
            for (const auto& [gram, count] : ngram_counts(ref, static_cast<std::size_t>(n)))
                max_ref[gram] = std::max(max_ref[gram], count);
        for (const auto& [gram, count] : cand_counts) {
            c.total[n - 1] += count;
            auto it = max_ref.find(gram);
            if (it != max_ref.end()) c.matched[n - 1] += std::min(count, it->second);
        }
    }
    return c;
}

inline double bleu_from_counts(const BleuCounts& c, int max_order, BleuSmoothing smoothing) {
    if (c.candidate_len == 0) return 0.0;
    double log_sum = 0.0;
    for (int n = 1; n <= max_order; ++n) {
        double p = c.total[n - 1] > 0
                       ? static_cast<double>(c.matched[n - 1]) / static_cast<double>(c.total[n - 1])
                       : 0.0;
        if (p == 0.0) {
            if (smoothing == BleuSmoothing::none) return 0.0;
            p = kBleuEpsilon;
        }
        log_sum += std::log(p);
    }
    double geo_mean = std::exp(log_sum / max_order);
    double bp = c.candidate_len >= c.reference_len
                    ? 1.0
                    : std::exp(1.0 - static_cast<double>(c.reference_len) /
                                         static_cast<double>(c.candidate_len));
    return geo_mean * bp;
}

} // namespace detail

/// Sentence-level BLEU@n: geometric mean of clipped modified n-gram
/// precisions up to max_order, times the brevity penalty.
inline double bleu(const TokenSequence& candidate, const std::vector<TokenSequence>& references,
                   int max_order, BleuSmoothing smoothing = BleuSmoothing::none) {
    if (max_order < 1 || max_order > 4) throw ConfigError("bleu: order must be in 1..4");
    bool any_ref = false;
    for (const TokenSequence& r : references) any_ref = any_ref || !r.empty();
    if (!any_ref) throw ReferenceError("bleu: at least one non-empty reference required");
    return detail::bleu_from_counts(detail::bleu_counts(candidate, references, max_order), max_order,
                                    smoothing);
}

/// Corpus-level BLEU@n: match/total counts are aggregated over all items
/// before the precision ratios are taken. No smoothing.
inline double corpus_bleu(const std::vector<TokenSequence>& candidates,
                          const std::vector<std::vector<TokenSequence>>& references, int max_order) {
    if (max_order < 1 || max_order > 4) throw ConfigError("corpus_bleu: order must be in 1..4");
    if (candidates.size() != references.size())
        throw ReferenceError("corpus_bleu: candidate/reference count mismatch");
    if (candidates.empty()) throw ReferenceError("corpus_bleu: empty corpus");
    detail::BleuCounts agg;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        detail::BleuCounts c = detail::bleu_counts(candidates[i], references[i], max_order);
        for (int n = 0; n < max_order; ++n) {
            agg.matched[n] += c.matched[n];
            agg.total[n] += c.total[n];
        }
        agg.candidate_len += c.candidate_len;
        agg.reference_len += c.reference_len;
    }
    return detail::bleu_from_counts(agg, max_order, BleuSmoothing::none);
}

// ---------------------------------------------------------------------------
// ROUGE-L: max over references of the LCS-based F-measure with beta = 1.2.
// ---------------------------------------------------------------------------

constexpr double kRougeBeta = 1.2;

inline double rouge_l(const TokenSequence& candidate, const std::vector<TokenSequence>& references) {
    if (references.empty()) throw ReferenceError("rouge_l: at least one reference required");
    if (candidate.empty()) return 0.0;
    double best = 0.0;
    double beta2 = kRougeBeta * kRougeBeta;
    for (const TokenSequence& ref : references) {
        if (ref.empty()) continue;
        double lcs = static_cast<double>(detail::lcs_length(candidate, ref));
        if (lcs == 0.0) continue;
        double prec = lcs / static_cast<double>(candidate.size());
        double rec = lcs / static_cast<double>(ref.size());
        double f = (1.0 + beta2) * prec * rec / (rec + beta2 * prec);
        best = std::max(best, f);
    }
    return best;
}

// ---------------------------------------------------------------------------
// CIDEr-D: length-penalized, count-clipped tf-idf cosine over n = 1..4,
// averaged over references and orders, scaled by 10.
// ---------------------------------------------------------------------------

constexpr double kCiderSigma = 6.0;
constexpr int kCiderMaxOrder = 4;

/// Document frequencies over a reference corpus. One "document" is the set
/// of reference captions of one image.
struct CorpusStats {
    std::array<std::unordered_map<std::string, int>, kCiderMaxOrder> df;
    int num_images = 0;

    bool empty() const { return num_images == 0; }
};

inline CorpusStats build_corpus_stats(const std::vector<std::vector<TokenSequence>>& images_references) {
    CorpusStats stats;
    stats.num_images = static_cast<int>(images_references.size());
    for (const auto& refs : images_references) {
        for (int n = 1; n <= kCiderMaxOrder; ++n) {
            std::unordered_set<std::string> seen;
            for (const TokenSequence& ref : refs)
                for (const auto& [gram, count] : detail::ngram_counts(ref, static_cast<std::size_t>(n)))
                    seen.insert(gram);
            for (const std::string& gram : seen) ++stats.df[n - 1][gram];
        }
    }
    return stats;
}

namespace detail {

struct TfIdfVec {
    std::array<std::unordered_map<std::string, double>, kCiderMaxOrder> weights;
    std::array<double, kCiderMaxOrder> norm{};
    double length = 0.0;
};

inline TfIdfVec tfidf_vector(const TokenSequence& tokens, const CorpusStats& stats) {
    TfIdfVec v;
    v.length = static_cast<double>(tokens.size());
    double log_m = std::log(static_cast<double>(stats.num_images));
    for (int n = 1; n <= kCiderMaxOrder; ++n) {
        for (const auto& [gram, count] : ngram_counts(tokens, static_cast<std::size_t>(n))) {
            auto it = stats.df[n - 1].find(gram);
            double df = it == stats.df[n - 1].end() ? 1.0 : static_cast<double>(it->second);
            double idf = log_m - std::log(std::max(1.0, df));
            double w = static_cast<double>(count) * idf;
            v.weights[n - 1][gram] = w;
            v.norm[n - 1] += w * w;
        }
        v.norm[n - 1] = std::sqrt(v.norm[n - 1]);
    }
    return v;
}

} // namespace detail

inline double cider_d(const TokenSequence& candidate, const std::vector<TokenSequence>& references,
                      const CorpusStats& stats) {
    if (stats.empty()) throw CorpusStatsError("cider_d: corpus statistics are empty");
    if (references.empty()) throw ReferenceError("cider_d: at least one reference required");

    detail::TfIdfVec cand = detail::tfidf_vector(candidate, stats);
    std::array<double, kCiderMaxOrder> order_sum{};
    for (const TokenSequence& ref : references) {
        detail::TfIdfVec rv = detail::tfidf_vector(ref, stats);
        double delta = cand.length - rv.length;
        double penalty = std::exp(-(delta * delta) / (2.0 * kCiderSigma * kCiderSigma));
        for (int n = 0; n < kCiderMaxOrder; ++n) {
            double sim = 0.0;
            for (const auto& [gram, w] : cand.weights[n]) {
                auto it = rv.weights[n].find(gram);
                if (it != rv.weights[n].end()) sim += std::min(w, it->second) * it->second;
            }
            if (cand.norm[n] > 0.0 && rv.norm[n] > 0.0) sim /= cand.norm[n] * rv.norm[n];
            order_sum[n] += sim * penalty;
        }
    }
    double score = 0.0;
    for (int n = 0; n < kCiderMaxOrder; ++n)
        score += order_sum[n] / static_cast<double>(references.size());
    return 10.0 * score / static_cast<double>(kCiderMaxOrder);
}

// ---------------------------------------------------------------------------
// CLIP-style embedding metrics.
// ---------------------------------------------------------------------------

struct ClipScores {
    double clip_score = 0.0;
    std::optional<double> ref_clip; // present when references were given
};

inline ClipScores clip_scores(std::span<const float> image_emb, std::span<const float> candidate_emb,
                              const std::vector<std::vector<float>>& reference_embs) {
    if (norm(image_emb) == 0.0 || norm(candidate_emb) == 0.0)
        throw DegenerateVectorError("clip_scores: zero embedding");
    ClipScores out;
    out.clip_score = 2.5 * std::max(cosine(image_emb, candidate_emb), 0.0);
    if (!reference_embs.empty()) {
        double best = 0.0;
        for (const auto& ref : reference_embs) {
            if (norm(std::span<const float>(ref)) == 0.0)
                throw DegenerateVectorError("clip_scores: zero reference embedding");
            best = std::max(best, std::max(cosine(candidate_emb, std::span<const float>(ref)), 0.0));
        }
        double c = out.clip_score;
        out.ref_clip = (c + best) > 0.0 ? 2.0 * c * best / (c + best) : 0.0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// nDCG with binary gains and log2(rank + 1) discount.
// ---------------------------------------------------------------------------

/// `ranked_relevance[i]` says whether the item at rank i+1 is relevant;
/// `total_relevant` sizes the ideal ranking (>= number of true flags).
inline double ndcg_from_flags(const std::vector<bool>& ranked_relevance, std::size_t total_relevant,
                              int cutoff) {
    if (cutoff < 1) throw ConfigError("ndcg: cutoff must be >= 1");
    if (total_relevant == 0) return 0.0;
    double dcg = 0.0;
    std::size_t limit = std::min(ranked_relevance.size(), static_cast<std::size_t>(cutoff));
    for (std::size_t i = 0; i < limit; ++i)
        if (ranked_relevance[i]) dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
    double idcg = 0.0;
    std::size_t ideal = std::min(total_relevant, static_cast<std::size_t>(cutoff));
    for (std::size_t i = 0; i < ideal; ++i) idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
    return idcg > 0.0 ? dcg / idcg : 0.0;
}

template <typename Item>
inline double ndcg(const std::vector<Item>& ranked_items, const std::unordered_set<Item>& relevant,
                   int cutoff) {
    std::vector<bool> flags;
    flags.reserve(ranked_items.size());
    for (const Item& item : ranked_items) flags.push_back(relevant.count(item) > 0);
    return ndcg_from_flags(flags, relevant.size(), cutoff);
}

// ---------------------------------------------------------------------------
// Pearson correlation (used to compare metric score lists).
// ---------------------------------------------------------------------------

inline double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size() || xs.size() < 2) throw ValueError("pearson: need two lists of equal size >= 2");
    double n = static_cast<double>(xs.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        double dx = xs[i] - mx;
        double dy = ys[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw ValueError("pearson: zero variance input");
    return sxy / std::sqrt(sxx * syy);
}

} // namespace mrag::metrics
