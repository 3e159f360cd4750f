// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "mrag/embedio.hpp"
#include "mrag/errors.hpp"
#include "mrag/genclient.hpp"
#include "mrag/mapping.hpp"
#include "mrag/metrics.hpp"
#include "mrag/rng.hpp"
#include "mrag/store.hpp"
#include "mrag/vecmath.hpp"

namespace mrag::pipeline {

// ---------------------------------------------------------------------------
// Prompt assembly.
// ---------------------------------------------------------------------------

/// s2d places the most similar description first; d2s places it last.
enum class Ordering { s2d, d2s };

inline std::string ordering_name(Ordering o) { return o == Ordering::s2d ? "s2d" : "d2s"; }

inline Ordering parse_ordering(std::string_view name) {
    if (name == "s2d" || name == "S2d") return Ordering::s2d;
    if (name == "d2s" || name == "d2S") return Ordering::d2s;
    throw ConfigError("unknown ordering '" + std::string(name) + "' (expected s2d or d2s)");
}

struct PromptTemplate {
    std::string prefix = "Show similar images: ";
    std::string suffix = " The image describes: ";
    std::string separator = "\n";
    Ordering ordering = Ordering::d2s;

    genclient::PromptShape shape() const { return genclient::PromptShape{prefix, suffix, separator}; }
};

/// Renders retrieved descriptions into a prompt. The result is ordered per
/// template.ordering, joined by the separator, and wrapped in prefix/suffix;
/// zero descriptions yield prefix+suffix verbatim.
inline std::string build_prompt(const PromptTemplate& tmpl, const store::RetrievalResult& descriptions) {
    std::string block;
    auto emit = [&](const store::RetrievalHit& hit) {
        if (!block.empty()) block += tmpl.separator;
        block += hit.caption;
    };
    if (tmpl.ordering == Ordering::s2d)
        for (const auto& hit : descriptions) emit(hit);
    else
        for (auto it = descriptions.rbegin(); it != descriptions.rend(); ++it) emit(*it);
    return tmpl.prefix + block + tmpl.suffix;
}

// ---------------------------------------------------------------------------
// Dataset views.
// ---------------------------------------------------------------------------

struct ImageRef {
    std::string id;
    embedio::Vec raw; // image embedding before preprocessing
};

/// One entry per distinct image_id, first-occurrence order and embedding.
inline std::vector<ImageRef> unique_images(const std::vector<embedio::PairRecord>& records) {
    std::vector<ImageRef> images;
    std::set<std::string> seen;
    for (const auto& r : records)
        if (seen.insert(r.image_id).second) images.push_back(ImageRef{r.image_id, r.image_emb.values});
    return images;
}

using ReferenceMap = std::map<std::string, std::vector<std::string>>;

inline ReferenceMap references_by_image(const std::vector<embedio::PairRecord>& records) {
    ReferenceMap refs;
    for (const auto& r : records) refs[r.image_id].push_back(r.caption);
    return refs;
}

/// Fits preprocessing statistics on the records and returns the preprocessed
/// (image, text) training pairs, aligned with the record order.
struct PreparedPairs {
    embedio::PreprocessStats stats;
    std::vector<embedio::Vec> images;
    std::vector<embedio::Vec> texts;
};

inline PreparedPairs prepare_pairs(const std::vector<embedio::PairRecord>& records,
                                   embedio::PreprocessFlags flags) {
    PreparedPairs out;
    out.stats = embedio::fit_preprocess(records, flags);
    out.images.reserve(records.size());
    out.texts.reserve(records.size());
    for (const auto& r : records) {
        out.images.push_back(embedio::apply_preprocess(r.image_emb, out.stats, embedio::Side::image).values);
        out.texts.push_back(embedio::apply_preprocess(r.text_emb, out.stats, embedio::Side::text).values);
    }
    return out;
}

inline mapping::MappingModel fit_mapping(const std::vector<embedio::Vec>& images,
                                         const std::vector<embedio::Vec>& texts,
                                         mapping::MapMethod method, double lambda,
                                         const embedio::PreprocessStats& stats) {
    mapping::MappingModel model = method == mapping::MapMethod::procrustes
                                      ? mapping::fit_procrustes(images, texts)
                                      : mapping::fit_ols(images, texts, lambda);
    model.stats = stats;
    return model;
}

/// Vector database initialised from the training captions.
inline store::VectorStore build_store(const std::vector<embedio::PairRecord>& records,
                                      const std::vector<embedio::Vec>& preprocessed_texts) {
    std::vector<store::StoreEntry> entries;
    entries.reserve(records.size());
    for (std::size_t i = 0; i < records.size(); ++i)
        entries.push_back(store::StoreEntry{preprocessed_texts[i], records[i].caption,
                                            store::Provenance::original, 0});
    return store::VectorStore::build(std::move(entries));
}

// ---------------------------------------------------------------------------
// Caption generation (retrieve, prompt, generate).
// ---------------------------------------------------------------------------

struct CaptionOutput {
    std::string image_id;
    std::string generated;
    store::RetrievalResult retrieved;
    std::string prompt;
};

struct CaptionFailure {
    std::string image_id;
    std::string message;
};

struct CaptionRun {
    std::vector<CaptionOutput> outputs; // dataset order, failed images omitted
    std::vector<CaptionFailure> failures;
};

struct CaptionConfig {
    int k = 4;
    PromptTemplate prompt;
    int max_tokens = 40;
    double temperature = 0.0;
    std::uint64_t seed = 0;
    int threads = 1;
};

namespace detail {

// Work is addressed by image index, so results and sampling seeds do not
// depend on the thread count. The first exception wins and is rethrown on
// the calling thread after all workers drain.
inline void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& body) {
    if (threads <= 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) body(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::mutex error_mutex;
    std::exception_ptr error;
    auto worker = [&] {
        while (!failed.load(std::memory_order_relaxed)) {
            std::size_t i = next.fetch_add(1);
            if (i >= count) return;
            try {
                body(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
                failed.store(true, std::memory_order_relaxed);
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    int n = std::min<int>(threads, static_cast<int>(count));
    pool.reserve(static_cast<std::size_t>(n));
    for (int t = 0; t < n; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

constexpr std::uint64_t kCaptionStream = 0xca0;
constexpr std::uint64_t kSampleStream = 0x5a0;

} // namespace detail

inline CaptionRun caption(const std::vector<ImageRef>& images, const mapping::MappingModel& model,
                          const store::VectorStore& vd, const CaptionConfig& config,
                          genclient::TextGenerator& llm) {
    if (vd.empty()) throw EmptyDatasetError("caption: vector store is empty");
    if (config.k < 1) throw ConfigError("caption: k must be >= 1");

    std::vector<std::optional<CaptionOutput>> slots(images.size());
    std::vector<std::optional<CaptionFailure>> errors(images.size());
    detail::parallel_for(images.size(), config.threads, [&](std::size_t i) {
        const ImageRef& image = images[i];
        embedio::Embedding pre =
            embedio::apply_preprocess(embedio::Embedding{image.id, image.raw}, model.stats,
                                      embedio::Side::image);
        embedio::Embedding query = mapping::apply_map(model, pre);
        store::RetrievalResult hits = vd.top_k(query.values, config.k);
        std::string prompt = build_prompt(config.prompt, hits);
        genclient::GenerationRequest request;
        request.prompt = prompt;
        request.max_tokens = config.max_tokens;
        request.temperature = config.temperature;
        request.num_samples = 1;
        request.seed = derive_seed(config.seed, detail::kCaptionStream, i);
        try {
            genclient::GenerationResponse response = llm.generate(request);
            slots[i] = CaptionOutput{image.id, response.texts.front(), std::move(hits), std::move(prompt)};
        } catch (const ProviderError& e) {
            errors[i] = CaptionFailure{image.id, e.what()};
        }
    });

    CaptionRun run;
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (slots[i]) run.outputs.push_back(std::move(*slots[i]));
        if (errors[i]) run.failures.push_back(std::move(*errors[i]));
    }
    return run;
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

struct EvalResult {
    double mean = 0.0;
    double stderr_ = 0.0; // sample standard deviation / sqrt(n)
    std::vector<double> per_item;
};

inline EvalResult summarize_scores(std::vector<double> per_item) {
    if (per_item.empty()) throw ReferenceError("summarize_scores: no scores");
    EvalResult result;
    result.per_item = std::move(per_item);
    double n = static_cast<double>(result.per_item.size());
    for (double v : result.per_item) result.mean += v;
    result.mean /= n;
    if (result.per_item.size() > 1) {
        double ss = 0.0;
        for (double v : result.per_item) ss += (v - result.mean) * (v - result.mean);
        result.stderr_ = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
    }
    return result;
}

namespace detail {

struct ItemScore {
    double value = 0.0;  // per-item score; BLEU is epsilon-smoothed here
    bool has_match = false; // true n-gram/subsequence evidence, unsmoothed
};

inline ItemScore item_score(metrics::MetricId tau, const metrics::TokenSequence& candidate,
                            const std::vector<metrics::TokenSequence>& references,
                            const metrics::CorpusStats* cider_stats) {
    ItemScore s;
    switch (tau) {
        case metrics::MetricId::bleu1:
        case metrics::MetricId::bleu2:
        case metrics::MetricId::bleu3:
        case metrics::MetricId::bleu4: {
            int order = 1 + static_cast<int>(tau) - static_cast<int>(metrics::MetricId::bleu1);
            s.value = metrics::bleu(candidate, references, order, metrics::BleuSmoothing::epsilon);
            s.has_match = metrics::bleu(candidate, references, order, metrics::BleuSmoothing::none) > 0.0;
            return s;
        }
        case metrics::MetricId::rouge_l:
            s.value = metrics::rouge_l(candidate, references);
            s.has_match = s.value > 0.0;
            return s;
        case metrics::MetricId::cider_d:
            if (cider_stats == nullptr) throw CorpusStatsError("cider_d scoring requires corpus statistics");
            s.value = metrics::cider_d(candidate, references, *cider_stats);
            s.has_match = s.value > 0.0;
            return s;
        default:
            throw ConfigError("metric '" + metrics::metric_name(tau) +
                              "' is not usable as a caption quality score");
    }
}

inline metrics::CorpusStats stats_from_references(const ReferenceMap& references) {
    std::vector<std::vector<metrics::TokenSequence>> images;
    images.reserve(references.size());
    for (const auto& [id, captions] : references) {
        std::vector<metrics::TokenSequence> refs;
        refs.reserve(captions.size());
        for (const std::string& c : captions) refs.push_back(metrics::tokenize(c));
        images.push_back(std::move(refs));
    }
    return metrics::build_corpus_stats(images);
}

} // namespace detail

/// Mean and standard error of the per-item metric over generated outputs.
inline EvalResult evaluate(const std::vector<CaptionOutput>& outputs, const ReferenceMap& references,
                           metrics::MetricId tau) {
    if (outputs.empty()) throw ReferenceError("evaluate: no outputs to score");
    metrics::CorpusStats stats;
    if (tau == metrics::MetricId::cider_d) stats = detail::stats_from_references(references);

    std::vector<double> per_item;
    per_item.reserve(outputs.size());
    for (const CaptionOutput& out : outputs) {
        auto it = references.find(out.image_id);
        if (it == references.end() || it->second.empty())
            throw ReferenceError("evaluate: no references for image '" + out.image_id + "'");
        std::vector<metrics::TokenSequence> refs;
        refs.reserve(it->second.size());
        for (const std::string& c : it->second) refs.push_back(metrics::tokenize(c));
        per_item.push_back(detail::item_score(tau, metrics::tokenize(out.generated), refs, &stats).value);
    }
    return summarize_scores(std::move(per_item));
}

// ---------------------------------------------------------------------------
// Continuous refinement.
// ---------------------------------------------------------------------------

struct RefinementState {
    int iteration = 0;
    std::string metric;
    std::vector<double> tau_bar_history; // one entry per completed iteration, index 0 = baseline
    std::vector<std::size_t> store_sizes;
    std::string stop_reason; // "", "no_improvement", "max_iters", "provider_error: ..."
};

inline nlohmann::json state_to_json(const RefinementState& state) {
    return nlohmann::json{{"iteration", state.iteration},
                          {"metric", state.metric},
                          {"tau_bar_history", state.tau_bar_history},
                          {"store_sizes", state.store_sizes},
                          {"stop_reason", state.stop_reason}};
}

inline RefinementState state_from_json(const nlohmann::json& j) {
    RefinementState state;
    state.iteration = j.at("iteration").get<int>();
    state.metric = j.at("metric").get<std::string>();
    state.tau_bar_history = j.at("tau_bar_history").get<std::vector<double>>();
    state.store_sizes = j.at("store_sizes").get<std::vector<std::size_t>>();
    state.stop_reason = j.value("stop_reason", "");
    if (state.tau_bar_history.size() != static_cast<std::size_t>(state.iteration) + 1 ||
        state.store_sizes.size() != state.tau_bar_history.size())
        throw FormatError("refinement state: history lengths do not match iteration counter");
    for (std::size_t i = 1; i < state.store_sizes.size(); ++i)
        if (state.store_sizes[i] < state.store_sizes[i - 1])
            throw FormatError("refinement state: store sizes must be non-decreasing");
    return state;
}

// Slack on the acceptance threshold so a candidate scoring exactly tau_bar
// (e.g. a sample that reproduces a reference) is kept despite rounding.
constexpr double kFilterSlack = 1e-9;

struct RefineConfig {
    metrics::MetricId tau = metrics::MetricId::cider_d;
    int k = 4;
    int max_iters = 3;
    int num_samples = 5;
    double sample_temperature = 0.9;
    double improvement_eps = 1e-4; // tau_bar must rise by more than this to continue
    int max_tokens = 40;
    std::uint64_t seed = 0;
    int threads = 1;
    embedio::PreprocessFlags flags;
    bool refit_stats = false; // refit preprocessing statistics after augmentation (ablation)
    mapping::MapMethod method = mapping::MapMethod::ols;
    double lambda = 0.0;
    PromptTemplate prompt;
    std::optional<std::filesystem::path> checkpoint_dir;
};

/// Audit record for one accepted synthetic description.
struct SyntheticAudit {
    std::string caption;
    int iteration = 0;
    double score = 0.0;
    double threshold = 0.0; // tau_bar of the previous iteration
};

struct RefineResult {
    RefinementState state;
    mapping::MappingModel model;
    store::VectorStore store;
    std::vector<SyntheticAudit> audit;
};

namespace detail {

inline std::string dedup_key(const std::string& text) {
    std::string key;
    for (const std::string& tok : metrics::tokenize(text)) {
        if (!key.empty()) key.push_back(' ');
        key += tok;
    }
    return key;
}

// One accepted synthetic description: enough to rebuild the augmented
// training pairs (and, under refit_stats, the statistics) from scratch.
struct SyntheticRecord {
    std::string image_id; // source training image
    std::string caption;
    embedio::Vec raw_text_emb; // provider output, before preprocessing
    int iteration = 0;
};

struct RefineLoop {
    RefineLoop(const std::vector<embedio::PairRecord>& train_records,
               const std::vector<embedio::PairRecord>& val_records, const RefineConfig& cfg,
               genclient::TextGenerator& generator, genclient::TextEmbedder& text_embedder)
        : train(train_records), val(val_records), config(cfg), llm(generator), embedder(text_embedder) {}

    const std::vector<embedio::PairRecord>& train;
    const std::vector<embedio::PairRecord>& val;
    const RefineConfig& config;
    genclient::TextGenerator& llm;
    genclient::TextEmbedder& embedder;

    RefineResult result;
    std::vector<embedio::Vec> pair_images; // preprocessed training pairs, grown by augmentation
    std::vector<embedio::Vec> pair_texts;
    std::vector<SyntheticRecord> synthetic;
    std::vector<ImageRef> train_images;
    ReferenceMap train_refs;
    std::vector<ImageRef> val_images;
    ReferenceMap val_refs;
    std::map<std::string, embedio::Vec> train_image_raw;
    std::map<std::string, embedio::Vec> train_image_pre; // preprocessed image embedding per image_id
    std::set<std::string> synthetic_keys;
    metrics::CorpusStats filter_stats;
    embedio::PreprocessStats frozen_stats; // fitted once on the original training split

    void write_checkpoint() const {
        const std::filesystem::path& dir = *config.checkpoint_dir;
        std::filesystem::create_directories(dir);
        std::string stem = "iter" + std::to_string(result.state.iteration);
        std::ofstream out(dir / (stem + ".json"));
        if (!out) throw FormatError("refine: cannot write checkpoint state");
        nlohmann::json j = state_to_json(result.state);
        nlohmann::json records = nlohmann::json::array();
        for (const SyntheticRecord& s : synthetic)
            records.push_back({{"image_id", s.image_id},
                               {"caption", s.caption},
                               {"raw_text_emb", s.raw_text_emb},
                               {"iteration", s.iteration}});
        j["synthetic"] = records;
        out << j.dump(2) << "\n";
        mapping::save_map(result.model, dir / (stem + ".map"));
        store::save_store(result.store, dir / (stem + ".store"));
    }

    double evaluate_validation(int iteration) {
        CaptionConfig cc;
        cc.k = config.k;
        cc.prompt = config.prompt;
        cc.max_tokens = config.max_tokens;
        cc.temperature = 0.0;
        cc.seed = derive_seed(config.seed, 0xe0a1, static_cast<std::uint64_t>(iteration));
        cc.threads = config.threads;
        CaptionRun run = caption(val_images, result.model, result.store, cc, llm);
        if (!run.failures.empty())
            throw ProviderError("refine: validation captioning failed for image '" +
                                run.failures.front().image_id + "': " + run.failures.front().message);
        return evaluate(run.outputs, val_refs, config.tau).mean;
    }

    void commit(double tau_bar) {
        result.state.tau_bar_history.push_back(tau_bar);
        result.state.store_sizes.push_back(result.store.size());
        if (config.checkpoint_dir) write_checkpoint();
    }

    // Statistics for the current training set; frozen by default, recomputed
    // over originals plus synthetic additions when refit_stats is enabled.
    embedio::PreprocessStats current_stats() const {
        if (!config.refit_stats || synthetic.empty()) return frozen_stats;
        embedio::PreprocessStats stats = frozen_stats;
        std::size_t d = stats.image_mean.size();
        std::vector<double> img_sum(d, 0.0), txt_sum(d, 0.0);
        double n_orig = static_cast<double>(train.size());
        for (std::size_t i = 0; i < d; ++i) {
            img_sum[i] = stats.image_mean[i] * n_orig;
            txt_sum[i] = stats.text_mean[i] * n_orig;
        }
        for (const SyntheticRecord& s : synthetic) {
            const embedio::Vec& img = train_image_raw.at(s.image_id);
            for (std::size_t i = 0; i < d; ++i) {
                img_sum[i] += img[i];
                txt_sum[i] += s.raw_text_emb[i];
            }
        }
        double n = n_orig + static_cast<double>(synthetic.size());
        for (std::size_t i = 0; i < d; ++i) {
            stats.image_mean[i] = img_sum[i] / n;
            stats.text_mean[i] = txt_sum[i] / n;
        }
        return stats;
    }

    void recompute_derived(const embedio::PreprocessStats& stats) {
        pair_images.clear();
        pair_texts.clear();
        pair_images.reserve(train.size() + synthetic.size());
        pair_texts.reserve(train.size() + synthetic.size());
        for (const auto& r : train) {
            pair_images.push_back(embedio::apply_preprocess(r.image_emb, stats, embedio::Side::image).values);
            pair_texts.push_back(embedio::apply_preprocess(r.text_emb, stats, embedio::Side::text).values);
        }
        train_image_pre.clear();
        for (const ImageRef& im : train_images)
            train_image_pre[im.id] =
                embedio::apply_preprocess(embedio::Embedding{im.id, im.raw}, stats, embedio::Side::image)
                    .values;
        for (const SyntheticRecord& s : synthetic) {
            pair_images.push_back(train_image_pre.at(s.image_id));
            pair_texts.push_back(
                embedio::apply_preprocess(embedio::Embedding{"", s.raw_text_emb}, stats, embedio::Side::text)
                    .values);
        }
    }

    // Store entries mirror the current pair_texts rows: originals first,
    // synthetic additions after, in acceptance order.
    store::VectorStore build_full_store() const {
        std::vector<store::StoreEntry> entries;
        entries.reserve(train.size() + synthetic.size());
        for (std::size_t i = 0; i < train.size(); ++i)
            entries.push_back(store::StoreEntry{pair_texts[i], train[i].caption, store::Provenance::original,
                                                0});
        for (std::size_t i = 0; i < synthetic.size(); ++i)
            entries.push_back(store::StoreEntry{pair_texts[train.size() + i], synthetic[i].caption,
                                                store::Provenance::synthetic, synthetic[i].iteration});
        return store::VectorStore::build(std::move(entries));
    }

    void prepare_common() {
        frozen_stats = embedio::fit_preprocess(train, config.flags);
        train_images = unique_images(train);
        train_refs = references_by_image(train);
        val_images = unique_images(val);
        val_refs = references_by_image(val);
        for (const ImageRef& im : train_images) train_image_raw[im.id] = im.raw;
        if (config.tau == metrics::MetricId::cider_d) filter_stats = stats_from_references(train_refs);
    }

    void initialize() {
        prepare_common();
        recompute_derived(frozen_stats);
        result.model = fit_mapping(pair_images, pair_texts, config.method, config.lambda, frozen_stats);
        result.store = build_full_store();
        result.state.metric = metrics::metric_name(config.tau);
        result.state.iteration = 0;
        commit(evaluate_validation(0));
    }

    void restore(const RefinementState& state, std::vector<SyntheticRecord> records,
                 mapping::MappingModel model, store::VectorStore vd) {
        prepare_common();
        synthetic = std::move(records);
        for (const SyntheticRecord& s : synthetic) {
            if (!train_image_raw.count(s.image_id))
                throw FormatError("resume_refine: checkpoint references unknown image '" + s.image_id + "'");
            synthetic_keys.insert(dedup_key(s.caption));
        }
        result.state = state;
        result.model = std::move(model);
        result.store = std::move(vd); // snapshot is authoritative for retrieval
        recompute_derived(result.model.stats);
    }

    // One refinement iteration. Returns the new tau_bar.
    double run_iteration(int iteration) {
        double threshold = result.state.tau_bar_history.back();

        // Sample candidate descriptions for every training image.
        struct Candidate {
            std::string image_id;
            std::string text;
            double score = 0.0;
        };
        std::vector<std::vector<Candidate>> per_image(train_images.size());
        detail::parallel_for(train_images.size(), config.threads, [&](std::size_t i) {
            const ImageRef& image = train_images[i];
            embedio::Embedding query =
                mapping::apply_map(result.model, embedio::Embedding{image.id, train_image_pre.at(image.id)});
            store::RetrievalResult hits = result.store.top_k(query.values, config.k);
            genclient::GenerationRequest request;
            request.prompt = build_prompt(config.prompt, hits);
            request.max_tokens = config.max_tokens;
            request.temperature = config.sample_temperature;
            request.num_samples = config.num_samples;
            request.seed = derive_seed(config.seed, kSampleStream + static_cast<std::uint64_t>(iteration), i);
            genclient::GenerationResponse response = llm.generate(request);
            std::vector<metrics::TokenSequence> refs;
            for (const std::string& c : train_refs.at(image.id)) refs.push_back(metrics::tokenize(c));
            for (const std::string& text : response.texts) {
                ItemScore s = item_score(config.tau, metrics::tokenize(text), refs,
                                         config.tau == metrics::MetricId::cider_d ? &filter_stats : nullptr);
                // Keep only descriptions at or above the running average that
                // carry real overlap evidence; zero-overlap text never enters
                // the store even when the threshold itself is zero.
                if (s.has_match && s.value >= threshold - kFilterSlack)
                    per_image[i].push_back(Candidate{image.id, text, s.value});
            }
        });

        // De-duplicate accepted synthetic captions across the whole run.
        std::vector<Candidate> accepted;
        for (const auto& group : per_image)
            for (const Candidate& c : group)
                if (synthetic_keys.insert(dedup_key(c.text)).second) accepted.push_back(c);

        if (!accepted.empty()) {
            std::vector<std::string> texts;
            texts.reserve(accepted.size());
            for (const Candidate& c : accepted) texts.push_back(c.text);
            std::vector<embedio::Embedding> raw = embedder.embed(texts);
            int expected = result.model.dim;
            for (std::size_t i = 0; i < raw.size(); ++i) {
                if (raw[i].dim() != expected)
                    throw DimensionError("refine: embedder returned dimension " +
                                         std::to_string(raw[i].dim()) + ", dataset has " +
                                         std::to_string(expected));
                synthetic.push_back(SyntheticRecord{accepted[i].image_id, accepted[i].text,
                                                    std::move(raw[i].values), iteration});
                result.audit.push_back(
                    SyntheticAudit{accepted[i].text, iteration, accepted[i].score, threshold});
            }

            embedio::PreprocessStats stats = current_stats();
            if (config.refit_stats) {
                // Statistics moved: re-preprocess everything and rebuild.
                recompute_derived(stats);
                result.store = build_full_store();
            } else {
                std::vector<store::StoreEntry> entries;
                std::size_t first = synthetic.size() - accepted.size();
                for (std::size_t i = first; i < synthetic.size(); ++i) {
                    embedio::Vec pre = embedio::apply_preprocess(
                                           embedio::Embedding{"", synthetic[i].raw_text_emb}, stats,
                                           embedio::Side::text)
                                           .values;
                    pair_images.push_back(train_image_pre.at(synthetic[i].image_id));
                    pair_texts.push_back(pre);
                    entries.push_back(store::StoreEntry{std::move(pre), synthetic[i].caption,
                                                        store::Provenance::synthetic, iteration});
                }
                result.store = result.store.append(entries);
            }
            result.model = fit_mapping(pair_images, pair_texts, config.method, config.lambda, stats);
        }

        result.state.iteration = iteration;
        double tau_bar = evaluate_validation(iteration);
        commit(tau_bar);
        return tau_bar;
    }

    void run_from(int first_iteration) {
        for (int it = first_iteration; it <= config.max_iters; ++it) {
            double previous = result.state.tau_bar_history.back();
            RefinementState saved_state = result.state;
            mapping::MappingModel saved_model = result.model;
            store::VectorStore saved_store = result.store;
            std::size_t saved_audit = result.audit.size();
            std::size_t saved_synthetic = synthetic.size();
            try {
                double now = run_iteration(it);
                if (now <= previous + config.improvement_eps) {
                    result.state.stop_reason = "no_improvement";
                    return;
                }
            } catch (const ProviderError& e) {
                result.state = std::move(saved_state);
                result.model = std::move(saved_model);
                result.store = std::move(saved_store);
                result.audit.resize(saved_audit);
                synthetic.resize(saved_synthetic);
                synthetic_keys.clear();
                for (const SyntheticRecord& s : synthetic) synthetic_keys.insert(dedup_key(s.caption));
                recompute_derived(result.model.stats);
                result.state.stop_reason = std::string("provider_error: ") + e.what();
                return;
            }
        }
        result.state.stop_reason = "max_iters";
    }
};

} // namespace detail

/// Continuous refinement: per iteration, sample synthetic descriptions for
/// the training images, keep those scoring at least the previous validation
/// average tau_bar (minus duplicates), embed and append them to the store and
/// the training pairs, refit the mapping, and re-evaluate. Stops when tau_bar
/// no longer improves, max_iters is reached, or a provider failure rolls the
/// iteration back.
inline RefineResult refine(const std::vector<embedio::PairRecord>& train,
                           const std::vector<embedio::PairRecord>& val, const RefineConfig& config,
                           genclient::TextGenerator& llm, genclient::TextEmbedder& embedder) {
    if (config.max_iters < 0) throw ConfigError("refine: max_iters must be >= 0");
    if (config.num_samples < 1) throw ConfigError("refine: num_samples must be >= 1");
    if (val.empty()) throw EmptyDatasetError("refine: validation set is empty");
    detail::RefineLoop loop(train, val, config, llm, embedder);
    loop.initialize();
    if (config.max_iters == 0)
        loop.result.state.stop_reason = "max_iters";
    else
        loop.run_from(1);
    return loop.result;
}

/// Continues a checkpointed refinement run from its latest iteration. The
/// run's configuration (seed, metric, k, samples) must match the original
/// for the continuation to be equivalent to an uninterrupted run.
inline RefineResult resume_refine(const std::filesystem::path& checkpoint_dir,
                                  const std::vector<embedio::PairRecord>& train,
                                  const std::vector<embedio::PairRecord>& val, const RefineConfig& config,
                                  genclient::TextGenerator& llm, genclient::TextEmbedder& embedder) {
    int latest = -1;
    for (const auto& entry : std::filesystem::directory_iterator(checkpoint_dir)) {
        std::string name = entry.path().filename().string();
        if (name.rfind("iter", 0) == 0 && name.size() > 9 && name.substr(name.size() - 5) == ".json")
            latest = std::max(latest, std::stoi(name.substr(4, name.size() - 9)));
    }
    if (latest < 0) throw FormatError("resume_refine: no iter*.json checkpoints in " +
                                      checkpoint_dir.string());
    std::string stem = "iter" + std::to_string(latest);
    std::ifstream in(checkpoint_dir / (stem + ".json"));
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw FormatError("resume_refine: malformed checkpoint state");
    RefinementState state = state_from_json(j);
    if (state.metric != metrics::metric_name(config.tau))
        throw ConfigError("resume_refine: checkpoint metric '" + state.metric +
                          "' does not match configured '" + metrics::metric_name(config.tau) + "'");
    std::vector<detail::SyntheticRecord> records;
    for (const auto& r : j.value("synthetic", nlohmann::json::array()))
        records.push_back(detail::SyntheticRecord{r.at("image_id").get<std::string>(),
                                                  r.at("caption").get<std::string>(),
                                                  r.at("raw_text_emb").get<embedio::Vec>(),
                                                  r.at("iteration").get<int>()});

    detail::RefineLoop loop(train, val, config, llm, embedder);
    loop.restore(state, std::move(records), mapping::load_map(checkpoint_dir / (stem + ".map")),
                 store::load_store(checkpoint_dir / (stem + ".store")));
    if (!loop.result.state.stop_reason.empty() && loop.result.state.stop_reason != "max_iters")
        return loop.result; // terminal state, nothing to continue
    loop.result.state.stop_reason.clear();
    if (loop.result.state.iteration >= config.max_iters)
        loop.result.state.stop_reason = "max_iters";
    else
        loop.run_from(loop.result.state.iteration + 1);
    return loop.result;
}

// ---------------------------------------------------------------------------
// Token-ranking diagnostic.
// ---------------------------------------------------------------------------

struct VocabEntry {
    std::string token;
    embedio::Vec emb; // preprocessed as a text-side vector
};

/// Ranks vocabulary tokens by cosine against the mapped image embedding and
/// scores the ranking with nDCG; a token is relevant when it appears in any
/// reference caption.
inline double rank_tokens(const mapping::MappingModel& model, const std::vector<VocabEntry>& vocab,
                          const embedio::Embedding& image_raw, const std::vector<std::string>& references,
                          int cutoff) {
    if (vocab.empty()) throw EmptyVocabularyError("rank_tokens: empty vocabulary");
    embedio::Embedding pre = embedio::apply_preprocess(image_raw, model.stats, embedio::Side::image);
    embedio::Embedding query = mapping::apply_map(model, pre);

    std::vector<std::pair<double, std::size_t>> ranked;
    ranked.reserve(vocab.size());
    for (std::size_t i = 0; i < vocab.size(); ++i)
        ranked.emplace_back(cosine(std::span<const float>(vocab[i].emb), std::span<const float>(query.values)),
                            i);
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });

    std::set<std::string> relevant_tokens;
    for (const std::string& ref : references)
        for (const std::string& tok : metrics::tokenize(ref)) relevant_tokens.insert(tok);

    std::vector<bool> flags;
    flags.reserve(ranked.size());
    std::size_t total_relevant = 0;
    for (const VocabEntry& v : vocab)
        if (relevant_tokens.count(v.token)) ++total_relevant;
    for (const auto& [sim, idx] : ranked) flags.push_back(relevant_tokens.count(vocab[idx].token) > 0);
    return metrics::ndcg_from_flags(flags, total_relevant, cutoff);
}

// ---------------------------------------------------------------------------
// Caption output files: one JSON object per image, dataset order.
// ---------------------------------------------------------------------------

inline void write_caption_outputs(const std::vector<CaptionOutput>& outputs,
                                  const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw FormatError("write_caption_outputs: cannot open " + path.string());
    for (const CaptionOutput& o : outputs) {
        nlohmann::json retrieved = nlohmann::json::array();
        for (const store::RetrievalHit& hit : o.retrieved)
            retrieved.push_back({{"text", hit.caption}, {"score", hit.similarity}});
        out << nlohmann::json{{"image_id", o.image_id},
                              {"caption", o.generated},
                              {"retrieved", retrieved},
                              {"prompt", o.prompt}}
                   .dump()
            << "\n";
    }
}

inline std::vector<CaptionOutput> load_caption_outputs(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("load_caption_outputs: cannot open " + path.string());
    std::vector<CaptionOutput> outputs;
    std::string line;
    while (std::getline(in, line)) {
        if (embedio::trim(line).empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("image_id") || !j.contains("caption"))
            throw FormatError("load_caption_outputs: bad line in " + path.string());
        CaptionOutput o;
        o.image_id = j["image_id"].get<std::string>();
        o.generated = j["caption"].get<std::string>();
        o.prompt = j.value("prompt", "");
        if (j.contains("retrieved"))
            for (const auto& r : j["retrieved"])
                o.retrieved.push_back(store::RetrievalHit{r.value("score", 0.0), 0, r.value("text", "")});
        outputs.push_back(std::move(o));
    }
    return outputs;
}

} // namespace mrag::pipeline
