// SPDX-License-Identifier: Apache-2.0
//
// mrag: retrieval-augmented caption generation over precomputed embeddings.
// Subcommands: ingest, fit-map, retrieve, caption, refine, eval, rank-tokens,
// make-fixture. Exit codes: 0 success, 2 usage/config, 3 data error,
// 4 provider error.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mrag/embedio.hpp"
#include "mrag/errors.hpp"
#include "mrag/genclient.hpp"
#include "mrag/mapping.hpp"
#include "mrag/metrics.hpp"
#include "mrag/pipeline.hpp"
#include "mrag/rng.hpp"
#include "mrag/store.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

struct GlobalOptions {
    std::uint64_t seed = 0;
    bool offline = false;
    int threads = 1;
    std::string endpoint;
    std::string token;
    int timeout_ms = 30000;
    int max_retries = 2;
    int max_in_flight = 4;
};

mrag::genclient::ProviderConfig provider_config(const GlobalOptions& g) {
    mrag::genclient::ProviderConfig c;
    c.endpoint = g.endpoint;
    c.bearer_token = g.token;
    c.timeout = std::chrono::milliseconds(g.timeout_ms);
    c.max_retries = g.max_retries;
    c.max_in_flight = g.max_in_flight;
    return c;
}

std::uint64_t file_checksum(const fs::path& path, std::uint64_t seed) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw mrag::FormatError("cannot open " + path.string());
    char buf[65536];
    std::uint64_t h = seed;
    while (in.read(buf, sizeof buf) || in.gcount() > 0)
        h = mrag::fnv1a64(std::string_view(buf, static_cast<std::size_t>(in.gcount())), h);
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// Karpathy-style split file: {"train": [indices], "val": [...], "test": [...]}.
std::vector<mrag::embedio::PairRecord> apply_split(const std::vector<mrag::embedio::PairRecord>& records,
                                                   const fs::path& split_path, const std::string& subset) {
    std::ifstream in(split_path);
    if (!in) throw mrag::FormatError("cannot open split file " + split_path.string());
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains(subset))
        throw mrag::FormatError("split file has no '" + subset + "' list");
    std::vector<mrag::embedio::PairRecord> out;
    for (const auto& idx : j[subset]) {
        auto i = idx.get<std::int64_t>();
        if (i < 0 || i >= static_cast<std::int64_t>(records.size()))
            throw mrag::FormatError("split index " + std::to_string(i) + " out of range");
        out.push_back(records[static_cast<std::size_t>(i)]);
    }
    return out;
}

mrag::pipeline::PromptTemplate prompt_from(const std::string& prefix, const std::string& suffix,
                                           const std::string& separator, const std::string& ordering) {
    mrag::pipeline::PromptTemplate t;
    t.prefix = prefix;
    t.suffix = suffix;
    t.separator = separator;
    t.ordering = mrag::pipeline::parse_ordering(ordering);
    return t;
}

// Store for retrieval: either a snapshot prefix or built from a dataset
// manifest with the model's preprocessing applied to the text side.
mrag::store::VectorStore load_retrieval_store(const std::string& snapshot_prefix,
                                              const std::string& store_manifest,
                                              const mrag::mapping::MappingModel& model) {
    if (!snapshot_prefix.empty()) return mrag::store::load_store(snapshot_prefix);
    if (store_manifest.empty()) throw mrag::ConfigError("need --store or --store-manifest");
    auto records = mrag::embedio::load_dataset(store_manifest);
    std::vector<mrag::store::StoreEntry> entries;
    entries.reserve(records.size());
    for (const auto& r : records)
        entries.push_back(mrag::store::StoreEntry{
            mrag::embedio::apply_preprocess(r.text_emb, model.stats, mrag::embedio::Side::text).values,
            r.caption, mrag::store::Provenance::original, 0});
    return mrag::store::VectorStore::build(std::move(entries));
}

int cmd_ingest(const std::string& manifest) {
    auto records = mrag::embedio::load_dataset(manifest);
    auto header = mrag::embedio::read_manifest_header(manifest);
    std::uint64_t checksum = file_checksum(header.image_emb, 0xcbf29ce484222325ULL);
    checksum = file_checksum(header.text_emb, checksum);
    json out{{"n", records.size()}, {"dim", header.dim}, {"checksum", hex64(checksum)}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

struct FitMapArgs {
    std::string manifest;
    std::string out = "model.map";
    std::string method = "ols";
    double lambda = 0.0;
    bool center = true;
    bool normalize = true;
};

int cmd_fit_map(const FitMapArgs& args) {
    auto records = mrag::embedio::load_dataset(args.manifest);
    mrag::pipeline::PreparedPairs prepared =
        mrag::pipeline::prepare_pairs(records, mrag::embedio::PreprocessFlags{args.center, args.normalize});
    mrag::mapping::MappingModel model =
        mrag::pipeline::fit_mapping(prepared.images, prepared.texts, mrag::mapping::parse_method(args.method),
                                    args.lambda, prepared.stats);
    mrag::mapping::save_map(model, args.out);

    json out{{"dim", model.dim},
             {"method", mrag::mapping::method_name(model.method)},
             {"lambda", model.lambda},
             {"params", static_cast<std::int64_t>(model.dim) * model.dim},
             {"pairs", records.size()},
             {"residual", mrag::mapping::residual(model, prepared.images, prepared.texts)},
             {"model_file", args.out}};
    if (model.method == mrag::mapping::MapMethod::procrustes)
        out["orthogonality_defect"] = mrag::mapping::orthogonality_defect(model);
    else {
        out["condition_estimate"] = model.condition_estimate;
        out["used_pseudoinverse"] = model.used_pseudoinverse;
        if (model.condition_estimate > mrag::mapping::kConditionWarnThreshold)
            std::cerr << "warning: normal equations condition estimate " << model.condition_estimate
                      << " exceeds " << mrag::mapping::kConditionWarnThreshold << "\n";
    }
    std::cout << out.dump(2) << "\n";
    return 0;
}

struct RetrieveArgs {
    std::string map_file;
    std::string store_prefix;
    std::string store_manifest;
    std::string images_manifest;
    std::string out = "retrieved.jsonl";
    int k = 4;
};

int cmd_retrieve(const RetrieveArgs& args) {
    mrag::mapping::MappingModel model = mrag::mapping::load_map(args.map_file);
    mrag::store::VectorStore vd = load_retrieval_store(args.store_prefix, args.store_manifest, model);
    auto records = mrag::embedio::load_dataset(args.images_manifest);
    auto images = mrag::pipeline::unique_images(records);

    std::ofstream out(args.out);
    if (!out) throw mrag::FormatError("cannot open " + args.out);
    for (const auto& image : images) {
        auto pre = mrag::embedio::apply_preprocess(mrag::embedio::Embedding{image.id, image.raw},
                                                   model.stats, mrag::embedio::Side::image);
        auto hits = vd.top_k(mrag::mapping::apply_map(model, pre).values, args.k);
        json retrieved = json::array();
        for (const auto& hit : hits) retrieved.push_back({{"text", hit.caption}, {"score", hit.similarity}});
        out << json{{"image_id", image.id}, {"retrieved", retrieved}}.dump() << "\n";
    }
    std::cerr << "wrote " << images.size() << " retrievals to " << args.out << "\n";
    return 0;
}

struct CaptionArgs {
    std::string map_file;
    std::string store_prefix;
    std::string store_manifest;
    std::string images_manifest;
    std::string split_file;
    std::string subset = "test";
    std::string out = "captions.jsonl";
    int k = 4;
    std::string ordering = "d2s";
    std::string prefix = "Show similar images: ";
    std::string suffix = " The image describes: ";
    std::string separator = "\n";
    int max_tokens = 40;
    double temperature = 0.0;
};

int cmd_caption(const CaptionArgs& args, const GlobalOptions& g) {
    mrag::mapping::MappingModel model = mrag::mapping::load_map(args.map_file);
    mrag::store::VectorStore vd = load_retrieval_store(args.store_prefix, args.store_manifest, model);
    auto records = mrag::embedio::load_dataset(args.images_manifest);
    if (!args.split_file.empty()) records = apply_split(records, args.split_file, args.subset);
    auto images = mrag::pipeline::unique_images(records);

    mrag::pipeline::CaptionConfig cc;
    cc.k = args.k;
    cc.prompt = prompt_from(args.prefix, args.suffix, args.separator, args.ordering);
    cc.max_tokens = args.max_tokens;
    cc.temperature = args.temperature;
    cc.seed = g.seed;
    cc.threads = g.threads;

    auto llm = mrag::genclient::make_generator(provider_config(g), g.offline, cc.prompt.shape());
    mrag::pipeline::CaptionRun run = mrag::pipeline::caption(images, model, vd, cc, *llm);
    mrag::pipeline::write_caption_outputs(run.outputs, args.out);
    for (const auto& f : run.failures)
        std::cerr << "warning: image '" << f.image_id << "' failed: " << f.message << "\n";
    std::cerr << "wrote " << run.outputs.size() << " captions to " << args.out << "\n";
    if (!run.failures.empty() && run.outputs.empty())
        throw mrag::ProviderError("caption: all images failed");
    return 0;
}

struct RefineArgs {
    std::string train_manifest;
    std::string val_manifest;
    std::string manifest;
    std::string split_file;
    std::string checkpoint_dir = "checkpoints";
    bool resume = false;
    std::string metric = "cider_d";
    int k = 4;
    int max_iters = 3;
    int num_samples = 5;
    double sample_temperature = 0.9;
    double improvement_eps = 1e-4;
    std::string method = "ols";
    double lambda = 0.0;
    bool center = true;
    bool normalize = true;
    bool refit_stats = false;
    std::string ordering = "d2s";
    std::string prefix = "Show similar images: ";
    std::string suffix = " The image describes: ";
    std::string separator = "\n";
    int max_tokens = 40;
};

int cmd_refine(const RefineArgs& args, const GlobalOptions& g) {
    std::vector<mrag::embedio::PairRecord> train, val;
    if (!args.manifest.empty() && !args.split_file.empty()) {
        auto records = mrag::embedio::load_dataset(args.manifest);
        train = apply_split(records, args.split_file, "train");
        val = apply_split(records, args.split_file, "val");
    } else if (!args.train_manifest.empty() && !args.val_manifest.empty()) {
        train = mrag::embedio::load_dataset(args.train_manifest);
        val = mrag::embedio::load_dataset(args.val_manifest);
    } else {
        throw mrag::ConfigError("refine needs --train-manifest/--val-manifest or --manifest/--split");
    }

    mrag::pipeline::RefineConfig rc;
    rc.tau = mrag::metrics::parse_metric(args.metric);
    rc.k = args.k;
    rc.max_iters = args.max_iters;
    rc.num_samples = args.num_samples;
    rc.sample_temperature = args.sample_temperature;
    rc.improvement_eps = args.improvement_eps;
    rc.max_tokens = args.max_tokens;
    rc.seed = g.seed;
    rc.threads = g.threads;
    rc.flags = mrag::embedio::PreprocessFlags{args.center, args.normalize};
    rc.refit_stats = args.refit_stats;
    rc.method = mrag::mapping::parse_method(args.method);
    rc.lambda = args.lambda;
    rc.prompt = prompt_from(args.prefix, args.suffix, args.separator, args.ordering);
    rc.checkpoint_dir = fs::path(args.checkpoint_dir);

    int dim = train.empty() ? 0 : train.front().image_emb.dim();
    auto llm = mrag::genclient::make_generator(provider_config(g), g.offline, rc.prompt.shape());
    auto embedder = mrag::genclient::make_embedder(provider_config(g), g.offline, dim);

    mrag::pipeline::RefineResult result =
        args.resume ? mrag::pipeline::resume_refine(args.checkpoint_dir, train, val, rc, *llm, *embedder)
                    : mrag::pipeline::refine(train, val, rc, *llm, *embedder);

    json out = mrag::pipeline::state_to_json(result.state);
    out["accepted_synthetic"] = result.audit.size();
    std::cout << out.dump(2) << "\n";
    return 0;
}

struct EvalArgs {
    std::string outputs;
    std::string refs_manifest;
    std::vector<std::string> metric_names{"bleu@1", "bleu@2", "bleu@3", "bleu@4", "rouge_l", "cider_d"};
};

int cmd_eval(const EvalArgs& args) {
    auto outputs = mrag::pipeline::load_caption_outputs(args.outputs);
    auto refs = mrag::pipeline::references_by_image(mrag::embedio::load_dataset(args.refs_manifest));
    json report = json::object();
    for (const std::string& name : args.metric_names) {
        auto id = mrag::metrics::parse_metric(name);
        auto result = mrag::pipeline::evaluate(outputs, refs, id);
        mrag::metrics::MetricScore score{id, result.mean};
        report[mrag::metrics::metric_name(score.id)] = {{"mean", score.value}, {"stderr", result.stderr_}};
    }
    report["spice"] = "n/a";
    std::cout << report.dump(2) << "\n";
    return 0;
}

struct RankTokensArgs {
    std::string map_file;
    std::string vocab_file;
    std::string images_manifest;
    std::string out;
    int cutoff = 10;
};

// Vocabulary file: header {"emb": file, "dim": d}, then {"token", "row"}
// per line. Token embeddings are stored raw and preprocessed as text-side
// vectors here.
std::vector<mrag::pipeline::VocabEntry> load_vocab(const fs::path& path,
                                                   const mrag::mapping::MappingModel& model) {
    std::ifstream in(path);
    if (!in) throw mrag::FormatError("cannot open vocabulary " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw mrag::FormatError("empty vocabulary file");
    json header = json::parse(line, nullptr, false);
    if (header.is_discarded() || !header.contains("emb") || !header.contains("dim"))
        throw mrag::FormatError("malformed vocabulary header");
    fs::path emb_path(header["emb"].get<std::string>());
    if (!emb_path.is_absolute()) emb_path = path.parent_path() / emb_path;
    auto matrix = mrag::embedio::read_emb(emb_path);
    if (matrix.dim != header["dim"].get<int>())
        throw mrag::DimensionError("vocabulary embedding dimension disagrees with header");

    std::vector<mrag::pipeline::VocabEntry> vocab;
    while (std::getline(in, line)) {
        if (mrag::embedio::trim(line).empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("token") || !j.contains("row"))
            throw mrag::FormatError("malformed vocabulary line");
        auto row = j["row"].get<std::int64_t>();
        if (row < 0 || row >= static_cast<std::int64_t>(matrix.rows.size()))
            throw mrag::FormatError("vocabulary row out of range");
        vocab.push_back(mrag::pipeline::VocabEntry{
            j["token"].get<std::string>(),
            mrag::embedio::apply_preprocess(
                mrag::embedio::Embedding{"", matrix.rows[static_cast<std::size_t>(row)]}, model.stats,
                mrag::embedio::Side::text)
                .values});
    }
    return vocab;
}

int cmd_rank_tokens(const RankTokensArgs& args) {
    mrag::mapping::MappingModel model = mrag::mapping::load_map(args.map_file);
    auto vocab = load_vocab(args.vocab_file, model);
    auto records = mrag::embedio::load_dataset(args.images_manifest);
    auto images = mrag::pipeline::unique_images(records);
    auto refs = mrag::pipeline::references_by_image(records);

    std::ofstream out;
    if (!args.out.empty()) {
        out.open(args.out);
        if (!out) throw mrag::FormatError("cannot open " + args.out);
    }
    double sum = 0.0;
    for (const auto& image : images) {
        double score = mrag::pipeline::rank_tokens(model, vocab, mrag::embedio::Embedding{image.id, image.raw},
                                                   refs.at(image.id), args.cutoff);
        sum += score;
        if (out.is_open()) out << json{{"image_id", image.id}, {"ndcg", score}}.dump() << "\n";
    }
    json report{{"ndcg_mean", images.empty() ? 0.0 : sum / static_cast<double>(images.size())},
                {"cutoff", args.cutoff},
                {"images", images.size()},
                {"vocab", vocab.size()}};
    std::cout << report.dump(2) << "\n";
    return 0;
}

struct FixtureArgs {
    std::string out_dir = "fixture";
    std::string name = "demo";
    int dim = 16;
    int train_images = 24;
    int val_images = 6;
    int test_images = 6;
    int captions_per_image = 2;
    double noise = 0.05;
};

// Synthetic dataset: captions drawn from a small word bank, text embeddings
// from the offline hash embedder, image embeddings a fixed random rotation
// of the text embedding plus Gaussian noise. Gives retrieval a real
// cross-modal gap that the fitted mapping can close.
int cmd_make_fixture(const FixtureArgs& args, const GlobalOptions& g) {
    if (args.dim < 2) throw mrag::ConfigError("make-fixture: dim must be >= 2");
    mrag::SplitMix64 rng(mrag::derive_seed(g.seed, 0xf1f7));
    mrag::genclient::HashEmbedder embedder(args.dim);

    Eigen::MatrixXd gauss(args.dim, args.dim);
    for (int r = 0; r < args.dim; ++r)
        for (int c = 0; c < args.dim; ++c) gauss(r, c) = rng.next_gaussian();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(gauss);
    Eigen::MatrixXd rotation = qr.householderQ();

    const std::vector<std::string> subjects{"a dog", "a cat", "two people", "a red bus",
                                            "an old train", "a small boat", "a brown horse", "a child"};
    const std::vector<std::string> actions{"running", "sitting", "standing", "sleeping",
                                           "jumping", "waiting", "playing", "walking"};
    const std::vector<std::string> places{"on the beach", "in a park", "near the station", "on a street",
                                          "by the river", "in the snow", "at the market", "under a tree"};

    auto make_caption = [&](int image, int variant) {
        std::string s = subjects[static_cast<std::size_t>(rng.next_below(subjects.size()))] + " " +
                        actions[static_cast<std::size_t>(rng.next_below(actions.size()))] + " " +
                        places[static_cast<std::size_t>(rng.next_below(places.size()))];
        return s + " number " + std::to_string(image) + (variant > 0 ? " variant " + std::to_string(variant)
                                                                     : std::string());
    };

    auto make_split = [&](const std::string& split, int count, int id_base) {
        std::vector<mrag::embedio::PairRecord> records;
        for (int i = 0; i < count; ++i) {
            std::string image_id = split + "_" + std::to_string(id_base + i);
            // one shared image embedding per image, derived from its first caption
            mrag::embedio::Vec first_text;
            mrag::embedio::Vec image_vec;
            for (int c = 0; c < args.captions_per_image; ++c) {
                std::string caption = make_caption(id_base + i, c);
                mrag::embedio::Vec text = embedder.embed_one(caption);
                if (c == 0) {
                    first_text = text;
                    Eigen::VectorXd t(args.dim);
                    for (int k = 0; k < args.dim; ++k) t[k] = first_text[static_cast<std::size_t>(k)];
                    Eigen::VectorXd v = rotation * t;
                    image_vec.resize(static_cast<std::size_t>(args.dim));
                    for (int k = 0; k < args.dim; ++k)
                        image_vec[static_cast<std::size_t>(k)] =
                            static_cast<float>(v[k] + args.noise * rng.next_gaussian());
                }
                mrag::embedio::PairRecord rec;
                rec.image_id = image_id;
                rec.caption = caption;
                rec.image_emb = mrag::embedio::Embedding{image_id, image_vec};
                rec.text_emb = mrag::embedio::Embedding{image_id, text};
                records.push_back(std::move(rec));
            }
        }
        mrag::embedio::write_dataset(args.out_dir, args.name + "." + split, records, args.dim);
        return records.size();
    };

    json out{{"dir", args.out_dir},
             {"dim", args.dim},
             {"train_records", make_split("train", args.train_images, 0)},
             {"val_records", make_split("val", args.val_images, 1000)},
             {"test_records", make_split("test", args.test_images, 2000)}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"mrag: training-free retrieval-augmented caption generation"};
    app.require_subcommand(1);
    app.set_config("--config", "", "Read options from a TOML config file");
    app.fallthrough();

    GlobalOptions g;
    app.add_option("--seed", g.seed, "Seed for all randomized behavior")->capture_default_str();
    app.add_flag("--offline", g.offline, "Use deterministic mock providers")->envname("MRAG_OFFLINE");
    app.add_option("--threads", g.threads, "Worker threads for per-image generation")
        ->capture_default_str();
    app.add_option("--endpoint", g.endpoint, "Provider endpoint, e.g. http://localhost:8080")
        ->envname("MRAG_ENDPOINT");
    app.add_option("--token", g.token, "Bearer token for the provider");
    app.add_option("--timeout-ms", g.timeout_ms, "Provider request timeout")->capture_default_str();
    app.add_option("--max-retries", g.max_retries, "Provider retry count")->capture_default_str();
    app.add_option("--max-in-flight", g.max_in_flight, "Concurrent provider requests")
        ->capture_default_str();

    // ingest
    auto* ingest = app.add_subcommand("ingest", "Validate a dataset and print its summary");
    std::string ingest_manifest;
    ingest->add_option("--manifest", ingest_manifest, "Dataset manifest (.jsonl)")->required();

    // fit-map
    auto* fit = app.add_subcommand("fit-map", "Fit the image-to-text linear mapping");
    FitMapArgs fit_args;
    fit->add_option("--manifest", fit_args.manifest, "Training dataset manifest")->required();
    fit->add_option("--out", fit_args.out, "Output model file")->capture_default_str();
    fit->add_option("--method", fit_args.method, "ols | ridge | procrustes")->capture_default_str();
    fit->add_option("--lambda", fit_args.lambda, "Ridge strength (>= 0)")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    fit->add_flag("--center,!--no-center", fit_args.center, "Mean-center embeddings");
    fit->add_flag("--normalize,!--no-normalize", fit_args.normalize, "Length-normalize embeddings");

    // retrieve
    auto* retrieve = app.add_subcommand("retrieve", "Top-k caption retrieval for images");
    RetrieveArgs retrieve_args;
    retrieve->add_option("--map", retrieve_args.map_file, "Fitted mapping file")->required();
    retrieve->add_option("--store", retrieve_args.store_prefix, "Store snapshot prefix");
    retrieve->add_option("--store-manifest", retrieve_args.store_manifest,
                         "Dataset manifest to build the store from");
    retrieve->add_option("--images", retrieve_args.images_manifest, "Manifest with query images")->required();
    retrieve->add_option("--out", retrieve_args.out, "Output JSONL")->capture_default_str();
    retrieve->add_option("-k,--k", retrieve_args.k, "Captions per image")->capture_default_str();

    // caption
    auto* caption = app.add_subcommand("caption", "Generate descriptions for images");
    CaptionArgs caption_args;
    caption->add_option("--map", caption_args.map_file, "Fitted mapping file")->required();
    caption->add_option("--store", caption_args.store_prefix, "Store snapshot prefix");
    caption->add_option("--store-manifest", caption_args.store_manifest,
                        "Dataset manifest to build the store from");
    caption->add_option("--images", caption_args.images_manifest, "Manifest with images to caption")
        ->required();
    caption->add_option("--split", caption_args.split_file, "Karpathy-style split index file");
    caption->add_option("--subset", caption_args.subset, "Split subset to caption")->capture_default_str();
    caption->add_option("--out", caption_args.out, "Output JSONL")->capture_default_str();
    caption->add_option("-k,--k", caption_args.k, "Retrieved captions per prompt")->capture_default_str();
    caption->add_option("--ordering", caption_args.ordering, "s2d | d2s")->capture_default_str();
    caption->add_option("--prompt-prefix", caption_args.prefix, "Prompt prefix")->capture_default_str();
    caption->add_option("--prompt-suffix", caption_args.suffix, "Prompt suffix")->capture_default_str();
    caption->add_option("--separator", caption_args.separator, "Description separator");
    caption->add_option("--max-tokens", caption_args.max_tokens, "Generation budget")->capture_default_str();
    caption->add_option("--temperature", caption_args.temperature, "Sampling temperature")
        ->capture_default_str();

    // refine
    auto* refine = app.add_subcommand("refine", "Continuous refinement with synthetic descriptions");
    RefineArgs refine_args;
    refine->add_option("--train-manifest", refine_args.train_manifest, "Training dataset manifest");
    refine->add_option("--val-manifest", refine_args.val_manifest, "Validation dataset manifest");
    refine->add_option("--manifest", refine_args.manifest, "Single manifest used with --split");
    refine->add_option("--split", refine_args.split_file, "Karpathy-style split index file");
    refine->add_option("--checkpoint-dir", refine_args.checkpoint_dir, "Per-iteration checkpoint directory")
        ->capture_default_str();
    refine->add_flag("--resume", refine_args.resume, "Continue from the latest checkpoint");
    refine->add_option("--metric", refine_args.metric, "Quality metric tau (bleu@4, rouge_l, cider_d)")
        ->capture_default_str();
    refine->add_option("-k,--k", refine_args.k, "Retrieved captions per prompt")->capture_default_str();
    refine->add_option("--max-iters", refine_args.max_iters, "Maximum refinement iterations")
        ->capture_default_str();
    refine->add_option("--num-samples", refine_args.num_samples, "Generations per training image")
        ->capture_default_str();
    refine->add_option("--sample-temperature", refine_args.sample_temperature, "Sampling temperature")
        ->capture_default_str();
    refine->add_option("--improvement-eps", refine_args.improvement_eps,
                       "Minimum tau-bar gain to keep iterating")
        ->capture_default_str();
    refine->add_option("--method", refine_args.method, "ols | ridge | procrustes")->capture_default_str();
    refine->add_option("--lambda", refine_args.lambda, "Ridge strength (>= 0)")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    refine->add_flag("--center,!--no-center", refine_args.center, "Mean-center embeddings");
    refine->add_flag("--normalize,!--no-normalize", refine_args.normalize, "Length-normalize embeddings");
    refine->add_flag("--refit-stats", refine_args.refit_stats,
                     "Refit preprocessing statistics after each augmentation (ablation)");
    refine->add_option("--ordering", refine_args.ordering, "s2d | d2s")->capture_default_str();
    refine->add_option("--max-tokens", refine_args.max_tokens, "Generation budget")->capture_default_str();

    // eval
    auto* eval = app.add_subcommand("eval", "Score generated captions against references");
    EvalArgs eval_args;
    eval->add_option("--outputs", eval_args.outputs, "Caption JSONL from `caption`")->required();
    eval->add_option("--refs", eval_args.refs_manifest, "Manifest holding reference captions")->required();
    eval->add_option("--metrics", eval_args.metric_names, "Metrics to report")->delimiter(',');

    // rank-tokens
    auto* rank = app.add_subcommand("rank-tokens", "nDCG of token rankings under the mapping");
    RankTokensArgs rank_args;
    rank->add_option("--map", rank_args.map_file, "Fitted mapping file")->required();
    rank->add_option("--vocab", rank_args.vocab_file, "Vocabulary file (header + token/row lines)")
        ->required();
    rank->add_option("--images", rank_args.images_manifest, "Manifest with images and reference captions")
        ->required();
    rank->add_option("--out", rank_args.out, "Optional per-image JSONL");
    rank->add_option("--cutoff", rank_args.cutoff, "nDCG cutoff")->capture_default_str();

    // make-fixture
    auto* fixture = app.add_subcommand("make-fixture", "Generate a synthetic offline demo dataset");
    FixtureArgs fixture_args;
    fixture->add_option("--out-dir", fixture_args.out_dir, "Output directory")->capture_default_str();
    fixture->add_option("--name", fixture_args.name, "Dataset name prefix")->capture_default_str();
    fixture->add_option("--dim", fixture_args.dim, "Embedding dimension")->capture_default_str();
    fixture->add_option("--train-images", fixture_args.train_images, "Training images")
        ->capture_default_str();
    fixture->add_option("--val-images", fixture_args.val_images, "Validation images")->capture_default_str();
    fixture->add_option("--test-images", fixture_args.test_images, "Test images")->capture_default_str();
    fixture->add_option("--captions-per-image", fixture_args.captions_per_image, "Captions per image")
        ->capture_default_str();
    fixture->add_option("--noise", fixture_args.noise, "Gaussian noise on image embeddings")
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (ingest->parsed()) return cmd_ingest(ingest_manifest);
        if (fit->parsed()) return cmd_fit_map(fit_args);
        if (retrieve->parsed()) return cmd_retrieve(retrieve_args);
        if (caption->parsed()) return cmd_caption(caption_args, g);
        if (refine->parsed()) return cmd_refine(refine_args, g);
        if (eval->parsed()) return cmd_eval(eval_args);
        if (rank->parsed()) return cmd_rank_tokens(rank_args);
        if (fixture->parsed()) return cmd_make_fixture(fixture_args, g);
    } catch (const mrag::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const mrag::ProviderError& e) {
        std::cerr << "provider error: " << e.what() << "\n";
        return 4;
    } catch (const mrag::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
