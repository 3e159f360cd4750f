// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
// glibc's resolv.h, pulled in through httplib, leaves a `_res` macro behind
// that breaks Eigen's product kernels when Eigen is included afterwards.
#ifdef _res
#undef _res
#endif
#include <json.hpp>

#include "mrag/embedio.hpp"
#include "mrag/errors.hpp"
#include "mrag/metrics.hpp"
#include "mrag/rng.hpp"

namespace mrag::genclient {

struct ProviderConfig {
    std::string endpoint;     // http://host:port
    std::string bearer_token; // sent as Authorization: Bearer ... when non-empty
    std::chrono::milliseconds timeout{30000};
    int max_retries = 2; // additional attempts after the first
    int max_in_flight = 4;
    std::chrono::milliseconds backoff_base{100};
    std::chrono::milliseconds backoff_cap{5000};
};

struct GenerationRequest {
    std::string prompt;
    int max_tokens = 40;
    double temperature = 0.0;
    std::optional<std::uint64_t> seed;
    int num_samples = 1;
};

struct GenerationResponse {
    std::vector<std::string> texts; // length == num_samples
    std::chrono::milliseconds latency{0};
};

/// Wait before retry attempt `retry` (1-based): base * 2^(retry-1), capped.
inline std::chrono::milliseconds backoff_delay(int retry, std::chrono::milliseconds base,
                                               std::chrono::milliseconds cap) {
    auto ms = base.count();
    for (int i = 1; i < retry && ms < cap.count(); ++i) ms *= 2;
    return std::chrono::milliseconds(std::min(ms, cap.count()));
}

namespace detail {

// Bounds the number of outstanding requests per provider handle.
class InFlightGate {
public:
    explicit InFlightGate(int limit) : limit_(limit < 1 ? 1 : limit) {}

    void acquire() {
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [&] { return active_ < limit_; });
        ++active_;
    }

    void release() {
        {
            std::lock_guard lock(mutex_);
            --active_;
        }
        cv_.notify_one();
    }

private:
    std::mutex mutex_;
    std::condition_variable cv_;
    int limit_;
    int active_ = 0;
};

struct GateScope {
    InFlightGate& gate;
    explicit GateScope(InFlightGate& g) : gate(g) { gate.acquire(); }
    ~GateScope() { gate.release(); }
    GateScope(const GateScope&) = delete;
    GateScope& operator=(const GateScope&) = delete;
};

inline std::string trim_copy(const std::string& s) { return embedio::trim(s); }

} // namespace detail

/// Text generation provider (the LLM of the captioning loop). Handles are
/// shareable across threads; concurrent calls are bounded by max_in_flight.
class TextGenerator {
public:
    virtual ~TextGenerator() = default;

    GenerationResponse generate(const GenerationRequest& request) {
        if (detail::trim_copy(request.prompt).empty())
            throw ConfigError("generate: prompt must be non-empty");
        if (request.num_samples < 1) throw ConfigError("generate: num_samples must be >= 1");
        if (request.max_tokens < 1) throw ConfigError("generate: max_tokens must be >= 1");
        if (request.temperature < 0.0) throw ConfigError("generate: temperature must be non-negative");
        detail::GateScope scope(gate_);
        auto start = std::chrono::steady_clock::now();
        GenerationResponse response;
        response.texts = run(request);
        response.latency =
            std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start);
        if (static_cast<int>(response.texts.size()) != request.num_samples)
            throw ProviderError("generate: provider returned " + std::to_string(response.texts.size()) +
                                " texts for num_samples=" + std::to_string(request.num_samples));
        for (const std::string& t : response.texts)
            if (detail::trim_copy(t).empty()) throw EmptyGenerationError("generate: empty completion");
        return response;
    }

protected:
    explicit TextGenerator(int max_in_flight) : gate_(max_in_flight) {}
    virtual std::vector<std::string> run(const GenerationRequest& request) = 0;

private:
    detail::InFlightGate gate_;
};

/// Text embedding provider (used to embed generated descriptions).
class TextEmbedder {
public:
    virtual ~TextEmbedder() = default;

    std::vector<embedio::Embedding> embed(const std::vector<std::string>& texts) {
        if (texts.empty()) throw ConfigError("embed: texts must be non-empty");
        detail::GateScope scope(gate_);
        std::vector<embedio::Vec> raw = run(texts);
        if (raw.size() != texts.size())
            throw ProviderError("embed: provider returned " + std::to_string(raw.size()) +
                                " vectors for " + std::to_string(texts.size()) + " texts");
        std::vector<embedio::Embedding> out;
        out.reserve(raw.size());
        for (std::size_t i = 0; i < raw.size(); ++i) {
            embedio::check_finite(raw[i], "embed");
            out.push_back(embedio::Embedding{"", std::move(raw[i])});
        }
        return out;
    }

    virtual int dim() const = 0;

protected:
    explicit TextEmbedder(int max_in_flight) : gate_(max_in_flight) {}
    virtual std::vector<embedio::Vec> run(const std::vector<std::string>& texts) = 0;

private:
    detail::InFlightGate gate_;
};

// ---------------------------------------------------------------------------
// HTTP provider.
//
// POST {endpoint}/generate  {"prompt","max_tokens","temperature","num_samples"[,"seed"]}
//   -> {"texts": [...]}
// POST {endpoint}/embed     {"texts": [...]}
//   -> {"dim": d, "vectors": [[...], ...]}
//
// Transient failures (connect/timeout/5xx/429) are retried with exponential
// backoff; 4xx responses and malformed bodies are not.
// ---------------------------------------------------------------------------

struct HttpResult {
    bool transport_ok = false;
    bool timed_out = false;
    int status = 0;
    std::string body;
    std::string error;
};

class HttpTransport {
public:
    virtual ~HttpTransport() = default;
    virtual HttpResult post(const std::string& path, const std::string& json_body) = 0;
};

class HttplibTransport : public HttpTransport {
public:
    explicit HttplibTransport(ProviderConfig config) : config_(std::move(config)) {
        if (config_.timeout.count() <= 0) throw ConfigError("provider timeout must be positive");
        if (config_.max_retries < 0) throw ConfigError("max_retries must be non-negative");
    }

    HttpResult post(const std::string& path, const std::string& json_body) override {
        httplib::Client client(config_.endpoint);
        client.set_connection_timeout(config_.timeout);
        client.set_read_timeout(config_.timeout);
        client.set_write_timeout(config_.timeout);
        httplib::Headers headers;
        if (!config_.bearer_token.empty())
            headers.emplace("Authorization", "Bearer " + config_.bearer_token);
        auto start = std::chrono::steady_clock::now();
        httplib::Result result = client.Post(path, headers, json_body, "application/json");
        auto elapsed =
            std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start);
        HttpResult out;
        if (!result) {
            out.transport_ok = false;
            out.error = httplib::to_string(result.error());
            // httplib reports a read that hit the deadline as a plain read
            // error; classify by elapsed time instead (with a little slack
            // for timer granularity).
            out.timed_out = result.error() == httplib::Error::ConnectionTimeout ||
                            elapsed + std::chrono::milliseconds(10) >= config_.timeout;
            return out;
        }
        out.transport_ok = true;
        out.status = result->status;
        out.body = result->body;
        return out;
    }

private:
    ProviderConfig config_;
};

inline std::unique_ptr<HttpTransport> make_httplib_transport(const ProviderConfig& config) {
    return std::make_unique<HttplibTransport>(config);
}

namespace detail {

inline nlohmann::json post_with_retries(HttpTransport& transport, const ProviderConfig& config,
                                        const std::string& path, const nlohmann::json& body,
                                        const char* what) {
    std::string payload = body.dump();
    HttpResult last;
    for (int attempt = 0; attempt <= config.max_retries; ++attempt) {
        if (attempt > 0)
            std::this_thread::sleep_for(backoff_delay(attempt, config.backoff_base, config.backoff_cap));
        last = transport.post(path, payload);
        if (last.transport_ok && last.status >= 200 && last.status < 300) {
            nlohmann::json parsed = nlohmann::json::parse(last.body, nullptr, false);
            if (parsed.is_discarded())
                throw ProviderError(std::string(what) + ": provider returned malformed JSON");
            return parsed;
        }
        bool retryable = !last.transport_ok || last.status >= 500 || last.status == 429;
        if (!retryable) break;
    }
    std::string detail = last.transport_ok ? "HTTP status " + std::to_string(last.status)
                                           : (last.error.empty() ? "transport failure" : last.error);
    if (!last.transport_ok && last.timed_out)
        throw TimeoutError(std::string(what) + ": timed out after " +
                           std::to_string(config.max_retries + 1) + " attempts");
    throw ProviderError(std::string(what) + ": failed after " + std::to_string(config.max_retries + 1) +
                        " attempts (" + detail + ")");
}

} // namespace detail

class HttpGenerator : public TextGenerator {
public:
    HttpGenerator(ProviderConfig config, std::unique_ptr<HttpTransport> transport = nullptr)
        : TextGenerator(config.max_in_flight), config_(std::move(config)),
          transport_(transport ? std::move(transport) : make_httplib_transport(config_)) {}

protected:
    std::vector<std::string> run(const GenerationRequest& request) override {
        nlohmann::json body{{"prompt", request.prompt},
                            {"max_tokens", request.max_tokens},
                            {"temperature", request.temperature},
                            {"num_samples", request.num_samples}};
        if (request.seed) body["seed"] = *request.seed;
        nlohmann::json reply = detail::post_with_retries(*transport_, config_, "/generate", body, "generate");
        if (!reply.is_object() || !reply.contains("texts") || !reply["texts"].is_array())
            throw ProviderError("generate: response missing 'texts' array");
        return reply["texts"].get<std::vector<std::string>>();
    }

private:
    ProviderConfig config_;
    std::unique_ptr<HttpTransport> transport_;
};

class HttpEmbedder : public TextEmbedder {
public:
    HttpEmbedder(ProviderConfig config, int expected_dim = 0,
                 std::unique_ptr<HttpTransport> transport = nullptr)
        : TextEmbedder(config.max_in_flight), config_(std::move(config)), expected_dim_(expected_dim),
          transport_(transport ? std::move(transport) : make_httplib_transport(config_)) {}

    int dim() const override { return expected_dim_; }

protected:
    std::vector<embedio::Vec> run(const std::vector<std::string>& texts) override {
        nlohmann::json body{{"texts", texts}};
        nlohmann::json reply = detail::post_with_retries(*transport_, config_, "/embed", body, "embed");
        if (!reply.is_object() || !reply.contains("dim") || !reply.contains("vectors") ||
            !reply["vectors"].is_array())
            throw ProviderError("embed: response missing 'dim'/'vectors'");
        int dim = reply["dim"].get<int>();
        if (expected_dim_ > 0 && dim != expected_dim_)
            throw DimensionError("embed: provider dimension " + std::to_string(dim) +
                                 " does not match expected " + std::to_string(expected_dim_));
        auto vectors = reply["vectors"].get<std::vector<embedio::Vec>>();
        for (const embedio::Vec& v : vectors)
            if (static_cast<int>(v.size()) != dim)
                throw DimensionError("embed: ragged vector in provider response");
        return vectors;
    }

private:
    ProviderConfig config_;
    int expected_dim_;
    std::unique_ptr<HttpTransport> transport_;
};

// ---------------------------------------------------------------------------
// Deterministic offline mocks.
// ---------------------------------------------------------------------------

/// How prompts are assembled; lets mocks recover the retrieved descriptions.
struct PromptShape {
    std::string prefix = "Show similar images: ";
    std::string suffix = " The image describes: ";
    std::string separator = "\n";
};

inline std::vector<std::string> split_prompt(const PromptShape& shape, const std::string& prompt) {
    std::string block = prompt;
    if (!shape.prefix.empty() && block.rfind(shape.prefix, 0) == 0) block.erase(0, shape.prefix.size());
    if (!shape.suffix.empty() && block.size() >= shape.suffix.size() &&
        block.compare(block.size() - shape.suffix.size(), shape.suffix.size(), shape.suffix) == 0)
        block.erase(block.size() - shape.suffix.size());
    std::vector<std::string> descriptions;
    if (shape.separator.empty()) {
        descriptions.push_back(block);
    } else {
        std::size_t pos = 0;
        while (true) {
            std::size_t next = block.find(shape.separator, pos);
            descriptions.push_back(block.substr(pos, next - pos));
            if (next == std::string::npos) break;
            pos = next + shape.separator.size();
        }
    }
    std::vector<std::string> cleaned;
    for (std::string& d : descriptions) {
        std::string t = embedio::trim(d);
        if (!t.empty()) cleaned.push_back(std::move(t));
    }
    return cleaned;
}

/// Echoes the first retrieved description. With shuffle_variants enabled and
/// temperature > 0, samples beyond the first are seeded token shuffles of it,
/// which stands in for sampling new descriptions from a real model.
class EchoMockGenerator : public TextGenerator {
public:
    explicit EchoMockGenerator(PromptShape shape = {}, bool shuffle_variants = true, int max_in_flight = 8)
        : TextGenerator(max_in_flight), shape_(std::move(shape)), shuffle_variants_(shuffle_variants) {}

protected:
    std::vector<std::string> run(const GenerationRequest& request) override {
        std::vector<std::string> descriptions = split_prompt(shape_, request.prompt);
        std::string first = descriptions.empty() ? "an image" : descriptions.front();
        std::vector<std::string> out;
        out.reserve(static_cast<std::size_t>(request.num_samples));
        out.push_back(first);
        for (int s = 1; s < request.num_samples; ++s) {
            if (!shuffle_variants_ || request.temperature <= 0.0) {
                out.push_back(first);
                continue;
            }
            std::vector<std::string> tokens = metrics::tokenize(first);
            if (tokens.empty()) {
                out.push_back(first);
                continue;
            }
            SplitMix64 rng(derive_seed(request.seed.value_or(0), static_cast<std::uint64_t>(s)));
            rng.shuffle(tokens);
            std::string text;
            for (std::size_t i = 0; i < tokens.size(); ++i) {
                if (i) text.push_back(' ');
                text += tokens[i];
            }
            out.push_back(std::move(text));
        }
        return out;
    }

private:
    PromptShape shape_;
    bool shuffle_variants_;
};

/// Always returns the same fixed text; useful to exercise filtering paths.
class JunkMockGenerator : public TextGenerator {
public:
    explicit JunkMockGenerator(std::string text = "zxqv wkjl pmrt osd", int max_in_flight = 8)
        : TextGenerator(max_in_flight), text_(std::move(text)) {}

protected:
    std::vector<std::string> run(const GenerationRequest& request) override {
        return std::vector<std::string>(static_cast<std::size_t>(request.num_samples), text_);
    }

private:
    std::string text_;
};

/// Hashed bag-of-words embedder: each token seeds a Gaussian stream, token
/// streams are summed and the result normalized. Identical strings embed
/// identically and token overlap raises cosine similarity.
class HashEmbedder : public TextEmbedder {
public:
    explicit HashEmbedder(int dim, int max_in_flight = 8) : TextEmbedder(max_in_flight), dim_(dim) {
        if (dim < 1) throw ConfigError("HashEmbedder: dim must be >= 1");
    }

    int dim() const override { return dim_; }

    embedio::Vec embed_one(const std::string& text) const {
        std::vector<double> acc(static_cast<std::size_t>(dim_), 0.0);
        auto add_stream = [&](std::uint64_t seed) {
            SplitMix64 rng(seed);
            for (double& x : acc) x += rng.next_gaussian();
        };
        add_stream(fnv1a64("\x02bias"));
        for (const std::string& token : metrics::tokenize(text)) add_stream(fnv1a64(token));
        double sq = 0.0;
        for (double x : acc) sq += x * x;
        double n = std::sqrt(sq);
        embedio::Vec out(static_cast<std::size_t>(dim_));
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = static_cast<float>(n == 0.0 ? 0.0 : acc[i] / n);
        return out;
    }

protected:
    std::vector<embedio::Vec> run(const std::vector<std::string>& texts) override {
        std::vector<embedio::Vec> out;
        out.reserve(texts.size());
        for (const std::string& t : texts) out.push_back(embed_one(t));
        return out;
    }

private:
    int dim_;
};

// ---------------------------------------------------------------------------
// Environment-aware construction. MRAG_OFFLINE=1 forces the mocks and
// MRAG_ENDPOINT overrides the configured endpoint.
// ---------------------------------------------------------------------------

inline bool offline_forced() {
    const char* v = std::getenv("MRAG_OFFLINE");
    return v != nullptr && std::string(v) == "1";
}

inline std::string resolve_endpoint(const ProviderConfig& config) {
    const char* v = std::getenv("MRAG_ENDPOINT");
    return v != nullptr && *v != '\0' ? std::string(v) : config.endpoint;
}

inline std::unique_ptr<TextGenerator> make_generator(const ProviderConfig& config, bool offline,
                                                     const PromptShape& shape = {}) {
    if (offline || offline_forced()) return std::make_unique<EchoMockGenerator>(shape, true, config.max_in_flight);
    ProviderConfig c = config;
    c.endpoint = resolve_endpoint(config);
    if (c.endpoint.empty()) throw ConfigError("no provider endpoint configured (set --endpoint or MRAG_ENDPOINT)");
    return std::make_unique<HttpGenerator>(std::move(c));
}

inline std::unique_ptr<TextEmbedder> make_embedder(const ProviderConfig& config, bool offline, int dim) {
    if (offline || offline_forced()) return std::make_unique<HashEmbedder>(dim, config.max_in_flight);
    ProviderConfig c = config;
    c.endpoint = resolve_endpoint(config);
    if (c.endpoint.empty()) throw ConfigError("no provider endpoint configured (set --endpoint or MRAG_ENDPOINT)");
    return std::make_unique<HttpEmbedder>(std::move(c), dim);
}

} // namespace mrag::genclient
