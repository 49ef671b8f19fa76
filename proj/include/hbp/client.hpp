// SPDX-License-Identifier: Apache-2.0
#pragma once

// Chat-completions client for multimodal endpoints: pre-flight image budget,
// sliding-window rate limiting, exponential backoff on transient failures,
// plus a deterministic mock provider for offline runs.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <json.hpp>

#include "hbp/behavior.hpp"
#include "hbp/codec.hpp"
#include "hbp/dataset.hpp"
#include "hbp/error.hpp"
#include "hbp/metrics.hpp"
#include "hbp/prompt.hpp"

namespace hbp {

struct ModelEndpoint {
    std::string name;
    std::string provider = "openai";  // "openai" (chat-completions wire format) or "mock"
    std::string base_url;             // e.g. https://api.openai.com/v1
    std::string api_key_env;          // environment variable holding the key; empty for none
    std::string auth_style = "bearer";  // "bearer" or "api-key"
    std::string model_id;
    std::string chat_path = "/chat/completions";
    std::string embeddings_path = "/embeddings";
    int max_images_per_request = 50;
    int max_retries = 5;
    double requests_per_minute = 60.0;
    double timeout_s = 120.0;
    double temperature = 0.0;
    int max_tokens = 256;
    bool supports_interleaving = true;
    // Mock provider settings.
    std::string mock_mode = "oracle";
    std::string mock_text;

    void validate() const {
        if (name.empty()) throw ConfigError("endpoint without a name");
        if (max_images_per_request < 1) throw ConfigError("endpoint '" + name + "': max_images_per_request < 1");
        if (!(timeout_s > 0.0)) throw ConfigError("endpoint '" + name + "': timeout_s must be positive");
        if (max_retries < 0) throw ConfigError("endpoint '" + name + "': max_retries must be >= 0");
        if (provider != "openai" && provider != "mock") {
            throw ConfigError("endpoint '" + name + "': unknown provider '" + provider + "'");
        }
        if (provider == "openai" && base_url.empty()) throw ConfigError("endpoint '" + name + "': base_url required");
    }
};

inline ModelEndpoint endpoint_from_json(const nlohmann::json& j) {
    ModelEndpoint e;
    try {
        e.name = j.at("name").get<std::string>();
        e.provider = j.value("provider", e.provider);
        e.base_url = j.value("base_url", e.base_url);
        e.api_key_env = j.value("api_key_env", e.api_key_env);
        e.auth_style = j.value("auth_style", e.auth_style);
        e.model_id = j.value("model_id", e.model_id);
        e.chat_path = j.value("chat_path", e.chat_path);
        e.embeddings_path = j.value("embeddings_path", e.embeddings_path);
        e.max_images_per_request = j.value("max_images_per_request", e.max_images_per_request);
        e.max_retries = j.value("max_retries", e.max_retries);
        e.requests_per_minute = j.value("requests_per_minute", e.requests_per_minute);
        e.timeout_s = j.value("timeout_s", e.timeout_s);
        e.temperature = j.value("temperature", e.temperature);
        e.max_tokens = j.value("max_tokens", e.max_tokens);
        e.supports_interleaving = j.value("supports_interleaving", e.supports_interleaving);
        e.mock_mode = j.value("mock_mode", e.mock_mode);
        e.mock_text = j.value("mock_text", e.mock_text);
    } catch (const nlohmann::json::exception& ex) {
        throw ConfigError(std::string("malformed endpoint: ") + ex.what());
    }
    if (j.contains("api_key")) {
        throw ConfigError("endpoint '" + e.name + "': API keys belong in environment variables (api_key_env)");
    }
    e.validate();
    return e;
}

// Settings that influence model output; hashed into run configurations.
inline nlohmann::json endpoint_identity(const ModelEndpoint& e) {
    nlohmann::json j{{"provider", e.provider},
                     {"model_id", e.model_id},
                     {"temperature", e.temperature},
                     {"max_tokens", e.max_tokens}};
    if (e.provider == "mock") {
        j["mock_mode"] = e.mock_mode;
        j["mock_text"] = e.mock_text;
    } else {
        j["base_url"] = e.base_url;
    }
    return j;
}

struct AttemptLog {
    int attempt = 0;  // 1-based
    int status = 0;   // HTTP status; 0 when the transport failed
    std::string error;
    double elapsed_ms = 0.0;
    double backoff_ms = 0.0;  // sleep scheduled after this attempt
};

struct CompletionResult {
    std::string raw_text;
    double latency_ms = 0.0;
    std::optional<std::int64_t> prompt_tokens;
    std::optional<std::int64_t> completion_tokens;
    std::string finish_reason;
    std::vector<AttemptLog> attempts;
};

struct HttpRequest {
    std::string url;  // absolute
    std::vector<std::pair<std::string, std::string>> headers;
    std::string body;
    double timeout_s = 120.0;
};

struct HttpResponse {
    int status = 0;  // 0: transport failure (connection, timeout)
    std::string body;
    std::string error;
    std::optional<double> retry_after_s;
};

class Transport {
public:
    virtual ~Transport() = default;
    virtual HttpResponse post(const HttpRequest& request) = 0;
};

// cpp-httplib backed transport. A fresh client per call keeps it safe to use
// from several workers at once.
class HttpTransport final : public Transport {
public:
    HttpResponse post(const HttpRequest& request) override {
        const auto scheme_end = request.url.find("://");
        if (scheme_end == std::string::npos) return {0, {}, "invalid URL '" + request.url + "'", {}};
        const auto path_start = request.url.find('/', scheme_end + 3);
        const std::string origin = request.url.substr(0, path_start);
        const std::string path = path_start == std::string::npos ? "/" : request.url.substr(path_start);

        httplib::Client cli(origin);
        const auto secs = static_cast<time_t>(request.timeout_s);
        const auto usecs = static_cast<time_t>((request.timeout_s - static_cast<double>(secs)) * 1e6);
        cli.set_connection_timeout(secs, usecs);
        cli.set_read_timeout(secs, usecs);
        cli.set_write_timeout(secs, usecs);
        httplib::Headers headers;
        for (const auto& [k, v] : request.headers) headers.emplace(k, v);

        auto res = cli.Post(path, headers, request.body, "application/json");
        if (!res) return {0, {}, "transport error: " + httplib::to_string(res.error()), {}};
        HttpResponse out{res->status, res->body, {}, {}};
        if (res->has_header("Retry-After")) {
            try {
                out.retry_after_s = std::stod(res->get_header_value("Retry-After"));
            } catch (const std::exception&) {
            }
        }
        return out;
    }
};

// Time source and sleeper; tests substitute a virtual clock.
struct Timing {
    using Clock = std::chrono::steady_clock;
    std::function<Clock::time_point()> now = [] { return Clock::now(); };
    std::function<void(Clock::duration)> sleep = [](Clock::duration d) { std::this_thread::sleep_for(d); };
};

// At most `requests_per_minute` acquisitions in any 60 s sliding window.
class RateLimiter {
public:
    RateLimiter(double requests_per_minute, std::shared_ptr<const Timing> timing)
        : capacity_(requests_per_minute > 0 ? std::max<std::size_t>(1, static_cast<std::size_t>(requests_per_minute)) : 0),
          timing_(std::move(timing)) {}

    void acquire() {
        if (capacity_ == 0) return;  // unlimited
        std::lock_guard lock(mu_);
        constexpr auto window = std::chrono::seconds(60);
        for (;;) {
            const auto now = timing_->now();
            while (!sent_.empty() && now - sent_.front() >= window) sent_.pop_front();
            if (sent_.size() < capacity_) {
                sent_.push_back(now);
                return;
            }
            timing_->sleep(sent_.front() + window - now);
        }
    }

private:
    std::size_t capacity_;
    std::shared_ptr<const Timing> timing_;
    std::mutex mu_;
    std::deque<Timing::Clock::time_point> sent_;
};

// Exponential backoff with equal jitter: half of min(cap, base * 2^retry)
// fixed, the other half uniform.
struct BackoffPolicy {
    std::chrono::milliseconds base{1000};
    std::chrono::milliseconds cap{60000};

    std::chrono::milliseconds delay(int retry, std::mt19937_64& rng) const {
        const double ceiling = std::min(static_cast<double>(cap.count()),
                                        static_cast<double>(base.count()) * std::pow(2.0, retry));
        std::uniform_real_distribution<double> jitter(0.0, ceiling / 2.0);
        return std::chrono::milliseconds(static_cast<std::int64_t>(ceiling / 2.0 + jitter(rng)));
    }
};

inline bool is_transient(int status) { return status == 0 || status == 408 || status == 429 || status >= 500; }

// Inline base64 data URL for local files; URLs pass through unchanged.
inline std::string encode_image(const MessagePart& part) {
    const auto& ref = part.image_ref;
    if (ref.rfind("data:", 0) == 0 || ref.rfind("http://", 0) == 0 || ref.rfind("https://", 0) == 0) return ref;
    std::string bytes;
    try {
        bytes = codec::read_file_bytes(ref);
    } catch (const IoError&) {
        throw MissingImageError("image not readable: " + ref);
    }
    return "data:" + part.media_type + ";base64," + codec::base64_encode(bytes);
}

inline nlohmann::json build_chat_request(const ModelEndpoint& endpoint, const PromptSpec& prompt) {
    nlohmann::json content = nlohmann::json::array();
    for (const auto& part : prompt.parts) {
        if (part.is_image()) {
            content.push_back({{"type", "image_url"}, {"image_url", {{"url", encode_image(part)}}}});
        } else {
            content.push_back({{"type", "text"}, {"text", part.text}});
        }
    }
    nlohmann::json messages = nlohmann::json::array();
    if (!prompt.system_text.empty()) messages.push_back({{"role", "system"}, {"content", prompt.system_text}});
    messages.push_back({{"role", "user"}, {"content", std::move(content)}});
    return {{"model", endpoint.model_id},
            {"messages", std::move(messages)},
            {"temperature", endpoint.temperature},
            {"max_tokens", endpoint.max_tokens}};
}

namespace detail {

inline std::string join_url(const std::string& base, const std::string& path) {
    if (!base.empty() && base.back() == '/' && !path.empty() && path.front() == '/') return base + path.substr(1);
    return base + path;
}

inline std::vector<std::pair<std::string, std::string>> auth_headers(const ModelEndpoint& e) {
    std::vector<std::pair<std::string, std::string>> h;
    if (e.api_key_env.empty()) return h;
    const char* key = std::getenv(e.api_key_env.c_str());
    if (key == nullptr || *key == '\0') {
        throw AuthError("endpoint '" + e.name + "': environment variable " + e.api_key_env + " is not set");
    }
    if (e.auth_style == "api-key") {
        h.emplace_back("api-key", key);
    } else {
        h.emplace_back("Authorization", std::string("Bearer ") + key);
    }
    return h;
}

inline std::string truncate(const std::string& s, std::size_t n = 300) {
    return s.size() <= n ? s : s.substr(0, n) + "...";
}

}  // namespace detail

// Sends JSON bodies with the endpoint's retry and rate-limit policy. Safe for
// concurrent use; the limiter and jitter source are internally synchronized.
class RetryingPoster {
public:
    RetryingPoster(ModelEndpoint endpoint, std::shared_ptr<Transport> transport,
                   std::shared_ptr<const Timing> timing = std::make_shared<Timing>(), BackoffPolicy backoff = {},
                   std::uint64_t jitter_seed = 0x5eed)
        : endpoint_(std::move(endpoint)),
          transport_(std::move(transport)),
          timing_(std::move(timing)),
          limiter_(endpoint_.requests_per_minute, timing_),
          backoff_(backoff),
          rng_(jitter_seed) {}

    const ModelEndpoint& endpoint() const noexcept { return endpoint_; }

    // Returns the successful response body; throws AuthError, RequestError or
    // RetriesExhaustedError.
    std::string post(const std::string& path, const std::string& body, std::vector<AttemptLog>& log) {
        HttpRequest req;
        req.url = detail::join_url(endpoint_.base_url, path);
        req.headers = detail::auth_headers(endpoint_);
        req.body = body;
        req.timeout_s = endpoint_.timeout_s;

        std::string last_cause;
        for (int attempt = 1; attempt <= endpoint_.max_retries + 1; ++attempt) {
            limiter_.acquire();
            const auto t0 = timing_->now();
            const HttpResponse res = transport_->post(req);
            AttemptLog entry;
            entry.attempt = attempt;
            entry.status = res.status;
            entry.elapsed_ms = std::chrono::duration<double, std::milli>(timing_->now() - t0).count();
            if (res.status >= 200 && res.status < 300) {
                log.push_back(entry);
                return res.body;
            }
            entry.error = res.status == 0 ? res.error : "HTTP " + std::to_string(res.status) + ": " + detail::truncate(res.body);
            last_cause = entry.error;
            if (res.status == 401 || res.status == 403) {
                log.push_back(entry);
                throw AuthError("endpoint '" + endpoint_.name + "': " + entry.error);
            }
            if (!is_transient(res.status)) {
                log.push_back(entry);
                throw RequestError("endpoint '" + endpoint_.name + "': " + entry.error);
            }
            if (attempt <= endpoint_.max_retries) {
                auto wait = next_delay(attempt - 1);
                if (res.retry_after_s) {
                    const auto hinted = std::chrono::milliseconds(static_cast<std::int64_t>(*res.retry_after_s * 1000));
                    wait = std::min(std::max(wait, hinted), backoff_.cap);
                }
                entry.backoff_ms = static_cast<double>(wait.count());
                log.push_back(entry);
                timing_->sleep(wait);
            } else {
                log.push_back(entry);
            }
        }
        throw RetriesExhaustedError("endpoint '" + endpoint_.name + "': gave up after " +
                                        std::to_string(endpoint_.max_retries + 1) + " attempts",
                                    last_cause);
    }

private:
    std::chrono::milliseconds next_delay(int retry) {
        std::lock_guard lock(rng_mu_);
        return backoff_.delay(retry, rng_);
    }

    ModelEndpoint endpoint_;
    std::shared_ptr<Transport> transport_;
    std::shared_ptr<const Timing> timing_;
    RateLimiter limiter_;
    BackoffPolicy backoff_;
    std::mutex rng_mu_;
    std::mt19937_64 rng_;
};

inline std::string extract_message_text(const nlohmann::json& message) {
    const auto& content = message.at("content");
    if (content.is_string()) return content.get<std::string>();
    if (content.is_null()) return {};
    std::string out;
    for (const auto& part : content) {
        if (part.value("type", std::string{}) == "text") out += part.value("text", std::string{});
    }
    return out;
}

class MllmClient {
public:
    MllmClient(ModelEndpoint endpoint, std::shared_ptr<Transport> transport,
               std::shared_ptr<const Timing> timing = std::make_shared<Timing>(), BackoffPolicy backoff = {})
        : timing_(timing), poster_(std::move(endpoint), std::move(transport), timing, backoff) {
        poster_.endpoint().validate();
    }

    const ModelEndpoint& endpoint() const noexcept { return poster_.endpoint(); }

    CompletionResult complete(const PromptSpec& prompt) {
        const auto& ep = poster_.endpoint();
        if (prompt.total_images > static_cast<std::size_t>(ep.max_images_per_request) ||
            prompt.image_parts() > static_cast<std::size_t>(ep.max_images_per_request)) {
            throw BudgetExceededError("prompt carries " + std::to_string(prompt.image_parts()) +
                                      " images, endpoint '" + ep.name + "' accepts " +
                                      std::to_string(ep.max_images_per_request));
        }
        const std::string body = build_chat_request(ep, prompt).dump();

        CompletionResult result;
        const auto t0 = timing_->now();
        const std::string response = poster_.post(ep.chat_path, body, result.attempts);
        result.latency_ms = std::chrono::duration<double, std::milli>(timing_->now() - t0).count();

        try {
            const auto j = nlohmann::json::parse(response);
            const auto& choice = j.at("choices").at(0);
            result.raw_text = extract_message_text(choice.at("message"));
            if (choice.contains("finish_reason") && choice["finish_reason"].is_string()) {
                result.finish_reason = choice["finish_reason"].get<std::string>();
            }
            if (j.contains("usage") && j["usage"].is_object()) {
                const auto& u = j["usage"];
                if (u.contains("prompt_tokens")) result.prompt_tokens = u["prompt_tokens"].get<std::int64_t>();
                if (u.contains("completion_tokens")) {
                    result.completion_tokens = u["completion_tokens"].get<std::int64_t>();
                }
            }
        } catch (const nlohmann::json::exception& e) {
            throw RequestError("endpoint '" + ep.name + "': unexpected response body: " + e.what());
        }
        return result;
    }

private:
    std::shared_ptr<const Timing> timing_;
    RetryingPoster poster_;
};

// Embeddings over the OpenAI-compatible /embeddings route. Results are cached
// per input string; labels repeat heavily across an evaluation set.
class RemoteEmbedder final : public Embedder {
public:
    RemoteEmbedder(ModelEndpoint endpoint, std::shared_ptr<Transport> transport,
                   std::shared_ptr<const Timing> timing = std::make_shared<Timing>())
        : poster_(std::move(endpoint), std::move(transport), std::move(timing)) {}

    EmbeddingVector embed(const std::string& text) override {
        {
            std::lock_guard lock(mu_);
            if (auto it = cache_.find(text); it != cache_.end()) return it->second;
        }
        std::vector<AttemptLog> log;
        const nlohmann::json body{{"model", poster_.endpoint().model_id}, {"input", text}};
        const std::string response = poster_.post(poster_.endpoint().embeddings_path, body.dump(), log);
        EmbeddingVector v;
        try {
            const auto j = nlohmann::json::parse(response);
            v = EmbeddingVector::dense(j.at("data").at(0).at("embedding").get<std::vector<double>>());
        } catch (const nlohmann::json::exception& e) {
            throw RequestError("embedding endpoint '" + poster_.endpoint().name + "': " + e.what());
        }
        std::lock_guard lock(mu_);
        if (dimension_ && *dimension_ != v.dimension()) {
            throw RequestError("embedding dimension changed from " + std::to_string(*dimension_) + " to " +
                               std::to_string(v.dimension()));
        }
        dimension_ = v.dimension();
        cache_.emplace(text, v);
        return v;
    }

    std::string id() const override { return "remote:" + poster_.endpoint().model_id; }

private:
    RetryingPoster poster_;
    std::mutex mu_;
    std::unordered_map<std::string, EmbeddingVector> cache_;
    std::optional<std::size_t> dimension_;
};

// ---------------------------------------------------------------------------
// Mock provider

enum class MockMode { Oracle, EchoLast, Fixed, Failure };

inline MockMode parse_mock_mode(const std::string& s) {
    if (s == "oracle") return MockMode::Oracle;
    if (s == "echo_last") return MockMode::EchoLast;
    if (s == "fixed") return MockMode::Fixed;
    if (s == "failure") return MockMode::Failure;
    throw ConfigError("unknown mock mode '" + s + "'");
}

struct MockScript {
    MockMode mode = MockMode::Oracle;
    std::string fixed_text;
};

// Ground truth visible to the mock provider. Remote providers never see it.
struct SequenceContext {
    std::optional<Behavior> latest;
    std::vector<Behavior> intermediates;
    std::optional<Behavior> target;

    static SequenceContext from(const EvalSequence& seq) {
        SequenceContext c;
        c.latest = seq.latest().behavior;
        for (const auto& m : seq.intermediates) c.intermediates.push_back(m.behavior);
        c.target = seq.target.behavior;
        return c;
    }
};

inline constexpr std::string_view kMockCaption =
    "A person is in an indoor room with furniture nearby; they can sit, stand, walk or touch objects.";
inline constexpr std::string_view kMockGarbage = "I am not sure what happens next, the person might keep going";

inline std::string mock_autoregressive_lines(const std::vector<Behavior>& steps) {
    std::string out;
    for (std::size_t i = 0; i < steps.size(); ++i) {
        if (i) out += "\n";
        out += std::to_string(i + 1) + "s: " + render_behavior(steps[i]);
    }
    return out;
}

inline CompletionResult mock_complete(const MockScript& script, const PromptSpec& prompt,
                                      const SequenceContext& context) {
    CompletionResult r;
    r.finish_reason = "stop";
    r.attempts.push_back(AttemptLog{1, 200, {}, 0.0, 0.0});
    if (prompt.kind == PromptKind::Caption) {
        r.raw_text = script.mode == MockMode::Failure ? std::string(kMockGarbage) : std::string(kMockCaption);
        return r;
    }
    switch (script.mode) {
        case MockMode::Oracle: {
            if (!context.target) throw OracleUnavailableError("oracle mock needs the sequence ground truth");
            if (!prompt.autoregressive) {
                r.raw_text = render_behavior(*context.target);
                break;
            }
            if (context.intermediates.size() + 1 != static_cast<std::size_t>(prompt.horizon_s)) {
                throw OracleUnavailableError("oracle mock needs intermediate ground truth for autoregressive prompts");
            }
            auto steps = context.intermediates;
            steps.push_back(*context.target);
            r.raw_text = mock_autoregressive_lines(steps);
            break;
        }
        case MockMode::EchoLast: {
            if (!context.latest) throw OracleUnavailableError("echo_last mock needs the t = 0 labels");
            if (prompt.autoregressive) {
                r.raw_text = mock_autoregressive_lines(
                    std::vector<Behavior>(static_cast<std::size_t>(std::max(prompt.horizon_s, 1)), *context.latest));
            } else {
                r.raw_text = render_behavior(*context.latest);
            }
            break;
        }
        case MockMode::Fixed: r.raw_text = script.fixed_text; break;
        case MockMode::Failure: r.raw_text = std::string(kMockGarbage); break;
    }
    return r;
}

// What the runner talks to: a remote endpoint or the mock script.
class CompletionProvider {
public:
    virtual ~CompletionProvider() = default;
    virtual CompletionResult complete(const PromptSpec& prompt, const SequenceContext& context) = 0;
    virtual const ModelEndpoint& endpoint() const = 0;
};

class RemoteProvider final : public CompletionProvider {
public:
    explicit RemoteProvider(std::shared_ptr<MllmClient> client) : client_(std::move(client)) {}
    CompletionResult complete(const PromptSpec& prompt, const SequenceContext&) override {
        return client_->complete(prompt);
    }
    const ModelEndpoint& endpoint() const override { return client_->endpoint(); }

private:
    std::shared_ptr<MllmClient> client_;
};

class MockProvider final : public CompletionProvider {
public:
    explicit MockProvider(ModelEndpoint endpoint)
        : endpoint_(std::move(endpoint)), script_{parse_mock_mode(endpoint_.mock_mode), endpoint_.mock_text} {}

    CompletionResult complete(const PromptSpec& prompt, const SequenceContext& context) override {
        if (prompt.total_images > static_cast<std::size_t>(endpoint_.max_images_per_request)) {
            throw BudgetExceededError("prompt carries " + std::to_string(prompt.total_images) + " images, endpoint '" +
                                      endpoint_.name + "' accepts " +
                                      std::to_string(endpoint_.max_images_per_request));
        }
        return mock_complete(script_, prompt, context);
    }
    const ModelEndpoint& endpoint() const override { return endpoint_; }

private:
    ModelEndpoint endpoint_;
    MockScript script_;
};

inline std::shared_ptr<CompletionProvider> make_provider(const ModelEndpoint& endpoint,
                                                         std::shared_ptr<Transport> transport = nullptr) {
    if (endpoint.provider == "mock") return std::make_shared<MockProvider>(endpoint);
    if (!transport) transport = std::make_shared<HttpTransport>();
    return std::make_shared<RemoteProvider>(std::make_shared<MllmClient>(endpoint, std::move(transport)));
}

}  // namespace hbp
