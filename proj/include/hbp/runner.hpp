// SPDX-License-Identifier: Apache-2.0
#pragma once

// Experiment grid execution over an evaluation set with append-only JSON-lines
// persistence, resume, aggregation and CSV/markdown reporting.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hbp/behavior.hpp"
#include "hbp/client.hpp"
#include "hbp/codec.hpp"
#include "hbp/dataset.hpp"
#include "hbp/error.hpp"
#include "hbp/metrics.hpp"
#include "hbp/parser.hpp"
#include "hbp/prompt.hpp"

namespace hbp {

enum class IclSampling { PerQuery, Global };

inline std::string_view to_string(IclSampling s) { return s == IclSampling::Global ? "global" : "per_query"; }

inline IclSampling parse_icl_sampling(const std::string& s) {
    if (s == "per_query") return IclSampling::PerQuery;
    if (s == "global") return IclSampling::Global;
    throw ConfigError("unknown icl_sampling '" + s + "' (per_query|global)");
}

struct EmbedderChoice {
    std::string kind = "trigram";  // "trigram" or "remote"
    std::string endpoint;          // remote only
};

// One cell of the experiment grid.
struct ExperimentConfig {
    std::string endpoint;
    Representation representation = Representation::Blind;
    std::size_t n_icl = 0;
    bool autoregressive = false;
    std::uint64_t seed = 0;
    std::size_t worker_count = 1;
    std::filesystem::path manifest;
    std::filesystem::path template_path;  // empty: built-in template
    EmbedderChoice embedder;
    IclSampling icl_sampling = IclSampling::PerQuery;
    SamplingOptions sampling;
    std::optional<std::string> caption_endpoint;
};

struct RunRecord {
    std::string config_hash;
    std::string sequence_id;
    std::string endpoint;
    std::string model_id;
    Representation representation = Representation::Blind;
    std::size_t n_icl = 0;
    bool autoregressive = false;
    std::uint64_t seed = 0;
    std::string template_version;
    std::string embedder;
    std::string prompt_hash;
    std::vector<std::string> icl_ids;
    std::optional<std::string> caption;
    std::string raw_response;
    ParsedPrediction parsed;
    Behavior latest;  // t = 0 ground truth
    Behavior target;  // t = +horizon ground truth
    std::optional<MetricReport> metrics;
    std::size_t edit_raw = 0;
    double latency_ms = 0.0;
    std::optional<std::int64_t> prompt_tokens;
    std::optional<std::int64_t> completion_tokens;
    std::size_t attempts = 0;
    std::string timestamp;
    std::optional<std::string> error;
    std::optional<std::string> error_kind;
    std::vector<std::string> warnings;

    bool changed() const { return target != latest; }
    bool multilabel() const { return target.size() >= 2; }
};

namespace detail {

inline nlohmann::json behavior_json(const Behavior& b) { return behavior_strings(b); }

inline Behavior behavior_from_json(const nlohmann::json& j) {
    Behavior b;
    for (const auto& s : j) b.insert(normalize_label(s.get<std::string>()));
    return b;
}

inline std::string utc_now_iso() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace detail

inline nlohmann::json to_json(const RunRecord& r) {
    nlohmann::json j{{"config_hash", r.config_hash},
                     {"sequence_id", r.sequence_id},
                     {"endpoint", r.endpoint},
                     {"model_id", r.model_id},
                     {"representation", to_string(r.representation)},
                     {"n_icl", r.n_icl},
                     {"autoregressive", r.autoregressive},
                     {"seed", r.seed},
                     {"template_version", r.template_version},
                     {"embedder", r.embedder},
                     {"prompt_hash", r.prompt_hash},
                     {"icl_ids", r.icl_ids},
                     {"raw_response", r.raw_response},
                     {"parse_status", to_string(r.parsed.parse_status)},
                     {"prediction", detail::behavior_json(r.parsed.final)},
                     {"latest", detail::behavior_json(r.latest)},
                     {"target", detail::behavior_json(r.target)},
                     {"edit_raw", r.edit_raw},
                     {"latency_ms", r.latency_ms},
                     {"attempts", r.attempts},
                     {"timestamp", r.timestamp}};
    j["caption"] = r.caption ? nlohmann::json(*r.caption) : nlohmann::json(nullptr);
    if (r.parsed.intermediates) {
        j["intermediates"] = nlohmann::json::array({detail::behavior_json(r.parsed.intermediates->first),
                                                    detail::behavior_json(r.parsed.intermediates->second)});
    } else {
        j["intermediates"] = nullptr;
    }
    if (!r.parsed.failure.empty()) j["parse_failure"] = r.parsed.failure;
    if (r.metrics) {
        j["metrics"] = {{"accuracy", r.metrics->accuracy}, {"cosine", r.metrics->cosine}, {"edit", r.metrics->edit}};
    } else {
        j["metrics"] = nullptr;
    }
    j["prompt_tokens"] = r.prompt_tokens ? nlohmann::json(*r.prompt_tokens) : nlohmann::json(nullptr);
    j["completion_tokens"] = r.completion_tokens ? nlohmann::json(*r.completion_tokens) : nlohmann::json(nullptr);
    if (r.error) {
        j["error"] = *r.error;
        j["error_kind"] = r.error_kind.value_or("error");
    }
    if (!r.warnings.empty()) j["warnings"] = r.warnings;
    return j;
}

inline RunRecord run_record_from_json(const nlohmann::json& j) {
    RunRecord r;
    try {
        r.config_hash = j.at("config_hash").get<std::string>();
        r.sequence_id = j.at("sequence_id").get<std::string>();
        r.endpoint = j.value("endpoint", std::string{});
        r.model_id = j.value("model_id", std::string{});
        r.representation = parse_representation(j.at("representation").get<std::string>());
        r.n_icl = j.value("n_icl", std::size_t{0});
        r.autoregressive = j.value("autoregressive", false);
        r.seed = j.value("seed", std::uint64_t{0});
        r.template_version = j.value("template_version", std::string{});
        r.embedder = j.value("embedder", std::string{});
        r.prompt_hash = j.value("prompt_hash", std::string{});
        r.icl_ids = j.value("icl_ids", std::vector<std::string>{});
        if (j.contains("caption") && j["caption"].is_string()) r.caption = j["caption"].get<std::string>();
        r.raw_response = j.value("raw_response", std::string{});
        r.parsed.parse_status = parse_status_from(j.value("parse_status", std::string("failed")));
        r.parsed.final = detail::behavior_from_json(j.at("prediction"));
        r.parsed.failure = j.value("parse_failure", std::string{});
        if (j.contains("intermediates") && j["intermediates"].is_array()) {
            r.parsed.intermediates.emplace(detail::behavior_from_json(j["intermediates"].at(0)),
                                           detail::behavior_from_json(j["intermediates"].at(1)));
        }
        r.latest = detail::behavior_from_json(j.at("latest"));
        r.target = detail::behavior_from_json(j.at("target"));
        if (j.contains("metrics") && j["metrics"].is_object()) {
            const auto& m = j["metrics"];
            r.metrics = MetricReport{m.at("accuracy").get<double>(), m.at("cosine").get<double>(),
                                     m.at("edit").get<double>()};
        }
        r.edit_raw = j.value("edit_raw", std::size_t{0});
        r.latency_ms = j.value("latency_ms", 0.0);
        if (j.contains("prompt_tokens") && j["prompt_tokens"].is_number()) {
            r.prompt_tokens = j["prompt_tokens"].get<std::int64_t>();
        }
        if (j.contains("completion_tokens") && j["completion_tokens"].is_number()) {
            r.completion_tokens = j["completion_tokens"].get<std::int64_t>();
        }
        r.attempts = j.value("attempts", std::size_t{0});
        r.timestamp = j.value("timestamp", std::string{});
        if (j.contains("error")) {
            r.error = j["error"].get<std::string>();
            r.error_kind = j.value("error_kind", std::string("error"));
        }
        r.warnings = j.value("warnings", std::vector<std::string>{});
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed run record: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw ParseError(std::string("malformed run record: ") + e.what());
    }
    return r;
}

// Append-only JSON-lines store. Opening drops a torn trailing line left by a
// crash; appends are serialized and flushed per record.
class ResultsFile {
public:
    explicit ResultsFile(std::filesystem::path path) : path_(std::move(path)) {
        if (std::filesystem::exists(path_)) recover();
        if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
        out_.open(path_, std::ios::app | std::ios::binary);
        if (!out_) throw IoError("cannot open results file " + path_.string());
    }

    const std::filesystem::path& path() const noexcept { return path_; }

    bool contains(const std::string& config_hash, const std::string& sequence_id) const {
        std::lock_guard lock(mu_);
        return keys_.count({config_hash, sequence_id}) != 0;
    }

    // Returns false (and writes nothing) if the key is already present.
    bool append(const RunRecord& record) {
        std::lock_guard lock(mu_);
        if (!keys_.emplace(record.config_hash, record.sequence_id).second) return false;
        out_ << to_json(record).dump() << '\n';
        out_.flush();
        if (!out_) throw IoError("write failed on " + path_.string());
        return true;
    }

    std::size_t size() const {
        std::lock_guard lock(mu_);
        return keys_.size();
    }

private:
    void recover() {
        std::ifstream in(path_, std::ios::binary);
        std::string line, kept;
        std::size_t lineno = 0;
        bool rewrite = false;
        while (std::getline(in, line)) {
            ++lineno;
            const bool terminated = !in.eof();
            if (detail::trim(line).empty()) continue;
            auto j = nlohmann::json::parse(line, nullptr, false);
            if (j.is_discarded()) {
                if (terminated && in.peek() != std::char_traits<char>::eof()) {
                    throw ParseError(path_.string() + ":" + std::to_string(lineno) + ": corrupt record");
                }
                rewrite = true;  // torn final line
                break;
            }
            rewrite = rewrite || !terminated;
            keys_.emplace(j.at("config_hash").get<std::string>(), j.at("sequence_id").get<std::string>());
            kept += line;
            kept += '\n';
        }
        in.close();
        if (rewrite) {
            std::ofstream out(path_, std::ios::trunc | std::ios::binary);
            out << kept;
        }
    }

    std::filesystem::path path_;
    mutable std::mutex mu_;
    std::ofstream out_;
    std::set<std::pair<std::string, std::string>> keys_;
};

inline std::vector<RunRecord> read_results(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open results file " + path.string());
    std::vector<RunRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            if (in.peek() == std::char_traits<char>::eof()) break;  // torn final line
            throw ParseError(path.string() + ":" + std::to_string(lineno) + ": invalid JSON");
        }
        out.push_back(run_record_from_json(j));
    }
    return out;
}

// Everything a run needs besides the grid cell itself.
struct RunEnvironment {
    std::vector<EvalSequence> sequences;  // evaluation set; also the ICL pool
    PromptTemplate prompt_template = PromptTemplate::builtin();
    std::map<std::string, std::shared_ptr<CompletionProvider>> providers;
    std::shared_ptr<Embedder> embedder = std::make_shared<TrigramEmbedder>();
    std::function<std::string()> timestamp = detail::utc_now_iso;
    std::ostream* log = &std::cerr;
    // Stop after this many new records (interrupt simulation / smoke runs).
    std::optional<std::size_t> stop_after;
};

struct RunSummary {
    std::string config_hash;
    std::size_t written = 0;
    std::size_t skipped = 0;
    std::size_t errors = 0;
    std::vector<std::string> warnings;
};

inline std::string dataset_fingerprint(const std::vector<EvalSequence>& sequences) {
    std::string ids;
    for (const auto& s : sequences) {
        ids += s.sequence_id;
        ids += '\n';
    }
    return codec::sha256_hex(ids).substr(0, 16);
}

inline nlohmann::json config_identity(const ExperimentConfig& c, const RunEnvironment& env, std::size_t effective_icl) {
    auto provider = env.providers.find(c.endpoint);
    nlohmann::json j{{"endpoint", c.endpoint},
                     {"representation", to_string(c.representation)},
                     {"n_icl", effective_icl},
                     {"autoregressive", c.autoregressive},
                     {"seed", c.seed},
                     {"icl_sampling", to_string(c.icl_sampling)},
                     {"sampling",
                      {{"stride_s", c.sampling.stride_s},
                       {"history_s", c.sampling.history_s},
                       {"horizon_s", c.sampling.horizon_s}}},
                     {"template", env.prompt_template.version()},
                     {"embedder", env.embedder ? env.embedder->id() : std::string("none")},
                     {"dataset", dataset_fingerprint(env.sequences)}};
    if (provider != env.providers.end()) j["model"] = endpoint_identity(provider->second->endpoint());
    if (c.representation == Representation::Caption) {
        const std::string cap = c.caption_endpoint.value_or(c.endpoint);
        j["caption_endpoint"] = cap;
        if (auto it = env.providers.find(cap); it != env.providers.end()) {
            j["caption_model"] = endpoint_identity(it->second->endpoint());
        }
    }
    return j;
}

namespace detail {

inline void warn(RunEnvironment& env, RunSummary& summary, const std::string& msg) {
    summary.warnings.push_back(msg);
    if (env.log) *env.log << "warning: " << msg << '\n';
}

// Serial or pooled map over [0, n); stops handing out indices once `stop`
// reports true.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& body,
                         const std::function<bool()>& stop) {
    std::atomic<std::size_t> next{0};
    auto loop = [&] {
        for (;;) {
            if (stop()) return;
            const std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            body(i);
        }
    };
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        loop();
        return;
    }
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(loop);
}

}  // namespace detail

// Evaluates one grid cell over env.sequences, appending one RunRecord per
// sequence not already present in `results` under this config hash.
inline RunSummary run_experiment(const ExperimentConfig& config, RunEnvironment& env, ResultsFile& results) {
    RunSummary summary;
    auto provider_it = env.providers.find(config.endpoint);
    if (provider_it == env.providers.end()) throw ConfigError("unknown endpoint '" + config.endpoint + "'");
    auto provider = provider_it->second;
    const ModelEndpoint& ep = provider->endpoint();

    std::shared_ptr<CompletionProvider> captioner;
    if (config.representation == Representation::Caption) {
        const std::string name = config.caption_endpoint.value_or(config.endpoint);
        auto it = env.providers.find(name);
        if (it == env.providers.end()) throw ConfigError("unknown caption endpoint '" + name + "'");
        captioner = it->second;
    }
    if (!env.embedder) throw ConfigError("no embedder configured");

    std::size_t n_icl = config.n_icl;
    if (n_icl > 0 && !ep.supports_interleaving && images_per_item(config.representation) > 0) {
        detail::warn(env, summary,
                     "endpoint '" + ep.name + "' cannot interleave images with text; ICL disabled (requested " +
                         std::to_string(n_icl) + ")");
        n_icl = 0;
    }
    if (auto cap = max_icl_examples(config.representation, ep.max_images_per_request); cap && n_icl > *cap) {
        throw ConfigError(std::to_string(n_icl) + " ICL examples exceed the image budget of endpoint '" + ep.name +
                          "' (max " + std::to_string(*cap) + " for " + std::string(to_string(config.representation)) +
                          ")");
    }
    if (n_icl > 0 && env.sequences.size() < n_icl + 1) {
        throw ConfigError("evaluation set of " + std::to_string(env.sequences.size()) + " sequences is too small for " +
                          std::to_string(n_icl) + " ICL examples");
    }

    summary.config_hash = codec::sha256_hex(config_identity(config, env, n_icl).dump()).substr(0, 20);

    // Global mode: one draw of n+1 examples shared by all queries; each query
    // drops itself (or the surplus draw) to keep exactly n.
    std::vector<IclExample> global_pool;
    if (config.icl_sampling == IclSampling::Global && n_icl > 0) {
        global_pool = sample_icl(env.sequences, n_icl + 1, codec::sha256_u64(summary.config_hash + "/global"), "",
                                 config.representation);
    }

    std::mutex summary_mu;
    std::atomic<std::size_t> written{0};
    const auto stop = [&] { return env.stop_after && written.load() >= *env.stop_after; };

    auto process = [&](std::size_t index) {
        const EvalSequence& seq = env.sequences[index];
        if (results.contains(summary.config_hash, seq.sequence_id)) {
            std::lock_guard lock(summary_mu);
            ++summary.skipped;
            return;
        }
        RunRecord rec;
        rec.config_hash = summary.config_hash;
        rec.sequence_id = seq.sequence_id;
        rec.endpoint = ep.name;
        rec.model_id = ep.model_id;
        rec.representation = config.representation;
        rec.n_icl = n_icl;
        rec.autoregressive = config.autoregressive;
        rec.seed = config.seed;
        rec.template_version = env.prompt_template.version();
        rec.embedder = env.embedder->id();
        rec.latest = seq.latest().behavior;
        rec.target = seq.target.behavior;
        if (n_icl != config.n_icl) rec.warnings = {"icl_disabled_no_interleaving"};

        const auto context = SequenceContext::from(seq);
        try {
            std::vector<IclExample> icl;
            if (n_icl > 0) {
                if (config.icl_sampling == IclSampling::PerQuery) {
                    icl = sample_icl(env.sequences, n_icl, codec::sha256_u64(summary.config_hash + "/" + seq.sequence_id),
                                     seq.sequence_id, config.representation);
                } else {
                    for (const auto& ex : global_pool) {
                        if (ex.source_sequence_id != seq.sequence_id && icl.size() < n_icl) icl.push_back(ex);
                    }
                }
            }
            for (const auto& ex : icl) rec.icl_ids.push_back(ex.source_sequence_id);

            std::optional<std::string> caption;
            if (captioner) {
                const auto cap_prompt = build_caption_request(seq, env.prompt_template);
                const auto cap_result = captioner->complete(cap_prompt, context);
                caption = detail::trim(cap_result.raw_text);
                rec.caption = caption;
                rec.latency_ms += cap_result.latency_ms;
                rec.attempts += cap_result.attempts.size();
            }

            const auto prompt = build_prediction_prompt(seq, config.representation, icl, config.autoregressive, caption,
                                                        env.prompt_template, ep.max_images_per_request);
            rec.prompt_hash = prompt_hash(prompt);
            const auto result = provider->complete(prompt, context);
            rec.raw_response = result.raw_text;
            rec.latency_ms += result.latency_ms;
            rec.prompt_tokens = result.prompt_tokens;
            rec.completion_tokens = result.completion_tokens;
            rec.attempts += result.attempts.size();
            rec.parsed = parse_prediction(result.raw_text, config.autoregressive, seq.target.offset_s);
        } catch (const AuthError&) {
            throw;
        } catch (const ConfigError&) {
            throw;
        } catch (const Error& e) {
            rec.error = e.what();
            rec.error_kind = e.kind();
            rec.parsed = ParsedPrediction{};
            rec.parsed.failure = "no response: " + e.kind();
        }

        try {
            rec.metrics = score_sequence(rec.parsed, seq, *env.embedder);
            rec.edit_raw = levenshtein(render_behavior(rec.parsed.final), render_behavior(seq.target.behavior));
        } catch (const Error& e) {
            rec.metrics.reset();
            rec.error = rec.error ? *rec.error + "; scoring: " + e.what() : std::string("scoring: ") + e.what();
            rec.error_kind = rec.error_kind.value_or(e.kind());
        }
        rec.timestamp = env.timestamp ? env.timestamp() : std::string{};

        {
            std::lock_guard lock(summary_mu);
            if (stop()) return;
            if (results.append(rec)) {
                ++written;
                ++summary.written;
                if (rec.error) ++summary.errors;
            } else {
                ++summary.skipped;
            }
        }
    };

    std::exception_ptr fatal;
    std::mutex fatal_mu;
    detail::parallel_for(
        env.sequences.size(), config.worker_count,
        [&](std::size_t i) {
            try {
                process(i);
            } catch (...) {
                std::lock_guard lock(fatal_mu);
                if (!fatal) fatal = std::current_exception();
            }
        },
        [&] {
            if (stop()) return true;
            std::lock_guard lock(fatal_mu);
            return static_cast<bool>(fatal);
        });
    if (fatal) std::rethrow_exception(fatal);
    return summary;
}

// Recomputes parse and metrics from each stored raw response and ground truth.
// Returns the sequence ids whose stored values differ.
inline std::vector<std::string> audit_records(const std::vector<RunRecord>& records, Embedder& embedder) {
    std::vector<std::string> mismatched;
    for (const auto& r : records) {
        if (!r.metrics) continue;
        const ParsedPrediction parsed =
            r.error ? r.parsed : parse_prediction(r.raw_response, r.autoregressive);
        const MetricReport m = score_behavior(parsed.final, r.target, embedder);
        const bool same = parsed.final == r.parsed.final && parsed.parse_status == r.parsed.parse_status &&
                          m.accuracy == r.metrics->accuracy && m.cosine == r.metrics->cosine &&
                          m.edit == r.metrics->edit;
        if (!same) mismatched.push_back(r.config_hash + "/" + r.sequence_id);
    }
    return mismatched;
}

// ---------------------------------------------------------------------------
// Aggregation

struct StratumMeans {
    std::size_t n = 0;
    double accuracy = 0.0;
    double cosine = 0.0;
    double edit = 0.0;
};

struct AggregateRow {
    std::string config_hash;
    std::string endpoint;
    std::string model_id;
    Representation representation = Representation::Blind;
    std::size_t n_icl = 0;
    bool autoregressive = false;
    std::size_t n = 0;            // records
    std::size_t n_scored = 0;     // records with metrics
    std::size_t parse_failures = 0;
    double parse_fail_rate = 0.0;
    StratumMeans overall;
    StratumMeans changed;     // target differs from t = 0 labels
    StratumMeans multilabel;  // target has two or more labels
};

struct AggregateReport {
    std::vector<AggregateRow> rows;
};

namespace detail {

struct Accumulator {
    std::size_t n = 0;
    double acc = 0.0, cos = 0.0, edit = 0.0;

    void add(const MetricReport& m) {
        ++n;
        acc += m.accuracy;
        cos += m.cosine;
        edit += m.edit;
    }
    StratumMeans means() const {
        if (n == 0) return {};
        const double d = static_cast<double>(n);
        return {n, acc / d, cos / d, edit / d};
    }
};

}  // namespace detail

inline AggregateReport aggregate(const std::vector<RunRecord>& records) {
    if (records.empty()) throw EmptyResultsError("no run records to aggregate");
    struct Group {
        AggregateRow row;
        detail::Accumulator all, changed, multi;
    };
    std::map<std::string, Group> groups;
    for (const auto& r : records) {
        auto [it, fresh] = groups.try_emplace(r.config_hash);
        auto& g = it->second;
        if (fresh) {
            g.row.config_hash = r.config_hash;
            g.row.endpoint = r.endpoint;
            g.row.model_id = r.model_id;
            g.row.representation = r.representation;
            g.row.n_icl = r.n_icl;
            g.row.autoregressive = r.autoregressive;
        }
        ++g.row.n;
        if (r.parsed.parse_status == ParseStatus::Failed) ++g.row.parse_failures;
        if (!r.metrics) continue;
        g.all.add(*r.metrics);
        if (r.changed()) g.changed.add(*r.metrics);
        if (r.multilabel()) g.multi.add(*r.metrics);
    }
    AggregateReport report;
    for (auto& [hash, g] : groups) {
        g.row.n_scored = g.all.n;
        g.row.parse_fail_rate = static_cast<double>(g.row.parse_failures) / static_cast<double>(g.row.n);
        g.row.overall = g.all.means();
        g.row.changed = g.changed.means();
        g.row.multilabel = g.multi.means();
        report.rows.push_back(std::move(g.row));
    }
    std::sort(report.rows.begin(), report.rows.end(), [](const AggregateRow& a, const AggregateRow& b) {
        return std::tuple(static_cast<int>(a.representation), a.endpoint, a.n_icl, a.autoregressive, a.config_hash) <
               std::tuple(static_cast<int>(b.representation), b.endpoint, b.n_icl, b.autoregressive, b.config_hash);
    });
    return report;
}

inline AggregateReport aggregate(const std::filesystem::path& results_path) {
    return aggregate(read_results(results_path));
}

inline nlohmann::json to_json(const StratumMeans& s) {
    return {{"n", s.n}, {"accuracy", s.accuracy}, {"cosine", s.cosine}, {"edit", s.edit}};
}

inline StratumMeans stratum_from_json(const nlohmann::json& j) {
    return {j.at("n").get<std::size_t>(), j.at("accuracy").get<double>(), j.at("cosine").get<double>(),
            j.at("edit").get<double>()};
}

inline nlohmann::json to_json(const AggregateReport& report) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : report.rows) {
        rows.push_back({{"config_hash", r.config_hash},
                        {"endpoint", r.endpoint},
                        {"model_id", r.model_id},
                        {"representation", to_string(r.representation)},
                        {"n_icl", r.n_icl},
                        {"autoregressive", r.autoregressive},
                        {"n", r.n},
                        {"n_scored", r.n_scored},
                        {"parse_failures", r.parse_failures},
                        {"parse_fail_rate", r.parse_fail_rate},
                        {"overall", to_json(r.overall)},
                        {"changed", to_json(r.changed)},
                        {"multilabel", to_json(r.multilabel)}});
    }
    return {{"rows", rows}};
}

inline AggregateReport aggregate_report_from_json(const nlohmann::json& j) {
    AggregateReport report;
    try {
        for (const auto& r : j.at("rows")) {
            AggregateRow row;
            row.config_hash = r.at("config_hash").get<std::string>();
            row.endpoint = r.at("endpoint").get<std::string>();
            row.model_id = r.value("model_id", std::string{});
            row.representation = parse_representation(r.at("representation").get<std::string>());
            row.n_icl = r.at("n_icl").get<std::size_t>();
            row.autoregressive = r.at("autoregressive").get<bool>();
            row.n = r.at("n").get<std::size_t>();
            row.n_scored = r.value("n_scored", row.n);
            row.parse_failures = r.value("parse_failures", std::size_t{0});
            row.parse_fail_rate = r.at("parse_fail_rate").get<double>();
            row.overall = stratum_from_json(r.at("overall"));
            row.changed = stratum_from_json(r.at("changed"));
            row.multilabel = stratum_from_json(r.at("multilabel"));
            report.rows.push_back(std::move(row));
        }
    } catch (const std::exception& e) {
        throw ParseError(std::string("malformed aggregate report: ") + e.what());
    }
    return report;
}

// ---------------------------------------------------------------------------
// Reports

enum class ReportFormat { Csv, Markdown };

inline constexpr std::array<std::string_view, 9> kReportColumns{
    "representation", "model", "n_icl", "autoregressive", "accuracy", "cosine", "edit", "parse_fail_rate", "n"};

namespace detail {

inline std::string fixed3(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

inline std::vector<std::string> report_cells(const AggregateRow& r) {
    return {std::string(to_string(r.representation)),
            r.endpoint,
            std::to_string(r.n_icl),
            r.autoregressive ? "true" : "false",
            fixed3(r.overall.accuracy),
            fixed3(r.overall.cosine),
            fixed3(r.overall.edit),
            fixed3(r.parse_fail_rate),
            std::to_string(r.n)};
}

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

}  // namespace detail

inline void emit_report(const AggregateReport& report, ReportFormat format, std::ostream& out) {
    if (format == ReportFormat::Csv) {
        for (std::size_t i = 0; i < kReportColumns.size(); ++i) out << (i ? "," : "") << kReportColumns[i];
        out << '\n';
        for (const auto& row : report.rows) {
            const auto cells = detail::report_cells(row);
            for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << detail::csv_escape(cells[i]);
            out << '\n';
        }
        return;
    }
    out << "|";
    for (auto c : kReportColumns) out << ' ' << c << " |";
    out << "\n|";
    for (std::size_t i = 0; i < kReportColumns.size(); ++i) out << (i < 4 ? " --- |" : " ---: |");
    out << '\n';
    for (const auto& row : report.rows) {
        out << "|";
        for (const auto& c : detail::report_cells(row)) out << ' ' << c << " |";
        out << '\n';
    }
    out << "\n### Strata\n\n"
        << "| representation | model | n_icl | autoregressive | stratum | n | accuracy | cosine | edit |\n"
        << "| --- | --- | --- | --- | --- | ---: | ---: | ---: | ---: |\n";
    for (const auto& row : report.rows) {
        for (const auto& [name, s] : {std::pair<const char*, const StratumMeans&>{"changed", row.changed},
                                      std::pair<const char*, const StratumMeans&>{"multilabel", row.multilabel}}) {
            out << "| " << to_string(row.representation) << " | " << row.endpoint << " | " << row.n_icl << " | "
                << (row.autoregressive ? "true" : "false") << " | " << name << " | " << s.n << " | "
                << detail::fixed3(s.accuracy) << " | " << detail::fixed3(s.cosine) << " | "
                << detail::fixed3(s.edit) << " |\n";
        }
    }
}

inline void emit_report(const AggregateReport& report, ReportFormat format, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write report " + path.string());
    emit_report(report, format, out);
    if (!out) throw IoError("write failed on " + path.string());
}

// ---------------------------------------------------------------------------
// Run configuration file

// JSON run configuration: shared settings, endpoints, and either a cartesian
// "grid" or an explicit "runs" list (or both). Relative paths resolve against
// the config file's directory.
struct RunConfig {
    std::filesystem::path manifest;
    std::filesystem::path template_path;
    std::filesystem::path results;
    std::vector<ModelEndpoint> endpoints;
    std::optional<std::string> caption_endpoint;
    EmbedderChoice embedder;
    std::vector<ExperimentConfig> experiments;
    std::vector<std::string> warnings;  // grid cells dropped during expansion

    static RunConfig parse(const nlohmann::json& j, const std::filesystem::path& base_dir);
    static RunConfig load(const std::filesystem::path& path);

    const ModelEndpoint& endpoint(const std::string& name) const {
        for (const auto& e : endpoints) {
            if (e.name == name) return e;
        }
        throw ConfigError("unknown endpoint '" + name + "'");
    }
};

inline RunConfig RunConfig::parse(const nlohmann::json& j, const std::filesystem::path& base_dir) {
    RunConfig rc;
    auto resolve = [&](const std::string& p) -> std::filesystem::path {
        if (p.empty()) return {};
        std::filesystem::path path(p);
        return path.is_absolute() ? path : (base_dir / path).lexically_normal();
    };
    try {
        rc.manifest = resolve(j.at("dataset").get<std::string>());
        rc.template_path = resolve(j.value("template", std::string{}));
        rc.results = resolve(j.value("results", std::string("results.jsonl")));
        for (const auto& e : j.at("endpoints")) rc.endpoints.push_back(endpoint_from_json(e));
        if (j.contains("caption_endpoint")) rc.caption_endpoint = j["caption_endpoint"].get<std::string>();
        if (j.contains("embedder")) {
            rc.embedder.kind = j["embedder"].value("kind", std::string("trigram"));
            rc.embedder.endpoint = j["embedder"].value("endpoint", std::string{});
        }
        if (rc.embedder.kind != "trigram" && rc.embedder.kind != "remote") {
            throw ConfigError("unknown embedder kind '" + rc.embedder.kind + "'");
        }

        ExperimentConfig base;
        base.seed = j.value("seed", std::uint64_t{0});
        base.worker_count = j.value("workers", std::size_t{1});
        base.manifest = rc.manifest;
        base.template_path = rc.template_path;
        base.embedder = rc.embedder;
        base.icl_sampling = parse_icl_sampling(j.value("icl_sampling", std::string("per_query")));
        base.caption_endpoint = rc.caption_endpoint;
        if (j.contains("sampling")) {
            const auto& s = j["sampling"];
            base.sampling.stride_s = s.value("stride_s", base.sampling.stride_s);
            base.sampling.history_s = s.value("history_s", base.sampling.history_s);
            base.sampling.horizon_s = s.value("horizon_s", base.sampling.horizon_s);
        }
        base.sampling.include_intermediates = true;

        std::set<std::string> seen;
        auto add = [&](ExperimentConfig c) {
            const auto& ep = rc.endpoint(c.endpoint);
            if (auto cap = max_icl_examples(c.representation, ep.max_images_per_request); cap && c.n_icl > *cap) {
                rc.warnings.push_back("skipping " + c.endpoint + "/" + std::string(to_string(c.representation)) +
                                      " with " + std::to_string(c.n_icl) + " ICL examples: image budget allows " +
                                      std::to_string(*cap));
                return;
            }
            const std::string key = c.endpoint + "|" + std::string(to_string(c.representation)) + "|" +
                                    std::to_string(c.n_icl) + "|" + (c.autoregressive ? "1" : "0");
            if (seen.insert(key).second) rc.experiments.push_back(std::move(c));
        };

        if (j.contains("grid")) {
            const auto& g = j["grid"];
            std::vector<std::string> names;
            if (g.contains("endpoints")) {
                names = g["endpoints"].get<std::vector<std::string>>();
            } else {
                for (const auto& e : rc.endpoints) names.push_back(e.name);
            }
            std::vector<Representation> reps;
            if (g.contains("representations")) {
                for (const auto& r : g["representations"]) reps.push_back(parse_representation(r.get<std::string>()));
            } else {
                reps.assign(kAllRepresentations.begin(), kAllRepresentations.end());
            }
            const auto icl = g.value("n_icl", std::vector<std::size_t>{0, 1, 5, 10, 15});
            const auto ar = g.value("autoregressive", std::vector<bool>{false});
            for (const auto& name : names) {
                for (auto rep : reps) {
                    for (auto n : icl) {
                        for (bool a : ar) {
                            ExperimentConfig c = base;
                            c.endpoint = name;
                            c.representation = rep;
                            c.n_icl = n;
                            c.autoregressive = a;
                            add(std::move(c));
                        }
                    }
                }
            }
        }
        if (j.contains("runs")) {
            for (const auto& r : j["runs"]) {
                ExperimentConfig c = base;
                c.endpoint = r.at("endpoint").get<std::string>();
                c.representation = parse_representation(r.at("representation").get<std::string>());
                c.n_icl = r.value("n_icl", std::size_t{0});
                c.autoregressive = r.value("autoregressive", false);
                if (r.contains("seed")) c.seed = r["seed"].get<std::uint64_t>();
                add(std::move(c));
            }
        }
        if (!j.contains("grid") && !j.contains("runs")) throw ConfigError("config needs a 'grid' or 'runs' section");
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed run config: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("malformed run config: ") + e.what());
    }
    if (rc.embedder.kind == "remote") rc.endpoint(rc.embedder.endpoint);
    if (rc.caption_endpoint) rc.endpoint(*rc.caption_endpoint);
    return rc;
}

inline RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open run config " + path.string());
    auto j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("run config " + path.string() + " is not valid JSON");
    return parse(j, path.parent_path());
}

struct RunAllOptions {
    std::optional<std::size_t> workers;      // overrides the config
    std::optional<std::size_t> stop_after;   // per experiment
    std::shared_ptr<Transport> transport;    // defaults to HTTP
    std::function<std::string()> timestamp;  // defaults to UTC now
    std::ostream* log = &std::cerr;
};

// Loads the dataset once and runs every experiment of the config into its
// results file.
inline std::vector<RunSummary> run_config(const RunConfig& rc, const RunAllOptions& opt = {}) {
    if (rc.experiments.empty()) throw ConfigError("run config expands to no experiments");
    RunEnvironment env;
    env.log = opt.log;
    if (opt.timestamp) env.timestamp = opt.timestamp;
    if (!rc.template_path.empty()) env.prompt_template = PromptTemplate::load(rc.template_path);
    auto transport = opt.transport ? opt.transport : std::make_shared<HttpTransport>();
    for (const auto& ep : rc.endpoints) env.providers[ep.name] = make_provider(ep, transport);
    if (rc.embedder.kind == "remote") {
        env.embedder = std::make_shared<RemoteEmbedder>(rc.endpoint(rc.embedder.endpoint), transport);
    }
    for (const auto& w : rc.warnings) {
        if (env.log) *env.log << "warning: " << w << '\n';
    }

    const auto recordings = load_dataset(rc.manifest);
    SamplingOptions sampling = rc.experiments.front().sampling;
    env.sequences = sample_dataset(recordings, sampling);
    if (env.sequences.empty()) throw ConfigError("dataset " + rc.manifest.string() + " yields no sequences");

    ResultsFile results(rc.results);
    std::vector<RunSummary> out;
    for (auto c : rc.experiments) {
        if (opt.workers) c.worker_count = *opt.workers;
        env.stop_after = opt.stop_after;
        out.push_back(run_experiment(c, env, results));
    }
    return out;
}

}  // namespace hbp
