// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sstream>

#include "fixtures.hpp"

using namespace hbp;
using hbp::fixture::TempDir;

namespace {

std::vector<EvalSequence> fixture_sequences(int recordings = 2, int frames = 600) {
    std::vector<Recording> recs;
    for (int i = 0; i < recordings; ++i) {
        recs.push_back(fixture::synthetic_recording("rec" + std::to_string(i), frames, 30, 100 + i));
    }
    SamplingOptions opt;
    opt.include_intermediates = true;
    return sample_dataset(recs, opt);
}

RunEnvironment mock_env(std::vector<EvalSequence> seqs, std::ostream* log = nullptr) {
    RunEnvironment env;
    env.sequences = std::move(seqs);
    for (const char* mode : {"oracle", "echo_last", "failure"}) {
        env.providers[mode] = std::make_shared<MockProvider>(fixture::mock_endpoint(mode, mode));
    }
    env.timestamp = fixture::fixed_timestamp;
    env.log = log;
    return env;
}

ExperimentConfig cell(const std::string& endpoint, Representation r, std::size_t n_icl, bool ar) {
    ExperimentConfig c;
    c.endpoint = endpoint;
    c.representation = r;
    c.n_icl = n_icl;
    c.autoregressive = ar;
    c.sampling.include_intermediates = true;
    return c;
}

RunRecord record(const std::string& hash, const std::string& id, Behavior latest, Behavior target, double acc,
                 double cos, double edit, ParseStatus status = ParseStatus::Ok) {
    RunRecord r;
    r.config_hash = hash;
    r.sequence_id = id;
    r.endpoint = "m";
    r.representation = Representation::Sequence;
    r.latest = std::move(latest);
    r.target = std::move(target);
    r.parsed.parse_status = status;
    r.metrics = MetricReport{acc, cos, edit};
    return r;
}

std::vector<std::string> sorted_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::istringstream in(text);
    for (std::string l; std::getline(in, l);) lines.push_back(l);
    std::sort(lines.begin(), lines.end());
    return lines;
}

}  // namespace

TEST(RunExperiment, OracleIsPerfect) {
    TempDir dir;
    auto env = mock_env(fixture_sequences(1));
    ResultsFile results(dir / "r.jsonl");
    const auto s = run_experiment(cell("oracle", Representation::Sequence, 5, true), env, results);
    EXPECT_EQ(s.written, 10u);
    EXPECT_EQ(s.errors, 0u);
    const auto records = read_results(dir / "r.jsonl");
    ASSERT_EQ(records.size(), 10u);
    for (const auto& r : records) {
        ASSERT_TRUE(r.metrics);
        EXPECT_EQ(r.metrics->accuracy, 1.0);
        EXPECT_EQ(r.metrics->edit, 0.0);
        EXPECT_NEAR(r.metrics->cosine, 1.0, 1e-12);
        EXPECT_EQ(r.icl_ids.size(), 5u);
        EXPECT_EQ(std::count(r.icl_ids.begin(), r.icl_ids.end(), r.sequence_id), 0);
        EXPECT_TRUE(r.parsed.intermediates);
    }
}

TEST(RunExperiment, ResumeWritesOnlyMissing) {
    TempDir dir;
    auto env = mock_env(fixture_sequences(1));
    const auto c = cell("oracle", Representation::Image, 2, false);
    {
        ResultsFile results(dir / "r.jsonl");
        env.stop_after = 4;
        EXPECT_EQ(run_experiment(c, env, results).written, 4u);
    }
    env.stop_after.reset();
    ResultsFile results(dir / "r.jsonl");
    const auto s = run_experiment(c, env, results);
    EXPECT_EQ(s.written, 6u);
    EXPECT_EQ(s.skipped, 4u);
    EXPECT_EQ(read_results(dir / "r.jsonl").size(), 10u);
    EXPECT_EQ(run_experiment(c, env, results).written, 0u);
}

TEST(RunExperiment, ParallelMatchesSerial) {
    TempDir dir;
    auto env = mock_env(fixture_sequences(2));
    auto c = cell("echo_last", Representation::Caption, 3, false);
    {
        ResultsFile serial(dir / "serial.jsonl");
        run_experiment(c, env, serial);
    }
    c.worker_count = 4;
    {
        ResultsFile parallel(dir / "parallel.jsonl");
        run_experiment(c, env, parallel);
    }
    EXPECT_EQ(sorted_lines(fixture::read_text(dir / "serial.jsonl")),
              sorted_lines(fixture::read_text(dir / "parallel.jsonl")));
}

TEST(RunExperiment, EchoLastScoresPersistence) {
    TempDir dir;
    const auto a = make_behavior({"sit on-sofa"});
    const auto b = make_behavior({"stand on-floor"});
    std::vector<EvalSequence> seqs{fixture::make_sequence("1", {a, a, a}, {a, a}, a),
                                   fixture::make_sequence("2", {a, a, a}, {a, b}, b)};
    auto env = mock_env(seqs);
    ResultsFile results(dir / "r.jsonl");
    run_experiment(cell("echo_last", Representation::Blind, 0, false), env, results);
    const auto report = aggregate(read_results(dir / "r.jsonl"));
    ASSERT_EQ(report.rows.size(), 1u);
    EXPECT_DOUBLE_EQ(report.rows[0].overall.accuracy, 0.5);
    EXPECT_EQ(report.rows[0].changed.n, 1u);
    EXPECT_EQ(report.rows[0].changed.accuracy, 0.0);
}

TEST(RunExperiment, FailureModeRecordsParseFailures) {
    TempDir dir;
    auto env = mock_env(fixture_sequences(1));
    ResultsFile results(dir / "r.jsonl");
    run_experiment(cell("failure", Representation::Blind, 0, false), env, results);
    const auto report = aggregate(read_results(dir / "r.jsonl"));
    EXPECT_EQ(report.rows[0].parse_fail_rate, 1.0);
    EXPECT_EQ(report.rows[0].n_scored, 10u);
}

TEST(RunExperiment, TransportErrorsBecomeRecords) {
    TempDir dir;
    auto env = mock_env(fixture_sequences(1));
    auto transport = std::make_shared<fixture::ScriptedTransport>();  // every call: 500
    auto ep = fixture::remote_endpoint();
    ep.max_retries = 0;
    fixture::VirtualClock clock;
    env.providers["remote"] =
        std::make_shared<RemoteProvider>(std::make_shared<MllmClient>(ep, transport, clock.timing()));
    ResultsFile results(dir / "r.jsonl");
    const auto s = run_experiment(cell("remote", Representation::Blind, 0, false), env, results);
    EXPECT_EQ(s.written, 10u);
    EXPECT_EQ(s.errors, 10u);
    const auto records = read_results(dir / "r.jsonl");
    EXPECT_EQ(records[0].error_kind, "retries_exhausted");
    ASSERT_TRUE(records[0].metrics);
    EXPECT_EQ(records[0].parsed.parse_status, ParseStatus::Failed);
}

TEST(RunExperiment, AuthErrorAbortsRun) {
    TempDir dir;
    auto env = mock_env(fixture_sequences(1));
    auto transport = std::make_shared<fixture::ScriptedTransport>();
    for (int i = 0; i < 20; ++i) transport->push(403, "forbidden");
    fixture::VirtualClock clock;
    env.providers["remote"] = std::make_shared<RemoteProvider>(
        std::make_shared<MllmClient>(fixture::remote_endpoint(), transport, clock.timing()));
    ResultsFile results(dir / "r.jsonl");
    EXPECT_THROW(run_experiment(cell("remote", Representation::Blind, 0, false), env, results), AuthError);
    EXPECT_EQ(results.size(), 0u);
}

TEST(RunExperiment, ConfigErrors) {
    TempDir dir;
    auto env = mock_env(fixture_sequences(1));
    ResultsFile results(dir / "r.jsonl");
    EXPECT_THROW(run_experiment(cell("nobody", Representation::Blind, 0, false), env, results), ConfigError);
    EXPECT_THROW(run_experiment(cell("oracle", Representation::Sequence, 16, false), env, results), ConfigError);
    EXPECT_THROW(run_experiment(cell("oracle", Representation::Blind, 10, false), env, results), ConfigError);
}

TEST(RunExperiment, NoInterleavingDisablesIcl) {
    TempDir dir;
    std::ostringstream log;
    auto env = mock_env(fixture_sequences(1), &log);
    auto ep = fixture::mock_endpoint("flat", "oracle");
    ep.supports_interleaving = false;
    env.providers["flat"] = std::make_shared<MockProvider>(ep);
    ResultsFile results(dir / "r.jsonl");
    const auto s = run_experiment(cell("flat", Representation::Image, 3, false), env, results);
    EXPECT_EQ(s.warnings.size(), 1u);
    EXPECT_NE(log.str().find("ICL disabled"), std::string::npos);
    const auto records = read_results(dir / "r.jsonl");
    EXPECT_EQ(records[0].n_icl, 0u);
    EXPECT_EQ(records[0].warnings, std::vector<std::string>{"icl_disabled_no_interleaving"});
}

TEST(RunExperiment, GlobalIclSharesExamples) {
    TempDir dir;
    auto env = mock_env(fixture_sequences(1));
    auto c = cell("oracle", Representation::Blind, 3, false);
    c.icl_sampling = IclSampling::Global;
    ResultsFile results(dir / "r.jsonl");
    run_experiment(c, env, results);
    std::set<std::string> used;
    for (const auto& r : read_results(dir / "r.jsonl")) {
        EXPECT_EQ(r.icl_ids.size(), 3u);
        used.insert(r.icl_ids.begin(), r.icl_ids.end());
    }
    EXPECT_LE(used.size(), 4u);
}

TEST(RunExperiment, ConfigHashSeparatesCells) {
    TempDir dir;
    auto env = mock_env(fixture_sequences(1));
    ResultsFile results(dir / "r.jsonl");
    const auto a = run_experiment(cell("oracle", Representation::Blind, 0, false), env, results);
    const auto b = run_experiment(cell("oracle", Representation::Blind, 0, true), env, results);
    const auto c = run_experiment(cell("oracle", Representation::Blind, 1, false), env, results);
    EXPECT_NE(a.config_hash, b.config_hash);
    EXPECT_NE(a.config_hash, c.config_hash);
    EXPECT_EQ(results.size(), 30u);
    EXPECT_EQ(aggregate(read_results(dir / "r.jsonl")).rows.size(), 3u);
}

TEST(ResultsFile, RecoversTornLine) {
    TempDir dir;
    auto env = mock_env(fixture_sequences(1));
    const auto c = cell("oracle", Representation::Blind, 0, false);
    {
        ResultsFile results(dir / "r.jsonl");
        env.stop_after = 3;
        run_experiment(c, env, results);
    }
    {
        std::ofstream out(dir / "r.jsonl", std::ios::app | std::ios::binary);
        out << "{\"config_hash\": \"abc\", \"seq";
    }
    env.stop_after.reset();
    ResultsFile results(dir / "r.jsonl");
    EXPECT_EQ(results.size(), 3u);
    run_experiment(c, env, results);
    EXPECT_EQ(read_results(dir / "r.jsonl").size(), 10u);
}

TEST(ResultsFile, CorruptMiddleLineThrows) {
    TempDir dir;
    fixture::write_text(dir / "r.jsonl", "{broken\n{\"config_hash\":\"a\",\"sequence_id\":\"b\"}\n");
    EXPECT_THROW(ResultsFile(dir / "r.jsonl"), ParseError);
}

TEST(ResultsFile, AppendDedupes) {
    TempDir dir;
    ResultsFile f(dir / "r.jsonl");
    const auto r = record("h", "s1", {}, {}, 1, 1, 0);
    EXPECT_TRUE(f.append(r));
    EXPECT_FALSE(f.append(r));
    EXPECT_TRUE(f.contains("h", "s1"));
    EXPECT_EQ(read_results(dir / "r.jsonl").size(), 1u);
}

TEST(RunRecord, JsonRoundTrip) {
    auto r = record("h", "s", make_behavior({"a-b"}), make_behavior({"c-d", "e-f"}), 0.5, 0.25, 0.75,
                    ParseStatus::Recovered);
    r.parsed.final = make_behavior({"c-d"});
    r.parsed.intermediates.emplace(make_behavior({"a-b"}), Behavior{});
    r.caption = "cap";
    r.error = "boom";
    r.error_kind = "request";
    r.prompt_tokens = 12;
    const auto back = run_record_from_json(to_json(r));
    EXPECT_EQ(to_json(back).dump(), to_json(r).dump());

    // Two labels per step must not collapse into a JSON object.
    r.parsed.intermediates.emplace(make_behavior({"a-b", "c-d"}), make_behavior({"e-f", "g-h"}));
    const auto j = to_json(r);
    ASSERT_TRUE(j["intermediates"].is_array());
    EXPECT_EQ(run_record_from_json(j).parsed.intermediates, r.parsed.intermediates);
}

TEST(Aggregate, MeansAndStrata) {
    const auto a = make_behavior({"a-b"});
    const auto ab = make_behavior({"a-b", "c-d"});
    std::vector<RunRecord> recs{record("h", "1", a, a, 1.0, 1.0, 0.0),
                                record("h", "2", a, ab, 0.5, 0.7, 0.4, ParseStatus::Failed)};
    const auto report = aggregate(recs);
    ASSERT_EQ(report.rows.size(), 1u);
    const auto& row = report.rows[0];
    EXPECT_DOUBLE_EQ(row.overall.accuracy, 0.75);
    EXPECT_DOUBLE_EQ(row.overall.cosine, 0.85);
    EXPECT_DOUBLE_EQ(row.overall.edit, 0.2);
    EXPECT_DOUBLE_EQ(row.parse_fail_rate, 0.5);
    EXPECT_EQ(row.changed.n, 1u);
    EXPECT_DOUBLE_EQ(row.changed.accuracy, 0.5);
    EXPECT_EQ(row.multilabel.n, 1u);
    EXPECT_EQ(row.n, 2u);

    EXPECT_THROW(aggregate(std::vector<RunRecord>{}), EmptyResultsError);
    const auto back = aggregate_report_from_json(to_json(report));
    EXPECT_EQ(to_json(back).dump(), to_json(report).dump());
}

TEST(Aggregate, EmptyFileIsError) {
    TempDir dir;
    fixture::write_text(dir / "r.jsonl", "");
    EXPECT_THROW(aggregate(dir / "r.jsonl"), EmptyResultsError);
}

TEST(Report, CsvAndMarkdownAgree) {
    std::vector<RunRecord> recs;
    for (int k = 0; k < 3; ++k) {
        recs.push_back(record("h" + std::to_string(k), "1", {}, {}, 0.1 * k, 0.5, 0.3333333));
    }
    const auto report = aggregate(recs);
    std::ostringstream csv, md;
    emit_report(report, ReportFormat::Csv, csv);
    emit_report(report, ReportFormat::Markdown, md);

    const auto csv_lines = sorted_lines(csv.str());
    EXPECT_EQ(csv_lines.size(), 4u);
    std::istringstream csv_in(csv.str());
    std::string header;
    std::getline(csv_in, header);
    EXPECT_EQ(header, "representation,model,n_icl,autoregressive,accuracy,cosine,edit,parse_fail_rate,n");

    std::istringstream md_in(md.str());
    std::vector<std::vector<std::string>> md_rows;
    for (std::string line; std::getline(md_in, line) && !line.empty();) {
        std::vector<std::string> cells;
        std::istringstream ls(line.substr(1));
        for (std::string cell; std::getline(ls, cell, '|');) cells.push_back(detail::trim(cell));
        md_rows.push_back(cells);
    }
    ASSERT_EQ(md_rows.size(), 5u);  // header, rule, three rows
    for (const auto& row : md_rows) EXPECT_EQ(row.size(), 9u);

    std::istringstream again(csv.str());
    std::getline(again, header);
    for (std::size_t i = 2; i < md_rows.size(); ++i) {
        std::string line;
        std::getline(again, line);
        std::vector<std::string> cells;
        std::istringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
        EXPECT_EQ(cells, md_rows[i]);
    }
    EXPECT_NE(csv.str().find("0.333"), std::string::npos);
    EXPECT_NE(md.str().find("### Strata"), std::string::npos);
}

TEST(Audit, DetectsTampering) {
    TempDir dir;
    auto env = mock_env(fixture_sequences(1));
    ResultsFile results(dir / "r.jsonl");
    run_experiment(cell("echo_last", Representation::Blind, 0, true), env, results);
    auto records = read_results(dir / "r.jsonl");
    TrigramEmbedder e;
    EXPECT_TRUE(audit_records(records, e).empty());
    records[2].metrics->accuracy = 0.123;
    const auto bad = audit_records(records, e);
    ASSERT_EQ(bad.size(), 1u);
    EXPECT_EQ(bad[0], records[2].config_hash + "/" + records[2].sequence_id);
}

TEST(RunConfig, GridExpansionAndBudgetSkip) {
    TempDir dir;
    const nlohmann::json j{
        {"dataset", "data/manifest.json"},
        {"endpoints", {{{"name", "m"}, {"provider", "mock"}, {"max_images_per_request", 20}}}},
        {"grid", {{"representations", {"blind", "sequence"}}, {"n_icl", {0, 5, 10}}, {"autoregressive", {false, true}}}}};
    const auto rc = RunConfig::parse(j, dir.path());
    // sequence at 20 images allows 5 examples: 10 is skipped.
    EXPECT_EQ(rc.experiments.size(), 10u);
    EXPECT_EQ(rc.warnings.size(), 2u);
    EXPECT_EQ(rc.manifest, (dir.path() / "data/manifest.json").lexically_normal());
    EXPECT_TRUE(rc.experiments[0].sampling.include_intermediates);
}

TEST(RunConfig, Errors) {
    TempDir dir;
    EXPECT_THROW(RunConfig::parse({{"dataset", "x"}, {"endpoints", nlohmann::json::array()}}, dir.path()),
                 ConfigError);
    EXPECT_THROW(RunConfig::parse({{"dataset", "x"},
                                   {"endpoints", {{{"name", "m"}, {"provider", "mock"}}}},
                                   {"runs", {{{"endpoint", "other"}, {"representation", "blind"}}}}},
                                  dir.path()),
                 ConfigError);
    EXPECT_THROW(RunConfig::parse({{"dataset", "x"},
                                   {"endpoints", {{{"name", "m"}, {"provider", "mock"}}}},
                                   {"runs", {{{"endpoint", "m"}, {"representation", "video"}}}}},
                                  dir.path()),
                 ConfigError);
    fixture::write_text(dir / "bad.json", "{");
    EXPECT_THROW(RunConfig::load(dir / "bad.json"), ConfigError);
}

TEST(RunConfig, EndToEndFromFiles) {
    TempDir dir;
    std::vector<nlohmann::json> recs;
    for (int i = 0; i < 2; ++i) recs.push_back(fixture::recording_json(fixture::synthetic_recording("r" + std::to_string(i), 450, 30, i)));
    fixture::write_text(dir / "manifest.json", nlohmann::json{{"recordings", recs}}.dump());
    fixture::write_text(dir / "run.json", nlohmann::json{
        {"dataset", "manifest.json"},
        {"results", "out/results.jsonl"},
        {"endpoints", {{{"name", "oracle"}, {"provider", "mock"}, {"mock_mode", "oracle"}}}},
        {"runs", {{{"endpoint", "oracle"}, {"representation", "caption"}, {"n_icl", 2}, {"autoregressive", true}},
                  {{"endpoint", "oracle"}, {"representation", "blind"}}}}}.dump());
    const auto rc = RunConfig::load(dir / "run.json");
    RunAllOptions opt;
    opt.timestamp = fixture::fixed_timestamp;
    opt.log = nullptr;
    const auto summaries = run_config(rc, opt);
    ASSERT_EQ(summaries.size(), 2u);
    const auto report = aggregate(dir / "out/results.jsonl");
    ASSERT_EQ(report.rows.size(), 2u);
    for (const auto& row : report.rows) {
        EXPECT_EQ(row.overall.accuracy, 1.0);
        EXPECT_EQ(row.n, summaries[0].written);
    }
}
