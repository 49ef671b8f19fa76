// SPDX-License-Identifier: Apache-2.0
//
// hbp: command-line front end of the behavior-prediction benchmark harness.
//
//   hbp sample    --manifest data/manifest.json [--out sequences.jsonl]
//   hbp run       --config run.json [--workers 8] [--limit 10]
//   hbp aggregate --results results.jsonl [--out aggregate.json]
//   hbp report    --input results.jsonl --csv report.csv --markdown report.md
//   hbp audit     --results results.jsonl [--config run.json]

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "hbp/hbp.hpp"

namespace {

int cmd_sample(const std::string& manifest, const hbp::SamplingOptions& opt, const std::string& out_path) {
    const auto recordings = hbp::load_dataset(manifest);
    const auto sequences = hbp::sample_dataset(recordings, opt);
    if (!out_path.empty()) {
        std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
        if (!out) throw hbp::IoError("cannot write " + out_path);
        for (const auto& s : sequences) out << hbp::to_json(s).dump() << '\n';
    }
    auto stats = hbp::to_json(hbp::dataset_stats(sequences));
    stats["n_recordings"] = recordings.size();
    std::cout << stats.dump(2) << '\n';
    return 0;
}

int cmd_run(const std::string& config_path, std::size_t workers, std::size_t limit, const std::string& results) {
    auto rc = hbp::RunConfig::load(config_path);
    if (!results.empty()) rc.results = results;
    hbp::RunAllOptions opt;
    if (workers > 0) opt.workers = workers;
    if (limit > 0) opt.stop_after = limit;
    const auto summaries = hbp::run_config(rc, opt);
    std::size_t errors = 0;
    for (std::size_t i = 0; i < summaries.size(); ++i) {
        const auto& c = rc.experiments[i];
        const auto& s = summaries[i];
        errors += s.errors;
        std::cout << c.endpoint << " " << hbp::to_string(c.representation) << " n_icl=" << c.n_icl
                  << " ar=" << (c.autoregressive ? "yes" : "no") << " config=" << s.config_hash
                  << " written=" << s.written << " skipped=" << s.skipped << " errors=" << s.errors << '\n';
    }
    std::cout << "results: " << rc.results.string() << '\n';
    return errors > 0 ? 3 : 0;
}

hbp::AggregateReport load_report_input(const std::string& input) {
    if (std::filesystem::path(input).extension() == ".json") {
        std::ifstream in(input);
        if (!in) throw hbp::IoError("cannot open " + input);
        return hbp::aggregate_report_from_json(nlohmann::json::parse(in));
    }
    return hbp::aggregate(input);
}

int cmd_aggregate(const std::vector<std::string>& results, const std::string& out_path) {
    std::vector<hbp::RunRecord> records;
    for (const auto& r : results) {
        auto part = hbp::read_results(r);
        records.insert(records.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    const auto report = hbp::aggregate(records);
    const auto text = hbp::to_json(report).dump(2);
    if (out_path.empty()) {
        std::cout << text << '\n';
    } else {
        std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
        if (!out) throw hbp::IoError("cannot write " + out_path);
        out << text << '\n';
    }
    return 0;
}

int cmd_report(const std::string& input, const std::string& csv, const std::string& markdown) {
    const auto report = load_report_input(input);
    if (!csv.empty()) hbp::emit_report(report, hbp::ReportFormat::Csv, std::filesystem::path(csv));
    if (!markdown.empty()) hbp::emit_report(report, hbp::ReportFormat::Markdown, std::filesystem::path(markdown));
    if (csv.empty() && markdown.empty()) hbp::emit_report(report, hbp::ReportFormat::Markdown, std::cout);
    return 0;
}

int cmd_audit(const std::string& results, const std::string& config_path) {
    std::shared_ptr<hbp::Embedder> embedder = std::make_shared<hbp::TrigramEmbedder>();
    if (!config_path.empty()) {
        const auto rc = hbp::RunConfig::load(config_path);
        if (rc.embedder.kind == "remote") {
            embedder = std::make_shared<hbp::RemoteEmbedder>(rc.endpoint(rc.embedder.endpoint),
                                                             std::make_shared<hbp::HttpTransport>());
        }
    }
    const auto records = hbp::read_results(results);
    const auto bad = hbp::audit_records(records, *embedder);
    std::cout << "audited " << records.size() << " records, " << bad.size() << " mismatched\n";
    for (const auto& id : bad) std::cout << "  mismatch: " << id << '\n';
    return bad.empty() ? 0 : 4;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Benchmark harness for multimodal-LLM human behavior prediction"};
    app.require_subcommand(1);

    auto* sample = app.add_subcommand("sample", "Sample evaluation sequences from a manifest and print statistics");
    std::string manifest, sample_out;
    hbp::SamplingOptions sampling;
    sample->add_option("--manifest", manifest, "Dataset manifest (JSON or JSON-lines)")->required();
    sample->add_option("--stride", sampling.stride_s, "Seconds between window starts")->capture_default_str();
    sample->add_option("--history", sampling.history_s, "History length in seconds")->capture_default_str();
    sample->add_option("--horizon", sampling.horizon_s, "Prediction horizon in seconds")->capture_default_str();
    sample->add_flag("--intermediates", sampling.include_intermediates, "Include +1 s .. horizon-1 frames");
    sample->add_option("--out", sample_out, "Write sampled sequences as JSON-lines");

    auto* run = app.add_subcommand("run", "Run the experiment grid of a config");
    std::string config, results_override;
    std::size_t workers = 0, limit = 0;
    run->add_option("--config", config, "Run configuration (JSON)")->required();
    run->add_option("--workers", workers, "Override the worker count");
    run->add_option("--limit", limit, "Stop each experiment after this many new records");
    run->add_option("--results", results_override, "Override the results file");

    auto* agg = app.add_subcommand("aggregate", "Aggregate results into per-config means");
    std::vector<std::string> results;
    std::string agg_out;
    agg->add_option("--results", results, "Results file(s) (JSON-lines)")->required();
    agg->add_option("--out", agg_out, "Write the aggregate as JSON (default: stdout)");

    auto* report = app.add_subcommand("report", "Emit CSV and/or markdown tables");
    std::string input, csv, markdown;
    report->add_option("--input", input, "Results (.jsonl) or aggregate (.json)")->required();
    report->add_option("--csv", csv, "CSV output path");
    report->add_option("--markdown", markdown, "Markdown output path");

    auto* audit = app.add_subcommand("audit", "Re-score every record from its raw response");
    std::string audit_results, audit_config;
    audit->add_option("--results", audit_results, "Results file (JSON-lines)")->required();
    audit->add_option("--config", audit_config, "Run configuration (selects the embedder)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*sample) return cmd_sample(manifest, sampling, sample_out);
        if (*run) return cmd_run(config, workers, limit, results_override);
        if (*agg) return cmd_aggregate(results, agg_out);
        if (*report) return cmd_report(input, csv, markdown);
        if (*audit) return cmd_audit(audit_results, audit_config);
    } catch (const hbp::Error& e) {
        std::cerr << "error [" << e.kind() << "]: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
