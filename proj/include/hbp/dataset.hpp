// SPDX-License-Identifier: Apache-2.0
#pragma once

// Frame-level activity recordings, the evaluation-window sampler, dataset
// statistics and seeded in-context example draws.
//
// Manifest schema (JSON document, or JSON-lines with one recording per line):
//
//     {"recordings": [
//        {"recording_id": "N0Sofa_00034_01", "scene_id": "N0Sofa", "fps": 30,
//         "frames": [{"frame_index": 0, "image": "N0Sofa/s001_frame_00001.jpg",
//                     "labels": ["sit on-sofa", "touch-table"]}, ...]}]}
//
// A bare recording object or a top-level array of recordings is accepted too.
// Relative image locators resolve against the manifest's directory.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "hbp/behavior.hpp"
#include "hbp/error.hpp"
#include "hbp/representation.hpp"

namespace hbp {

struct FrameRecord {
    std::int64_t frame_index = 0;
    double timestamp_s = 0.0;
    std::string image_ref;
    Behavior behavior;
};

struct Recording {
    std::string recording_id;
    std::string scene_id;
    int fps = 30;
    std::vector<FrameRecord> frames;
};

// One sampled frame of an evaluation window, placed at a whole-second offset
// relative to the anchor (t = 0) frame.
struct TimedFrame {
    int offset_s = 0;
    std::int64_t frame_index = 0;
    double timestamp_s = 0.0;
    std::string image_ref;
    Behavior behavior;
};

struct EvalSequence {
    std::string sequence_id;
    std::string recording_id;
    std::string scene_id;
    int fps = 30;
    std::int64_t anchor_frame_index = 0;
    std::vector<TimedFrame> history;        // offsets -history_s .. 0
    std::vector<TimedFrame> intermediates;  // offsets 1 .. horizon_s-1, empty unless requested
    TimedFrame target;

    const TimedFrame& latest() const { return history.back(); }
    bool changed() const { return target.behavior != latest().behavior; }
    bool multilabel() const { return target.behavior.size() >= 2; }
};

struct IclExample {
    std::vector<Behavior> history_labels;  // t = -2, -1, 0
    Behavior target_labels;                // t = +3
    std::vector<std::string> image_refs;   // 0, 1 or 3 entries
    std::string source_sequence_id;
};

struct DatasetStats {
    std::size_t n_sequences = 0;
    double fraction_changed = 0.0;
    double fraction_multilabel = 0.0;
};

struct SamplingOptions {
    double stride_s = 1.5;
    int history_s = 2;
    int horizon_s = 3;
    bool include_intermediates = false;
};

namespace detail {

inline bool is_uri(const std::string& s) {
    const auto pos = s.find("://");
    return s.rfind("data:", 0) == 0 || (pos != std::string::npos && pos > 0 && pos < 16);
}

inline std::string resolve_image(const std::string& image, const std::filesystem::path& base) {
    if (image.empty() || is_uri(image)) return image;
    std::filesystem::path p(image);
    if (p.is_absolute()) return p.lexically_normal().string();
    return (base / p).lexically_normal().string();
}

inline Recording parse_recording(const nlohmann::json& j, const std::filesystem::path& base) {
    if (!j.is_object()) throw ParseError("recording entry must be a JSON object");
    Recording rec;
    try {
        rec.recording_id = j.at("recording_id").get<std::string>();
        rec.scene_id = j.value("scene_id", std::string{});
        rec.fps = j.at("fps").get<int>();
        if (rec.fps <= 0) throw ParseError("recording '" + rec.recording_id + "': fps must be positive");
        for (const auto& f : j.at("frames")) {
            FrameRecord fr;
            fr.frame_index = f.at("frame_index").get<std::int64_t>();
            if (fr.frame_index < 0) {
                throw ParseError("recording '" + rec.recording_id + "': negative frame_index");
            }
            fr.timestamp_s = static_cast<double>(fr.frame_index) / rec.fps;
            fr.image_ref = resolve_image(f.value("image", std::string{}), base);
            for (const auto& label : f.value("labels", nlohmann::json::array())) {
                fr.behavior.insert(normalize_label(label.get<std::string>()));
            }
            if (!rec.frames.empty() && fr.frame_index <= rec.frames.back().frame_index) {
                throw MonotonicityError("recording '" + rec.recording_id + "': frame_index " +
                                        std::to_string(fr.frame_index) + " follows " +
                                        std::to_string(rec.frames.back().frame_index));
            }
            rec.frames.push_back(std::move(fr));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed recording: ") + e.what());
    } catch (const MalformedLabelError& e) {
        throw ParseError(std::string("malformed label in recording '") + rec.recording_id + "': " + e.what());
    }
    return rec;
}

}  // namespace detail

inline std::vector<Recording> load_dataset(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw IoError("cannot open manifest " + manifest_path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();
    const auto base = manifest_path.parent_path();

    std::vector<nlohmann::json> entries;
    auto doc = nlohmann::json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (!doc.is_discarded()) {
        if (doc.is_object() && doc.contains("recordings")) {
            for (auto& r : doc["recordings"]) entries.push_back(r);
        } else if (doc.is_array()) {
            for (auto& r : doc) entries.push_back(r);
        } else {
            entries.push_back(doc);
        }
    } else {
        std::istringstream lines(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(lines, line)) {
            ++lineno;
            if (detail::trim(line).empty()) continue;
            auto j = nlohmann::json::parse(line, nullptr, false);
            if (j.is_discarded()) {
                throw ParseError(manifest_path.string() + ":" + std::to_string(lineno) + ": invalid JSON");
            }
            entries.push_back(std::move(j));
        }
    }

    std::vector<Recording> out;
    std::unordered_set<std::string> seen;
    for (const auto& e : entries) {
        auto rec = detail::parse_recording(e, base);
        if (!seen.insert(rec.recording_id).second) {
            throw ReferenceError("duplicate recording_id '" + rec.recording_id + "'");
        }
        out.push_back(std::move(rec));
    }
    return out;
}

// Converts a duration to a whole number of frames, rejecting durations that
// are not multiples of 1/fps.
inline std::int64_t seconds_to_frames(double seconds, int fps) {
    const double exact = seconds * fps;
    const double rounded = std::round(exact);
    if (seconds <= 0.0 || std::abs(exact - rounded) > 1e-9 || rounded < 1.0) {
        throw std::invalid_argument("duration " + std::to_string(seconds) +
                                    " s is not a positive multiple of 1/" + std::to_string(fps) + " s");
    }
    return static_cast<std::int64_t>(rounded);
}

// Windows whose earliest frame starts at the recording's first frame and then
// every stride. A window needs every whole-second frame from -history_s to
// +horizon_s; recordings too short for one window yield no sequences.
inline std::vector<EvalSequence> sample_sequences(const Recording& rec, const SamplingOptions& opt = {}) {
    if (rec.fps <= 0) throw std::invalid_argument("fps must be positive");
    if (opt.history_s <= 0 || opt.horizon_s <= 0) {
        throw std::invalid_argument("history_s and horizon_s must be positive");
    }
    std::vector<EvalSequence> out;
    if (rec.frames.empty()) return out;

    const std::int64_t stride = seconds_to_frames(opt.stride_s, rec.fps);
    const std::int64_t back = static_cast<std::int64_t>(opt.history_s) * rec.fps;
    const std::int64_t ahead = static_cast<std::int64_t>(opt.horizon_s) * rec.fps;

    std::unordered_map<std::int64_t, std::size_t> position;
    position.reserve(rec.frames.size());
    for (std::size_t i = 0; i < rec.frames.size(); ++i) position.emplace(rec.frames[i].frame_index, i);

    const std::int64_t origin = rec.frames.front().frame_index;
    const std::int64_t last = rec.frames.back().frame_index;

    auto frame_at = [&](std::int64_t anchor, int offset_s, TimedFrame& tf) {
        const std::int64_t idx = anchor + static_cast<std::int64_t>(offset_s) * rec.fps;
        auto it = position.find(idx);
        if (it == position.end()) return false;
        const auto& fr = rec.frames[it->second];
        tf = TimedFrame{offset_s, fr.frame_index, fr.timestamp_s, fr.image_ref, fr.behavior};
        return true;
    };

    for (std::int64_t anchor = origin + back; anchor + ahead <= last; anchor += stride) {
        EvalSequence seq;
        seq.recording_id = rec.recording_id;
        seq.scene_id = rec.scene_id;
        seq.fps = rec.fps;
        seq.anchor_frame_index = anchor;
        seq.sequence_id = rec.recording_id + "@" + std::to_string(anchor);
        bool complete = true;
        for (int off = -opt.history_s; off <= 0 && complete; ++off) {
            TimedFrame tf;
            complete = frame_at(anchor, off, tf);
            seq.history.push_back(std::move(tf));
        }
        // Intermediate frames must exist either way, so the window set does
        // not depend on whether they are attached.
        for (int off = 1; off < opt.horizon_s && complete; ++off) {
            TimedFrame tf;
            complete = frame_at(anchor, off, tf);
            if (opt.include_intermediates) seq.intermediates.push_back(std::move(tf));
        }
        complete = complete && frame_at(anchor, opt.horizon_s, seq.target);
        if (complete) out.push_back(std::move(seq));
    }
    return out;
}

inline std::vector<EvalSequence> sample_dataset(const std::vector<Recording>& recordings,
                                                const SamplingOptions& opt = {}) {
    std::vector<EvalSequence> out;
    for (const auto& rec : recordings) {
        auto seqs = sample_sequences(rec, opt);
        out.insert(out.end(), std::make_move_iterator(seqs.begin()), std::make_move_iterator(seqs.end()));
    }
    return out;
}

inline DatasetStats dataset_stats(const std::vector<EvalSequence>& sequences) {
    DatasetStats s;
    s.n_sequences = sequences.size();
    if (sequences.empty()) return s;
    std::size_t changed = 0, multi = 0;
    for (const auto& seq : sequences) {
        changed += seq.changed() ? 1 : 0;
        multi += seq.multilabel() ? 1 : 0;
    }
    s.fraction_changed = static_cast<double>(changed) / static_cast<double>(s.n_sequences);
    s.fraction_multilabel = static_cast<double>(multi) / static_cast<double>(s.n_sequences);
    return s;
}

// Image locators a representation draws from a sequence's history: none, the
// t = 0 frame, or the last three history frames.
inline std::vector<std::string> representation_images(const std::vector<TimedFrame>& history,
                                                      Representation r) {
    const auto want = static_cast<std::size_t>(images_per_item(r));
    std::vector<std::string> out;
    if (want == 0 || history.empty()) return out;
    const std::size_t start = history.size() >= want ? history.size() - want : 0;
    for (std::size_t i = start; i < history.size(); ++i) out.push_back(history[i].image_ref);
    return out;
}

inline IclExample make_icl_example(const EvalSequence& seq, Representation r) {
    IclExample ex;
    for (const auto& h : seq.history) ex.history_labels.push_back(h.behavior);
    ex.target_labels = seq.target.behavior;
    ex.image_refs = representation_images(seq.history, r);
    ex.source_sequence_id = seq.sequence_id;
    return ex;
}

namespace detail {

// Unbiased draw from [0, bound) using only the raw engine output, so draws are
// identical across standard library implementations.
inline std::uint64_t bounded_draw(std::mt19937_64& rng, std::uint64_t bound) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x;
    do {
        x = rng();
    } while (x >= limit);
    return x % bound;
}

}  // namespace detail

// Uniform draw of n distinct examples without replacement from the pool minus
// the query. The result depends only on (pool ids, n, seed, exclude_id).
inline std::vector<IclExample> sample_icl(const std::vector<EvalSequence>& pool, std::size_t n,
                                          std::uint64_t seed, const std::string& exclude_id,
                                          Representation representation = Representation::Sequence) {
    std::vector<const EvalSequence*> candidates;
    candidates.reserve(pool.size());
    for (const auto& s : pool) {
        if (s.sequence_id != exclude_id) candidates.push_back(&s);
    }
    if (n > candidates.size()) {
        throw InsufficientPoolError("requested " + std::to_string(n) + " ICL examples but only " +
                                    std::to_string(candidates.size()) + " pool sequences remain");
    }
    std::sort(candidates.begin(), candidates.end(),
              [](const EvalSequence* a, const EvalSequence* b) { return a->sequence_id < b->sequence_id; });

    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        const auto j = i + static_cast<std::size_t>(detail::bounded_draw(rng, candidates.size() - i));
        std::swap(candidates[i], candidates[j]);
    }
    std::vector<IclExample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(make_icl_example(*candidates[i], representation));
    return out;
}

// JSON views used by the CLI `sample` output.

inline nlohmann::json to_json(const TimedFrame& f) {
    return {{"offset_s", f.offset_s},
            {"frame_index", f.frame_index},
            {"timestamp_s", f.timestamp_s},
            {"image", f.image_ref},
            {"labels", behavior_strings(f.behavior)}};
}

inline nlohmann::json to_json(const EvalSequence& s) {
    nlohmann::json j{{"sequence_id", s.sequence_id},
                     {"recording_id", s.recording_id},
                     {"scene_id", s.scene_id},
                     {"anchor_frame_index", s.anchor_frame_index},
                     {"history", nlohmann::json::array()},
                     {"target", to_json(s.target)}};
    for (const auto& h : s.history) j["history"].push_back(to_json(h));
    if (!s.intermediates.empty()) {
        j["intermediates"] = nlohmann::json::array();
        for (const auto& m : s.intermediates) j["intermediates"].push_back(to_json(m));
    }
    return j;
}

inline nlohmann::json to_json(const DatasetStats& s) {
    return {{"n_sequences", s.n_sequences},
            {"fraction_changed", s.fraction_changed},
            {"fraction_multilabel", s.fraction_multilabel}};
}

}  // namespace hbp
