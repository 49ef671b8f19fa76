// SPDX-License-Identifier: Apache-2.0
#pragma once

// Shared test fixtures: synthetic recordings, a scripted HTTP transport, a
// virtual clock and scratch directories.

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "hbp/hbp.hpp"

namespace hbp::fixture {

// 17 verbs x 42 interactions, shaped like the PROX-S label space.
inline const std::vector<std::string>& verbs() {
    static const std::vector<std::string> v{"sit on", "stand on", "touch", "lie on", "walk on", "lean on",
                                            "push", "pull", "grab", "hold", "open", "close", "step on",
                                            "kick", "reach", "turn", "put down"};
    return v;
}

inline const std::vector<std::string>& interactions() {
    static const std::vector<std::string> labels = [] {
        const std::vector<std::string> nouns{"sofa", "chair", "bed", "table", "floor", "wall", "door",
                                             "cabinet", "shelf", "desk", "stool", "monitor", "lamp", "box"};
        std::vector<std::string> out;
        for (std::size_t i = 0; out.size() < 42; ++i) {
            out.push_back(verbs()[i % verbs().size()] + "-" + nouns[(i * 5 + i / verbs().size()) % nouns.size()]);
            // Keep labels unique.
            std::sort(out.begin(), out.end());
            out.erase(std::unique(out.begin(), out.end()), out.end());
        }
        return out;
    }();
    return labels;
}

inline Behavior random_behavior(std::mt19937_64& rng, std::size_t max_labels = 3) {
    std::uniform_int_distribution<std::size_t> count(0, max_labels);
    std::uniform_int_distribution<std::size_t> pick(0, interactions().size() - 1);
    Behavior b;
    const auto n = count(rng);
    while (b.size() < n) b.insert(normalize_label(interactions()[pick(rng)]));
    return b;
}

// Recording of `frames` consecutive frames at `fps`; labels change per
// whole second with a fixed RNG seed; image locators are synthetic paths.
inline Recording synthetic_recording(const std::string& id, std::int64_t frames, int fps = 30,
                                     std::uint64_t seed = 1) {
    std::mt19937_64 rng(seed);
    Recording rec;
    rec.recording_id = id;
    rec.scene_id = "scene_" + id;
    rec.fps = fps;
    Behavior current = random_behavior(rng);
    for (std::int64_t i = 0; i < frames; ++i) {
        if (i % fps == 0 && i > 0 && rng() % 2 == 0) current = random_behavior(rng);
        FrameRecord f;
        f.frame_index = i;
        f.timestamp_s = static_cast<double>(i) / fps;
        f.image_ref = "/frames/" + id + "/" + std::to_string(i) + ".jpg";
        f.behavior = current;
        rec.frames.push_back(std::move(f));
    }
    return rec;
}

inline nlohmann::json recording_json(const Recording& rec) {
    nlohmann::json frames = nlohmann::json::array();
    for (const auto& f : rec.frames) {
        frames.push_back({{"frame_index", f.frame_index}, {"image", f.image_ref},
                          {"labels", behavior_strings(f.behavior)}});
    }
    return {{"recording_id", rec.recording_id}, {"scene_id", rec.scene_id}, {"fps", rec.fps}, {"frames", frames}};
}

// Hand-built evaluation sequence with three history frames, two
// intermediates and a target.
inline EvalSequence make_sequence(const std::string& id, std::vector<Behavior> history,
                                  std::vector<Behavior> intermediates, Behavior target) {
    EvalSequence s;
    s.sequence_id = id;
    s.recording_id = "rec";
    s.anchor_frame_index = 60;
    int offset = -static_cast<int>(history.size()) + 1;
    for (auto& b : history) {
        s.history.push_back(TimedFrame{offset, 60 + offset * 30, (60.0 + offset * 30) / 30.0,
                                       "/img/" + id + "_" + std::to_string(offset) + ".png", std::move(b)});
        ++offset;
    }
    offset = 1;
    for (auto& b : intermediates) {
        s.intermediates.push_back(TimedFrame{offset, 60 + offset * 30, (60.0 + offset * 30) / 30.0,
                                             "/img/" + id + "_+" + std::to_string(offset) + ".png", std::move(b)});
        ++offset;
    }
    s.target = TimedFrame{3, 150, 5.0, "/img/" + id + "_+3.png", std::move(target)};
    return s;
}

class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("hbp_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << text;
}

inline std::string read_text(const std::filesystem::path& p) { return codec::read_file_bytes(p); }

// Replays canned responses and records every request that reached it.
class ScriptedTransport final : public Transport {
public:
    void push(int status, std::string body = {}) {
        std::lock_guard lock(mu_);
        script_.push_back(HttpResponse{status, std::move(body), status == 0 ? "connection refused" : "", {}});
    }

    HttpResponse post(const HttpRequest& request) override {
        std::lock_guard lock(mu_);
        requests_.push_back(request);
        if (script_.empty()) return HttpResponse{500, "script exhausted", {}, {}};
        auto r = script_.front();
        script_.pop_front();
        return r;
    }

    std::vector<HttpRequest> requests() const {
        std::lock_guard lock(mu_);
        return requests_;
    }

private:
    mutable std::mutex mu_;
    std::deque<HttpResponse> script_;
    std::vector<HttpRequest> requests_;
};

inline std::string chat_response(const std::string& text) {
    return nlohmann::json{{"choices", {{{"message", {{"role", "assistant"}, {"content", text}}},
                                        {"finish_reason", "stop"}}}},
                          {"usage", {{"prompt_tokens", 120}, {"completion_tokens", 9}}}}
        .dump();
}

// Virtual clock: sleeping advances time instantly and is recorded.
struct VirtualClock {
    std::mutex mu;
    Timing::Clock::time_point now{};
    std::vector<Timing::Clock::duration> sleeps;

    std::shared_ptr<Timing> timing() {
        auto t = std::make_shared<Timing>();
        t->now = [this] {
            std::lock_guard lock(mu);
            return now;
        };
        t->sleep = [this](Timing::Clock::duration d) {
            std::lock_guard lock(mu);
            sleeps.push_back(d);
            now += d;
        };
        return t;
    }

    void advance(Timing::Clock::duration d) {
        std::lock_guard lock(mu);
        now += d;
    }
};

inline ModelEndpoint mock_endpoint(const std::string& name, const std::string& mode, int image_limit = 50) {
    ModelEndpoint e;
    e.name = name;
    e.provider = "mock";
    e.model_id = "mock-" + mode;
    e.mock_mode = mode;
    e.max_images_per_request = image_limit;
    return e;
}

inline ModelEndpoint remote_endpoint(const std::string& base_url = "http://127.0.0.1:1/v1") {
    ModelEndpoint e;
    e.name = "remote";
    e.base_url = base_url;
    e.model_id = "test-model";
    e.max_retries = 3;
    e.requests_per_minute = 0;  // unlimited
    e.timeout_s = 5;
    return e;
}

inline std::string fixed_timestamp() { return "2024-01-01T00:00:00Z"; }

}  // namespace hbp::fixture
