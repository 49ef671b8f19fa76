// SPDX-License-Identifier: Apache-2.0
#pragma once

// Tolerant extraction of interaction-label predictions from free-form model
// output. Parsing never throws: unusable text yields parse_status == failed
// and an empty final behavior.

#include <array>
#include <optional>
#include <cctype>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hbp/behavior.hpp"

namespace hbp {

enum class ParseStatus { Ok, Recovered, Failed };

inline std::string_view to_string(ParseStatus s) {
    switch (s) {
        case ParseStatus::Ok: return "ok";
        case ParseStatus::Recovered: return "recovered";
        case ParseStatus::Failed: return "failed";
    }
    return "failed";
}

inline ParseStatus parse_status_from(std::string_view s) {
    if (s == "ok") return ParseStatus::Ok;
    if (s == "recovered") return ParseStatus::Recovered;
    return ParseStatus::Failed;
}

struct ParsedPrediction {
    Behavior final;
    std::optional<std::pair<Behavior, Behavior>> intermediates;  // +1 s, +2 s
    ParseStatus parse_status = ParseStatus::Failed;
    std::string failure;  // set when parse_status == Failed
};

namespace detail {

struct ListMatch {
    std::size_t begin = 0;  // position of '['
    std::size_t end = 0;    // one past ']'
    Behavior labels;
    bool clean = true;  // every item was a quoted, well-formed label
};

// Parses the inside of one bracketed list. Returns nullopt when the list holds
// text but no usable label.
inline std::optional<ListMatch> parse_list_body(std::string_view body) {
    ListMatch m;
    std::string b(body);
    std::string unescaped;
    unescaped.reserve(b.size());
    for (char c : b) {
        if (c != '\\') unescaped.push_back(c);
    }
    if (trim(unescaped).empty()) return m;

    std::vector<std::string> items;
    for (std::size_t i = 0; i < unescaped.size(); ++i) {
        const char q = unescaped[i];
        if (q != '"' && q != '\'') continue;
        const auto close = unescaped.find(q, i + 1);
        if (close == std::string::npos) break;
        items.push_back(unescaped.substr(i + 1, close - i - 1));
        i = close;
    }
    if (items.empty()) {
        m.clean = false;
        std::size_t start = 0;
        while (start <= unescaped.size()) {
            const auto comma = unescaped.find(',', start);
            items.push_back(unescaped.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
    }
    std::size_t good = 0;
    for (const auto& item : items) {
        if (trim(item).empty()) continue;
        try {
            m.labels.insert(normalize_label(item));
            ++good;
        } catch (const MalformedLabelError&) {
            m.clean = false;
        }
    }
    if (good == 0) return std::nullopt;
    return m;
}

// Innermost bracketed lists in order of appearance, skipping ones that hold
// nothing usable.
inline std::vector<ListMatch> find_lists(std::string_view text) {
    std::vector<ListMatch> out;
    std::size_t open = std::string_view::npos;
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (text[i] == '[') {
            open = i;
        } else if (text[i] == ']' && open != std::string_view::npos) {
            if (auto m = parse_list_body(text.substr(open + 1, i - open - 1))) {
                m->begin = open;
                m->end = i + 1;
                out.push_back(std::move(*m));
            }
            open = std::string_view::npos;
        }
    }
    return out;
}

// Which step marker (1..9 seconds) labels the text right before a list, e.g.
// "1s:", "t = +2 s", "3 sec:". Negative offsets are ignored. Returns 0 when
// none is found; the last marker wins.
inline int step_marker(std::string_view preamble) {
    auto lower = [](char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); };
    auto alnum = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
    int found = 0;
    for (std::size_t i = 0; i < preamble.size(); ++i) {
        const char d = preamble[i];
        if (d < '1' || d > '9') continue;
        std::size_t before = i;
        if (before > 0 && preamble[before - 1] == '+') --before;
        if (before > 0) {
            const char p = preamble[before - 1];
            if (std::isdigit(static_cast<unsigned char>(p)) || p == '.' || p == '-' || std::isalpha(static_cast<unsigned char>(p))) {
                continue;
            }
        }
        std::size_t j = i + 1;
        while (j < preamble.size() && is_space(preamble[j])) ++j;
        std::size_t k = j;
        while (k < preamble.size() && std::isalpha(static_cast<unsigned char>(preamble[k]))) ++k;
        std::string unit;
        for (std::size_t u = j; u < k; ++u) unit.push_back(lower(preamble[u]));
        if (unit == "s" || unit == "sec" || unit == "secs" || unit == "second" || unit == "seconds") {
            if (k == preamble.size() || !alnum(preamble[k])) found = d - '0';
        }
    }
    return found;
}

}  // namespace detail

inline ParsedPrediction parse_prediction(std::string_view raw_text, bool autoregressive, int horizon_s = 3) {
    ParsedPrediction out;
    const auto lists = detail::find_lists(raw_text);
    if (lists.empty()) {
        out.failure = "no bracketed label list in response";
        return out;
    }

    if (!autoregressive) {
        out.final = lists.back().labels;
        out.parse_status = lists.back().clean ? ParseStatus::Ok : ParseStatus::Recovered;
        return out;
    }

    // Autoregressive: prefer explicit step markers, otherwise take the last
    // three lists positionally.
    std::vector<const detail::ListMatch*> by_step(static_cast<std::size_t>(horizon_s) + 1, nullptr);
    std::size_t prev_end = 0;
    for (const auto& m : lists) {
        const int step = detail::step_marker(raw_text.substr(prev_end, m.begin - prev_end));
        if (step >= 1 && step <= horizon_s) by_step[static_cast<std::size_t>(step)] = &m;
        prev_end = m.end;
    }
    const bool marked = horizon_s >= 3 && by_step[1] && by_step[2] && by_step[static_cast<std::size_t>(horizon_s)];
    bool clean = true;
    if (marked) {
        out.intermediates.emplace(by_step[1]->labels, by_step[2]->labels);
        out.final = by_step[static_cast<std::size_t>(horizon_s)]->labels;
        clean = by_step[1]->clean && by_step[2]->clean && by_step[static_cast<std::size_t>(horizon_s)]->clean;
    } else if (lists.size() >= 3) {
        const auto n = lists.size();
        out.intermediates.emplace(lists[n - 3].labels, lists[n - 2].labels);
        out.final = lists[n - 1].labels;
        clean = n == 3 && lists[0].clean && lists[1].clean && lists[2].clean;
    } else {
        out.final = lists.back().labels;
        clean = false;
    }
    out.parse_status = clean ? ParseStatus::Ok : ParseStatus::Recovered;
    return out;
}

}  // namespace hbp
