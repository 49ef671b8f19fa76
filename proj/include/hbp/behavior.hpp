// SPDX-License-Identifier: Apache-2.0
#pragma once

// Interaction labels ("verb-noun" pairs) and behaviors (sets of labels active
// in one frame), plus their single canonical text form.

#include <algorithm>
#include <cctype>
#include <compare>
#include <initializer_list>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "hbp/error.hpp"

namespace hbp {

class InteractionLabel {
public:
    // Validates an already-normalized pair. Use normalize_label() for raw text.
    InteractionLabel(std::string verb, std::string noun)
        : verb_(std::move(verb)), noun_(std::move(noun)) {
        if (verb_.empty() || noun_.empty()) {
            throw MalformedLabelError("interaction label needs a nonempty verb and noun");
        }
    }

    const std::string& verb() const noexcept { return verb_; }
    const std::string& noun() const noexcept { return noun_; }

    std::string str() const { return verb_ + "-" + noun_; }

    // Ordering follows the canonical string so that Behavior iteration order is
    // the lexicographic order of rendered labels.
    friend std::strong_ordering operator<=>(const InteractionLabel& a, const InteractionLabel& b) {
        const std::string sa = a.str(), sb = b.str();
        const int c = sa.compare(sb);
        return c < 0 ? std::strong_ordering::less
                     : (c > 0 ? std::strong_ordering::greater : std::strong_ordering::equal);
    }
    friend bool operator==(const InteractionLabel& a, const InteractionLabel& b) {
        return a.verb_ == b.verb_ && a.noun_ == b.noun_;
    }

private:
    std::string verb_;
    std::string noun_;
};

using Behavior = std::set<InteractionLabel>;

namespace detail {

inline bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

inline std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && is_space(s[b])) ++b;
    while (e > b && is_space(s[e - 1])) --e;
    return std::string(s.substr(b, e - b));
}

// Lowercase, collapse whitespace runs to one space, trim.
inline std::string collapse_lower(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    bool pending_space = false;
    for (char c : s) {
        if (is_space(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out.push_back(' ');
        pending_space = false;
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    return out;
}

}  // namespace detail

// Parses free text such as " Sit On-Sofa " or "\"touch-table\"". The split
// happens at the last hyphen so multi-word verbs survive.
inline InteractionLabel normalize_label(std::string_view raw) {
    std::string cleaned;
    cleaned.reserve(raw.size());
    for (char c : raw) {
        if (c == '"' || c == '\'' || c == '[' || c == ']' || c == '\\' || c == '`') continue;
        cleaned.push_back(c);
    }
    cleaned = detail::collapse_lower(cleaned);
    if (cleaned.empty()) throw MalformedLabelError("empty interaction label");
    const auto pos = cleaned.rfind('-');
    if (pos == std::string::npos) {
        throw MalformedLabelError("interaction label without hyphen: '" + cleaned + "'");
    }
    std::string verb = detail::trim(std::string_view(cleaned).substr(0, pos));
    std::string noun = detail::trim(std::string_view(cleaned).substr(pos + 1));
    if (verb.empty() || noun.empty()) {
        throw MalformedLabelError("interaction label missing verb or noun: '" + cleaned + "'");
    }
    return InteractionLabel(std::move(verb), std::move(noun));
}

inline Behavior make_behavior(std::initializer_list<std::string_view> raw_labels) {
    Behavior b;
    for (auto r : raw_labels) b.insert(normalize_label(r));
    return b;
}

// ["a-b", "c-d"] with labels in lexicographic order; the empty set is "[]".
inline std::string render_behavior(const Behavior& b) {
    std::string out = "[";
    bool first = true;
    for (const auto& label : b) {
        if (!first) out += ", ";
        first = false;
        out += '"';
        out += label.str();
        out += '"';
    }
    out += ']';
    return out;
}

inline std::vector<std::string> behavior_strings(const Behavior& b) {
    std::vector<std::string> out;
    out.reserve(b.size());
    for (const auto& label : b) out.push_back(label.str());
    return out;
}

}  // namespace hbp
