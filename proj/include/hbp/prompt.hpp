// SPDX-License-Identifier: Apache-2.0
#pragma once

// Prompt assembly: task instruction, in-context examples and the query, laid
// out as an ordered list of text and image parts for one of the four visual
// context representations.

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "hbp/behavior.hpp"
#include "hbp/codec.hpp"
#include "hbp/dataset.hpp"
#include "hbp/error.hpp"
#include "hbp/representation.hpp"

namespace hbp {

struct MessagePart {
    enum class Kind { Text, Image };

    Kind kind = Kind::Text;
    std::string text;        // Kind::Text
    std::string image_ref;   // Kind::Image
    std::string media_type;  // Kind::Image

    static MessagePart make_text(std::string t) { return {Kind::Text, std::move(t), {}, {}}; }
    static MessagePart make_image(std::string ref);

    bool is_image() const noexcept { return kind == Kind::Image; }
    bool operator==(const MessagePart&) const = default;
};

inline std::string media_type_for(std::string_view ref) {
    if (ref.rfind("data:", 0) == 0) {
        const auto semi = ref.find_first_of(";,");
        return std::string(ref.substr(5, semi == std::string_view::npos ? 0 : semi - 5));
    }
    std::string ext = std::filesystem::path(std::string(ref)).extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png") return "image/png";
    if (ext == ".webp") return "image/webp";
    if (ext == ".gif") return "image/gif";
    if (ext == ".bmp") return "image/bmp";
    return "image/jpeg";
}

inline MessagePart MessagePart::make_image(std::string ref) {
    auto media = media_type_for(ref);
    return {Kind::Image, {}, std::move(ref), std::move(media)};
}

enum class PromptKind { Prediction, Caption };

struct PromptSpec {
    PromptKind kind = PromptKind::Prediction;
    std::string system_text;
    std::vector<MessagePart> parts;
    std::size_t n_icl = 0;
    Representation representation = Representation::Blind;
    bool autoregressive = false;
    int horizon_s = 3;
    std::size_t total_images = 0;
    std::optional<std::string> caption_text;
    std::string template_version;

    std::size_t image_parts() const {
        return static_cast<std::size_t>(
            std::count_if(parts.begin(), parts.end(), [](const MessagePart& p) { return p.is_image(); }));
    }

    // Concatenated text parts; handy for inspection and the mock provider.
    std::string joined_text() const {
        std::string out;
        for (const auto& p : parts) {
            if (!p.is_image()) out += p.text;
        }
        return out;
    }
};

inline nlohmann::json to_json(const PromptSpec& p) {
    nlohmann::json parts = nlohmann::json::array();
    for (const auto& part : p.parts) {
        if (part.is_image()) {
            parts.push_back({{"type", "image"}, {"ref", part.image_ref}, {"media_type", part.media_type}});
        } else {
            parts.push_back({{"type", "text"}, {"text", part.text}});
        }
    }
    nlohmann::json j{{"kind", p.kind == PromptKind::Caption ? "caption" : "prediction"},
                     {"system", p.system_text},
                     {"parts", std::move(parts)},
                     {"n_icl", p.n_icl},
                     {"representation", to_string(p.representation)},
                     {"autoregressive", p.autoregressive},
                     {"horizon_s", p.horizon_s},
                     {"total_images", p.total_images},
                     {"template_version", p.template_version}};
    if (p.caption_text) j["caption"] = *p.caption_text;
    return j;
}

// Byte-stable digest of the prompt content (image locators, not pixels).
inline std::string prompt_hash(const PromptSpec& p) { return codec::sha256_hex(to_json(p).dump()); }

// Sectioned plain-text template. A line "@@ name" opens a section; lines
// starting with '#' before the first section are comments. Placeholders are
// {name}; unknown placeholders are left verbatim.
//
//   system                  task instruction (system message)
//   example                 {index} {images} {history} {target}
//   query                   {examples} {images} {history} {caption} {horizon_instruction}
//   horizon_direct          {horizon_s}
//   horizon_autoregressive  {horizon_s} {steps}
//   caption                 {caption}
//   caption_system          system message of the caption request
//   caption_request         instruction placed after the caption images
class PromptTemplate {
public:
    static PromptTemplate parse(std::string_view text);
    static PromptTemplate load(const std::filesystem::path& path);
    static const PromptTemplate& builtin();

    const std::string& section(const std::string& name) const {
        auto it = sections_.find(name);
        if (it == sections_.end()) throw ConfigError("prompt template lacks section '" + name + "'");
        return it->second;
    }

    // Declared version plus a short content digest, so edits without a version
    // bump are still distinguishable in results.
    const std::string& version() const noexcept { return version_; }
    const std::string& content_hash() const noexcept { return hash_; }

private:
    std::map<std::string, std::string> sections_;
    std::string version_;
    std::string hash_;
};

inline constexpr std::string_view kDefaultTemplate = R"TPL(# Default prompt template for human behavior prediction.
@@ version
default-v1
@@ system
You are a human behavior prediction system observing a person in an indoor scene from a third-person view.
Interaction labels are "verb-noun" pairs such as "sit on-sofa" or "touch-table". A behavior is a list of all interaction labels active in one frame; it may hold several labels or be empty.
Given the interaction labels observed at t = -2 s, -1 s and 0 s (and visual context when provided), predict the interaction labels of the same person at t = +{horizon_s} s.
Answer only with interaction labels in the bracketed, comma-separated, double-quoted list format, e.g. ["sit on-sofa", "touch-table"]. Use [] when no interaction is expected. Do not explain.
@@ example
Example {index}:
{images}Observed labels:
{history}
Labels at t = +{horizon_s} s: {target}

@@ query
{examples}Query:
{images}{caption}Observed labels:
{history}
{horizon_instruction}
@@ horizon_direct
Predict the labels at t = +{horizon_s} s. Reply with a single bracketed list.
@@ horizon_autoregressive
Predict the labels step by step at each future second up to t = +{horizon_s} s. Reply with exactly one line per step, in this order and format:
{steps}
@@ caption
Scene description: {caption}

@@ caption_system
You describe indoor scenes showing a person interacting with the environment.
@@ caption_request
The images show the same scene at t = -2 s, -1 s and 0 s. Describe the person, the relevant objects and actions, and the possible affordable actions in the scene.
)TPL";

inline PromptTemplate PromptTemplate::parse(std::string_view text) {
    PromptTemplate t;
    std::istringstream in{std::string(text)};
    std::string line, current;
    bool in_section = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.rfind("@@", 0) == 0) {
            current = detail::trim(std::string_view(line).substr(2));
            if (current.empty()) throw ConfigError("prompt template has an unnamed section");
            t.sections_[current];
            in_section = true;
            continue;
        }
        if (!in_section) {
            if (detail::trim(line).empty() || line.front() == '#') continue;
            throw ConfigError("prompt template text outside of a section: '" + line + "'");
        }
        auto& body = t.sections_[current];
        if (!body.empty() || !line.empty()) body += line + "\n";
    }
    for (auto& [name, body] : t.sections_) {
        // A single trailing newline is the section terminator; blank lines
        // before it are content.
        if (!body.empty() && body.back() == '\n') body.pop_back();
    }
    for (const char* required : {"system", "example", "query", "horizon_direct", "horizon_autoregressive",
                                 "caption", "caption_system", "caption_request"}) {
        if (!t.sections_.count(required)) {
            throw ConfigError(std::string("prompt template lacks section '") + required + "'");
        }
    }
    t.hash_ = codec::sha256_hex(text).substr(0, 12);
    auto v = t.sections_.find("version");
    t.version_ = (v != t.sections_.end() ? detail::trim(v->second) : std::string("unversioned")) + "+" + t.hash_;
    return t;
}

inline PromptTemplate PromptTemplate::load(const std::filesystem::path& path) {
    return parse(codec::read_file_bytes(path));
}

inline const PromptTemplate& PromptTemplate::builtin() {
    static const PromptTemplate t = parse(kDefaultTemplate);
    return t;
}

namespace detail {

using Fragment = std::vector<MessagePart>;

inline void append_text(Fragment& out, std::string_view text) {
    if (text.empty()) return;
    if (!out.empty() && !out.back().is_image()) {
        out.back().text += text;
    } else {
        out.push_back(MessagePart::make_text(std::string(text)));
    }
}

inline void append(Fragment& out, const Fragment& frag) {
    for (const auto& p : frag) {
        if (p.is_image()) {
            out.push_back(p);
        } else {
            append_text(out, p.text);
        }
    }
}

// Substitutes {name} placeholders with fragments; adjacent text is merged so
// the output alternates between text runs and images.
inline Fragment expand(std::string_view tmpl, const std::map<std::string, Fragment>& vars) {
    Fragment out;
    std::size_t i = 0;
    while (i < tmpl.size()) {
        const auto open = tmpl.find('{', i);
        if (open == std::string_view::npos) {
            append_text(out, tmpl.substr(i));
            break;
        }
        const auto close = tmpl.find('}', open + 1);
        if (close == std::string_view::npos) {
            append_text(out, tmpl.substr(i));
            break;
        }
        auto it = vars.find(std::string(tmpl.substr(open + 1, close - open - 1)));
        if (it == vars.end()) {
            append_text(out, tmpl.substr(i, open + 1 - i));
            i = open + 1;
            continue;
        }
        append_text(out, tmpl.substr(i, open - i));
        append(out, it->second);
        i = close + 1;
    }
    return out;
}

inline std::string expand_text(std::string_view tmpl, const std::map<std::string, Fragment>& vars) {
    std::string out;
    for (const auto& p : expand(tmpl, vars)) out += p.text;
    return out;
}

inline Fragment text_fragment(std::string s) { return {MessagePart::make_text(std::move(s))}; }

inline std::string offset_label(int offset_s) {
    return (offset_s > 0 ? "+" : "") + std::to_string(offset_s) + " s";
}

inline std::string render_history(const std::vector<Behavior>& labels, const std::vector<int>& offsets) {
    std::string out;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (i) out += "\n";
        out += "t = " + offset_label(offsets[i]) + ": " + render_behavior(labels[i]);
    }
    return out;
}

inline Fragment image_fragment(const std::vector<std::string>& refs) {
    Fragment f;
    for (const auto& r : refs) f.push_back(MessagePart::make_image(r));
    return f;
}

inline void require_images(const std::vector<std::string>& refs, std::size_t want, const std::string& who) {
    if (refs.size() != want) {
        throw MissingImageError(who + " has " + std::to_string(refs.size()) + " image(s), " +
                                std::to_string(want) + " required");
    }
    for (const auto& r : refs) {
        if (r.empty()) throw MissingImageError(who + " has an empty image locator");
    }
}

}  // namespace detail

// Largest number of in-context examples whose images, together with the
// query's, fit under the per-request limit. std::nullopt means unbounded
// (text-only prompts).
inline std::optional<std::size_t> max_icl_examples(Representation r, int image_limit) {
    const int per_item = images_per_item(r);
    if (per_item == 0) return std::nullopt;
    if (image_limit < per_item) {
        throw std::invalid_argument("image limit " + std::to_string(image_limit) + " below " +
                                    std::to_string(per_item) + " images per item");
    }
    return static_cast<std::size_t>(image_limit / per_item - 1);
}

inline PromptSpec build_caption_request(const EvalSequence& seq,
                                        const PromptTemplate& tmpl = PromptTemplate::builtin()) {
    auto refs = representation_images(seq.history, Representation::Caption);
    detail::require_images(refs, 3, "sequence '" + seq.sequence_id + "'");
    PromptSpec p;
    p.kind = PromptKind::Caption;
    p.representation = Representation::Caption;
    p.horizon_s = seq.target.offset_s;
    p.template_version = tmpl.version();
    p.system_text = tmpl.section("caption_system");
    for (auto& r : refs) p.parts.push_back(MessagePart::make_image(std::move(r)));
    p.parts.push_back(MessagePart::make_text(tmpl.section("caption_request")));
    p.total_images = p.image_parts();
    return p;
}

inline PromptSpec build_prediction_prompt(const EvalSequence& seq, Representation representation,
                                          const std::vector<IclExample>& icl, bool autoregressive,
                                          const std::optional<std::string>& caption_text,
                                          const PromptTemplate& tmpl = PromptTemplate::builtin(),
                                          int image_limit = 50) {
    if (representation == Representation::Caption && !caption_text) {
        throw RepresentationMismatchError("caption representation requires caption text");
    }
    if (representation != Representation::Caption && caption_text) {
        throw RepresentationMismatchError("caption text given for representation '" +
                                          std::string(to_string(representation)) + "'");
    }
    const auto per_item = static_cast<std::size_t>(images_per_item(representation));
    if (static_cast<int>(per_item) > image_limit) {
        throw BudgetExceededError(std::string(to_string(representation)) + " needs " + std::to_string(per_item) +
                                  " images per item, limit is " + std::to_string(image_limit));
    }
    if (auto cap = max_icl_examples(representation, image_limit); cap && icl.size() > *cap) {
        throw BudgetExceededError(std::to_string(icl.size()) + " ICL examples exceed the budget of " +
                                  std::to_string(*cap) + " for " + std::string(to_string(representation)) +
                                  " at " + std::to_string(image_limit) + " images per request");
    }

    const int horizon = seq.target.offset_s;
    const auto horizon_frag = detail::text_fragment(std::to_string(horizon));
    std::vector<int> offsets;
    for (const auto& h : seq.history) offsets.push_back(h.offset_s);

    detail::Fragment examples;
    for (std::size_t i = 0; i < icl.size(); ++i) {
        const auto& ex = icl[i];
        if (ex.image_refs.size() != per_item) {
            throw RepresentationMismatchError("ICL example '" + ex.source_sequence_id + "' carries " +
                                              std::to_string(ex.image_refs.size()) + " image(s), " +
                                              std::string(to_string(representation)) + " needs " +
                                              std::to_string(per_item));
        }
        detail::require_images(ex.image_refs, per_item, "ICL example '" + ex.source_sequence_id + "'");
        std::vector<int> ex_offsets = offsets;
        if (ex_offsets.size() != ex.history_labels.size()) {
            ex_offsets.clear();
            for (std::size_t k = 0; k < ex.history_labels.size(); ++k) {
                ex_offsets.push_back(static_cast<int>(k) - static_cast<int>(ex.history_labels.size()) + 1);
            }
        }
        detail::append(examples,
                       detail::expand(tmpl.section("example"),
                                      {{"index", detail::text_fragment(std::to_string(i + 1))},
                                       {"images", detail::image_fragment(ex.image_refs)},
                                       {"history", detail::text_fragment(detail::render_history(
                                                       ex.history_labels, ex_offsets))},
                                       {"target", detail::text_fragment(render_behavior(ex.target_labels))},
                                       {"horizon_s", horizon_frag}}));
    }

    auto query_images = representation_images(seq.history, representation);
    detail::require_images(query_images, per_item, "sequence '" + seq.sequence_id + "'");

    std::vector<Behavior> history_labels;
    for (const auto& h : seq.history) history_labels.push_back(h.behavior);

    std::string horizon_instruction;
    if (autoregressive) {
        std::string steps;
        for (int s = 1; s <= horizon; ++s) {
            if (s > 1) steps += "\n";
            steps += std::to_string(s) + "s: [...]";
        }
        horizon_instruction = detail::expand_text(tmpl.section("horizon_autoregressive"),
                                                  {{"horizon_s", horizon_frag}, {"steps", detail::text_fragment(steps)}});
    } else {
        horizon_instruction = detail::expand_text(tmpl.section("horizon_direct"), {{"horizon_s", horizon_frag}});
    }

    detail::Fragment caption;
    if (caption_text) {
        caption = detail::expand(tmpl.section("caption"), {{"caption", detail::text_fragment(*caption_text)}});
    }

    PromptSpec p;
    p.kind = PromptKind::Prediction;
    p.representation = representation;
    p.autoregressive = autoregressive;
    p.n_icl = icl.size();
    p.horizon_s = horizon;
    p.caption_text = caption_text;
    p.template_version = tmpl.version();
    p.system_text = detail::expand_text(tmpl.section("system"), {{"horizon_s", horizon_frag}});
    p.parts = detail::expand(tmpl.section("query"),
                             {{"examples", examples},
                              {"images", detail::image_fragment(query_images)},
                              {"history", detail::text_fragment(detail::render_history(history_labels, offsets))},
                              {"caption", caption},
                              {"horizon_instruction", detail::text_fragment(horizon_instruction)},
                              {"horizon_s", horizon_frag}});
    p.total_images = p.image_parts();
    if (p.total_images != per_item * (icl.size() + 1)) {
        throw RepresentationMismatchError("template placed " + std::to_string(p.total_images) +
                                          " images, expected " + std::to_string(per_item * (icl.size() + 1)));
    }
    return p;
}

}  // namespace hbp
