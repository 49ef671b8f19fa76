// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <string_view>

namespace hbp {

// How the scene is shown to the model: text-only label history, the latest
// frame, the three history frames, or the three frames plus a generated caption.
enum class Representation { Blind, Image, Sequence, Caption };

inline constexpr std::array<Representation, 4> kAllRepresentations{
    Representation::Blind, Representation::Image, Representation::Sequence, Representation::Caption};

constexpr int images_per_item(Representation r) {
    switch (r) {
        case Representation::Blind: return 0;
        case Representation::Image: return 1;
        case Representation::Sequence:
        case Representation::Caption: return 3;
    }
    return 0;
}

inline std::string_view to_string(Representation r) {
    switch (r) {
        case Representation::Blind: return "blind";
        case Representation::Image: return "image";
        case Representation::Sequence: return "sequence";
        case Representation::Caption: return "caption";
    }
    return "blind";
}

inline Representation parse_representation(std::string_view s) {
    for (auto r : kAllRepresentations) {
        if (to_string(r) == s) return r;
    }
    throw std::invalid_argument("unknown representation '" + std::string(s) + "'");
}

}  // namespace hbp
