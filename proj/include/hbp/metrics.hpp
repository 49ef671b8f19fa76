// SPDX-License-Identifier: Apache-2.0
#pragma once

// Label-set overlap accuracy, normalized Levenshtein distance and embedding
// cosine similarity between a predicted and a ground-truth behavior.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hbp/behavior.hpp"
#include "hbp/dataset.hpp"
#include "hbp/parser.hpp"

namespace hbp {

// 2|P ∩ G| / (|P| + |G|). Both empty counts as full agreement.
inline double accuracy_score(const Behavior& predicted, const Behavior& truth) {
    if (predicted.empty() && truth.empty()) return 1.0;
    std::size_t common = 0;
    auto p = predicted.begin();
    auto g = truth.begin();
    while (p != predicted.end() && g != truth.end()) {
        if (*p < *g) {
            ++p;
        } else if (*g < *p) {
            ++g;
        } else {
            ++common;
            ++p;
            ++g;
        }
    }
    return 2.0 * static_cast<double>(common) / static_cast<double>(predicted.size() + truth.size());
}

// Unit-cost Levenshtein distance over bytes.
inline std::size_t levenshtein(std::string_view a, std::string_view b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

// Levenshtein distance divided by the longer length, in [0, 1].
inline double edit_distance(std::string_view predicted, std::string_view truth) {
    const std::size_t longest = std::max(predicted.size(), truth.size());
    if (longest == 0) return 0.0;
    return static_cast<double>(levenshtein(predicted, truth)) / static_cast<double>(longest);
}

// Sparse real vector: sorted (index, value) entries over a fixed dimension.
// Dense remote embeddings use every index; trigram counts use few of 2^24.
class EmbeddingVector {
public:
    EmbeddingVector() = default;

    static EmbeddingVector dense(const std::vector<double>& values) {
        EmbeddingVector v;
        v.dimension_ = values.size();
        v.entries_.reserve(values.size());
        for (std::size_t i = 0; i < values.size(); ++i) {
            if (!std::isfinite(values[i])) throw std::invalid_argument("embedding has a non-finite entry");
            if (values[i] != 0.0) v.entries_.emplace_back(static_cast<std::uint32_t>(i), values[i]);
        }
        return v;
    }

    static EmbeddingVector sparse(std::size_t dimension, std::map<std::uint32_t, double> values) {
        EmbeddingVector v;
        v.dimension_ = dimension;
        for (const auto& [k, x] : values) {
            if (k >= dimension) throw std::invalid_argument("embedding index out of range");
            if (!std::isfinite(x)) throw std::invalid_argument("embedding has a non-finite entry");
            if (x != 0.0) v.entries_.emplace_back(k, x);
        }
        return v;
    }

    std::size_t dimension() const noexcept { return dimension_; }
    const std::vector<std::pair<std::uint32_t, double>>& entries() const noexcept { return entries_; }

    EmbeddingVector scaled(double factor) const {
        EmbeddingVector v = *this;
        for (auto& e : v.entries_) e.second *= factor;
        return v;
    }

    double dot(const EmbeddingVector& other) const {
        double sum = 0.0;
        auto a = entries_.begin();
        auto b = other.entries_.begin();
        while (a != entries_.end() && b != other.entries_.end()) {
            if (a->first < b->first) {
                ++a;
            } else if (b->first < a->first) {
                ++b;
            } else {
                sum += a->second * b->second;
                ++a;
                ++b;
            }
        }
        return sum;
    }

    double norm() const { return std::sqrt(dot(*this)); }

private:
    std::size_t dimension_ = 0;
    std::vector<std::pair<std::uint32_t, double>> entries_;
};

// A zero-norm operand yields 0.0.
inline double cosine_similarity(const EmbeddingVector& a, const EmbeddingVector& b) {
    if (a.dimension() != b.dimension()) throw std::invalid_argument("embedding dimensions differ");
    const double na2 = a.dot(a), nb2 = b.dot(b);
    if (na2 == 0.0 || nb2 == 0.0) return 0.0;
    // One square root of the product keeps identical vectors at exactly 1.
    return std::clamp(a.dot(b) / std::sqrt(na2 * nb2), -1.0, 1.0);
}

class Embedder {
public:
    virtual ~Embedder() = default;
    virtual EmbeddingVector embed(const std::string& text) = 0;
    // Recorded in results so cosine values can be attributed to a model.
    virtual std::string id() const = 0;
};

// Character-trigram counts over the UTF-8 bytes of the text padded with two
// STX bytes in front and two ETX bytes behind, so every string (including the
// empty one) has at least one trigram. Dimension 2^24, one slot per trigram.
class TrigramEmbedder final : public Embedder {
public:
    static constexpr std::size_t kDimension = std::size_t{1} << 24;

    EmbeddingVector embed(const std::string& text) override {
        const std::string padded = std::string("\x02\x02") + text + "\x03\x03";
        std::map<std::uint32_t, double> counts;
        for (std::size_t i = 0; i + 2 < padded.size(); ++i) {
            const auto key = (static_cast<std::uint32_t>(static_cast<unsigned char>(padded[i])) << 16) |
                             (static_cast<std::uint32_t>(static_cast<unsigned char>(padded[i + 1])) << 8) |
                             static_cast<std::uint32_t>(static_cast<unsigned char>(padded[i + 2]));
            counts[key] += 1.0;
        }
        return EmbeddingVector::sparse(kDimension, std::move(counts));
    }

    std::string id() const override { return "trigram-v1"; }
};

inline double cosine_similarity(const std::string& predicted, const std::string& truth, Embedder& embedder) {
    return cosine_similarity(embedder.embed(predicted), embedder.embed(truth));
}

struct MetricReport {
    double accuracy = 0.0;
    double cosine = 0.0;
    double edit = 0.0;
};

// Failed parses already carry an empty final behavior, so they score as an
// empty prediction. String metrics run on the sorted canonical renderings.
inline MetricReport score_behavior(const Behavior& predicted, const Behavior& truth, Embedder& embedder) {
    const std::string p = render_behavior(predicted);
    const std::string g = render_behavior(truth);
    return MetricReport{accuracy_score(predicted, truth), cosine_similarity(p, g, embedder), edit_distance(p, g)};
}

inline MetricReport score_sequence(const ParsedPrediction& parsed, const EvalSequence& seq, Embedder& embedder) {
    return score_behavior(parsed.final, seq.target.behavior, embedder);
}

}  // namespace hbp
