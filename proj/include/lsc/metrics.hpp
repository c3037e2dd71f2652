#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace lsc {

// Inclusive entity span: (type, start, end) over token positions.
struct Span {
    std::string type;
    std::size_t start = 0;
    std::size_t end = 0;

    bool operator==(const Span&) const = default;
    bool operator<(const Span& o) const {
        if (start != o.start) return start < o.start;
        if (end != o.end) return end < o.end;
        return type < o.type;
    }
};

// Decodes BIO tags into entity spans. Invalid transitions are repaired first
// (I-X without antecedent becomes B-X), so the input need not be valid BIO.
std::vector<Span> extract_entity_spans(std::vector<std::string> tags);

struct NerScore {
    double precision = 0.0;  // zero-denominator convention: 0
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t matched = 0;
    std::size_t predicted = 0;
    std::size_t gold = 0;
};

// Micro precision/recall/F1 over exact (type, start, end) matches, summed
// across sentences.
NerScore ner_score(const std::vector<std::vector<std::string>>& gold_tags,
                   const std::vector<std::vector<std::string>>& predicted_tags);

// Fraction of predictions equal to gold.
double accuracy(const std::vector<int>& predicted, const std::vector<int>& gold);

}  // namespace lsc
