#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lsc/heads.hpp"
#include "lsc/tensor.hpp"

namespace lsc {

// Word-level vocabulary with fixed reserved ids. Non-reserved entries form a
// bijection between tokens and ids; reserved ids are never remapped.
class Vocabulary {
public:
    static constexpr std::int32_t kPad = 0;
    static constexpr std::int32_t kUnk = 1;
    static constexpr std::int32_t kBos = 2;
    static constexpr std::size_t kReserved = 3;

    Vocabulary();

    // Appends the token if new; returns its id either way.
    std::int32_t add(const std::string& token);

    // Unknown tokens map to kUnk.
    std::int32_t lookup(const std::string& token) const;

    const std::string& token(std::int32_t id) const;
    std::size_t size() const { return id_to_token_.size(); }

    // One non-reserved token per line; line number = id - reserved offset.
    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);

    std::vector<std::string> non_reserved_tokens() const;
    static Vocabulary from_tokens(const std::vector<std::string>& tokens);

private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, std::int32_t> token_to_id_;
};

struct SequenceExample {
    std::string text;
    std::string label;
};

struct TokenExample {
    std::vector<std::string> tokens;
    std::vector<std::string> tags;  // BIO scheme, repaired on load
};

// Padded batch ready for the model. Exactly one of sequence_labels /
// token_labels is populated depending on the task.
struct LabeledBatch {
    IdMatrix tokens;
    BoolMatrix pad;                    // true = real token
    std::vector<int> sequence_labels;  // length b
    std::vector<int> token_labels;     // length b*s, ignore-index at pad/bos
};

// Lowercased whitespace-plus-punctuation split: alphanumeric runs become
// words, each punctuation character its own token.
std::vector<std::string> split_words(const std::string& text);

// Word split mapped through the vocabulary with unknown fallback; prepends
// the begin-of-sequence id.
std::vector<std::int32_t> tokenize(const std::string& text, const Vocabulary& vocab);

// Inverse mapping for inspection: skips bos/pad, renders unknowns as the
// unknown marker.
std::string detokenize(const std::vector<std::int32_t>& ids, const Vocabulary& vocab);

// Top-k-by-frequency vocabulary from a training split (ties broken
// lexicographically); max_size includes the reserved entries.
Vocabulary build_vocabulary(const std::vector<SequenceExample>& examples, std::size_t max_size);
Vocabulary build_vocabulary(const std::vector<TokenExample>& examples, std::size_t max_size);

// Repairs I-X tags with no valid antecedent to B-X in place; returns the
// number of repairs.
std::size_t repair_bio(std::vector<std::string>& tags);

struct ConllData {
    std::vector<TokenExample> sentences;
    std::size_t repair_count = 0;
};

// CoNLL column format: one "token tag" (space or tab) per line, blank line
// separates sentences, -DOCSTART- lines skipped.
ConllData read_conll(const std::string& path);
void write_conll(const std::string& path, const std::vector<TokenExample>& sentences);

struct ClassificationData {
    std::vector<SequenceExample> examples;
    LabelSpace labels;  // first-appearance order
    std::size_t skipped = 0;
};

char parse_table_format(const std::string& format);  // "csv" -> ',', "tsv" -> '\t'

// RFC-4180-style delimited file with a header row; rows with empty text are
// skipped and counted.
ClassificationData read_classification(const std::string& path, char delimiter, const std::string& text_col,
                                       const std::string& label_col);

// Just the text column, one entry per data row (for prediction inputs that
// carry no labels).
std::vector<std::string> read_text_column(const std::string& path, char delimiter,
                                          const std::string& text_col);

// Tag label space in first-appearance order.
LabelSpace collect_tag_space(const std::vector<TokenExample>& sentences);

LabeledBatch collate_sequence(std::span<const SequenceExample> examples, const Vocabulary& vocab,
                              const LabelSpace& labels, std::size_t max_len);

LabeledBatch collate_token(std::span<const TokenExample> examples, const Vocabulary& vocab,
                           const LabelSpace& labels, std::size_t max_len);

}  // namespace lsc
