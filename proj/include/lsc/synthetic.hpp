#pragma once

#include <cstdint>
#include <vector>

#include "lsc/data.hpp"

namespace lsc {

struct SyntheticSequenceData {
    std::vector<SequenceExample> train;
    std::vector<SequenceExample> eval;
};

// Binary sequence task whose label is fully determined by the final word:
// sentences end in a cue word drawn from one of two disjoint cue sets. A
// causal model with last-token pooling sees the cue directly; bidirectional
// models must route it through attention.
SyntheticSequenceData make_last_token_sequence_task(std::size_t n_train, std::size_t n_eval,
                                                    std::uint64_t seed);

struct SyntheticTokenData {
    std::vector<TokenExample> train;
    std::vector<TokenExample> eval;
};

// Token task where the tag of position i is determined by the identity of
// token i+1 (B-ENT when the next word belongs to the marked half of the
// content vocabulary, otherwise O; the final token is always O). Under a
// causal mask the tag is information-theoretically unpredictable beyond the
// majority class; without the mask it is a deterministic function of the
// visible next token.
SyntheticTokenData make_next_token_ner_task(std::size_t n_train, std::size_t n_eval, std::uint64_t seed);

}  // namespace lsc
