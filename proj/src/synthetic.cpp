#include "lsc/synthetic.hpp"

#include <string>

#include "lsc/rng.hpp"

namespace lsc {

namespace {

std::string word(const char* prefix, std::uint64_t i) { return prefix + std::to_string(i); }

constexpr std::size_t kContentWords = 32;
constexpr std::size_t kCueWords = 2;  // per class; few cue words keep the class signal coherent

}  // namespace

SyntheticSequenceData make_last_token_sequence_task(std::size_t n_train, std::size_t n_eval,
                                                    std::uint64_t seed) {
    Rng rng(seed);
    auto make = [&](std::size_t n) {
        std::vector<SequenceExample> out;
        out.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t len = 5 + rng.below(5);  // 5..9 content words
            std::string text;
            for (std::size_t t = 0; t < len; ++t) {
                text += word("w", rng.below(kContentWords));
                text += ' ';
            }
            const bool positive = rng.below(2) == 1;
            text += word(positive ? "ya" : "nb", rng.below(kCueWords));
            out.push_back(SequenceExample{text, positive ? "alpha" : "beta"});
        }
        return out;
    };
    SyntheticSequenceData data;
    data.train = make(n_train);
    data.eval = make(n_eval);
    return data;
}

SyntheticTokenData make_next_token_ner_task(std::size_t n_train, std::size_t n_eval, std::uint64_t seed) {
    Rng rng(seed);
    auto make = [&](std::size_t n) {
        std::vector<TokenExample> out;
        out.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t len = 8 + rng.below(5);  // 8..12 tokens
            TokenExample ex;
            ex.tokens.reserve(len);
            for (std::size_t t = 0; t < len; ++t) {
                ex.tokens.push_back(word("c", rng.below(kContentWords)));
            }
            ex.tags.resize(len);
            for (std::size_t t = 0; t < len; ++t) {
                if (t + 1 == len) {
                    ex.tags[t] = "O";
                } else {
                    // marked half: c0..c15
                    const std::uint64_t next = std::stoull(ex.tokens[t + 1].substr(1));
                    ex.tags[t] = next < kContentWords / 2 ? "B-ENT" : "O";
                }
            }
            out.push_back(std::move(ex));
        }
        return out;
    };
    SyntheticTokenData data;
    data.train = make(n_train);
    data.eval = make(n_eval);
    return data;
}

}  // namespace lsc
