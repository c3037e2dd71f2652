#include "lsc/metrics.hpp"

#include <algorithm>

#include "lsc/data.hpp"
#include "lsc/error.hpp"

namespace lsc {

std::vector<Span> extract_entity_spans(std::vector<std::string> tags) {
    repair_bio(tags);
    std::vector<Span> spans;
    bool open = false;
    Span current;
    auto close = [&](std::size_t end) {
        if (open) {
            current.end = end;
            spans.push_back(current);
            open = false;
        }
    };
    for (std::size_t i = 0; i < tags.size(); ++i) {
        const std::string& tag = tags[i];
        if (tag.size() >= 2 && tag[0] == 'B' && tag[1] == '-') {
            close(i - 1);
            current = Span{tag.substr(2), i, i};
            open = true;
        } else if (tag.size() >= 2 && tag[0] == 'I' && tag[1] == '-') {
            // after repair an I-tag always continues the open span
            current.end = i;
        } else {
            close(i - 1);
        }
    }
    close(tags.empty() ? 0 : tags.size() - 1);
    return spans;
}

NerScore ner_score(const std::vector<std::vector<std::string>>& gold_tags,
                   const std::vector<std::vector<std::string>>& predicted_tags) {
    if (gold_tags.size() != predicted_tags.size()) {
        throw ContractError("ner_score: " + std::to_string(gold_tags.size()) + " gold vs " +
                            std::to_string(predicted_tags.size()) + " predicted sentences");
    }
    NerScore s;
    for (std::size_t i = 0; i < gold_tags.size(); ++i) {
        std::vector<Span> gold = extract_entity_spans(gold_tags[i]);
        std::vector<Span> pred = extract_entity_spans(predicted_tags[i]);
        std::sort(gold.begin(), gold.end());
        std::sort(pred.begin(), pred.end());
        std::vector<Span> both;
        std::set_intersection(gold.begin(), gold.end(), pred.begin(), pred.end(), std::back_inserter(both));
        s.matched += both.size();
        s.gold += gold.size();
        s.predicted += pred.size();
    }
    s.precision = s.predicted == 0 ? 0.0 : static_cast<double>(s.matched) / static_cast<double>(s.predicted);
    s.recall = s.gold == 0 ? 0.0 : static_cast<double>(s.matched) / static_cast<double>(s.gold);
    s.f1 = (s.precision + s.recall) == 0.0 ? 0.0 : 2.0 * s.precision * s.recall / (s.precision + s.recall);
    return s;
}

double accuracy(const std::vector<int>& predicted, const std::vector<int>& gold) {
    if (predicted.size() != gold.size() || predicted.empty()) {
        throw ContractError("accuracy: need equal-length non-empty prediction and gold lists");
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        if (predicted[i] == gold[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(predicted.size());
}

}  // namespace lsc
