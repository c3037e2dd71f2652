#include "lsc/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "lsc/error.hpp"

namespace lsc {

namespace {

const char* kReservedNames[Vocabulary::kReserved] = {"<pad>", "<unk>", "<bos>"};

bool is_space_char(unsigned char c) { return std::isspace(c) != 0; }
bool is_punct_char(unsigned char c) { return c < 128 && std::ispunct(c) != 0; }

std::string lowercased(const std::string& s) {
    std::string out = s;
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

}  // namespace

Vocabulary::Vocabulary() {
    for (const char* name : kReservedNames) {
        token_to_id_.emplace(name, static_cast<std::int32_t>(id_to_token_.size()));
        id_to_token_.emplace_back(name);
    }
}

std::int32_t Vocabulary::add(const std::string& token) {
    auto it = token_to_id_.find(token);
    if (it != token_to_id_.end()) return it->second;
    const auto id = static_cast<std::int32_t>(id_to_token_.size());
    token_to_id_.emplace(token, id);
    id_to_token_.push_back(token);
    return id;
}

std::int32_t Vocabulary::lookup(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
        throw ContractError("vocabulary: id " + std::to_string(id) + " outside [0," +
                            std::to_string(id_to_token_.size()) + ")");
    }
    return id_to_token_[static_cast<std::size_t>(id)];
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("vocabulary: cannot write " + path);
    for (std::size_t i = kReserved; i < id_to_token_.size(); ++i) out << id_to_token_[i] << "\n";
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("vocabulary: cannot read " + path);
    Vocabulary v;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) v.add(line);
    }
    return v;
}

std::vector<std::string> Vocabulary::non_reserved_tokens() const {
    return {id_to_token_.begin() + kReserved, id_to_token_.end()};
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens) {
    Vocabulary v;
    for (const auto& t : tokens) v.add(t);
    return v;
}

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::string current;
    for (unsigned char c : text) {
        if (is_space_char(c)) {
            if (!current.empty()) {
                words.push_back(std::move(current));
                current.clear();
            }
        } else if (is_punct_char(c)) {
            if (!current.empty()) {
                words.push_back(std::move(current));
                current.clear();
            }
            words.emplace_back(1, static_cast<char>(c));
        } else {
            current += static_cast<char>(std::tolower(c));
        }
    }
    if (!current.empty()) words.push_back(std::move(current));
    return words;
}

std::vector<std::int32_t> tokenize(const std::string& text, const Vocabulary& vocab) {
    std::vector<std::int32_t> ids;
    ids.push_back(Vocabulary::kBos);
    for (const std::string& w : split_words(text)) ids.push_back(vocab.lookup(w));
    return ids;
}

std::string detokenize(const std::vector<std::int32_t>& ids, const Vocabulary& vocab) {
    std::string out;
    for (std::int32_t id : ids) {
        if (id == Vocabulary::kBos || id == Vocabulary::kPad) continue;
        if (!out.empty()) out += ' ';
        out += vocab.token(id);
    }
    return out;
}

namespace {

Vocabulary vocabulary_from_counts(const std::map<std::string, std::size_t>& counts, std::size_t max_size) {
    if (max_size <= Vocabulary::kReserved) {
        throw ConfigError("vocabulary: max_size " + std::to_string(max_size) + " leaves no room for tokens");
    }
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Vocabulary v;
    for (const auto& [token, count] : ranked) {
        if (v.size() >= max_size) break;
        v.add(token);
    }
    return v;
}

}  // namespace

Vocabulary build_vocabulary(const std::vector<SequenceExample>& examples, std::size_t max_size) {
    std::map<std::string, std::size_t> counts;
    for (const auto& ex : examples) {
        for (const auto& w : split_words(ex.text)) ++counts[w];
    }
    return vocabulary_from_counts(counts, max_size);
}

Vocabulary build_vocabulary(const std::vector<TokenExample>& examples, std::size_t max_size) {
    std::map<std::string, std::size_t> counts;
    for (const auto& ex : examples) {
        for (const auto& t : ex.tokens) ++counts[lowercased(t)];
    }
    return vocabulary_from_counts(counts, max_size);
}

std::size_t repair_bio(std::vector<std::string>& tags) {
    std::size_t repairs = 0;
    std::string open_type;  // entity type continuing from the previous tag
    for (std::string& tag : tags) {
        if (tag.size() >= 2 && tag[1] == '-' && (tag[0] == 'B' || tag[0] == 'I')) {
            const std::string type = tag.substr(2);
            if (tag[0] == 'I' && open_type != type) {
                tag[0] = 'B';
                ++repairs;
            }
            open_type = type;
        } else {
            open_type.clear();
        }
    }
    return repairs;
}

ConllData read_conll(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("conll: cannot read " + path);
    ConllData out;
    TokenExample current;
    std::string line;
    std::size_t line_no = 0;
    auto flush = [&] {
        if (current.tokens.empty()) return;
        out.repair_count += repair_bio(current.tags);
        out.sentences.push_back(std::move(current));
        current = TokenExample{};
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) {
            flush();
            continue;
        }
        if (line.rfind("-DOCSTART-", 0) == 0) continue;
        const std::size_t sep = line.find_first_of(" \t");
        if (sep == std::string::npos || sep == 0 || sep + 1 >= line.size() ||
            line.find_first_of(" \t", sep + 1) != std::string::npos) {
            throw DataError("conll: parse error at " + path + ":" + std::to_string(line_no) +
                            ": expected exactly 2 fields, got \"" + line + "\"");
        }
        current.tokens.push_back(line.substr(0, sep));
        current.tags.push_back(line.substr(sep + 1));
    }
    flush();
    return out;
}

void write_conll(const std::string& path, const std::vector<TokenExample>& sentences) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("conll: cannot write " + path);
    for (const auto& s : sentences) {
        for (std::size_t i = 0; i < s.tokens.size(); ++i) out << s.tokens[i] << ' ' << s.tags[i] << "\n";
        out << "\n";
    }
}

char parse_table_format(const std::string& format) {
    if (format == "csv") return ',';
    if (format == "tsv") return '\t';
    throw ConfigError("unknown table format \"" + format + "\" (expected csv|tsv)");
}

namespace {

// Reads one RFC-4180 record (quoted fields may span lines). Returns false on
// end of input with no data.
bool read_record(std::istream& in, char delim, std::vector<std::string>& fields) {
    fields.clear();
    std::string field;
    bool in_quotes = false;
    bool any = false;
    int ch;
    while ((ch = in.get()) != std::char_traits<char>::eof()) {
        any = true;
        const char c = static_cast<char>(ch);
        if (in_quotes) {
            if (c == '"') {
                if (in.peek() == '"') {
                    field += '"';
                    in.get();
                } else {
                    in_quotes = false;
                }
            } else {
                field += c;
            }
        } else if (c == '"') {
            in_quotes = true;
        } else if (c == delim) {
            fields.push_back(std::move(field));
            field.clear();
        } else if (c == '\n') {
            if (!field.empty() || !fields.empty()) fields.push_back(std::move(field));
            return true;
        } else if (c == '\r') {
            // swallow; \r\n handled by the \n branch
        } else {
            field += c;
        }
    }
    if (!any) return false;
    if (!field.empty() || !fields.empty()) fields.push_back(std::move(field));
    return !fields.empty();
}

}  // namespace

ClassificationData read_classification(const std::string& path, char delimiter, const std::string& text_col,
                                       const std::string& label_col) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("classification: cannot read " + path);
    std::vector<std::string> header;
    if (!read_record(in, delimiter, header)) {
        throw DataError("classification: " + path + " is empty (header row required)");
    }
    auto column = [&](const std::string& name) -> std::size_t {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) {
            throw DataError("classification: schema error in " + path + ": column \"" + name +
                            "\" not found in header");
        }
        return static_cast<std::size_t>(it - header.begin());
    };
    const std::size_t text_idx = column(text_col);
    const std::size_t label_idx = column(label_col);

    ClassificationData out;
    std::vector<std::string> fields;
    std::size_t row = 1;
    while (read_record(in, delimiter, fields)) {
        ++row;
        if (fields.size() <= std::max(text_idx, label_idx)) {
            throw DataError("classification: parse error at " + path + " row " + std::to_string(row) +
                            ": expected at least " + std::to_string(std::max(text_idx, label_idx) + 1) +
                            " fields, got " + std::to_string(fields.size()));
        }
        if (fields[text_idx].empty()) {
            ++out.skipped;
            continue;
        }
        out.labels.add(fields[label_idx]);
        out.examples.push_back(SequenceExample{fields[text_idx], fields[label_idx]});
    }
    return out;
}

std::vector<std::string> read_text_column(const std::string& path, char delimiter,
                                          const std::string& text_col) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("classification: cannot read " + path);
    std::vector<std::string> header;
    if (!read_record(in, delimiter, header)) {
        throw DataError("classification: " + path + " is empty (header row required)");
    }
    auto it = std::find(header.begin(), header.end(), text_col);
    if (it == header.end()) {
        throw DataError("classification: schema error in " + path + ": column \"" + text_col +
                        "\" not found in header");
    }
    const auto text_idx = static_cast<std::size_t>(it - header.begin());
    std::vector<std::string> out;
    std::vector<std::string> fields;
    while (read_record(in, delimiter, fields)) {
        out.push_back(text_idx < fields.size() ? fields[text_idx] : std::string{});
    }
    return out;
}

LabelSpace collect_tag_space(const std::vector<TokenExample>& sentences) {
    LabelSpace labels;
    for (const auto& s : sentences) {
        for (const auto& t : s.tags) labels.add(t);
    }
    return labels;
}

LabeledBatch collate_sequence(std::span<const SequenceExample> examples, const Vocabulary& vocab,
                              const LabelSpace& labels, std::size_t max_len) {
    if (examples.empty()) throw ContractError("collate: empty batch");
    std::vector<std::vector<std::int32_t>> ids;
    ids.reserve(examples.size());
    std::size_t width = 0;
    for (const auto& ex : examples) {
        auto row = tokenize(ex.text, vocab);
        if (row.size() > max_len) row.resize(max_len);
        width = std::max(width, row.size());
        ids.push_back(std::move(row));
    }
    LabeledBatch batch;
    batch.tokens = IdMatrix(examples.size(), width, Vocabulary::kPad);
    batch.pad = BoolMatrix(examples.size(), width, false);
    batch.sequence_labels.reserve(examples.size());
    for (std::size_t r = 0; r < examples.size(); ++r) {
        for (std::size_t c = 0; c < ids[r].size(); ++c) {
            batch.tokens.at(r, c) = ids[r][c];
            batch.pad.set(r, c, true);
        }
        batch.sequence_labels.push_back(labels.index_of(examples[r].label));
    }
    return batch;
}

LabeledBatch collate_token(std::span<const TokenExample> examples, const Vocabulary& vocab,
                           const LabelSpace& labels, std::size_t max_len) {
    if (examples.empty()) throw ContractError("collate: empty batch");
    const int ignore = labels.ignore_index();
    std::vector<std::vector<std::int32_t>> ids;
    std::vector<std::vector<int>> tag_ids;
    ids.reserve(examples.size());
    tag_ids.reserve(examples.size());
    std::size_t width = 0;
    for (const auto& ex : examples) {
        if (ex.tokens.size() != ex.tags.size()) {
            throw ContractError("collate: token/tag length mismatch (" + std::to_string(ex.tokens.size()) +
                                " vs " + std::to_string(ex.tags.size()) + ")");
        }
        std::vector<std::int32_t> row{Vocabulary::kBos};
        std::vector<int> tags{ignore};  // bos carries no label
        for (std::size_t i = 0; i < ex.tokens.size() && row.size() < max_len; ++i) {
            row.push_back(vocab.lookup(lowercased(ex.tokens[i])));
            tags.push_back(labels.index_of(ex.tags[i]));
        }
        width = std::max(width, row.size());
        ids.push_back(std::move(row));
        tag_ids.push_back(std::move(tags));
    }
    LabeledBatch batch;
    batch.tokens = IdMatrix(examples.size(), width, Vocabulary::kPad);
    batch.pad = BoolMatrix(examples.size(), width, false);
    batch.token_labels.assign(examples.size() * width, ignore);
    for (std::size_t r = 0; r < examples.size(); ++r) {
        for (std::size_t c = 0; c < ids[r].size(); ++c) {
            batch.tokens.at(r, c) = ids[r][c];
            batch.pad.set(r, c, true);
            batch.token_labels[r * width + c] = tag_ids[r][c];
        }
    }
    return batch;
}

}  // namespace lsc
