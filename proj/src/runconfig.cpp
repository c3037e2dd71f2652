#include "lsc/runconfig.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

namespace lsc {

namespace {

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return "";
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

std::size_t parse_count(const std::string& key, const std::string& value) {
    try {
        const long long v = std::stoll(value);
        if (v < 0) throw std::out_of_range("negative");
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw ConfigError("config: " + key + " expects a non-negative integer, got \"" + value + "\"");
    }
}

double parse_real(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: " + key + " expects a number, got \"" + value + "\"");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "no") return false;
    throw ConfigError("config: " + key + " expects true|false, got \"" + value + "\"");
}

std::set<LoraTarget> parse_targets(const std::string& value) {
    std::set<LoraTarget> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.insert(parse_lora_target(item));
    }
    return out;
}

}  // namespace

void RunConfig::apply(const std::string& key, const std::string& value) {
    if (key == "task") {
        if (value != "sequence" && value != "token") {
            throw ConfigError("config: task expects sequence|token, got \"" + value + "\"");
        }
        task = value;
    } else if (key == "train_path") {
        train_path = value;
    } else if (key == "eval_path") {
        eval_path = value;
    } else if (key == "format") {
        parse_table_format(value);  // validates
        format = value;
    } else if (key == "text_col") {
        text_col = value;
    } else if (key == "label_col") {
        label_col = value;
    } else if (key == "out_dir") {
        out_dir = value;
    } else if (key == "max_len") {
        max_len = parse_count(key, value);
    } else if (key == "model.vocab_size") {
        model.vocab_size = parse_count(key, value);
    } else if (key == "model.d_model") {
        model.d_model = parse_count(key, value);
    } else if (key == "model.n_heads") {
        model.n_heads = parse_count(key, value);
    } else if (key == "model.n_layers") {
        model.n_layers = parse_count(key, value);
    } else if (key == "model.d_ff") {
        model.d_ff = parse_count(key, value);
    } else if (key == "model.max_seq_len") {
        model.max_seq_len = parse_count(key, value);
    } else if (key == "model.dropout") {
        model.dropout_p = parse_real(key, value);
    } else if (key == "model.norm_eps") {
        model.norm_epsilon = parse_real(key, value);
    } else if (key == "model.mask") {
        model.mask_mode = parse_mask_mode(value);
    } else if (key == "model.positions") {
        model.position_mode = parse_position_mode(value);
    } else if (key == "lora.enabled") {
        lora_enabled = parse_bool(key, value);
    } else if (key == "lora.rank") {
        lora.rank = parse_count(key, value);
    } else if (key == "lora.alpha") {
        lora.alpha = parse_real(key, value);
    } else if (key == "lora.dropout") {
        lora.dropout_p = parse_real(key, value);
    } else if (key == "lora.targets") {
        lora.targets = parse_targets(value);
    } else if (key == "train.batch_size") {
        train.batch_size = parse_count(key, value);
    } else if (key == "train.lr") {
        train.learning_rate = parse_real(key, value);
    } else if (key == "train.steps") {
        train.max_steps = parse_count(key, value);
    } else if (key == "train.epochs") {
        train.epochs = parse_count(key, value);
    } else if (key == "train.log_every") {
        train.log_every = parse_count(key, value);
    } else if (key == "train.seed") {
        train.seed = parse_count(key, value);
    } else if (key == "train.beta1") {
        train.beta1 = parse_real(key, value);
    } else if (key == "train.beta2") {
        train.beta2 = parse_real(key, value);
    } else if (key == "train.adam_eps") {
        train.adam_epsilon = parse_real(key, value);
    } else if (key == "train.weight_decay") {
        train.weight_decay = parse_real(key, value);
    } else if (key == "head.pooling") {
        pooling = parse_pooling(value);
    } else if (key == "head.hidden") {
        head_hidden = parse_count(key, value);
    } else if (key == "ablate.repeats") {
        ablate_repeats = parse_count(key, value);
    } else {
        throw ConfigError("config: unknown key \"" + key + "\"");
    }
}

RunConfig RunConfig::from_file(const std::string& path,
                               const std::vector<std::pair<std::string, std::string>>& overrides) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot read " + path);
    RunConfig cfg;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto comment = line.find('#');
        if (comment != std::string::npos) line.resize(comment);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: " + path + ":" + std::to_string(line_no) +
                              ": expected key = value, got \"" + line + "\"");
        }
        cfg.apply(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    for (const auto& [key, value] : overrides) cfg.apply(key, value);
    return cfg;
}

void RunConfig::validate(bool needs_data) const {
    model.validate();
    train.validate();
    if (lora_enabled) lora.validate();
    if (max_len < 2) throw ConfigError("config: max_len must be >= 2");
    if (max_len > model.max_seq_len) {
        throw ConfigError("config: max_len " + std::to_string(max_len) + " exceeds model.max_seq_len " +
                          std::to_string(model.max_seq_len));
    }
    if (needs_data) {
        if (train_path.empty()) throw ConfigError("config: train_path is required");
        if (!std::filesystem::exists(train_path)) {
            throw ConfigError("config: train_path \"" + train_path + "\" does not exist");
        }
        if (!eval_path.empty() && !std::filesystem::exists(eval_path)) {
            throw ConfigError("config: eval_path \"" + eval_path + "\" does not exist");
        }
    }
    if (out_dir.empty()) throw ConfigError("config: out_dir is required");
}

std::pair<std::string, std::string> split_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("config: override \"" + assignment + "\" must look like key=value");
    }
    return {trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1))};
}

}  // namespace lsc
