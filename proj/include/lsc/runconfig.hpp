#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lsc/heads.hpp"
#include "lsc/lora.hpp"
#include "lsc/model.hpp"
#include "lsc/trainer.hpp"

namespace lsc {

// Union of everything a command needs: model/adapter/training settings plus
// dataset paths, task kind, and output directory. Loaded from a key = value
// file; command-line --set overrides win.
struct RunConfig {
    std::string task = "sequence";  // "sequence" | "token"
    std::string train_path;
    std::string eval_path;
    std::string format = "csv";  // sequence task file format: csv | tsv
    std::string text_col = "text";
    std::string label_col = "label";
    std::string out_dir = "out";
    std::size_t max_len = 32;

    ModelConfig model;
    bool lora_enabled = true;
    LoraConfig lora;
    TrainConfig train;
    Pooling pooling = Pooling::kLast;
    std::size_t head_hidden = 0;
    std::size_t ablate_repeats = 1;

    // Applies one "key = value" assignment; throws ConfigError naming the key.
    void apply(const std::string& key, const std::string& value);

    // Parses the file then applies overrides in order.
    static RunConfig from_file(const std::string& path,
                               const std::vector<std::pair<std::string, std::string>>& overrides = {});

    // Field-level validation for command entry points.
    void validate(bool needs_data = true) const;
};

std::pair<std::string, std::string> split_override(const std::string& assignment);  // "k=v"

}  // namespace lsc
