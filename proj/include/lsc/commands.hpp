#pragma once

#include <string>

#include "lsc/runconfig.hpp"

namespace lsc {

// Command implementations behind the CLI. Each throws a typed error on
// failure; exit_code_for maps error types to process exit codes:
//   0 success, 1 config error, 2 data error, 3 numerical divergence,
//   4 checkpoint error.

// Trains per the config and writes checkpoint.bin, metrics.csv, and
// summary.json under out_dir. Throws DivergenceError after writing partial
// artifacts if the loss became NaN.
void cmd_train(const RunConfig& cfg);

struct EvalArgs {
    std::string checkpoint;
    std::string data_path;
    std::string format = "csv";
    std::string text_col = "text";
    std::string label_col = "label";
    std::size_t batch_size = 8;
};

// Evaluates a checkpoint on a dataset; prints one metrics line to stdout.
void cmd_eval(const EvalArgs& args);

struct PredictArgs {
    std::string checkpoint;
    std::string input_path;
    std::string output_path;
    std::string format = "csv";
    std::string text_col = "text";
    std::size_t batch_size = 8;
};

// Sequence task: JSON lines {text, label, probs}; token task: CoNLL with
// predicted tags.
void cmd_predict(const PredictArgs& args);

// Trains {last,max,average} x {causal,unmasked} under one seed/budget and
// writes pooling_ablation.csv (3 strategy rows x 2 mask-mode columns).
void cmd_ablate_pooling(const RunConfig& cfg);

// Trains causal and unmasked variants identically on a token task and writes
// mask_ablation.csv with per-variant F1/precision/recall and the gap row.
void cmd_ablate_mask(const RunConfig& cfg);

void cmd_inspect_checkpoint(const std::string& path);

int exit_code_for(const std::exception& e);

}  // namespace lsc
