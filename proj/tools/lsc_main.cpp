#include <exception>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "lsc/commands.hpp"

namespace {

std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& sets) {
    std::vector<std::pair<std::string, std::string>> out;
    out.reserve(sets.size());
    for (const auto& s : sets) out.push_back(lsc::split_override(s));
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"label-supervised classification with a mask-switchable decoder transformer"};
    app.require_subcommand(1);

    std::string config_path, checkpoint_path, data_path, out_path;
    std::vector<std::string> sets;
    lsc::EvalArgs eval_args;
    lsc::PredictArgs predict_args;

    CLI::App* train = app.add_subcommand("train", "train a model from a config file");
    train->add_option("config", config_path, "key = value config file")->required();
    train->add_option("--set", sets, "override config entries (key=value, repeatable)");

    CLI::App* evalc = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    evalc->add_option("checkpoint", eval_args.checkpoint)->required();
    evalc->add_option("data", eval_args.data_path)->required();
    evalc->add_option("--format", eval_args.format, "csv|tsv (sequence task)");
    evalc->add_option("--text-col", eval_args.text_col);
    evalc->add_option("--label-col", eval_args.label_col);
    evalc->add_option("--batch", eval_args.batch_size);

    CLI::App* predict = app.add_subcommand("predict", "write predictions for an input file");
    predict->add_option("checkpoint", predict_args.checkpoint)->required();
    predict->add_option("input", predict_args.input_path)->required();
    predict->add_option("--out", predict_args.output_path, "output file")->required();
    predict->add_option("--format", predict_args.format, "csv|tsv (sequence task)");
    predict->add_option("--text-col", predict_args.text_col);
    predict->add_option("--batch", predict_args.batch_size);

    CLI::App* ablate_pooling = app.add_subcommand("ablate-pooling", "pooling x mask-mode comparison table");
    ablate_pooling->add_option("config", config_path)->required();
    ablate_pooling->add_option("--set", sets, "override config entries (key=value, repeatable)");

    CLI::App* ablate_mask = app.add_subcommand("ablate-mask", "causal vs unmasked comparison on a token task");
    ablate_mask->add_option("config", config_path)->required();
    ablate_mask->add_option("--set", sets, "override config entries (key=value, repeatable)");

    CLI::App* inspect = app.add_subcommand("inspect-checkpoint", "print checkpoint contents");
    inspect->add_option("checkpoint", checkpoint_path)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) {
            lsc::cmd_train(lsc::RunConfig::from_file(config_path, parse_overrides(sets)));
        } else if (evalc->parsed()) {
            lsc::cmd_eval(eval_args);
        } else if (predict->parsed()) {
            lsc::cmd_predict(predict_args);
        } else if (ablate_pooling->parsed()) {
            lsc::cmd_ablate_pooling(lsc::RunConfig::from_file(config_path, parse_overrides(sets)));
        } else if (ablate_mask->parsed()) {
            lsc::cmd_ablate_mask(lsc::RunConfig::from_file(config_path, parse_overrides(sets)));
        } else if (inspect->parsed()) {
            lsc::cmd_inspect_checkpoint(checkpoint_path);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return lsc::exit_code_for(e);
    }
    return 0;
}
