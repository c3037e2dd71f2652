#include "lsc/commands.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "lsc/checkpoint.hpp"
#include "lsc/data.hpp"
#include "lsc/metrics.hpp"
#include "lsc/trainer.hpp"

namespace fs = std::filesystem;

namespace lsc {

namespace {

using nlohmann::json;

CheckpointMeta meta_from_config(const RunConfig& cfg, const Vocabulary& vocab, const LabelSpace& labels,
                                std::size_t steps) {
    CheckpointMeta meta;
    meta.task = cfg.task;
    meta.model = cfg.model;
    meta.lora_enabled = cfg.lora_enabled;
    meta.lora = cfg.lora;
    meta.label_names = labels.names();
    meta.ignore_index = labels.ignore_index();
    meta.vocab_tokens = vocab.non_reserved_tokens();
    meta.pooling = cfg.pooling;
    meta.head_hidden = cfg.head_hidden;
    meta.seed = cfg.train.seed;
    meta.step = steps;
    return meta;
}

void write_summary(const std::string& path, const RunConfig& cfg, const TrainOutput& out,
                   std::size_t total_params, std::size_t trainable_params, double wall_seconds) {
    json j{
        {"task", cfg.task},
        {"steps", out.steps_run},
        {"final_train_loss", out.final_train_loss},
        {"final_eval_metric", out.final_eval_metric},
        {"total_parameters", total_params},
        {"trainable_parameters", trainable_params},
        {"wall_clock_seconds", wall_seconds},
        {"diverged", out.diverged},
    };
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("summary: cannot write " + path);
    f << j.dump(2) << "\n";
}

std::size_t trainable_count(const DecoderStack<float>& model, const Projection<float>& head) {
    std::size_t n = 0;
    if (model.lora_injected) {
        for (const auto& [name, t] : trainable_parameters(model, head)) n += t.numel();
    } else {
        n = model.parameter_count();
        for (const auto& [name, t] : head.named_parameters("head")) n += t.numel();
    }
    return n;
}

// Padded id/pad batch straight from raw inputs (prediction path: no labels).
struct RawBatch {
    IdMatrix tokens;
    BoolMatrix pad;
    std::vector<std::size_t> word_counts;  // words retained per row (token task)
};

RawBatch make_sequence_batch(std::span<const std::string> texts, const Vocabulary& vocab,
                             std::size_t max_len) {
    std::vector<std::vector<std::int32_t>> rows;
    rows.reserve(texts.size());
    std::size_t width = 0;
    for (const auto& text : texts) {
        auto ids = tokenize(text, vocab);
        if (ids.size() > max_len) ids.resize(max_len);
        width = std::max(width, ids.size());
        rows.push_back(std::move(ids));
    }
    RawBatch b;
    b.tokens = IdMatrix(texts.size(), width, Vocabulary::kPad);
    b.pad = BoolMatrix(texts.size(), width, false);
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < rows[r].size(); ++c) {
            b.tokens.at(r, c) = rows[r][c];
            b.pad.set(r, c, true);
        }
    return b;
}

RawBatch make_token_batch(std::span<const TokenExample> sentences, const Vocabulary& vocab,
                          std::size_t max_len) {
    std::vector<std::vector<std::int32_t>> rows;
    rows.reserve(sentences.size());
    std::size_t width = 0;
    RawBatch b;
    for (const auto& ex : sentences) {
        std::vector<std::int32_t> ids{Vocabulary::kBos};
        for (std::size_t i = 0; i < ex.tokens.size() && ids.size() < max_len; ++i) {
            std::string w = ex.tokens[i];
            for (char& c : w) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
            ids.push_back(vocab.lookup(w));
        }
        b.word_counts.push_back(ids.size() - 1);
        width = std::max(width, ids.size());
        rows.push_back(std::move(ids));
    }
    b.tokens = IdMatrix(sentences.size(), width, Vocabulary::kPad);
    b.pad = BoolMatrix(sentences.size(), width, false);
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < rows[r].size(); ++c) {
            b.tokens.at(r, c) = rows[r][c];
            b.pad.set(r, c, true);
        }
    return b;
}

void format_cell(std::string& line, double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    line += buf;
}

}  // namespace

void cmd_train(const RunConfig& cfg) {
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    const auto t0 = std::chrono::steady_clock::now();

    TrainOutput out;
    CheckpointMeta meta;
    std::vector<NamedTensor> tensors;
    std::size_t total_params = 0, trainable_params = 0;

    if (cfg.task == "sequence") {
        ClassificationData train_data =
            read_classification(cfg.train_path, parse_table_format(cfg.format), cfg.text_col, cfg.label_col);
        if (train_data.examples.empty()) throw DataError("train: no usable rows in " + cfg.train_path);
        if (train_data.skipped > 0) {
            std::cerr << "warning: skipped " << train_data.skipped << " rows with empty text\n";
        }
        std::vector<SequenceExample> eval_ex;
        if (!cfg.eval_path.empty()) {
            eval_ex = read_classification(cfg.eval_path, parse_table_format(cfg.format), cfg.text_col,
                                          cfg.label_col)
                          .examples;
        }
        Vocabulary vocab = build_vocabulary(train_data.examples, cfg.model.vocab_size);
        Rng rng(cfg.train.seed);
        DecoderStack<float> model = DecoderStack<float>::init(cfg.model, rng);
        if (cfg.lora_enabled) inject_lora(model, cfg.lora, rng);
        SequenceHead<float> head = SequenceHead<float>::init(train_data.labels.size(), cfg.model.d_model,
                                                             cfg.pooling, rng, cfg.head_hidden);
        out = train_sequence(model, head, train_data.examples, eval_ex, vocab, train_data.labels, cfg.train,
                             cfg.max_len);
        meta = meta_from_config(cfg, vocab, train_data.labels, out.steps_run);
        tensors = collect_named_tensors(model, head.proj);
        total_params = model.parameter_count();
        for (const auto& [name, t] : head.proj.named_parameters("head")) total_params += t.numel();
        trainable_params = trainable_count(model, head.proj);
    } else {
        ConllData train_data = read_conll(cfg.train_path);
        if (train_data.sentences.empty()) throw DataError("train: no sentences in " + cfg.train_path);
        if (train_data.repair_count > 0) {
            std::cerr << "warning: repaired " << train_data.repair_count << " BIO transitions\n";
        }
        std::vector<TokenExample> eval_ex;
        if (!cfg.eval_path.empty()) eval_ex = read_conll(cfg.eval_path).sentences;
        LabelSpace labels = collect_tag_space(train_data.sentences);
        Vocabulary vocab = build_vocabulary(train_data.sentences, cfg.model.vocab_size);
        Rng rng(cfg.train.seed);
        DecoderStack<float> model = DecoderStack<float>::init(cfg.model, rng);
        if (cfg.lora_enabled) inject_lora(model, cfg.lora, rng);
        TokenHead<float> head =
            TokenHead<float>::init(labels.size(), cfg.model.d_model, rng, cfg.head_hidden);
        out = train_token(model, head, train_data.sentences, eval_ex, vocab, labels, cfg.train, cfg.max_len);
        meta = meta_from_config(cfg, vocab, labels, out.steps_run);
        tensors = collect_named_tensors(model, head.proj);
        total_params = model.parameter_count();
        for (const auto& [name, t] : head.proj.named_parameters("head")) total_params += t.numel();
        trainable_params = trainable_count(model, head.proj);
    }

    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_metrics_csv((fs::path(cfg.out_dir) / "metrics.csv").string(), out.records);
    write_summary((fs::path(cfg.out_dir) / "summary.json").string(), cfg, out, total_params,
                  trainable_params, wall);
    if (out.diverged) {
        throw DivergenceError("training loss became NaN at step " + std::to_string(out.steps_run) +
                              "; partial metrics written to " + cfg.out_dir);
    }
    save_checkpoint((fs::path(cfg.out_dir) / "checkpoint.bin").string(), meta, tensors);
}

void cmd_eval(const EvalArgs& args) {
    RestoredState st = restore_state(load_checkpoint(args.checkpoint));
    if (st.meta.task == "sequence") {
        ClassificationData data = read_classification(args.data_path, parse_table_format(args.format),
                                                      args.text_col, args.label_col);
        if (data.examples.empty()) throw DataError("eval: no usable rows in " + args.data_path);
        for (const auto& name : data.labels.names()) {
            if (!st.labels.contains(name)) {
                throw CheckpointError("eval: compatibility error, label \"" + name +
                                      "\" not in checkpoint label space");
            }
        }
        EvalResult r = evaluate_sequence_full(st.model, st.seq_head, data.examples, st.vocab, st.labels,
                                              args.batch_size, st.meta.model.max_seq_len);
        std::printf("accuracy=%.6f loss=%.6f n=%zu\n", r.metric, r.loss, data.examples.size());
    } else {
        ConllData data = read_conll(args.data_path);
        if (data.sentences.empty()) throw DataError("eval: no sentences in " + args.data_path);
        for (const auto& s : data.sentences) {
            for (const auto& t : s.tags) {
                if (!st.labels.contains(t)) {
                    throw CheckpointError("eval: compatibility error, tag \"" + t +
                                          "\" not in checkpoint label space");
                }
            }
        }
        TokenEvalResult r = evaluate_token_full(st.model, st.tok_head, data.sentences, st.vocab, st.labels,
                                                args.batch_size, st.meta.model.max_seq_len);
        std::printf("f1=%.6f precision=%.6f recall=%.6f token_accuracy=%.6f loss=%.6f n=%zu\n", r.ner.f1,
                    r.ner.precision, r.ner.recall, r.token_accuracy, r.loss, data.sentences.size());
    }
}

void cmd_predict(const PredictArgs& args) {
    RestoredState st = restore_state(load_checkpoint(args.checkpoint));
    const std::size_t max_len = st.meta.model.max_seq_len;
    std::ofstream out(args.output_path, std::ios::binary);
    if (!out) throw DataError("predict: cannot write " + args.output_path);

    if (st.meta.task == "sequence") {
        std::vector<std::string> texts =
            read_text_column(args.input_path, parse_table_format(args.format), args.text_col);
        if (texts.empty()) throw DataError("predict: no rows in " + args.input_path);
        for (std::size_t start = 0; start < texts.size(); start += args.batch_size) {
            const std::size_t n = std::min(args.batch_size, texts.size() - start);
            RawBatch batch = make_sequence_batch({texts.data() + start, n}, st.vocab, max_len);
            Tensor<float> h = st.model.forward(batch.tokens, batch.pad);
            Tensor<float> logits = sequence_logits(h, batch.pad, st.seq_head);
            Tensor<float> probs = softmax_lastdim(logits);
            const std::size_t c = st.labels.size();
            for (std::size_t r = 0; r < n; ++r) {
                std::size_t best = 0;
                for (std::size_t j = 1; j < c; ++j) {
                    if (probs.data()[r * c + j] > probs.data()[r * c + best]) best = j;
                }
                json row{{"text", texts[start + r]}, {"label", st.labels.name(static_cast<int>(best))}};
                json pj = json::object();
                for (std::size_t j = 0; j < c; ++j) {
                    pj[st.labels.name(static_cast<int>(j))] = probs.data()[r * c + j];
                }
                row["probs"] = pj;
                out << row.dump() << "\n";
            }
        }
    } else {
        ConllData data = read_conll(args.input_path);
        if (data.sentences.empty()) throw DataError("predict: no sentences in " + args.input_path);
        std::vector<TokenExample> predicted;
        for (std::size_t start = 0; start < data.sentences.size(); start += args.batch_size) {
            const std::size_t n = std::min(args.batch_size, data.sentences.size() - start);
            std::span<const TokenExample> rows{data.sentences.data() + start, n};
            RawBatch batch = make_token_batch(rows, st.vocab, max_len);
            const std::size_t s = batch.tokens.cols;
            Tensor<float> h = st.model.forward(batch.tokens, batch.pad);
            Tensor<float> logits = token_logits(h, st.tok_head);
            const std::size_t c = st.labels.size();
            for (std::size_t r = 0; r < n; ++r) {
                std::vector<std::string> tags;
                for (std::size_t w = 0; w < batch.word_counts[r]; ++w) {
                    const float* p = logits.data() + (r * s + w + 1) * c;  // +1 skips bos
                    std::size_t best = 0;
                    for (std::size_t j = 1; j < c; ++j) {
                        if (p[j] > p[best]) best = j;
                    }
                    tags.push_back(st.labels.name(static_cast<int>(best)));
                }
                // words beyond max_len keep their input tag untouched
                TokenExample ex = rows[r];
                for (std::size_t w = 0; w < tags.size(); ++w) ex.tags[w] = tags[w];
                repair_bio(ex.tags);
                predicted.push_back(std::move(ex));
            }
        }
        write_conll(args.output_path, predicted);
    }
}

void cmd_ablate_pooling(const RunConfig& cfg) {
    if (cfg.task != "sequence") {
        throw ConfigError("ablate-pooling: requires task = sequence, got \"" + cfg.task + "\"");
    }
    cfg.validate();
    fs::create_directories(fs::path(cfg.out_dir) / "cells");
    ClassificationData train_data =
        read_classification(cfg.train_path, parse_table_format(cfg.format), cfg.text_col, cfg.label_col);
    if (train_data.examples.empty()) throw DataError("ablate-pooling: no usable rows in " + cfg.train_path);
    std::vector<SequenceExample> eval_ex;
    if (!cfg.eval_path.empty()) {
        eval_ex =
            read_classification(cfg.eval_path, parse_table_format(cfg.format), cfg.text_col, cfg.label_col)
                .examples;
    }
    const std::vector<SequenceExample>& score_set = eval_ex.empty() ? train_data.examples : eval_ex;
    Vocabulary vocab = build_vocabulary(train_data.examples, cfg.model.vocab_size);

    const Pooling strategies[3] = {Pooling::kLast, Pooling::kMax, Pooling::kAverage};
    const MaskMode modes[2] = {MaskMode::kCausal, MaskMode::kUnmasked};
    const std::size_t repeats = std::max<std::size_t>(1, cfg.ablate_repeats);
    double mean_cell[3][2] = {};
    double spread_cell[3][2] = {};

    for (int si = 0; si < 3; ++si) {
        for (int mi = 0; mi < 2; ++mi) {
            double lo = 0, hi = 0, sum = 0;
            for (std::size_t rep = 0; rep < repeats; ++rep) {
                RunConfig cell = cfg;
                cell.model.mask_mode = modes[mi];
                cell.train.seed = cfg.train.seed + rep;
                Rng rng(cell.train.seed);
                DecoderStack<float> model = DecoderStack<float>::init(cell.model, rng);
                if (cell.lora_enabled) inject_lora(model, cell.lora, rng);
                SequenceHead<float> head = SequenceHead<float>::init(
                    train_data.labels.size(), cell.model.d_model, strategies[si], rng, cell.head_hidden);
                TrainOutput out = train_sequence(model, head, train_data.examples, eval_ex, vocab,
                                                 train_data.labels, cell.train, cell.max_len);
                if (out.diverged) {
                    throw DivergenceError(std::string("ablate-pooling: cell ") +
                                          pooling_name(strategies[si]) + "/" + mask_mode_name(modes[mi]) +
                                          " diverged");
                }
                const double acc = evaluate_sequence_full(model, head, score_set, vocab, train_data.labels,
                                                          cell.train.batch_size, cell.max_len)
                                       .metric;
                std::string cell_name = std::string(pooling_name(strategies[si])) + "_" +
                                        mask_mode_name(modes[mi]) +
                                        (repeats > 1 ? "_r" + std::to_string(rep) : "");
                const fs::path cell_dir = fs::path(cfg.out_dir) / "cells" / cell_name;
                fs::create_directories(cell_dir);
                write_metrics_csv((cell_dir / "metrics.csv").string(), out.records);
                sum += acc;
                lo = rep == 0 ? acc : std::min(lo, acc);
                hi = rep == 0 ? acc : std::max(hi, acc);
            }
            mean_cell[si][mi] = sum / static_cast<double>(repeats);
            spread_cell[si][mi] = hi - lo;
        }
    }

    auto write_table = [&](const std::string& name, double cells[3][2]) {
        std::ofstream out(fs::path(cfg.out_dir) / name, std::ios::binary);
        if (!out) throw DataError("ablate-pooling: cannot write " + name);
        out << "strategy,causal,unmasked\n";
        for (int si = 0; si < 3; ++si) {
            std::string line = pooling_name(strategies[si]);
            line += ',';
            format_cell(line, cells[si][0]);
            line += ',';
            format_cell(line, cells[si][1]);
            out << line << "\n";
        }
    };
    write_table("pooling_ablation.csv", mean_cell);
    if (repeats > 1) write_table("pooling_ablation_spread.csv", spread_cell);
}

void cmd_ablate_mask(const RunConfig& cfg) {
    if (cfg.task != "token") {
        throw ConfigError("ablate-mask: requires task = token, got \"" + cfg.task + "\"");
    }
    cfg.validate();
    fs::create_directories(fs::path(cfg.out_dir) / "cells");
    ConllData train_data = read_conll(cfg.train_path);
    if (train_data.sentences.empty()) throw DataError("ablate-mask: no sentences in " + cfg.train_path);
    std::vector<TokenExample> eval_ex;
    if (!cfg.eval_path.empty()) eval_ex = read_conll(cfg.eval_path).sentences;
    const std::vector<TokenExample>& score_set = eval_ex.empty() ? train_data.sentences : eval_ex;
    LabelSpace labels = collect_tag_space(train_data.sentences);
    if (!is_bio_label_space(labels)) {
        throw ConfigError("ablate-mask: tag set is not BIO (expected O / B-X / I-X names)");
    }
    Vocabulary vocab = build_vocabulary(train_data.sentences, cfg.model.vocab_size);

    const MaskMode modes[2] = {MaskMode::kCausal, MaskMode::kUnmasked};
    const std::size_t repeats = std::max<std::size_t>(1, cfg.ablate_repeats);
    // f1, precision, recall, token accuracy per variant
    double agg[2][4] = {};

    for (int mi = 0; mi < 2; ++mi) {
        for (std::size_t rep = 0; rep < repeats; ++rep) {
            RunConfig cell = cfg;
            cell.model.mask_mode = modes[mi];
            cell.train.seed = cfg.train.seed + rep;
            Rng rng(cell.train.seed);
            DecoderStack<float> model = DecoderStack<float>::init(cell.model, rng);
            if (cell.lora_enabled) inject_lora(model, cell.lora, rng);
            TokenHead<float> head =
                TokenHead<float>::init(labels.size(), cell.model.d_model, rng, cell.head_hidden);
            TrainOutput out =
                train_token(model, head, train_data.sentences, eval_ex, vocab, labels, cell.train, cell.max_len);
            if (out.diverged) {
                throw DivergenceError(std::string("ablate-mask: variant ") + mask_mode_name(modes[mi]) +
                                      " diverged");
            }
            TokenEvalResult res = evaluate_token_full(model, head, score_set, vocab, labels,
                                                      cell.train.batch_size, cell.max_len);
            std::string cell_name = std::string(mask_mode_name(modes[mi])) +
                                    (repeats > 1 ? "_r" + std::to_string(rep) : "");
            const fs::path cell_dir = fs::path(cfg.out_dir) / "cells" / cell_name;
            fs::create_directories(cell_dir);
            write_metrics_csv((cell_dir / "metrics.csv").string(), out.records);
            agg[mi][0] += res.ner.f1;
            agg[mi][1] += res.ner.precision;
            agg[mi][2] += res.ner.recall;
            agg[mi][3] += res.token_accuracy;
        }
        for (double& v : agg[mi]) v /= static_cast<double>(repeats);
    }

    std::ofstream out(fs::path(cfg.out_dir) / "mask_ablation.csv", std::ios::binary);
    if (!out) throw DataError("ablate-mask: cannot write mask_ablation.csv");
    out << "variant,f1,precision,recall,token_accuracy\n";
    const char* names[2] = {"causal", "unmasked"};
    for (int mi = 0; mi < 2; ++mi) {
        std::string line = names[mi];
        for (int k = 0; k < 4; ++k) {
            line += ',';
            format_cell(line, agg[mi][k]);
        }
        out << line << "\n";
    }
    std::string gap = "unmasked_minus_causal";
    for (int k = 0; k < 4; ++k) {
        gap += ',';
        format_cell(gap, agg[1][k] - agg[0][k]);
    }
    out << gap << "\n";
}

void cmd_inspect_checkpoint(const std::string& path) {
    Checkpoint ckpt = load_checkpoint(path);
    const CheckpointMeta& m = ckpt.meta;
    std::printf("version %u\n", kCheckpointVersion);
    std::printf("task %s\n", m.task.c_str());
    std::printf("model d_model=%zu n_heads=%zu n_layers=%zu d_ff=%zu vocab=%zu max_seq_len=%zu mask=%s positions=%s\n",
                m.model.d_model, m.model.n_heads, m.model.n_layers, m.model.d_ff, m.model.vocab_size,
                m.model.max_seq_len, mask_mode_name(m.model.mask_mode),
                position_mode_name(m.model.position_mode));
    std::printf("lora %s rank=%zu alpha=%g dropout=%g\n", m.lora_enabled ? "enabled" : "disabled",
                m.lora.rank, m.lora.alpha, m.lora.dropout_p);
    std::printf("pooling %s  seed %llu  step %llu\n", pooling_name(m.pooling),
                static_cast<unsigned long long>(m.seed), static_cast<unsigned long long>(m.step));
    std::printf("labels (%zu):", m.label_names.size());
    for (const auto& n : m.label_names) std::printf(" %s", n.c_str());
    std::printf("\nvocab tokens %zu\n", m.vocab_tokens.size());
    std::size_t total = 0;
    for (const auto& t : ckpt.tensors) total += t.data.size();
    std::printf("tensors %zu entries, %zu values\n", ckpt.tensors.size(), total);
    for (const auto& t : ckpt.tensors) {
        std::printf("  %s %s\n", t.name.c_str(), shape_str(t.shape).c_str());
    }
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const DivergenceError*>(&e)) return 3;
    if (dynamic_cast<const CheckpointError*>(&e)) return 4;
    if (dynamic_cast<const DataError*>(&e)) return 2;
    if (dynamic_cast<const ContractError*>(&e)) return 2;
    if (dynamic_cast<const ConfigError*>(&e)) return 1;
    return 1;
}

}  // namespace lsc
